import pytest

from mgsa.treebank import parse_bracketed

# short form: bare tokens directly under NP and PP
BUSH_SHORT = "(S (NP Bush) (VP (VBD held) (NP a talk) (PP with Sharon)))"
# every token under a preterminal, needed for label derivation
BUSH_FULL = "(S (NP (NNP Bush)) (VP (VBD held) (NP (DT a) (NN talk)) (PP (IN with) (NP (NNP Sharon)))))"


@pytest.fixture
def bush_short():
    return parse_bracketed(BUSH_SHORT)


@pytest.fixture
def bush_full():
    return parse_bracketed(BUSH_FULL)
