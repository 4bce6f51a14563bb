"""Bracketed constituency trees with their probing labels, plus a synthetic PCFG corpus.

Trees use the Penn Treebank bracket notation, one tree per line::

    (S (NP (NNP Bush)) (VP (VBD held) (NP (DT a) (NN talk))))

A terminal is a leaf node whose label is the token itself.  Bare terminals
directly under a phrase (``(S (NP a) b)``) are accepted by the parser; only
label derivation insists on preterminals.
"""

from __future__ import annotations

import hashlib
import json
import random
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

SENTENCE_TASKS = ("Voice", "Tense", "TSS")
TOKEN_TASKS = ("SPC", "POS")
TASKS = SENTENCE_TASKS + TOKEN_TASKS

VERB_TAGS = frozenset({"VB", "VBD", "VBZ", "VBP", "VBN", "VBG", "MD"})
PAST_TAGS = frozenset({"VBD", "VBN"})
PASSIVE_AUX = frozenset(
    {"be", "is", "are", "am", "was", "were", "been", "being", "'s", "'re", "get", "gets", "got", "gotten"}
)


class TreeParseError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at byte {offset}")
        self.offset = offset


class LabelingError(ValueError):
    pass


class GenerationError(RuntimeError):
    pass


@dataclass
class ParseTree:
    label: str
    children: list["ParseTree"] = field(default_factory=list)
    start: int = 0
    end: int = 0

    @property
    def span(self) -> tuple[int, int]:
        return (self.start, self.end)

    @property
    def is_terminal(self) -> bool:
        return not self.children

    @property
    def is_preterminal(self) -> bool:
        return len(self.children) == 1 and self.children[0].is_terminal

    def leaves(self) -> list["ParseTree"]:
        out: list[ParseTree] = []
        stack = [self]
        while stack:
            node = stack.pop()
            if node.is_terminal:
                out.append(node)
            else:
                stack.extend(reversed(node.children))
        return out

    def tokens(self) -> list[str]:
        return [leaf.label for leaf in self.leaves()]

    def __len__(self) -> int:
        return self.end - self.start

    def __str__(self) -> str:
        return serialize(self)


def assign_spans(tree: ParseTree, start: int = 0) -> ParseTree:
    """Recompute half-open token spans left to right."""

    def visit(node: ParseTree, pos: int) -> int:
        node.start = pos
        if node.is_terminal:
            node.end = pos + 1
            return node.end
        for child in node.children:
            pos = visit(child, pos)
        node.end = pos
        return pos

    visit(tree, start)
    return tree


def check_tree(tree: ParseTree) -> None:
    """Raise AssertionError if span invariants are violated."""
    assert tree.start == 0 and tree.end == len(tree.leaves()), "root must cover the sentence"

    def visit(node: ParseTree) -> None:
        if node.is_terminal:
            assert node.end - node.start == 1, f"terminal {node.label!r} spans {node.span}"
            return
        assert node.end - node.start >= 1
        pos = node.start
        for child in node.children:
            assert child.start == pos, f"gap before {child.label} in {node.label}"
            pos = child.end
            visit(child)
        assert pos == node.end, f"children of {node.label} do not reach {node.end}"

    visit(tree)


_TOKEN = re.compile(r"\(|\)|[^\s()]+")


def _byte_offset(text: str, char_offset: int) -> int:
    return len(text[:char_offset].encode("utf-8"))


def parse_bracketed(text: str) -> ParseTree:
    tokens = [(m.group(), m.start()) for m in _TOKEN.finditer(text)]
    if not tokens:
        raise TreeParseError("empty input", 0)
    stack: list[ParseTree] = []
    root: ParseTree | None = None
    i = 0
    while i < len(tokens):
        tok, pos = tokens[i]
        if root is not None:
            raise TreeParseError("trailing input after tree", _byte_offset(text, pos))
        if tok == "(":
            if i + 1 >= len(tokens) or tokens[i + 1][0] in "()":
                at = tokens[i + 1][1] if i + 1 < len(tokens) else len(text)
                raise TreeParseError("missing constituent label", _byte_offset(text, at))
            node = ParseTree(tokens[i + 1][0])
            if stack:
                stack[-1].children.append(node)
            stack.append(node)
            i += 2
            continue
        if tok == ")":
            if not stack:
                raise TreeParseError("unbalanced ')'", _byte_offset(text, pos))
            node = stack.pop()
            if not node.children:
                raise TreeParseError(f"empty constituent ({node.label})", _byte_offset(text, pos))
            if not stack:
                root = node
            i += 1
            continue
        if not stack:
            raise TreeParseError(f"token {tok!r} outside brackets", _byte_offset(text, pos))
        stack[-1].children.append(ParseTree(tok))
        i += 1
    if stack:
        raise TreeParseError("unbalanced '(': missing ')'", _byte_offset(text, len(text)))
    return assign_spans(root)


def serialize(tree: ParseTree) -> str:
    if tree.is_terminal:
        return tree.label
    return "(" + tree.label + " " + " ".join(serialize(c) for c in tree.children) + ")"


def normalize(text: str) -> str:
    """Canonical whitespace for a bracketed string."""
    out: list[str] = []
    prev = None
    for m in _TOKEN.finditer(text):
        tok = m.group()
        if out and prev != "(" and tok != ")":
            out.append(" ")
        out.append(tok)
        prev = tok
    return "".join(out)


def read_trees(path) -> list[ParseTree]:
    with open(path, encoding="utf-8") as fh:
        return [parse_bracketed(line) for line in fh if line.strip()]


# ---------------------------------------------------------------- labels


@dataclass
class LabeledExample:
    tokens: list[str]
    tree: ParseTree
    sentence_labels: dict[str, str]
    token_labels: dict[str, list[str]]

    def __post_init__(self):
        for task, labels in self.token_labels.items():
            if len(labels) != len(self.tokens):
                raise ValueError(f"{task}: {len(labels)} labels for {len(self.tokens)} tokens")

    def label(self, task: str):
        if task in self.sentence_labels:
            return self.sentence_labels[task]
        return self.token_labels[task]

    def to_record(self) -> dict:
        labels: dict = dict(self.sentence_labels)
        labels.update(self.token_labels)
        return {"tokens": self.tokens, "tree": serialize(self.tree), "labels": labels}

    @classmethod
    def from_record(cls, record: dict) -> "LabeledExample":
        tree = parse_bracketed(record["tree"])
        labels = record["labels"]
        return cls(
            tokens=list(record["tokens"]),
            tree=tree,
            sentence_labels={k: labels[k] for k in SENTENCE_TASKS if k in labels},
            token_labels={k: list(labels[k]) for k in TOKEN_TASKS if k in labels},
        )


def _preterminal_path(tree: ParseTree) -> list[list[ParseTree]]:
    """Ancestor chain (root first) of every terminal, terminal excluded."""
    paths: list[list[ParseTree]] = []

    def visit(node: ParseTree, chain: list[ParseTree]) -> None:
        if node.is_terminal:
            paths.append(chain)
            return
        for child in node.children:
            visit(child, chain + [node])

    visit(tree, [])
    return paths


def _main_verb_chain(tree: ParseTree) -> list[ParseTree]:
    """Verb preterminals along the main-clause VP spine, outermost first."""
    vp = next((c for c in tree.children if c.label == "VP"), None)
    verbs: list[ParseTree] = []
    while vp is not None:
        nxt = None
        for child in vp.children:
            if child.is_preterminal and child.label in VERB_TAGS:
                verbs.append(child)
            elif child.label == "VP" and nxt is None:
                nxt = child
        vp = nxt
    return verbs


def heuristic_voice_tense(tree: ParseTree) -> tuple[str, str]:
    """Approximate Voice/Tense for trees without generator metadata.

    Passive: a form of *be*/*get* on the main VP spine directly followed by a
    VBN.  Past: the first spine verb is tagged VBD or VBN.
    """
    verbs = _main_verb_chain(tree)
    voice = "active"
    for aux, nxt in zip(verbs, verbs[1:]):
        if aux.children[0].label.lower() in PASSIVE_AUX and nxt.label == "VBN":
            voice = "passive"
            break
    tense = "past" if verbs and verbs[0].label in PAST_TAGS else "non-past"
    return voice, tense


def derive_task_labels(tree: ParseTree, metadata: dict | None = None) -> LabeledExample:
    """Compute the five probing labels for ``tree``.

    Voice and Tense come from ``metadata`` when given (synthetic data),
    otherwise from :func:`heuristic_voice_tense`.
    """
    paths = _preterminal_path(tree)
    tokens = tree.tokens()
    pos: list[str] = []
    spc: list[str] = []
    for token, chain in zip(tokens, paths):
        if not chain or not chain[-1].is_preterminal:
            raise LabelingError(f"token {token!r} has no POS preterminal")
        pos.append(chain[-1].label)
        spc.append(chain[-2].label if len(chain) >= 2 else chain[-1].label)
    if tree.is_preterminal:
        tss = tree.label
    else:
        tss = "-".join(c.label for c in tree.children)
    metadata = metadata or {}
    if "voice" in metadata and "tense" in metadata:
        voice, tense = metadata["voice"], metadata["tense"]
    else:
        voice, tense = heuristic_voice_tense(tree)
    return LabeledExample(
        tokens=tokens,
        tree=tree,
        sentence_labels={"Voice": voice, "Tense": tense, "TSS": tss},
        token_labels={"SPC": spc, "POS": pos},
    )


# ---------------------------------------------------------------- PCFG


@dataclass(frozen=True)
class Rule:
    lhs: str
    rhs: tuple[str, ...]
    weight: float = 1.0
    features: tuple[tuple[str, str], ...] = ()


def display_label(symbol: str) -> str:
    """Tree label of a grammar symbol: the text before the first ``_``."""
    head, sep, _ = symbol.partition("_")
    return head if sep and head else symbol


_ALT = re.compile(r"^(?P<rhs>.*?)\s*(?:\[(?P<w>[^\]]+)\])?\s*(?:\{(?P<f>[^}]*)\})?\s*$")


class PCFG:
    """Weighted context-free grammar with per-rule feature annotations.

    Text format, one left-hand side per line, ``|`` between alternatives::

        S -> NP_subj VP_main ._end [6]
        VP_main -> VBD_t NP_obj [3] {voice=active,tense=past}
        NN_n -> man | woman | dog

    Symbols with no rules are terminals.  Features record generation
    metadata; the first rule in a derivation to set a key wins.
    """

    def __init__(self, rules: Iterable[Rule], start: str = "S"):
        self.start = start
        self.rules: dict[str, list[Rule]] = {}
        for rule in rules:
            if rule.weight <= 0:
                raise ValueError(f"non-positive weight in {rule}")
            self.rules.setdefault(rule.lhs, []).append(rule)
        if start not in self.rules:
            raise ValueError(f"start symbol {start!r} has no rules")

    @classmethod
    def from_text(cls, text: str, start: str = "S") -> "PCFG":
        rules = []
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "->" not in line:
                raise ValueError(f"line {lineno}: expected 'LHS -> RHS'")
            lhs, body = (s.strip() for s in line.split("->", 1))
            for alt in body.split("|"):
                m = _ALT.match(alt.strip())
                rhs = tuple(m.group("rhs").split())
                if not rhs:
                    raise ValueError(f"line {lineno}: empty alternative")
                weight = float(m.group("w")) if m.group("w") else 1.0
                feats = ()
                if m.group("f"):
                    feats = tuple(
                        tuple(s.strip() for s in kv.split("=", 1)) for kv in m.group("f").split(",") if kv.strip()
                    )
                rules.append(Rule(lhs, rhs, weight, feats))
        return cls(rules, start=start)

    def is_nonterminal(self, symbol: str) -> bool:
        return symbol in self.rules

    def sample(self, rng: random.Random, max_depth: int = 24) -> tuple[ParseTree, dict]:
        """One derivation; raises RecursionError past ``max_depth``."""
        features: dict[str, str] = {}

        def expand(symbol: str, depth: int) -> ParseTree:
            if depth > max_depth:
                raise RecursionError(symbol)
            options = self.rules[symbol]
            rule = rng.choices(options, weights=[r.weight for r in options])[0]
            for key, value in rule.features:
                features.setdefault(key, value)
            node = ParseTree(display_label(symbol))
            for sym in rule.rhs:
                if self.is_nonterminal(sym):
                    node.children.append(expand(sym, depth + 1))
                else:
                    node.children.append(ParseTree(sym))
            return node

        tree = expand(self.start, 0)
        return assign_spans(tree), features


DEFAULT_GRAMMAR = r"""
S -> NP_subj VP_main ._end [6] | NP_subj VP_main [2] | PP_adv ,_c NP_subj VP_main ._end [1.5] | ADVP_s NP_subj VP_main ._end [1] | SBAR_s ,_c NP_subj VP_main ._end [1] | NP_subj ADVP_s VP_main ._end [1]

VP_main -> VBD_t NP_obj [3] {voice=active,tense=past} | VBD_t NP_obj PP_mod [2] {voice=active,tense=past} | RB_v VBD_t NP_obj [1] {voice=active,tense=past} | VBZ_t NP_obj [1.5] {voice=active,tense=non-past} | VBP_t NP_obj PP_mod [1] {voice=active,tense=non-past} | MD_m VP_inf [1.5] {voice=active,tense=non-past} | VBD_be VP_pass [2.5] {voice=passive,tense=past} | VBZ_be VP_pass [1.5] {voice=passive,tense=non-past} | VBP_be VP_pass [1] {voice=passive,tense=non-past} | MD_m VP_bepass [0.7] {voice=passive,tense=non-past}

VP_inf -> VB_t NP_obj [2] | VB_t NP_obj PP_mod [1]
VP_pass -> VBN_t [1] | VBN_t PP_by [2] | VBN_t PP_mod [1] | RB_v VBN_t PP_by [0.5]
VP_bepass -> VB_be VP_pass
VP_sub -> VBD_t NP_obj | VBZ_t NP_obj | VBD_be VBN_t

PP_by -> IN_by NP_obj
PP_mod -> IN_p NP_obj
PP_adv -> IN_p NP_obj
ADVP_s -> RB_a
SBAR_s -> IN_sub S_sub
S_sub -> NP_subj VP_sub

NP_subj -> DT_d NN_n [3] | DT_d JJ_j NN_n [2] | NNS_n [1] | JJ_j NNS_n [1] | DT_d NNS_n [1] | NNP_n [1.5] | PRP_p [2] | NP_base PP_mod [2]
NP_obj -> DT_d NN_n [3] | DT_d JJ_j NN_n [2] | NNS_n [1] | JJ_j NNS_n [1] | DT_d NNS_n [1] | NNP_n [1.5] | PRP_o [1.4] | NP_base PP_mod [2]
NP_base -> DT_d NN_n [3] | DT_d JJ_j NN_n [2] | NNS_n [1] | JJ_j NNS_n [1] | DT_d NNS_n [1] | NNP_n [1.5]

DT_d -> the [4] | a [3] | this | every | some
NN_n -> man | woman | dog | book | report | park | telescope | saw | talk | table | city | letter | plan | house | record | film
NNS_n -> men | dogs | books | reports | plans | talks | letters | cities | records | films
NNP_n -> Bush | Sharon | Mary | John | Paris | London
PRP_p -> he | she | they | it | we
PRP_o -> him | her | them | it | us
JJ_j -> old | new | big | small | quiet | long | red | happy
IN_p -> with | in | on | near | about | from | by [0.5] | after | before
IN_by -> by
IN_sub -> because | while | after | before | although
RB_a -> quickly | often | never | rarely | really | yesterday
RB_v -> quickly | often | never | rarely | really
VBD_t -> saw | held | wrote | read | found | liked | visited | planned | booked | recorded
VBZ_t -> sees | holds | writes | reads | finds | likes | visits | plans | books | records
VBP_t -> see | hold | write | read | find | like | visit | plan | book | record
VB_t -> see | hold | write | read | find | like | visit | plan | book | record
VBN_t -> seen | held | written | read | found | liked | visited | planned | booked | recorded
MD_m -> will | can | should | might
VBD_be -> was | were
VBZ_be -> is
VBP_be -> are
VB_be -> be
._end -> .
,_c -> ,
"""


def default_grammar() -> PCFG:
    return PCFG.from_text(DEFAULT_GRAMMAR)


def generate_example(
    grammar: PCFG,
    seed: int,
    index: int,
    min_len: int = 5,
    max_len: int = 20,
    max_depth: int = 24,
    max_attempts: int = 2000,
) -> LabeledExample:
    """Example ``index`` of the corpus for ``seed``; independent of other indices."""
    rng = random.Random(f"{seed}:{index}")
    for _ in range(max_attempts):
        try:
            tree, features = grammar.sample(rng, max_depth=max_depth)
        except RecursionError:
            continue
        if min_len <= len(tree) <= max_len:
            return derive_task_labels(tree, features)
    raise GenerationError(
        f"no derivation of {min_len}-{max_len} tokens within depth {max_depth} after {max_attempts} attempts"
    )


def generate_corpus(
    grammar: PCFG | None,
    count: int,
    seed: int,
    min_len: int = 5,
    max_len: int = 20,
    max_depth: int = 24,
) -> list[LabeledExample]:
    grammar = grammar or default_grammar()
    return [generate_example(grammar, seed, i, min_len, max_len, max_depth) for i in range(count)]


def split_of(index: int) -> str:
    """Deterministic train/valid/test assignment at a 10/1/1 ratio."""
    bucket = int.from_bytes(hashlib.blake2b(str(index).encode(), digest_size=8).digest(), "big") % 12
    return "train" if bucket < 10 else ("valid" if bucket == 10 else "test")


def split_corpus(examples: list[LabeledExample]) -> dict[str, list[LabeledExample]]:
    out: dict[str, list[LabeledExample]] = {"train": [], "valid": [], "test": []}
    for i, ex in enumerate(examples):
        out[split_of(i)].append(ex)
    return out


def write_corpus(path, examples: Iterable[LabeledExample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps(ex.to_record(), ensure_ascii=False) + "\n")


def iter_corpus(path) -> Iterator[LabeledExample]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                yield LabeledExample.from_record(json.loads(line))


def read_corpus(path) -> list[LabeledExample]:
    return list(iter_corpus(Path(path)))
