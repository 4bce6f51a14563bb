import pytest

from mgsa import config as cfg
from mgsa.attention import default_head_assignment
from mgsa.partition import ConfigError, GranularitySpec
from mgsa.phrase_memory import InteractionKind


def test_parse_text_comments_and_blanks():
    raw = cfg.parse_text("# header\n\nd_model = 32   # inline\nlr=0.5\n")
    assert raw == {"d_model": "32", "lr": "0.5"}


@pytest.mark.parametrize("text", ["d_model 32", "= 3", "lr = 1\nlr = 2"])
def test_malformed_lines(text):
    with pytest.raises(ConfigError):
        cfg.parse_text(text)


def test_line_numbers_in_errors():
    with pytest.raises(ConfigError, match=r"f\.conf:2"):
        cfg.parse_text("lr = 1\nbogus", "f.conf")


def test_typed_values():
    settings, overrides = cfg.typed({"d_model": "32", "mg_layers": "1, 3", "tasks": "POS,SPC", "lr": "0.1",
                                     "corpus": "", "ngram.interaction": "lstm"})
    assert settings == {"d_model": 32, "mg_layers": [1, 3], "tasks": ["POS", "SPC"], "lr": 0.1, "corpus": None}
    assert overrides == {"ngram": {"interaction": "lstm"}}


@pytest.mark.parametrize("raw", [{"depth": "3"}, {"d_model": "x"}, {"mystery.d_model": "8"}, {"ngram.lr": "1"}])
def test_bad_keys_and_values(raw):
    with pytest.raises(ConfigError):
        cfg.typed(raw)


def test_model_config_heads():
    m = cfg.model_config({"n_heads": 8, "d_model": 32, "heads": "syntactic"})
    assert m.head_assignment == default_head_assignment(8, "syntactic")
    m = cfg.model_config({"heads": "word,ngram:2,syntactic:1,word"})
    assert m.head_assignment[1] == GranularitySpec.ngram(2)
    assert cfg.model_config({"n_heads": 8, "d_model": 32}).head_assignment == default_head_assignment(8, "ngram")
    assert cfg.model_config({"mg_layers": []}).mg_layers == frozenset()
    with pytest.raises(ConfigError):
        cfg.model_config({"n_heads": 3})


def test_train_config_and_matrix_spec(tmp_path):
    path = tmp_path / "m.conf"
    path.write_text("variants = base, syntactic_interaction\nseeds = 1,2\nepochs = 2\nd_model = 16\nn_heads = 4\n"
                    "corpus_size = 100\nsyntactic_interaction.interaction = lstm\n")
    spec = cfg.load_matrix_spec(path)
    assert spec.variants == ["base", "syntactic_interaction"] and spec.seeds == [1, 2]
    assert spec.train.epochs == 2 and spec.train.model.d_model == 16 and spec.corpus_size == 100
    assert spec.overrides["syntactic_interaction"]["interaction"] == "lstm"
    from mgsa.probe import variant_config
    assert variant_config(spec, "syntactic_interaction", 1).model.interaction is InteractionKind.RECURRENT_CHAIN
    with pytest.raises(ConfigError):
        cfg.load_train_config(path)


def test_seed_becomes_single_matrix_seed():
    assert cfg.matrix_spec({"seed": 7}).seeds == [7]


def test_schema_lists_every_key():
    text = cfg.schema_text()
    assert all(key in text for key in cfg.SCHEMA)
