"""Flat ``key = value`` configuration files.

One setting per line; ``#`` starts a comment; blank lines are ignored.
Lists are comma-separated.  Keys prefixed with a variant name and a dot
(``ngram.interaction = lstm``) override that variant's model settings in a
matrix file.  See ``SCHEMA`` for every key, its type and its default.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from .attention import MgSaConfig, default_head_assignment
from .partition import ConfigError, GranularitySpec
from .probe import VARIANTS, MatrixSpec, TrainConfig


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _list(item: Callable) -> Callable[[str], list]:
    return lambda text: [item(x.strip()) for x in text.split(",") if x.strip()]


def _optional_str(text: str) -> str | None:
    return text or None


@dataclass(frozen=True)
class Key:
    section: str  # model | train | matrix
    parse: Callable[[str], object]
    help: str


SCHEMA: dict[str, Key] = {
    # encoder
    "d_model": Key("model", int, "hidden size"),
    "n_heads": Key("model", int, "attention heads per layer"),
    "heads": Key("model", str, "head family (word, ngram, syntactic) or explicit list such as word,word,ngram:2,syntactic:1"),
    "composition": Key("model", str, "phrase composition: maxpool, recurrent or attentive"),
    "interaction": Key("model", str, "phrase interaction: none, lstm or onlstm"),
    "mg_layers": Key("model", _list(int), "1-based layers that use multi-granularity attention (empty for none)"),
    "n_layers": Key("model", int, "encoder layers"),
    "ffn_dim": Key("model", int, "feed-forward inner size"),
    "tag_loss_weight": Key("model", float, "weight of the phrase-tag loss"),
    "norm": Key("model", str, "residual wiring: pre or post"),
    "positions": Key("model", str, "sinusoidal or learned"),
    "max_len": Key("model", int, "longest sentence for learned positions"),
    # training
    "tasks": Key("train", _list(str), "probing tasks among Voice, Tense, TSS, SPC, POS"),
    "optimizer": Key("train", str, "sgd or adam"),
    "lr": Key("train", float, "peak step size"),
    "decay": Key("train", str, "linear or none"),
    "warmup_steps": Key("train", int, "linear warmup steps"),
    "clip_norm": Key("train", float, "global gradient-norm clip"),
    "beta1": Key("train", float, "adam first-moment decay"),
    "beta2": Key("train", float, "adam second-moment decay"),
    "batch_tokens": Key("train", int, "token budget per batch"),
    "epochs": Key("train", int, "passes over the training split"),
    "max_steps": Key("train", int, "step cap (0 = none)"),
    "eval_interval": Key("train", int, "validate every N steps (0 = once per epoch)"),
    "classifier_hidden": Key("train", int, "classifier hidden width (0 = d_model)"),
    "seed": Key("train", int, "seed for weights and batch order"),
    # data and matrix
    "corpus_size": Key("matrix", int, "sentences to generate"),
    "corpus_seed": Key("matrix", int, "generator seed"),
    "corpus": Key("matrix", _optional_str, "JSONL corpus to read instead of generating"),
    "variants": Key("matrix", _list(str), "matrix variants: " + ", ".join(VARIANTS)),
    "seeds": Key("matrix", _list(int), "training seeds per variant"),
    "eval_split": Key("matrix", str, "valid or test"),
    "workers": Key("matrix", int, "parallel worker threads"),
}

_MODEL_OVERRIDES = {k for k, v in SCHEMA.items() if v.section == "model"}


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Raw ``key -> value`` strings; duplicate or malformed lines are errors."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def read_file(path) -> dict[str, str]:
    path = Path(path)
    return parse_text(path.read_text(encoding="utf-8"), str(path))


def typed(raw: dict[str, str]) -> tuple[dict[str, object], dict[str, dict[str, object]]]:
    """Convert values by schema; returns (settings, per-variant model overrides)."""
    settings: dict[str, object] = {}
    overrides: dict[str, dict[str, object]] = {}
    for key, value in raw.items():
        variant, dot, sub = key.partition(".")
        if dot:
            if variant not in VARIANTS:
                raise ConfigError(f"unknown variant {variant!r} in key {key!r}")
            if sub not in _MODEL_OVERRIDES:
                raise ConfigError(f"{key!r}: only model settings can be overridden per variant")
            target, name = overrides.setdefault(variant, {}), sub
        else:
            target, name = settings, key
        if name not in SCHEMA:
            raise ConfigError(f"unknown key {name!r}")
        try:
            target[name] = SCHEMA[name].parse(value)
        except ValueError as err:
            raise ConfigError(f"{key}: {err}") from None
    return settings, overrides


def _model_fields(settings: dict[str, object], n_heads: int) -> dict[str, object]:
    out: dict[str, object] = {}
    for key, value in settings.items():
        if SCHEMA[key].section != "model":
            continue
        if key == "heads":
            text = str(value)
            if "," in text or ":" in text:
                out["head_assignment"] = [GranularitySpec.parse(x) for x in text.split(",")]
            else:
                out["head_assignment"] = default_head_assignment(n_heads, text)
        elif key == "mg_layers":
            out["mg_layers"] = frozenset(value)
        else:
            out[key] = value
    return out


def model_config(settings: dict[str, object], base: MgSaConfig | None = None) -> MgSaConfig:
    base = base or MgSaConfig()
    n_heads = int(settings.get("n_heads", base.n_heads))
    fields = _model_fields(settings, n_heads)
    if "n_heads" in fields and "head_assignment" not in fields:
        fields["head_assignment"] = default_head_assignment(n_heads, "ngram")
    return dataclasses.replace(base, **fields)


def train_config(settings: dict[str, object]) -> TrainConfig:
    fields = {k: v for k, v in settings.items() if SCHEMA[k].section == "train"}
    if "tasks" in fields:
        fields["tasks"] = tuple(fields["tasks"])
    return TrainConfig(model=model_config(settings), **fields)


def matrix_spec(settings: dict[str, object], overrides: dict[str, dict[str, object]] | None = None) -> MatrixSpec:
    train = train_config(settings)
    n_heads = train.model.n_heads
    fields: dict[str, object] = {"train": train}
    for key, name in (("variants", "variants"), ("seeds", "seeds"), ("corpus_size", "corpus_size"),
                      ("corpus_seed", "corpus_seed"), ("corpus", "corpus_path"), ("eval_split", "eval_split"),
                      ("workers", "workers")):
        if key in settings:
            fields[name] = settings[key]
    if "seeds" not in settings and "seed" in settings:
        fields["seeds"] = [settings["seed"]]
    fields["overrides"] = {v: _model_fields(o, n_heads) for v, o in (overrides or {}).items()}
    return MatrixSpec(**fields)


def load_train_config(path) -> TrainConfig:
    settings, overrides = typed(read_file(path))
    if overrides:
        raise ConfigError("per-variant overrides only apply to matrix files")
    return train_config(settings)


def load_matrix_spec(path) -> MatrixSpec:
    return matrix_spec(*typed(read_file(path)))


def schema_text() -> str:
    """Every key with its section and meaning, aligned."""
    width = max(len(k) for k in SCHEMA)
    return "\n".join(f"{k.ljust(width)}  [{v.section}] {v.help}" for k, v in SCHEMA.items()) + "\n"
