"""Label-prediction probes on an encoder with MLP classifiers, plus the experiment matrix."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .attention import Batch, Encoder, EncoderOutput, MgSaConfig, default_head_assignment
from .autodiff import Tensor
from .nn import Linear, Module, make_rng
from .objectives import UNK, TagVocabulary, phrase_tag_losses, total_loss
from .partition import ConfigError, GranularitySpec, syntactic_partition
from .phrase_memory import InteractionKind
from .treebank import SENTENCE_TASKS, TASKS, TOKEN_TASKS, LabeledExample, generate_corpus, read_corpus, split_corpus, write_corpus

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------- tasks and vocabularies


@dataclass(frozen=True)
class ProbeTask:
    name: str
    level: str
    labels: tuple[str, ...] = (UNK,)

    def __post_init__(self):
        expected = "token" if self.name in TOKEN_TASKS else "sentence" if self.name in SENTENCE_TASKS else None
        if expected is None:
            raise ConfigError(f"unknown task {self.name!r}; choose from {', '.join(TASKS)}")
        if self.level != expected:
            raise ConfigError(f"{self.name} is a {expected}-level task")
        if not self.labels or self.labels[0] != UNK:
            raise ConfigError("label vocabulary must start with the UNK entry")

    @classmethod
    def fit(cls, name: str, examples: Iterable[LabeledExample]) -> "ProbeTask":
        """Task whose label vocabulary is every label seen in ``examples``, sorted."""
        if name not in TASKS:
            raise ConfigError(f"unknown task {name!r}; choose from {', '.join(TASKS)}")
        level = "token" if name in TOKEN_TASKS else "sentence"
        seen: set[str] = set()
        for ex in examples:
            value = ex.label(name)
            seen.update(value if level == "token" else [value])
        seen.discard(UNK)
        return cls(name, level, (UNK, *sorted(seen)))

    @property
    def vocab(self) -> TagVocabulary:
        return TagVocabulary.from_list(self.labels)

    @property
    def n_labels(self) -> int:
        return len(self.labels)

    def encode(self, labels: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
        """Label ids plus a mask of labels that are in the vocabulary."""
        vocab = self.vocab
        ids = np.array(vocab.encode(labels), dtype=np.int64)
        known = np.array([x in vocab for x in labels], dtype=bool)
        return ids, known


def token_vocabulary(examples: Iterable[LabeledExample]) -> TagVocabulary:
    words = sorted({w for ex in examples for w in ex.tokens} - {UNK})
    return TagVocabulary(words)


def tag_vocabulary(examples: Iterable[LabeledExample], specs: Iterable[GranularitySpec]) -> TagVocabulary:
    """Constituent labels of every syntactic phrase the given heads will see."""
    layers = sorted({g.size for g in specs if g.is_syntactic})
    tags: set[str] = set()
    for ex in examples:
        for k in layers:
            tags.update(syntactic_partition(ex.tree, k).tags)
    return TagVocabulary(sorted(tags - {UNK}))


# ---------------------------------------------------------------- configuration


@dataclass
class TrainConfig:
    model: MgSaConfig = field(default_factory=MgSaConfig)
    tasks: tuple[str, ...] = TASKS
    optimizer: str = "sgd"
    lr: float = 1.0
    decay: str = "linear"
    warmup_steps: int = 0
    clip_norm: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.98
    batch_tokens: int = 512
    epochs: int = 8
    max_steps: int = 0
    eval_interval: int = 0
    classifier_hidden: int = 0
    seed: int = 1

    def __post_init__(self):
        self.tasks = tuple(self.tasks)
        self.validate()

    def validate(self) -> None:
        if not self.tasks:
            raise ConfigError("at least one task is required")
        for t in self.tasks:
            if t not in TASKS:
                raise ConfigError(f"unknown task {t!r}; choose from {', '.join(TASKS)}")
        if len(set(self.tasks)) != len(self.tasks):
            raise ConfigError("tasks repeat")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if self.decay not in ("linear", "none"):
            raise ConfigError(f"decay must be 'linear' or 'none', got {self.decay!r}")
        if not (self.lr > 0 and self.clip_norm > 0 and self.batch_tokens > 0 and self.epochs > 0):
            raise ConfigError("lr, clip_norm, batch_tokens and epochs must be positive")
        if self.warmup_steps < 0 or self.max_steps < 0 or self.eval_interval < 0 or self.classifier_hidden < 0:
            raise ConfigError("warmup_steps, max_steps, eval_interval and classifier_hidden must be >= 0")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("adam betas must lie in [0, 1)")

    def model_config(self) -> MgSaConfig:
        """Encoder config with the training seed."""
        return dataclasses.replace(self.model, seed=self.seed)


def model_config_to_dict(config: MgSaConfig) -> dict:
    return {
        "d_model": config.d_model,
        "n_heads": config.n_heads,
        "head_assignment": [str(g) for g in config.head_assignment],
        "composition": config.composition.value,
        "interaction": config.interaction.value,
        "mg_layers": sorted(config.mg_layers),
        "n_layers": config.n_layers,
        "ffn_dim": config.ffn_dim,
        "tag_loss_weight": config.tag_loss_weight,
        "seed": config.seed,
        "norm": config.norm,
        "positions": config.positions,
        "max_len": config.max_len,
    }


def model_config_from_dict(d: dict) -> MgSaConfig:
    d = dict(d)
    d["head_assignment"] = [GranularitySpec.parse(s) for s in d["head_assignment"]]
    d["mg_layers"] = frozenset(d["mg_layers"])
    return MgSaConfig(**d)


def train_config_to_dict(config: TrainConfig) -> dict:
    out = {f.name: getattr(config, f.name) for f in dataclasses.fields(config) if f.name != "model"}
    out["tasks"] = list(config.tasks)
    out["model"] = model_config_to_dict(config.model)
    return out


def train_config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    d["model"] = model_config_from_dict(d["model"])
    return TrainConfig(**d)


# ---------------------------------------------------------------- encoded data


@dataclass
class EncodedSplit:
    ids: list[np.ndarray]
    trees: list
    labels: dict[str, list[np.ndarray]]  # task -> per-sentence label ids
    known: dict[str, list[np.ndarray]]  # task -> per-sentence "label in vocabulary"

    @property
    def lengths(self) -> list[int]:
        return [len(x) for x in self.ids]

    def __len__(self) -> int:
        return len(self.ids)


def encode_split(examples: Sequence[LabeledExample], words: TagVocabulary, tasks: Sequence[ProbeTask]) -> EncodedSplit:
    ids = [np.array(words.encode(ex.tokens), dtype=np.int64) for ex in examples]
    labels: dict[str, list[np.ndarray]] = {}
    known: dict[str, list[np.ndarray]] = {}
    for task in tasks:
        labels[task.name], known[task.name] = [], []
        for ex in examples:
            value = ex.label(task.name)
            y, k = task.encode(value if task.level == "token" else [value])
            labels[task.name].append(y)
            known[task.name].append(k)
    return EncodedSplit(ids, [ex.tree for ex in examples], labels, known)


def token_batches(lengths: Sequence[int], batch_tokens: int, rng: np.random.Generator | None = None) -> list[list[int]]:
    """Greedy packing of sentences into batches of at most ``batch_tokens`` tokens.

    With ``rng`` the sentence order is shuffled first; a sentence longer
    than the budget gets a batch of its own.
    """
    order = np.arange(len(lengths)) if rng is None else rng.permutation(len(lengths))
    batches: list[list[int]] = []
    current: list[int] = []
    used = 0
    for i in order.tolist():
        n = lengths[i]
        if current and used + n > batch_tokens:
            batches.append(current)
            current, used = [], 0
        current.append(i)
        used += n
    if current:
        batches.append(current)
    return batches


def _pad(rows: Sequence[np.ndarray], width: int) -> np.ndarray:
    out = np.zeros((len(rows), width), dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
    return out


# ---------------------------------------------------------------- model


class Classifier(Module):
    """One hidden relu layer followed by a linear read-out."""

    def __init__(self, rng, d_in: int, hidden: int, n_out: int):
        self.hidden = Linear(rng, d_in, hidden)
        self.out = Linear(rng, hidden, n_out)

    def __call__(self, x: Tensor) -> Tensor:
        return self.out(ad.relu(self.hidden(x)))


class ProbeModel(Module):
    """Encoder shared by one classifier per task."""

    def __init__(self, config: MgSaConfig, n_words: int, tasks: Sequence[ProbeTask], n_tags: int = 0, hidden: int = 0):
        self.config = config
        self.encoder = Encoder(config, n_words, n_tags)
        rng = make_rng(config.seed + 7919)
        width = hidden or config.d_model
        self.heads = {t.name: Classifier(rng, config.d_model, width, t.n_labels) for t in tasks}
        self.levels = {t.name: t.level for t in tasks}

    def __call__(self, batch: Batch, record_attention: bool = False) -> tuple[dict[str, Tensor], EncoderOutput]:
        out = self.encoder(batch, record_attention=record_attention)
        mask = batch.token_mask
        pooled = None
        logits = {}
        for name in sorted(self.heads):
            if self.levels[name] == "token":
                logits[name] = self.heads[name](out.states)
            else:
                if pooled is None:
                    weights = mask / np.asarray(batch.lengths, dtype=np.float64)[:, None]
                    pooled = ad.sum(out.states * Tensor(weights[:, :, None]), axis=1)
                logits[name] = self.heads[name](pooled)
        return logits, out


# ---------------------------------------------------------------- training


@dataclass
class Checkpoint:
    train_config: TrainConfig
    words: list[str]
    tasks: list[ProbeTask]
    tags: list[str]
    state: dict[str, np.ndarray]

    def build_model(self) -> ProbeModel:
        model = ProbeModel(
            self.train_config.model_config(),
            len(self.words),
            self.tasks,
            n_tags=len(self.tags) if self.tags else 0,
            hidden=self.train_config.classifier_hidden,
        )
        model.load_state_dict(self.state)
        return model

    def to_dict(self) -> dict:
        return {
            "format_version": CHECKPOINT_VERSION,
            "train_config": train_config_to_dict(self.train_config),
            "words": self.words,
            "tasks": [{"name": t.name, "level": t.level, "labels": list(t.labels)} for t in self.tasks],
            "tags": self.tags,
            "state": {k: {"shape": list(v.shape), "data": v.reshape(-1).tolist()} for k, v in sorted(self.state.items())},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Checkpoint":
        version = d.get("format_version")
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint format version {version!r}")
        state = {k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in d["state"].items()}
        return cls(
            train_config=train_config_from_dict(d["train_config"]),
            words=list(d["words"]),
            tasks=[ProbeTask(t["name"], t["level"], tuple(t["labels"])) for t in d["tasks"]],
            tags=list(d["tags"]),
            state=state,
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[dict]  # one entry per eval point
    epoch_loss: list[float]
    epoch_parts: list[dict[str, float]]
    steps: int


def _learning_rate(config: TrainConfig, step: int, total: int) -> float:
    lr = config.lr
    if config.warmup_steps and step <= config.warmup_steps:
        return lr * step / config.warmup_steps
    if config.decay == "linear":
        start = config.warmup_steps
        return lr * max(0.0, 1.0 - (step - start - 1) / max(1, total - start))
    return lr


class _Adam:
    def __init__(self, params: list[Tensor], beta1: float, beta2: float, eps: float = 1e-8):
        self.m = [np.zeros(p.shape) for p in params]
        self.v = [np.zeros(p.shape) for p in params]
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0

    def update(self, params: list[Tensor], grads: list[np.ndarray], lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1**self.t, 1.0 - b2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _clip(grads: list[np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return norm


def batch_loss(
    model: ProbeModel, split: EncodedSplit, idx: Sequence[int], tag_vocab: TagVocabulary | None
) -> tuple[Tensor, dict[str, float]]:
    """Summed task cross-entropy plus weighted tag loss, with its decomposition."""
    batch = Batch.from_ids([split.ids[i] for i in idx], [split.trees[i] for i in idx])
    logits, out = model(batch)
    parts: dict[str, float] = {}
    task_loss = None
    for name, z in logits.items():
        if model.levels[name] == "token":
            targets = _pad([split.labels[name][i] for i in idx], batch.width)
            loss = ad.cross_entropy_from_logits(z, targets, mask=batch.token_mask)
        else:
            targets = np.array([split.labels[name][i][0] for i in idx], dtype=np.int64)
            loss = ad.cross_entropy_from_logits(z, targets)
        parts[name] = loss.item()
        task_loss = loss if task_loss is None else task_loss + loss
    weight = model.config.tag_loss_weight
    tag_losses = phrase_tag_losses(out.tags, tag_vocab) if tag_vocab is not None and weight > 0 else []
    if tag_losses:
        parts["tags"] = float(sum(t.item() for t in tag_losses))
    total = total_loss(task_loss, tag_losses, weight)
    parts["total"] = total.item()
    return total, parts


def train(
    config: TrainConfig,
    train_examples: Sequence[LabeledExample],
    valid_examples: Sequence[LabeledExample] = (),
) -> TrainResult:
    """Gradient-descent training of the encoder and every task classifier."""
    words = token_vocabulary(train_examples)
    tasks = [ProbeTask.fit(name, train_examples) for name in config.tasks]
    model_config = config.model_config()
    uses_tags = model_config.tag_loss_weight > 0 and any(
        g.is_syntactic for g in model_config.head_assignment
    ) and bool(model_config.mg_layers)
    tag_vocab = tag_vocabulary(train_examples, model_config.head_assignment) if uses_tags else None
    model = ProbeModel(
        model_config, len(words), tasks, n_tags=len(tag_vocab) if tag_vocab else 0, hidden=config.classifier_hidden
    )
    train_split = encode_split(train_examples, words, tasks)
    valid_split = encode_split(valid_examples, words, tasks) if valid_examples else None

    params = model.parameters()
    adam = _Adam(params, config.beta1, config.beta2) if config.optimizer == "adam" else None
    rng = make_rng(config.seed + 104729)
    per_epoch = len(token_batches(train_split.lengths, config.batch_tokens))
    total = per_epoch * config.epochs
    if config.max_steps:
        total = min(total, config.max_steps)

    history: list[dict] = []
    epoch_loss: list[float] = []
    epoch_parts: list[dict[str, float]] = []
    step = 0

    def checkpoint_eval(epoch: int) -> None:
        if valid_split is None:
            return
        acc = _accuracy(model, valid_split, tasks)
        history.append({"step": step, "epoch": epoch, "valid": acc})
        log.info("step %d epoch %d valid %s", step, epoch, _fmt(acc))

    for epoch in range(1, config.epochs + 1):
        sums: dict[str, float] = {}
        n_batches = 0
        for idx in token_batches(train_split.lengths, config.batch_tokens, rng):
            if step >= total:
                break
            step += 1
            lr = _learning_rate(config, step, total)
            try:
                loss, parts = batch_loss(model, train_split, idx, tag_vocab)
                ad.zero_grad(params)
                ad.backward(loss)
            except FloatingPointError as err:
                raise TrainingDiverged(f"non-finite values at step {step} (epoch {epoch}, lr {lr:.4g}): {err}") from err
            if not math.isfinite(parts["total"]):
                raise TrainingDiverged(f"loss is {parts['total']} at step {step} (epoch {epoch}, lr {lr:.4g})")
            grads = [np.zeros(p.shape) if p.grad is None else p.grad for p in params]
            _clip(grads, config.clip_norm)
            if adam is not None:
                adam.update(params, grads, lr)
            else:
                for p, g in zip(params, grads):
                    p.data -= lr * g
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v
            n_batches += 1
            if config.eval_interval and step % config.eval_interval == 0:
                checkpoint_eval(epoch)
        if not n_batches:
            break
        means = {k: v / n_batches for k, v in sums.items()}
        epoch_parts.append(means)
        epoch_loss.append(means["total"])
        log.info("epoch %d steps %d loss %s", epoch, step, _fmt(means))
        if not config.eval_interval:
            checkpoint_eval(epoch)

    checkpoint = Checkpoint(config, words.to_list(), tasks, tag_vocab.to_list() if tag_vocab else [], model.state_dict())
    return TrainResult(checkpoint, history, epoch_loss, epoch_parts, step)


def _fmt(d: dict[str, float]) -> str:
    return " ".join(f"{k}={v:.4f}" for k, v in d.items())


# ---------------------------------------------------------------- evaluation


@dataclass
class TaskScore:
    correct: int
    total: int

    @property
    def accuracy(self) -> float:
        return self.correct / self.total if self.total else 0.0


def _scores(model: ProbeModel, split: EncodedSplit, tasks: Sequence[ProbeTask], batch_tokens: int = 2048) -> dict[str, TaskScore]:
    correct = {t.name: 0 for t in tasks}
    total = {t.name: 0 for t in tasks}
    literal_unk = {t.name: 0 for t in tasks}
    with ad.no_grad():
        for idx in token_batches(split.lengths, batch_tokens):
            batch = Batch.from_ids([split.ids[i] for i in idx], [split.trees[i] for i in idx])
            logits, _ = model(batch)
            for t in tasks:
                pred = logits[t.name].data.argmax(axis=-1)
                for row, i in enumerate(idx):
                    gold = split.labels[t.name][i]
                    known = split.known[t.name][i]
                    guess = pred[row, : len(gold)] if t.level == "token" else pred[row : row + 1]
                    correct[t.name] += int(((guess == gold) & known).sum())
                    total[t.name] += len(gold)
    n_tokens = int(sum(split.lengths))
    for t in tasks:
        expected = n_tokens if t.level == "token" else len(split)
        assert total[t.name] == expected, f"{t.name}: scored {total[t.name]} items, split has {expected}"
    return {t.name: TaskScore(correct[t.name], total[t.name]) for t in tasks}


def _accuracy(model: ProbeModel, split: EncodedSplit, tasks: Sequence[ProbeTask]) -> dict[str, float]:
    return {k: v.accuracy for k, v in _scores(model, split, tasks).items()}


def evaluate(
    checkpoint: Checkpoint | ProbeModel,
    examples: Sequence[LabeledExample],
    tasks: Sequence[str] | None = None,
    words: Sequence[str] | None = None,
    task_defs: Sequence[ProbeTask] | None = None,
) -> dict[str, float]:
    """Accuracy per task on ``examples``; token tasks are micro-averaged over tokens.

    Labels and words missing from the training vocabularies map to UNK; an
    UNK gold label never counts as correct.
    """
    if isinstance(checkpoint, Checkpoint):
        model = checkpoint.build_model()
        words = checkpoint.words
        task_defs = checkpoint.tasks
    else:
        model = checkpoint
        if words is None or task_defs is None:
            raise ValueError("a bare model needs its word list and task definitions")
    chosen = [t for t in task_defs if tasks is None or t.name in tasks]
    missing = set(tasks or ()) - {t.name for t in chosen}
    if missing:
        raise ConfigError(f"model has no classifier for {sorted(missing)}")
    split = encode_split(examples, TagVocabulary.from_list(list(words)), chosen)
    return {k: v.accuracy for k, v in _scores(model, split, chosen).items()}


# ---------------------------------------------------------------- accuracy tables


def format_table(rows: Sequence[tuple[str, dict[str, float]]], tasks: Sequence[str]) -> str:
    """Aligned plain-text table with one row per model and one column per task."""
    header = ["#", "Model", *tasks, "Avg"]
    body = []
    for i, (name, acc) in enumerate(rows, 1):
        cells = [f"{100 * acc[t]:.2f}" if t in acc else "-" for t in tasks]
        vals = [acc[t] for t in tasks if t in acc]
        avg = f"{100 * sum(vals) / len(vals):.2f}" if vals else "-"
        body.append([str(i), name, *cells, avg])
    widths = [max(len(r[c]) for r in [header, *body]) for c in range(len(header))]

    def line(cells):
        return "  ".join(c.ljust(w) if j == 1 else c.rjust(w) for j, (c, w) in enumerate(zip(cells, widths))).rstrip()

    rule = "-" * len(line(header))
    return "\n".join([line(header), rule, *(line(r) for r in body)]) + "\n"


# ---------------------------------------------------------------- experiment matrix

VARIANTS: dict[str, dict] = {
    "base": {"label": "Base", "family": "ngram", "mg_layers": ()},
    "ngram": {"label": "N-Gram Phrase", "family": "ngram"},
    "syntactic": {"label": "Syntactic Phrase", "family": "syntactic", "tag_loss_weight": 0.0},
    "syntactic_interaction": {
        "label": "Syntactic Phrase + Interaction",
        "family": "syntactic",
        "interaction": InteractionKind.ORDERED_NEURONS_CHAIN.value,
        "tag_loss_weight": 0.0,
    },
}


@dataclass
class MatrixSpec:
    variants: list[str] = field(default_factory=lambda: list(VARIANTS))
    seeds: list[int] = field(default_factory=lambda: [1])
    train: TrainConfig = field(default_factory=TrainConfig)
    corpus_size: int = 5000
    corpus_seed: int = 0
    corpus_path: str | None = None
    eval_split: str = "test"
    workers: int = 1
    overrides: dict[str, dict] = field(default_factory=dict)  # variant -> model field overrides

    def __post_init__(self):
        for v in self.variants:
            if v not in VARIANTS:
                raise ConfigError(f"unknown variant {v!r}; choose from {', '.join(VARIANTS)}")
        if len(set(self.variants)) != len(self.variants):
            raise ConfigError("variants repeat")
        if self.eval_split not in ("valid", "test"):
            raise ConfigError("eval_split must be 'valid' or 'test'")
        if self.workers < 1 or self.corpus_size < 1:
            raise ConfigError("workers and corpus_size must be positive")
        if self.variants and not self.seeds:
            raise ConfigError("at least one seed is required")


def variant_config(spec: MatrixSpec, name: str, seed: int) -> TrainConfig:
    v = VARIANTS[name]
    base = spec.train.model
    changes: dict = {"head_assignment": default_head_assignment(base.n_heads, v["family"])}
    for key in ("mg_layers", "interaction", "tag_loss_weight"):
        if key in v:
            changes[key] = v[key]
    changes.update(spec.overrides.get(name, {}))
    model = dataclasses.replace(base, **changes)
    return dataclasses.replace(spec.train, model=model, seed=seed)


_corpus_lock = threading.Lock()
_corpus_cache: dict[tuple, dict[str, list[LabeledExample]]] = {}


def load_splits(spec: MatrixSpec, cache_dir: Path | None = None) -> dict[str, list[LabeledExample]]:
    """Train/valid/test splits, generated once per (seed, size) and reused."""
    key = (spec.corpus_path, spec.corpus_seed, spec.corpus_size)
    with _corpus_lock:
        if key not in _corpus_cache:
            if spec.corpus_path:
                examples = read_corpus(spec.corpus_path)
            else:
                path = cache_dir / f"corpus-{spec.corpus_seed}-{spec.corpus_size}.jsonl" if cache_dir else None
                if path is not None and path.exists():
                    examples = read_corpus(path)
                else:
                    examples = generate_corpus(None, spec.corpus_size, spec.corpus_seed)
                    if path is not None:
                        write_corpus(path, examples)
            _corpus_cache[key] = split_corpus(examples)
        return _corpus_cache[key]


def _run_one(spec: MatrixSpec, name: str, seed: int, splits) -> dict:
    config = variant_config(spec, name, seed)
    cpu0, wall0 = time.thread_time(), time.perf_counter()
    result = train(config, splits["train"], splits["valid"])
    acc = evaluate(result.checkpoint, splits[spec.eval_split])
    return {
        "seed": seed,
        "accuracy": acc,
        "valid_accuracy": result.history[-1]["valid"] if result.history else {},
        "epoch_loss": result.epoch_loss,
        "epoch_parts": result.epoch_parts,
        "steps": result.steps,
        "timing": {"cpu_seconds": time.thread_time() - cpu0, "wall_seconds": time.perf_counter() - wall0},
    }


def _summarize(values: list[float]) -> dict:
    return {"mean": sum(values) / len(values), "min": min(values), "max": max(values)}


def run_experiment_matrix(spec: MatrixSpec, out_dir=None) -> dict:
    """Train and evaluate every (variant, seed); returns the report dict.

    With ``out_dir`` the report is also written as ``report.json`` and
    ``report.txt``; run times go to ``timing.json`` so the report itself
    depends only on seeds, configs and data.  A variant that raises is
    reported as failed and the others still run.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    tasks = list(spec.train.tasks)
    jobs = [(name, seed) for name in spec.variants for seed in spec.seeds]
    splits = load_splits(spec, out) if jobs else None

    def work(job):
        name, seed = job
        try:
            return _run_one(spec, name, seed, splits)
        except Exception as err:  # isolate the failing variant
            log.error("variant %s seed %d failed: %s", name, seed, err)
            return {"seed": seed, "error": f"{type(err).__name__}: {err}"}

    if spec.workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=spec.workers) as pool:
            runs = list(pool.map(work, jobs))
    else:
        runs = [work(j) for j in jobs]

    variants = []
    timing = {}
    for name in spec.variants:
        mine = [r for (n, _), r in zip(jobs, runs) if n == name]
        ok = [r for r in mine if "error" not in r]
        entry: dict = {
            "name": name,
            "label": VARIANTS[name]["label"],
            "config": train_config_to_dict(variant_config(spec, name, spec.seeds[0]))["model"],
            "status": "ok" if len(ok) == len(mine) else ("failed" if not ok else "partial"),
            "runs": [{k: v for k, v in r.items() if k != "timing"} for r in mine],
        }
        if ok:
            entry["accuracy"] = {t: _summarize([r["accuracy"][t] for r in ok]) for t in tasks}
            entry["avg"] = _summarize([sum(r["accuracy"].values()) / len(tasks) for r in ok])
        variants.append(entry)
        timing[name] = [{"seed": r["seed"], **r["timing"]} for r in mine if "timing" in r]

    report = {
        "tasks": tasks,
        "eval_split": spec.eval_split,
        "corpus": {"size": spec.corpus_size, "seed": spec.corpus_seed, "path": spec.corpus_path},
        "seeds": list(spec.seeds),
        "train": {k: v for k, v in train_config_to_dict(spec.train).items() if k not in ("model", "seed")},
        "variants": variants,
    }
    if out is not None:
        (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        (out / "report.txt").write_text(report_table(report), encoding="utf-8")
        (out / "timing.json").write_text(json.dumps(timing, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return report


def report_table(report: dict) -> str:
    """Plain-text rendering: mean accuracy per task, then min/max when there are several seeds."""
    tasks = report["tasks"]
    rows = [(v["label"], {t: v["accuracy"][t]["mean"] for t in tasks}) for v in report["variants"] if "accuracy" in v]
    text = format_table(rows, tasks)
    if len(report["seeds"]) > 1:
        spread = []
        for v in report["variants"]:
            if "accuracy" in v:
                cells = ", ".join(
                    f"{t} {100 * v['accuracy'][t]['min']:.2f}-{100 * v['accuracy'][t]['max']:.2f}" for t in tasks
                )
                spread.append(f"{v['label']}: {cells}")
        text += "\nmin-max over seeds " + ", ".join(map(str, report["seeds"])) + "\n" + "\n".join(spread) + "\n"
    failed = [v for v in report["variants"] if v["status"] != "ok"]
    for v in failed:
        errors = "; ".join(r["error"] for r in v["runs"] if "error" in r)
        text += f"\n{v['label']}: {v['status']} ({errors})\n"
    return text


# ---------------------------------------------------------------- attention dumps


def dump_attention(checkpoint: Checkpoint, example: LabeledExample) -> dict:
    """Attention weights of every head in every layer for one sentence.

    Phrase heads also carry the spans and tags of the phrases that make up
    their columns.
    """
    model = checkpoint.build_model()
    words = TagVocabulary.from_list(checkpoint.words)
    batch = Batch.from_ids([words.encode(example.tokens)], [example.tree])
    with ad.no_grad():
        _, out = model(batch, record_attention=True)
    layers = []
    for record in out.attention:
        heads = []
        layouts = record.get("layouts", [None] * len(record["weights"]))
        for h, (w, spec, layout) in enumerate(zip(record["weights"], record["specs"], layouts)):
            entry: dict = {"head": h, "granularity": str(spec), "weights": np.asarray(w[0]).tolist()}
            if layout is not None:
                part = layout.partitions[0]
                entry["spans"] = [list(s) for s in part.spans]
                if part.tags is not None:
                    entry["tags"] = list(part.tags)
                entry["weights"] = np.asarray(w[0][:, : len(part)]).tolist()
            heads.append(entry)
        layers.append({"layer": record["layer"], "heads": heads})
    return {"tokens": list(example.tokens), "layers": layers}
