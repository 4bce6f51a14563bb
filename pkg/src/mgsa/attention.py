"""Multi-head and multi-granularity self-attention, and the encoder stack."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Embedding, FeedForward, LayerNorm, Module, glorot, make_rng, sinusoidal_positions
from .objectives import DEFAULT_TAG_WEIGHT
from .partition import ConfigError, GranularitySpec, PhrasePartition, partition_for
from .phrase_memory import CompositionKind, InteractionKind, PhraseLayout, PhraseMemory
from .treebank import ParseTree

NGRAM_SIZES = (2, 3, 4)
SYNTACTIC_LAYERS = (1, 2, 3)


def default_head_assignment(n_heads: int, family: str = "ngram") -> list[GranularitySpec]:
    """A quarter of the heads per phrase granularity, the rest word-level.

    ``family`` is ``"word"``, ``"ngram"`` (2/3/4-grams) or ``"syntactic"``
    (tree layers 1/2/3).
    """
    if family == "word":
        return [GranularitySpec.word()] * n_heads
    if family == "ngram":
        phrase = [GranularitySpec.ngram(n) for n in NGRAM_SIZES]
    elif family == "syntactic":
        phrase = [GranularitySpec.syntactic(k) for k in SYNTACTIC_LAYERS]
    else:
        raise ConfigError(f"unknown head family {family!r}")
    per_group = n_heads // 4
    n_word = n_heads - len(phrase) * per_group
    return [GranularitySpec.word()] * n_word + [g for g in phrase for _ in range(per_group)]


@dataclass
class MgSaConfig:
    d_model: int = 64
    n_heads: int = 4
    head_assignment: list[GranularitySpec] | None = None
    composition: CompositionKind = CompositionKind.ATTENTIVE_POOL
    interaction: InteractionKind = InteractionKind.NONE
    mg_layers: frozenset[int] = frozenset({1})
    n_layers: int = 3
    ffn_dim: int = 128
    tag_loss_weight: float = DEFAULT_TAG_WEIGHT
    seed: int = 1
    norm: str = "pre"
    positions: str = "sinusoidal"
    max_len: int = 64

    def __post_init__(self):
        if self.head_assignment is None:
            self.head_assignment = default_head_assignment(self.n_heads, "ngram")
        self.head_assignment = list(self.head_assignment)
        self.composition = CompositionKind(self.composition)
        self.interaction = InteractionKind(self.interaction)
        self.mg_layers = frozenset(int(i) for i in self.mg_layers)
        self.validate()

    @property
    def d_h(self) -> int:
        return self.d_model // self.n_heads

    def validate(self) -> None:
        if self.d_model <= 0 or self.n_heads <= 0 or self.n_layers <= 0 or self.ffn_dim <= 0:
            raise ConfigError("dimensions must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if len(self.head_assignment) != self.n_heads:
            raise ConfigError(f"{len(self.head_assignment)} head granularities for {self.n_heads} heads")
        if not any(g.is_word for g in self.head_assignment):
            raise ConfigError("at least one head must be word-level")
        bad = [i for i in self.mg_layers if not 1 <= i <= self.n_layers]
        if bad:
            raise ConfigError(f"mg_layers {sorted(bad)} outside [1, {self.n_layers}]")
        if self.norm not in ("pre", "post"):
            raise ConfigError(f"norm must be 'pre' or 'post', got {self.norm!r}")
        if self.positions not in ("sinusoidal", "learned"):
            raise ConfigError(f"positions must be 'sinusoidal' or 'learned', got {self.positions!r}")
        if self.tag_loss_weight < 0:
            raise ConfigError("tag_loss_weight must be non-negative")

    @property
    def phrase_granularities(self) -> list[GranularitySpec]:
        seen: list[GranularitySpec] = []
        for g in self.head_assignment:
            if not g.is_word and g not in seen:
                seen.append(g)
        return seen

    @property
    def needs_tree(self) -> bool:
        return bool(self.mg_layers) and any(g.is_syntactic for g in self.head_assignment)


# ---------------------------------------------------------------- functional heads


def attend(q: Tensor, k: Tensor, v: Tensor, key_mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention over the last two axes; returns (output, weights)."""
    if k.shape[-2] == 0:
        raise ValueError("attention memory is empty")
    scores = ad.scale(q @ k.transpose(_swap_last(k.ndim)), 1.0 / math.sqrt(q.shape[-1]))
    weights = ad.softmax_rows(scores, mask=key_mask)
    return weights @ v, weights


def _swap_last(ndim: int) -> tuple[int, ...]:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def mhsa_head(h: Tensor, w_q: Tensor, w_k: Tensor, w_v: Tensor, return_weights: bool = False):
    """One word-level head: softmax(QK^T / sqrt(d_h)) V with Q, K, V from ``h``."""
    out, weights = attend(h @ w_q, h @ w_k, h @ w_v)
    return (out, weights) if return_weights else out


def mgsa_head(h: Tensor, memory: Tensor, w_q: Tensor, w_k: Tensor, w_v: Tensor, return_weights: bool = False):
    """One head with queries from ``h`` and keys/values from a phrase memory."""
    if memory.shape[-2] == 0:
        raise ValueError("phrase memory has no phrases")
    out, weights = attend(h @ w_q, memory @ w_k, memory @ w_v)
    return (out, weights) if return_weights else out


# ---------------------------------------------------------------- batches


@dataclass
class Batch:
    """Padded token ids plus everything partitioning needs."""

    ids: np.ndarray  # [B, T] int
    lengths: list[int]
    trees: list[ParseTree | None]
    _layouts: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_ids(cls, ids_list: Sequence[Sequence[int]], trees: Sequence[ParseTree | None] | None = None) -> "Batch":
        lengths = [len(x) for x in ids_list]
        if not lengths or min(lengths) < 1:
            raise ValueError("every sentence needs at least one token")
        ids = np.zeros((len(lengths), max(lengths)), dtype=np.int64)
        for i, x in enumerate(ids_list):
            ids[i, : len(x)] = x
        trees = list(trees) if trees is not None else [None] * len(lengths)
        return cls(ids, lengths, trees)

    @property
    def size(self) -> int:
        return len(self.lengths)

    @property
    def width(self) -> int:
        return self.ids.shape[1]

    @property
    def token_mask(self) -> np.ndarray:
        return np.arange(self.width)[None, :] < np.asarray(self.lengths)[:, None]

    def layout(self, spec: GranularitySpec) -> PhraseLayout:
        if spec not in self._layouts:
            parts: list[PhrasePartition] = []
            for n, tree in zip(self.lengths, self.trees):
                if spec.is_syntactic and tree is None:
                    raise ConfigError(f"{spec} heads need a parse tree for every sentence")
                parts.append(partition_for(spec, n, tree))
            self._layouts[spec] = PhraseLayout.build(parts, self.width)
        return self._layouts[spec]


@dataclass
class PhraseTagOutput:
    layer: int
    spec: GranularitySpec
    composed: Tensor  # [B, M, d_h] pre-interaction memory
    logits: Tensor | None  # [B, M, n_tags]
    layout: PhraseLayout
    memory: PhraseMemory


# ---------------------------------------------------------------- attention layers


def _head_index(heads: list[int]):
    if heads == list(range(heads[0], heads[-1] + 1)):
        return slice(heads[0], heads[-1] + 1)
    return np.asarray(heads)


class _SelfAttentionBase(Module):
    def __init__(self, d_model: int, n_heads: int, norm: str):
        self.d_model = d_model
        self.n_heads = n_heads
        self.d_h = d_model // n_heads
        self.wiring = norm
        self.norm = LayerNorm(d_model)

    def _split_heads(self, x: Tensor, n: int) -> Tensor:
        b, t, _ = x.shape
        return x.reshape(b, t, n, self.d_h).transpose(0, 2, 1, 3)

    def _merge_heads(self, x: Tensor) -> Tensor:
        b, n, t, d_h = x.shape
        return x.transpose(0, 2, 1, 3).reshape(b, t, n * d_h)

    def __call__(self, x: Tensor, batch: Batch, record: dict | None = None) -> Tensor:
        """Attention sublayer with residual connection and layer norm."""
        if self.wiring == "pre":
            return x + self.attend(self.norm(x), batch, record)
        return self.norm(x + self.attend(x, batch, record))


class MhSaLayer(_SelfAttentionBase):
    """Standard multi-head self-attention with an output projection."""

    def __init__(self, rng, d_model: int, n_heads: int, norm: str = "pre"):
        super().__init__(d_model, n_heads, norm)
        self.w_q = glorot(rng, d_model, d_model)
        self.w_k = glorot(rng, d_model, d_model)
        self.w_v = glorot(rng, d_model, d_model)
        self.w_o = glorot(rng, d_model, d_model)

    def attend(self, h: Tensor, batch: Batch, record: dict | None = None) -> Tensor:
        q = self._split_heads(h @ self.w_q, self.n_heads)
        k = self._split_heads(h @ self.w_k, self.n_heads)
        v = self._split_heads(h @ self.w_v, self.n_heads)
        out, weights = attend(q, k, v, key_mask=batch.token_mask[:, None, None, :])
        if record is not None:
            record["weights"] = [weights.data[:, i] for i in range(self.n_heads)]
            record["specs"] = [GranularitySpec.word()] * self.n_heads
        return self._merge_heads(out) @ self.w_o


class MgSaLayer(_SelfAttentionBase):
    """Self-attention where each head sees words or one phrase granularity.

    Queries always come from the token states.  Word heads take keys and
    values from the tokens; a phrase head takes them from the shared memory
    of its granularity group.  Head outputs are concatenated in head order
    and projected.
    """

    def __init__(
        self,
        rng,
        d_model: int,
        head_assignment: Sequence[GranularitySpec],
        composition: CompositionKind = CompositionKind.ATTENTIVE_POOL,
        interaction: InteractionKind = InteractionKind.NONE,
        norm: str = "pre",
        n_tags: int = 0,
    ):
        super().__init__(d_model, len(head_assignment), norm)
        self.assignment = list(head_assignment)
        self.word_heads = [i for i, g in enumerate(self.assignment) if g.is_word]
        if not self.word_heads:
            raise ConfigError("at least one head must be word-level")
        self.groups: list[tuple[GranularitySpec, list[int]]] = []
        for g in self.assignment:
            if not g.is_word and all(g != spec for spec, _ in self.groups):
                self.groups.append((g, [i for i, x in enumerate(self.assignment) if x == g]))
        n_word = len(self.word_heads)
        self.w_q = glorot(rng, d_model, d_model)
        self.w_k_word = glorot(rng, d_model, n_word * self.d_h)
        self.w_v_word = glorot(rng, d_model, n_word * self.d_h)
        self.memories = [
            PhraseMemory(rng, spec, d_model, self.d_h, composition, interaction, n_tags) for spec, _ in self.groups
        ]
        self.w_k_phrase = [glorot(rng, self.d_h, len(heads) * self.d_h) for _, heads in self.groups]
        self.w_v_phrase = [glorot(rng, self.d_h, len(heads) * self.d_h) for _, heads in self.groups]
        self.w_o = glorot(rng, d_model, d_model)
        order = self.word_heads + [i for _, heads in self.groups for i in heads]
        self._restore = None if order == list(range(self.n_heads)) else np.argsort(order)

    def load_from_mhsa(self, layer: MhSaLayer) -> None:
        """Copy shared projections from a vanilla layer (word heads only)."""
        cols = np.concatenate([np.arange(i * self.d_h, (i + 1) * self.d_h) for i in self.word_heads])
        self.w_q.data = layer.w_q.data.copy()
        self.w_k_word.data = layer.w_k.data[:, cols].copy()
        self.w_v_word.data = layer.w_v.data[:, cols].copy()
        self.w_o.data = layer.w_o.data.copy()
        self.norm.gamma.data = layer.norm.gamma.data.copy()
        self.norm.beta.data = layer.norm.beta.data.copy()

    def attend(self, h: Tensor, batch: Batch, record: dict | None = None, tags: list | None = None) -> Tensor:
        q_all = self._split_heads(h @ self.w_q, self.n_heads)
        n_word = len(self.word_heads)
        q_word = q_all if n_word == self.n_heads else q_all[:, _head_index(self.word_heads)]
        k = self._split_heads(h @ self.w_k_word, n_word)
        v = self._split_heads(h @ self.w_v_word, n_word)
        out, weights = attend(q_word, k, v, key_mask=batch.token_mask[:, None, None, :])
        outputs = [out]
        maps = [weights.data[:, i] for i in range(n_word)]
        specs = [GranularitySpec.word()] * n_word
        layouts = [None] * n_word
        for (spec, heads), memory_fn, w_k, w_v in zip(self.groups, self.memories, self.w_k_phrase, self.w_v_phrase):
            layout = batch.layout(spec)
            memory, composed = memory_fn(h, layout)
            if tags is not None:
                tags.append((spec, composed, memory_fn.tag_logits(composed), layout, memory_fn))
            q = q_all[:, _head_index(heads)]
            k = self._split_heads(memory @ w_k, len(heads))
            v = self._split_heads(memory @ w_v, len(heads))
            out, weights = attend(q, k, v, key_mask=layout.phrase_mask[:, None, None, :])
            outputs.append(out)
            maps.extend(weights.data[:, i] for i in range(len(heads)))
            specs.extend([spec] * len(heads))
            layouts.extend([layout] * len(heads))
        merged = outputs[0] if len(outputs) == 1 else ad.concat(outputs, axis=1)
        if self._restore is not None:
            merged = merged[:, self._restore]
            maps = [maps[i] for i in self._restore]
            specs = [specs[i] for i in self._restore]
            layouts = [layouts[i] for i in self._restore]
        if record is not None:
            record["weights"] = maps
            record["specs"] = specs
            record["layouts"] = layouts
        return self._merge_heads(merged) @ self.w_o

    def __call__(self, x: Tensor, batch: Batch, record: dict | None = None, tags: list | None = None) -> Tensor:
        if self.wiring == "pre":
            return x + self.attend(self.norm(x), batch, record, tags)
        return self.norm(x + self.attend(x, batch, record, tags))


def mgsa_layer(h: Tensor, layer: MgSaLayer, tree: ParseTree | None = None) -> Tensor:
    """Apply an MG-SA sublayer to a single ``[T, d]`` sentence."""
    t, d = h.shape
    batch = Batch(np.zeros((1, t), dtype=np.int64), [t], [tree])
    return layer(h.reshape(1, t, d), batch).reshape(t, d)


# ---------------------------------------------------------------- encoder


class EncoderLayer(Module):
    def __init__(self, rng, config: MgSaConfig, index: int, n_tags: int = 0):
        self.index = index
        self.wiring = config.norm
        if index in config.mg_layers:
            self.attention = MgSaLayer(
                rng,
                config.d_model,
                config.head_assignment,
                config.composition,
                config.interaction,
                config.norm,
                n_tags,
            )
        else:
            self.attention = MhSaLayer(rng, config.d_model, config.n_heads, config.norm)
        self.ffn_norm = LayerNorm(config.d_model)
        self.ffn = FeedForward(rng, config.d_model, config.ffn_dim)

    def __call__(self, x: Tensor, batch: Batch, record: dict | None = None, tags: list | None = None) -> Tensor:
        if isinstance(self.attention, MgSaLayer):
            x = self.attention(x, batch, record, tags)
        else:
            x = self.attention(x, batch, record)
        if self.wiring == "pre":
            return x + self.ffn(self.ffn_norm(x))
        return self.ffn_norm(x + self.ffn(x))


@dataclass
class EncoderOutput:
    states: Tensor  # [B, T, d]
    tags: list[PhraseTagOutput]
    attention: list[dict]  # one record per layer


class Encoder(Module):
    """Embeddings, positions and a stack of attention + feed-forward layers.

    Layers listed in ``config.mg_layers`` (1 = bottom) use MG-SA; the rest
    use vanilla multi-head attention.
    """

    def __init__(self, config: MgSaConfig, vocab_size: int, n_tags: int = 0):
        rng = make_rng(config.seed)
        self.config = config
        self.embed = Embedding(rng, vocab_size, config.d_model)
        if config.positions == "learned":
            self.pos_embed = Embedding(rng, config.max_len, config.d_model)
        self.layers = [EncoderLayer(rng, config, i, n_tags) for i in range(1, config.n_layers + 1)]
        self.final_norm = LayerNorm(config.d_model) if config.norm == "pre" else None

    def __call__(self, batch: Batch, record_attention: bool = False) -> EncoderOutput:
        if self.config.needs_tree and any(t is None for t in batch.trees):
            raise ConfigError("syntactic heads need a parse tree for every sentence")
        x = self.embed(batch.ids)
        if self.config.positions == "learned":
            if batch.width > self.config.max_len:
                raise ValueError(f"sentence length {batch.width} exceeds max_len {self.config.max_len}")
            x = x + self.pos_embed(np.arange(batch.width))
        else:
            x = x + Tensor(sinusoidal_positions(batch.width, self.config.d_model))
        records: list[dict] = []
        tag_outputs: list[PhraseTagOutput] = []
        for layer in self.layers:
            record = {} if record_attention else None
            tags: list = []
            x = layer(x, batch, record, tags)
            for spec, composed, logits, layout, memory in tags:
                tag_outputs.append(PhraseTagOutput(layer.index, spec, composed, logits, layout, memory))
            if record is not None:
                record["layer"] = layer.index
                records.append(record)
        if self.final_norm is not None:
            x = self.final_norm(x)
        return EncoderOutput(x, tag_outputs, records)


def encoder_forward(model: Encoder, token_ids: Sequence[int], tree: ParseTree | None = None) -> EncoderOutput:
    """Encode one sentence; states come back as ``[1, T, d]``."""
    return model(Batch.from_ids([token_ids], [tree]), record_attention=True)
