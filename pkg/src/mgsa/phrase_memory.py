"""Phrase-level memories: one composed vector per phrase, with optional interaction.

Everything here works on a batch of padded sentences.  A batch of phrase
slices is laid out as ``[B, M, L, d]`` with a boolean row mask; rows beyond
a phrase's length (n-gram padding, or ragged syntactic phrases) are masked
and never reach the output.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Linear, Module, glorot, make_rng, zeros
from .partition import ConfigError, GranularitySpec, PhrasePartition, partition_for
from .treebank import ParseTree


class CompositionKind(str, enum.Enum):
    MAX_POOL = "maxpool"
    RECURRENT = "recurrent"
    ATTENTIVE_POOL = "attentive"


class InteractionKind(str, enum.Enum):
    NONE = "none"
    RECURRENT_CHAIN = "lstm"
    ORDERED_NEURONS_CHAIN = "onlstm"


# ---------------------------------------------------------------- recurrent cells


class LSTMCell(Module):
    n_gates = 4

    def __init__(self, rng, d_in: int, d_h: int):
        self.d_in = d_in
        self.d_h = d_h
        self.weight = glorot(rng, d_in + d_h, self.n_gates * d_h)
        self.bias = zeros((self.n_gates * d_h,))

    def project_inputs(self, xs: Tensor) -> Tensor:
        """Input half of the gate logits for every step at once."""
        return xs @ self.weight[: self.d_in] + self.bias

    def _logits(self, x: Tensor, h: Tensor) -> Tensor:
        return ad.concat_last_dim([x, h]) @ self.weight + self.bias

    def step(self, x: Tensor, state: tuple[Tensor, Tensor]) -> tuple[Tensor, Tensor]:
        return self.advance(self._logits(x, state[0]), state[1])

    def advance(self, z: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        """New ``(h, c)`` from full gate logits ``z``."""
        d = self.d_h
        gates = ad.sigmoid(z[..., : 3 * d])
        i, f, o = gates[..., :d], gates[..., d : 2 * d], gates[..., 2 * d :]
        g = ad.tanh(z[..., 3 * d :])
        c = f * c + i * g
        return o * ad.tanh(c), c


class OnLstmCell(LSTMCell):
    """Ordered-neurons LSTM cell with one neuron per master-gate chunk.

    The master forget gate is ``cumax`` of its logits (nondecreasing along
    the hidden axis); the master input gate is ``1 - cumax`` of its logits.
    """

    n_gates = 6

    def master_gates(self, x: Tensor, h: Tensor) -> tuple[Tensor, Tensor]:
        z = self._logits(x, h)
        d = self.d_h
        master_f = ad.cumax(z[..., 4 * d : 5 * d])
        master_i = 1.0 - ad.cumax(z[..., 5 * d :])
        return master_f, master_i

    def advance(self, z: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        d = self.d_h
        gates = ad.sigmoid(z[..., : 3 * d])
        i, f, o = gates[..., :d], gates[..., d : 2 * d], gates[..., 2 * d :]
        g = ad.tanh(z[..., 3 * d : 4 * d])
        master_f = ad.cumax(z[..., 4 * d : 5 * d])
        master_i = 1.0 - ad.cumax(z[..., 5 * d :])
        overlap = master_f * master_i
        f_hat = f * overlap + (master_f - overlap)
        i_hat = i * overlap + (master_i - overlap)
        c = f_hat * c + i_hat * g
        return o * ad.tanh(c), c


def run_recurrence(cell, xs: Tensor, mask: np.ndarray | None = None) -> list[Tensor]:
    """Left-to-right pass over axis -2 of ``xs`` (``[..., L, d]``).

    Where ``mask[..., t]`` is False the state is carried over unchanged, so
    the final state is the state after the last unmasked step.
    """
    if xs.ndim == 2:
        steps, d = xs.shape
        single = None if mask is None else np.asarray(mask)[None]
        return [s.reshape(cell.d_h) for s in run_recurrence(cell, xs.reshape(1, steps, d), single)]
    lead = xs.shape[:-2]
    h = Tensor(np.zeros(lead + (cell.d_h,)))
    c = h
    xw = cell.project_inputs(xs)
    w_h = cell.weight[cell.d_in :]
    states = []
    for t in range(xs.shape[-2]):
        keep = None if mask is None else np.asarray(mask[..., t], dtype=bool)
        if keep is not None and not keep.any():
            states.append(h)
            continue
        h_new, c_new = cell.advance(xw[..., t, :] + h @ w_h, c)
        if keep is None or keep.all():
            h, c = h_new, c_new
        else:
            keep = keep[..., None]
            h = ad.where(keep, h_new, h)
            c = ad.where(keep, c_new, c)
        states.append(h)
    return states


# ---------------------------------------------------------------- composition


class Composer(Module):
    """Maps ``[..., L, d]`` phrase slices to ``[..., d]`` phrase vectors."""

    def __init__(self, rng, kind: CompositionKind, d_h: int):
        self.kind = CompositionKind(kind)
        self.d_h = d_h
        if self.kind is CompositionKind.RECURRENT:
            self.cell = LSTMCell(rng, d_h, d_h)
        elif self.kind is CompositionKind.ATTENTIVE_POOL:
            self.w_q = glorot(rng, d_h, d_h)
            self.w_k = glorot(rng, d_h, d_h)
            self.w_v = glorot(rng, d_h, d_h)

    def __call__(self, slices: Tensor, row_mask: np.ndarray, return_weights: bool = False):
        row_mask = np.asarray(row_mask, dtype=bool)
        weights = None
        if self.kind is CompositionKind.MAX_POOL:
            out = ad.max_over_axis(slices, axis=-2, mask=row_mask[..., None])
        elif self.kind is CompositionKind.RECURRENT:
            out = run_recurrence(self.cell, slices, row_mask)[-1]
        else:
            query = ad.max_over_axis(slices, axis=-2, mask=row_mask[..., None]) @ self.w_q
            keys = slices @ self.w_k
            values = slices @ self.w_v
            lead = query.shape[:-1]
            scores = (keys @ query.reshape(lead + (self.d_h, 1))).reshape(lead + (slices.shape[-2],))
            weights = ad.softmax_rows(ad.scale(scores, 1.0 / math.sqrt(self.d_h)), mask=row_mask)
            out = (weights.reshape(lead + (1, slices.shape[-2])) @ values).reshape(lead + (self.d_h,))
        return (out, weights) if return_weights else out


def compose(
    phrase_slice: Tensor,
    kind: CompositionKind,
    pad_mask: Sequence[bool] | None = None,
    composer: Composer | None = None,
    rng=None,
) -> Tensor:
    """Compose one ``[l, d_h]`` phrase into a ``[1, d_h]`` vector.

    ``pad_mask[i]`` is True for padded rows.
    """
    l, d_h = phrase_slice.shape
    pad = np.zeros(l, dtype=bool) if pad_mask is None else np.asarray(pad_mask, dtype=bool)
    if pad.shape != (l,):
        raise ValueError(f"pad_mask has {pad.shape[0]} entries for {l} rows")
    if pad.all():
        raise ValueError("compose: every row of the phrase is padding")
    if composer is None:
        composer = Composer(rng if rng is not None else make_rng(0), kind, d_h)
    elif composer.kind is not CompositionKind(kind):
        raise ConfigError(f"composer is {composer.kind.value}, asked for {CompositionKind(kind).value}")
    out = composer(phrase_slice.reshape(1, l, d_h), ~pad[None, :])
    return out.reshape(1, d_h)


# ---------------------------------------------------------------- interaction


def make_interaction_cell(rng, kind: InteractionKind, d_h: int):
    kind = InteractionKind(kind)
    if kind is InteractionKind.RECURRENT_CHAIN:
        return LSTMCell(rng, d_h, d_h)
    if kind is InteractionKind.ORDERED_NEURONS_CHAIN:
        return OnLstmCell(rng, d_h, d_h)
    return None


def interact(memory: Tensor, kind: InteractionKind, cell=None, rng=None) -> Tensor:
    """Recurrent pass over phrase vectors (``[..., M, d_h]``)."""
    kind = InteractionKind(kind)
    if kind is InteractionKind.NONE:
        return memory
    if cell is None:
        cell = make_interaction_cell(rng if rng is not None else make_rng(0), kind, memory.shape[-1])
    return ad.stack(run_recurrence(cell, memory), axis=-2)


# ---------------------------------------------------------------- batched memory


@dataclass
class PhraseLayout:
    """Index arrays that gather a padded batch into phrase slices."""

    partitions: list[PhrasePartition]
    rows: np.ndarray  # [B, M, L] indices into the flattened [B*T] token axis
    row_mask: np.ndarray  # [B, M, L]
    phrase_mask: np.ndarray  # [B, M]

    @classmethod
    def build(cls, partitions: list[PhrasePartition], n_positions: int) -> "PhraseLayout":
        b = len(partitions)
        m = max(len(p) for p in partitions)
        width = max(p.width for p in partitions)
        rows = np.zeros((b, m, width), dtype=np.int64)
        row_mask = np.zeros((b, m, width), dtype=bool)
        phrase_mask = np.zeros((b, m), dtype=bool)
        for i, part in enumerate(partitions):
            base = i * n_positions
            rows[i, :, :] = base
            # dummy phrases past the end see token 0 so they stay finite
            row_mask[i, len(part) :, 0] = True
            for j, (s, e) in enumerate(part.spans):
                rows[i, j, : e - s] = base + np.arange(s, e)
                rows[i, j, e - s :] = base + s
                row_mask[i, j, : e - s] = True
                phrase_mask[i, j] = True
        return cls(partitions, rows, row_mask, phrase_mask)


class PhraseMemory(Module):
    """F_h for one phrase granularity: project, partition, compose, interact.

    Composition works at the head width ``d_h``; all heads of the group
    share the memory.  Syntactic groups carry a tag generator when
    ``n_tags`` is given.
    """

    def __init__(
        self,
        rng,
        spec: GranularitySpec,
        d_model: int,
        d_h: int,
        composition: CompositionKind = CompositionKind.ATTENTIVE_POOL,
        interaction: InteractionKind = InteractionKind.NONE,
        n_tags: int = 0,
    ):
        if spec.is_word:
            raise ConfigError("word-level heads have no phrase memory")
        self.spec = spec
        self.d_h = d_h
        self.composition = CompositionKind(composition)
        self.interaction = InteractionKind(interaction)
        self.proj = glorot(rng, d_model, d_h)
        self.composer = Composer(rng, self.composition, d_h)
        self.cell = make_interaction_cell(rng, self.interaction, d_h)
        self.tagger = Linear(rng, d_h, n_tags) if (spec.is_syntactic and n_tags > 0) else None

    def __call__(self, h: Tensor, layout: PhraseLayout) -> tuple[Tensor, Tensor]:
        """Returns (memory ``[B, M, d_h]``, pre-interaction composition)."""
        b, t, _ = h.shape
        projected = (h @ self.proj).reshape(b * t, self.d_h)
        slices = ad.take_rows(projected, layout.rows)
        composed = self.composer(slices, layout.row_mask)
        if self.cell is None:
            return composed, composed
        return ad.stack(run_recurrence(self.cell, composed), axis=-2), composed

    def tag_logits(self, composed: Tensor) -> Tensor | None:
        return self.tagger(composed) if self.tagger is not None else None


def build_phrase_memory(
    h: Tensor,
    spec: GranularitySpec,
    tree: ParseTree | None = None,
    composition: CompositionKind = CompositionKind.ATTENTIVE_POOL,
    interaction: InteractionKind = InteractionKind.NONE,
    module: PhraseMemory | None = None,
    rng=None,
) -> tuple[Tensor, PhrasePartition]:
    """Phrase memory for one ``[T, d]`` sentence.

    Word-level specs return ``h`` itself with the identity partition.
    """
    if h.ndim != 2:
        raise ValueError(f"expected [T, d] input, got {h.shape}")
    n_tokens, d_model = h.shape
    if spec.is_syntactic and tree is None:
        raise ConfigError(f"{spec} needs a parse tree")
    if not spec.is_syntactic and tree is not None and not spec.is_word:
        raise ConfigError(f"{spec} does not take a parse tree")
    partition = partition_for(spec, n_tokens, tree)
    if spec.is_word:
        return h, partition
    if module is None:
        d_h = d_model
        module = PhraseMemory(rng if rng is not None else make_rng(0), spec, d_model, d_h, composition, interaction)
    elif module.composition is not CompositionKind(composition) or module.interaction is not InteractionKind(
        interaction
    ):
        raise ConfigError("module composition/interaction disagree with the request")
    layout = PhraseLayout.build([partition], n_tokens)
    memory, _ = module(h.reshape(1, n_tokens, d_model), layout)
    return memory.reshape(len(partition), module.d_h), partition
