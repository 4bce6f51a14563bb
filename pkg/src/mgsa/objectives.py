"""Phrase-tag supervision and the weighted training objective."""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

UNK = "<unk>"
DEFAULT_TAG_WEIGHT = 0.001


class TagVocabulary:
    """Dense string <-> index map; index 0 is reserved for unseen labels."""

    def __init__(self, labels: Iterable[str] = ()):
        self.itos: list[str] = [UNK]
        self.stoi: dict[str, int] = {UNK: 0}
        for label in labels:
            self.add(label)

    def add(self, label: str) -> int:
        if label not in self.stoi:
            self.stoi[label] = len(self.itos)
            self.itos.append(label)
        return self.stoi[label]

    def index(self, label: str) -> int:
        return self.stoi.get(label, 0)

    def encode(self, labels: Sequence[str]) -> list[int]:
        return [self.stoi.get(x, 0) for x in labels]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[i] for i in ids]

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, label: str) -> bool:
        return label in self.stoi

    def to_list(self) -> list[str]:
        return list(self.itos)

    @classmethod
    def from_list(cls, itos: Sequence[str]) -> "TagVocabulary":
        if not itos or itos[0] != UNK:
            raise ValueError("vocabulary list must start with the UNK entry")
        vocab = cls()
        for label in itos[1:]:
            vocab.add(label)
        return vocab


def tag_loss(
    phrases: Tensor,
    gold_tags,
    weight: Tensor,
    bias: Tensor,
    mask: np.ndarray | None = None,
) -> Tensor:
    """Summed negative log-likelihood of the gold tag of every phrase.

    ``phrases`` is ``[..., M, d_h]``, ``gold_tags`` integer ``[..., M]``;
    ``mask`` drops padding phrases of a batch.
    """
    gold = np.asarray(gold_tags, dtype=np.int64)
    if gold.shape != phrases.shape[:-1]:
        raise ValueError(f"{gold.shape} tags for phrases of shape {phrases.shape}")
    n_tags = weight.shape[-1]
    if gold.size and (gold.min() < 0 or gold.max() >= n_tags):
        raise ValueError(f"tag index outside vocabulary of size {n_tags}")
    logits = phrases @ weight + bias
    return ad.cross_entropy_from_logits(logits, gold, mask=mask, reduction="sum")


def total_loss(task_loss, tag_losses: Sequence, weight: float = DEFAULT_TAG_WEIGHT) -> Tensor:
    """``task_loss + weight * sum(tag_losses)``; plain numbers are accepted."""
    if weight < 0:
        raise ValueError("tag loss weight must be non-negative")
    task_loss = ad._as_tensor(task_loss)
    tag_losses = [ad._as_tensor(t) for t in tag_losses]
    if weight == 0 or not tag_losses:
        return task_loss
    tags = tag_losses[0]
    for extra in tag_losses[1:]:
        tags = tags + extra
    return task_loss + ad.scale(tags, weight)


def phrase_tag_losses(tag_outputs, vocab: TagVocabulary) -> list[Tensor]:
    """Tag loss of every supervised phrase group in an encoder pass.

    Gold tags come from the syntactic partitions; groups without a tag
    generator (n-gram groups) contribute nothing.
    """
    losses = []
    for out in tag_outputs:
        tagger = out.memory.tagger
        if tagger is None:
            continue
        gold = np.zeros(out.layout.phrase_mask.shape, dtype=np.int64)
        for i, part in enumerate(out.layout.partitions):
            gold[i, : len(part)] = vocab.encode(part.tags)
        losses.append(tag_loss(out.composed, gold, tagger.weight, tagger.bias, mask=out.layout.phrase_mask))
    return losses
