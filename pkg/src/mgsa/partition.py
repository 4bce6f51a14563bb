"""Non-overlapping phrase partitions of a token sequence."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

from .treebank import ParseTree

WORD = "word"
NGRAM = "ngram"
SYNTACTIC = "syntactic"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class GranularitySpec:
    """What one attention head attends over.

    ``kind`` is ``"word"``, ``"ngram"`` (``size`` = n) or ``"syntactic"``
    (``size`` = tree layer k).
    """

    kind: str
    size: int = 0

    def __post_init__(self):
        if self.kind == WORD:
            if self.size != 0:
                raise ConfigError("word-level granularity takes no size")
        elif self.kind == NGRAM:
            if self.size < 2:
                raise ConfigError(f"n-gram size must be >= 2, got {self.size}")
        elif self.kind == SYNTACTIC:
            if self.size < 1:
                raise ConfigError(f"syntactic layer must be >= 1, got {self.size}")
        else:
            raise ConfigError(f"unknown granularity kind {self.kind!r}")

    @classmethod
    def word(cls) -> "GranularitySpec":
        return cls(WORD)

    @classmethod
    def ngram(cls, n: int) -> "GranularitySpec":
        return cls(NGRAM, n)

    @classmethod
    def syntactic(cls, k: int) -> "GranularitySpec":
        return cls(SYNTACTIC, k)

    @classmethod
    def parse(cls, text: str) -> "GranularitySpec":
        """Inverse of ``str``: ``word``, ``ngram:3``, ``syntactic:2``."""
        kind, _, size = text.strip().partition(":")
        return cls(kind, int(size) if size else 0)

    @property
    def is_word(self) -> bool:
        return self.kind == WORD

    @property
    def is_syntactic(self) -> bool:
        return self.kind == SYNTACTIC

    def __str__(self) -> str:
        return self.kind if self.kind == WORD else f"{self.kind}:{self.size}"


@dataclass
class PhrasePartition:
    spans: list[tuple[int, int]]
    granularity: GranularitySpec
    tags: list[str] | None = None
    pad_len: int = 0
    n_tokens: int = field(default=0)

    def __post_init__(self):
        if not self.n_tokens and self.spans:
            self.n_tokens = self.spans[-1][1]
        if self.tags is not None and len(self.tags) != len(self.spans):
            raise ValueError("tags must align 1:1 with spans")

    def __len__(self) -> int:
        return len(self.spans)

    @property
    def width(self) -> int:
        """Longest phrase, counting padding on the final n-gram."""
        longest = max(e - s for s, e in self.spans)
        if self.pad_len:
            longest = max(longest, self.spans[-1][1] - self.spans[-1][0] + self.pad_len)
        return longest

    def to_dict(self) -> dict:
        return {"spans": [list(s) for s in self.spans], "tags": self.tags}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def word_partition(n_tokens: int) -> PhrasePartition:
    return PhrasePartition([(i, i + 1) for i in range(n_tokens)], GranularitySpec.word(), n_tokens=n_tokens)


def ngram_partition(tokens: Sequence | int, n: int) -> PhrasePartition:
    """Consecutive n-token phrases; the last one is padded up to width n."""
    n_tokens = tokens if isinstance(tokens, int) else len(tokens)
    if n < 2:
        raise ConfigError(f"n-gram size must be >= 2, got {n}")
    if n_tokens < 1:
        raise ValueError("cannot partition an empty sequence")
    m = math.ceil(n_tokens / n)
    spans = [(i * n, min((i + 1) * n, n_tokens)) for i in range(m)]
    return PhrasePartition(spans, GranularitySpec.ngram(n), pad_len=m * n - n_tokens, n_tokens=n_tokens)


def _frontier(node: ParseTree, depth: int, k: int, out: list[tuple[tuple[int, int], str]]) -> None:
    if depth == k or all(c.is_terminal for c in node.children):
        out.append((node.span, node.label))
        return
    for child in node.children:
        if child.is_terminal:
            # bare token under a phrase that also has constituents
            out.append((child.span, node.label))
        else:
            _frontier(child, depth + 1, k, out)


def syntactic_partition(tree: ParseTree, k: int) -> PhrasePartition:
    """Constituents found ``k`` edges below the root.

    A node reached earlier whose children are all tokens (a preterminal or
    a flat phrase) is kept whole with its own label.
    """
    if k < 1:
        raise ConfigError(f"syntactic layer must be >= 1, got {k}")
    out: list[tuple[tuple[int, int], str]] = []
    _frontier(tree, 0, k, out)
    return PhrasePartition(
        [span for span, _ in out],
        GranularitySpec.syntactic(k),
        tags=[tag for _, tag in out],
        n_tokens=tree.end - tree.start,
    )


def partition_for(spec: GranularitySpec, n_tokens: int, tree: ParseTree | None = None) -> PhrasePartition:
    if spec.is_word:
        return word_partition(n_tokens)
    if spec.kind == NGRAM:
        return ngram_partition(n_tokens, spec.size)
    if tree is None:
        raise ConfigError(f"{spec} needs a parse tree")
    if tree.end - tree.start != n_tokens:
        raise ValueError(f"tree covers {tree.end - tree.start} tokens, sentence has {n_tokens}")
    return syntactic_partition(tree, spec.size)
