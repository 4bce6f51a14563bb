"""Shared test utilities: random trees and brute-force oracles."""

import random

from mgsa.treebank import ParseTree, assign_spans

LABELS = ["S", "NP", "VP", "PP", "SBAR", "ADJP"]


def random_tree(rng: random.Random, max_depth: int = 5, max_children: int = 4) -> ParseTree:
    """Random labeled tree; leaves are bare tokens, nodes may be unary."""

    def build(depth: int) -> ParseTree:
        children = []
        for _ in range(rng.randint(1, max_children)):
            if depth >= max_depth or rng.random() < 0.35:
                children.append(ParseTree(f"w{rng.randint(0, 99)}"))
            else:
                children.append(build(depth + 1))
        return ParseTree(rng.choice(LABELS), children)

    return assign_spans(build(0))


def brute_ngram_spans(n_tokens: int, n: int):
    """Group token positions by ``i // n`` without any arithmetic on span ends."""
    groups: dict[int, list[int]] = {}
    for i in range(n_tokens):
        groups.setdefault(i // n, []).append(i)
    spans = [(g[0], g[-1] + 1) for _, g in sorted(groups.items())]
    pad = 0
    while (n_tokens + pad) % n:
        pad += 1
    return spans, pad
