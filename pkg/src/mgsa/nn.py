"""Parameter containers and the few layers the encoder is built from."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None, name=None) -> Tensor:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    shape = (fan_in, fan_out) if shape is None else shape
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


def zeros(shape, name=None) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


def ones(shape, name=None) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True, name=name)


class Module:
    """Tree of named parameters discovered through instance attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item
            elif isinstance(value, dict):
                for k in sorted(value):
                    item = value[k]
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{k}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{k}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(state))
        unexpected = sorted(set(state) - set(params))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, p in params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ad.DimensionError(f"{name}: expected {p.shape}, got {value.shape}")
            p.data = value.copy()


class Linear(Module):
    def __init__(self, rng, d_in: int, d_out: int, bias: bool = True):
        self.weight = glorot(rng, d_in, d_out)
        self.bias = zeros((d_out,)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gamma = ones((d,))
        self.beta = zeros((d,))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta)


class Embedding(Module):
    def __init__(self, rng, n: int, d: int):
        self.table = glorot(rng, n, d)

    def __call__(self, ids) -> Tensor:
        return ad.embedding_lookup(self.table, ids)


class FeedForward(Module):
    def __init__(self, rng, d: int, hidden: int):
        self.inner = Linear(rng, d, hidden)
        self.outer = Linear(rng, hidden, d)

    def __call__(self, x: Tensor) -> Tensor:
        return self.outer(ad.relu(self.inner(x)))


def sinusoidal_positions(length: int, d: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
