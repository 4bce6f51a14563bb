"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every op builds its output eagerly and, when any input requires a gradient,
records a closure mapping the output gradient to input gradients.  The
graph reachable from a loss is the tape: :func:`backward` orders it
topologically and walks it once in reverse.
"""

from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "DimensionError",
    "no_grad",
    "is_grad_enabled",
    "tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "matmul",
    "sigmoid",
    "tanh",
    "relu",
    "exp",
    "log",
    "softmax_rows",
    "log_softmax",
    "cumsum",
    "cumax",
    "sum",
    "mean_over_axis",
    "max_over_axis",
    "concat",
    "concat_last_dim",
    "stack",
    "reshape",
    "transpose",
    "getitem",
    "take_rows",
    "embedding_lookup",
    "where",
    "cross_entropy_from_logits",
    "layer_norm",
    "backward",
    "tape",
]

LAYER_NORM_EPS = 1e-6


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = data if type(data) is np.ndarray and data.dtype == np.float64 else np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    def backward(self) -> None:
        backward(self)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis, keepdims=False):
        return mean_over_axis(self, axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


_add_reduce = np.add.reduce


def _check_finite(data: np.ndarray, op: str) -> None:
    # a sum is non-finite whenever any term is; overflow of the sum itself
    # falls through to the exact elementwise test
    if not math.isfinite(_add_reduce(data, None)) and not np.isfinite(data).all():
        raise FloatingPointError(f"{op} produced non-finite values")


def _make(data: np.ndarray, parents: tuple[Tensor, ...], grad_fn, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    if getattr(_state, "enabled", True) and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = grad_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    if a.data.shape == b.data.shape:
        return a.data.shape
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- arithmetic


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "add")

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), grad_fn, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), grad_fn, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), grad_fn, "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "div")

    def grad_fn(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data / b.data, (a, b), grad_fn, "div")


def neg(x: Tensor) -> Tensor:
    return _make(-x.data, (x,), lambda g: (-g,), "neg")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(x.data * c, (x,), lambda g: (g * c,), "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul: incompatible batch shapes {a.shape} and {b.shape}") from None

    def grad_fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(np.matmul(a.data, b.data), (a, b), grad_fn, "matmul")


# ---------------------------------------------------------------- pointwise


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,), "relu")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,), "exp")


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


# ---------------------------------------------------------------- softmax family


def softmax_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis with row-max stabilization.

    ``mask`` (broadcastable boolean) marks admissible entries; excluded
    entries get probability exactly zero.  A row with no admissible entry
    is a contract violation.
    """
    d = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), d.shape)
        if not mask.any(axis=-1).all():
            raise ValueError("softmax_rows: a row has every entry masked")
        d = np.where(mask, d, -np.inf)
    shifted = d - d.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), grad_fn, "softmax_rows")


def log_softmax(x: Tensor) -> Tensor:
    d = x.data
    shifted = d - d.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    y = shifted - lse
    p = np.exp(y)

    def grad_fn(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _make(y, (x,), grad_fn, "log_softmax")


def cumsum(x: Tensor, axis: int = -1) -> Tensor:
    def grad_fn(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return _make(np.cumsum(x.data, axis=axis), (x,), grad_fn, "cumsum")


def cumax(x: Tensor) -> Tensor:
    """Cumulative softmax along the last axis: nondecreasing, ends at 1."""
    d = x.data
    e = np.exp(d - d.max(axis=-1, keepdims=True))
    c = np.cumsum(e, axis=-1)
    # dividing by the last running sum pins the end at exactly 1 and keeps y in [0, 1]
    total = c[..., -1:]
    y = c / total
    p = e / total

    def grad_fn(g):
        gp = np.flip(np.cumsum(np.flip(g, -1), axis=-1), -1)
        return (p * (gp - (gp * p).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), grad_fn, "cumax")


# ---------------------------------------------------------------- reductions


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, x.ndim)
    y = x.data.sum(axis=axes, keepdims=keepdims)

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(y, (x,), grad_fn, "sum")


def mean_over_axis(x: Tensor, axis, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = math.prod(x.shape[a] for a in axes)
    y = x.data.mean(axis=axes, keepdims=keepdims)

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _make(y, (x,), grad_fn, "mean_over_axis")


def max_over_axis(x: Tensor, axis: int, mask: np.ndarray | None = None) -> Tensor:
    """Max along ``axis``; the gradient goes to the first maximal entry.

    ``mask`` (broadcastable boolean, True = eligible) excludes entries from
    the max; each reduced slice needs at least one eligible entry.
    """
    axis = axis % x.ndim
    d = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), d.shape)
        if not mask.any(axis=axis).all():
            raise ValueError("max_over_axis: a slice has every entry masked")
        d = np.where(mask, d, -np.inf)
    idx = np.expand_dims(np.argmax(d, axis=axis), axis)
    y = np.take_along_axis(d, idx, axis=axis).squeeze(axis)

    def grad_fn(g):
        out = np.zeros(x.shape)
        np.put_along_axis(out, idx, np.expand_dims(g, axis), axis=axis)
        return (out,)

    return _make(y, (x,), grad_fn, "max_over_axis")


# ---------------------------------------------------------------- structure


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat: empty input")
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != axis
        ):
            raise DimensionError(
                f"concat: incompatible shapes {[u.shape for u in tensors]} on axis {axis}"
            )
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    y = np.concatenate([t.data for t in tensors], axis=axis)
    return _make(y, tuple(tensors), grad_fn, "concat")


def concat_last_dim(tensors: Sequence[Tensor]) -> Tensor:
    return concat(tensors, axis=-1)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError(f"stack: incompatible shapes {[t.shape for t in tensors]}")
    y = np.stack([t.data for t in tensors], axis=axis)
    axis = axis % y.ndim

    def grad_fn(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(y, tuple(tensors), grad_fn, "stack")


def reshape(x: Tensor, shape) -> Tensor:
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
    return _make(y, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose")


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(p is None or p is Ellipsis or isinstance(p, (int, np.integer, slice)) for p in parts)


def getitem(x: Tensor, index) -> Tensor:
    y = x.data[index]
    basic = _is_basic_index(index)

    def grad_fn(g):
        out = np.zeros(x.shape)
        if basic:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)

    return _make(np.array(y), (x,), grad_fn, "getitem")


def take_rows(table: Tensor, ids) -> Tensor:
    """Gather rows of a 2-D tensor; output shape is ``ids.shape + (cols,)``."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise DimensionError(f"take_rows: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"take_rows: index out of range for {table.shape[0]} rows")

    def grad_fn(g):
        out = np.zeros(table.shape)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (out,)

    return _make(table.data[ids], (table,), grad_fn, "take_rows")


def embedding_lookup(table: Tensor, ids) -> Tensor:
    return take_rows(table, ids)


def where(cond: np.ndarray, a, b) -> Tensor:
    """Elementwise select; ``cond`` is a constant boolean array."""
    a, b = _as_tensor(a), _as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    try:
        np.broadcast_shapes(cond.shape, a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"where: incompatible shapes {cond.shape}, {a.shape}, {b.shape}") from None

    def grad_fn(g):
        return (
            _unbroadcast(np.where(cond, g, 0.0), a.shape),
            _unbroadcast(np.where(cond, 0.0, g), b.shape),
        )

    return _make(np.where(cond, a.data, b.data), (a, b), grad_fn, "where")


# ---------------------------------------------------------------- losses and norms


def cross_entropy_from_logits(
    logits: Tensor,
    targets,
    mask: np.ndarray | None = None,
    reduction: str = "mean",
) -> Tensor:
    """Negative log-likelihood of integer ``targets`` under softmax(logits).

    ``targets`` has the shape of ``logits`` minus its last axis.  ``mask``
    drops positions; ``reduction`` is ``"mean"`` (over kept positions) or
    ``"sum"``.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != logits.shape[:-1]:
        raise DimensionError(
            f"cross_entropy_from_logits: logits {logits.shape} vs targets {targets.shape}"
        )
    n_class = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= n_class):
        raise IndexError(f"cross_entropy_from_logits: target outside [0, {n_class})")
    keep = np.ones(targets.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    count = int(keep.sum())
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    denom = float(max(count, 1)) if reduction == "mean" else 1.0

    d = logits.data
    shifted = d - d.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = -np.where(keep, picked, 0.0).sum() / denom

    def grad_fn(g):
        p = np.exp(logp)
        np.put_along_axis(p, targets[..., None], np.take_along_axis(p, targets[..., None], -1) - 1.0, -1)
        return (p * (keep[..., None] * (g / denom)),)

    return _make(np.asarray(loss), (logits,), grad_fn, "cross_entropy_from_logits")


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then apply the affine."""
    d = x.data
    n = d.shape[-1]
    mu = d.mean(axis=-1, keepdims=True)
    xc = d - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def norm_grad(g):
        return (inv / n * (n * g - g.sum(-1, keepdims=True) - xhat * (g * xhat).sum(-1, keepdims=True)),)

    out = _make(xhat, (x,), norm_grad, "layer_norm")
    if gamma is not None:
        out = mul(out, gamma)
    if beta is not None:
        out = add(out, beta)
    return out


# ---------------------------------------------------------------- backward pass


def tape(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` in topological order (inputs first)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.size != 1 or loss.ndim != 0:
        raise ValueError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss is not on the tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
    for node in reversed(tape(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
