"""Central finite-difference checks of autodiff gradients."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import make_rng

FD_STEP = 1e-5


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max-norm error relative to the larger of the two gradients."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def numerical_grad(loss_fn: Callable[[], Tensor], param: Tensor, h: float = FD_STEP) -> np.ndarray:
    """d loss / d param by central differences, perturbing ``param.data`` in place."""
    grad = np.zeros(param.shape)
    flat = param.data.reshape(-1)
    out = grad.reshape(-1)
    with ad.no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            plus = loss_fn().item()
            flat[i] = orig - h
            minus = loss_fn().item()
            flat[i] = orig
            out[i] = (plus - minus) / (2.0 * h)
    return grad


def analytic_grads(loss_fn: Callable[[], Tensor], params: Sequence[Tensor]) -> list[np.ndarray]:
    for p in params:
        p.grad = None
    loss = loss_fn()
    ad.backward(loss)
    return [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    names: Sequence[str] | None = None,
    h: float = FD_STEP,
) -> dict[str, float]:
    """Relative error per parameter between autodiff and finite differences."""
    names = names or [p.name or f"param{i}" for i, p in enumerate(params)]
    grads = analytic_grads(loss_fn, params)
    return {name: relative_error(g, numerical_grad(loss_fn, p, h)) for name, p, g in zip(names, params, grads)}


# ---------------------------------------------------------------- op catalogue


def _leaf(rng, *shape) -> Tensor:
    return Tensor(rng.uniform(-1.0, 1.0, size=shape), requires_grad=True)


def op_cases(seed: int = 0) -> dict[str, tuple[Callable[[], Tensor], list[Tensor]]]:
    """One scalar-loss closure per registered op on random inputs in [-1, 1].

    Each loss contracts the op output against fixed random weights so every
    output entry matters.
    """
    rng = make_rng(seed)
    cases: dict[str, tuple[Callable[[], Tensor], list[Tensor]]] = {}

    def reduce(y: Tensor) -> Tensor:
        w = _weights.setdefault(y.shape, Tensor(rng.uniform(-1.0, 1.0, size=y.shape)))
        return ad.sum(y * w)

    _weights: dict = {}

    def unary(name, fn, *shape):
        x = _leaf(rng, *shape)
        cases[name] = (lambda: reduce(fn(x)), [x])

    def binary(name, fn, sa, sb):
        a, b = _leaf(rng, *sa), _leaf(rng, *sb)
        cases[name] = (lambda: reduce(fn(a, b)), [a, b])

    binary("add", ad.add, (3, 4), (4,))
    binary("sub", ad.sub, (3, 4), (3, 4))
    binary("mul", ad.mul, (3, 4), (3, 1))
    a, b = _leaf(rng, 3, 4), Tensor(rng.uniform(1.0, 2.0, size=(3, 4)), requires_grad=True)
    cases["div"] = (lambda: reduce(ad.div(a, b)), [a, b])
    unary("neg", ad.neg, 2, 3)
    unary("scale", lambda x: ad.scale(x, -2.5), 2, 3)
    binary("matmul", ad.matmul, (3, 4), (4, 2))
    binary("matmul_batched", ad.matmul, (2, 3, 4), (4, 5))
    unary("sigmoid", ad.sigmoid, 3, 4)
    unary("tanh", ad.tanh, 3, 4)
    unary("relu", ad.relu, 3, 4)
    unary("exp", ad.exp, 3, 4)
    x_pos = Tensor(rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True)
    cases["log"] = (lambda: reduce(ad.log(x_pos)), [x_pos])
    unary("softmax_rows", ad.softmax_rows, 3, 4)
    mask = np.array([[True, False, True, True], [False, True, True, False], [True, True, True, True]])
    unary("softmax_rows_masked", lambda x: ad.softmax_rows(x, mask=mask), 3, 4)
    unary("log_softmax", ad.log_softmax, 3, 4)
    unary("cumsum", lambda x: ad.cumsum(x, axis=-1), 3, 4)
    unary("cumax", ad.cumax, 3, 5)
    unary("sum", lambda x: ad.sum(x, axis=0), 3, 4)
    unary("mean_over_axis", lambda x: ad.mean_over_axis(x, 1), 3, 4)
    unary("max_over_axis", lambda x: ad.max_over_axis(x, 0), 4, 3)
    mmask = np.array([[True], [False], [True], [True]])
    unary("max_over_axis_masked", lambda x: ad.max_over_axis(x, 0, mask=mmask), 4, 3)
    binary("concat_last_dim", lambda p, q: ad.concat_last_dim([p, q]), (3, 2), (3, 4))
    binary("stack", lambda p, q: ad.stack([p, q], axis=1), (3, 2), (3, 2))
    unary("reshape", lambda x: ad.reshape(x, (4, 3)), 3, 4)
    unary("transpose", lambda x: ad.transpose(x, (2, 0, 1)), 2, 3, 4)
    unary("getitem", lambda x: x[1:, ::2], 3, 4)
    unary("getitem_fancy", lambda x: x[np.array([0, 2, 0])], 3, 4)
    ids = np.array([[0, 2], [2, 1]])
    unary("embedding_lookup", lambda t: ad.embedding_lookup(t, ids), 3, 4)
    cond = rng.uniform(size=(3, 4)) > 0.5
    binary("where", lambda p, q: ad.where(cond, p, q), (3, 4), (3, 4))
    targets = np.array([2, 0, 1])
    logits = _leaf(rng, 3, 4)
    cases["cross_entropy_from_logits"] = (lambda: ad.cross_entropy_from_logits(logits, targets), [logits])
    logits_s = _leaf(rng, 3, 4)
    keep = np.array([True, False, True])
    cases["cross_entropy_from_logits_sum"] = (
        lambda: ad.cross_entropy_from_logits(logits_s, targets, mask=keep, reduction="sum"),
        [logits_s],
    )
    xn, gam, bet = _leaf(rng, 3, 5), _leaf(rng, 5), _leaf(rng, 5)
    cases["layer_norm"] = (lambda: reduce(ad.layer_norm(xn, gam, bet)), [xn, gam, bet])
    return cases


def check_ops(seed: int = 0, h: float = FD_STEP) -> dict[str, float]:
    """Worst relative error over the inputs of every catalogued op."""
    out = {}
    for name, (fn, params) in op_cases(seed).items():
        errs = check_gradients(fn, params, h=h)
        out[name] = max(errs.values())
    return out


# ---------------------------------------------------------------- whole model


@dataclass
class ModelCheck:
    errors: dict[str, float]
    n_params: int
    seconds: float

    @property
    def worst(self) -> float:
        return max(self.errors.values())


BUSH_TREE = "(S (NP (NNP Bush)) (VP (VBD held) (NP (DT a) (NN talk)) (PP (IN with) (NP (NNP Sharon)))) (. .))"


def model_gradcheck(
    composition: str = "attentive",
    interaction: str = "none",
    seed: int = 0,
    h: float = FD_STEP,
) -> ModelCheck:
    """Finite-difference check over every parameter of a small MG-SA encoder.

    Two layers, d_model=16, four heads (word, 2-gram, syntactic layers 1
    and 2), tag loss on, classifier on top, one sentence.
    """
    from .attention import Batch, Encoder, MgSaConfig
    from .objectives import TagVocabulary, phrase_tag_losses, total_loss
    from .partition import GranularitySpec, syntactic_partition
    from .treebank import parse_bracketed

    tree = parse_bracketed(BUSH_TREE)
    config = MgSaConfig(
        d_model=16,
        n_heads=4,
        head_assignment=[
            GranularitySpec.word(),
            GranularitySpec.ngram(2),
            GranularitySpec.syntactic(1),
            GranularitySpec.syntactic(2),
        ],
        composition=composition,
        interaction=interaction,
        mg_layers={1, 2},
        n_layers=2,
        ffn_dim=16,
        tag_loss_weight=0.5,
        seed=seed,
    )
    vocab = TagVocabulary(tag for k in (1, 2) for tag in syntactic_partition(tree, k).tags)
    model = Encoder(config, vocab_size=8, n_tags=len(vocab))
    rng = make_rng(seed + 1)
    ids = [int(i) for i in rng.integers(0, 8, size=len(tree))]
    head = Tensor(rng.uniform(-1, 1, size=(16, 5)), requires_grad=True, name="classifier")
    targets = rng.integers(0, 5, size=(1, len(tree)))
    batch = Batch.from_ids([ids], [tree])

    def loss_fn() -> Tensor:
        out = model(batch)
        task = ad.cross_entropy_from_logits(out.states @ head, targets)
        return total_loss(task, phrase_tag_losses(out.tags, vocab), config.tag_loss_weight)

    named = list(model.named_parameters()) + [("classifier", head)]
    start = time.perf_counter()
    errors = check_gradients(loss_fn, [p for _, p in named], [n for n, _ in named], h=h)
    return ModelCheck(errors, sum(p.size for _, p in named), time.perf_counter() - start)
