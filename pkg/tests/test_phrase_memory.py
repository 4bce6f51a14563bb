import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mgsa import autodiff as ad
from mgsa.autodiff import Tensor
from mgsa.gradcheck import check_gradients
from mgsa.nn import make_rng
from mgsa.partition import ConfigError, GranularitySpec
from mgsa.phrase_memory import (
    Composer,
    CompositionKind,
    InteractionKind,
    LSTMCell,
    OnLstmCell,
    PhraseLayout,
    PhraseMemory,
    build_phrase_memory,
    compose,
    interact,
    run_recurrence,
)
from mgsa.partition import ngram_partition

KINDS = list(CompositionKind)
INTERACTIONS = list(InteractionKind)


# ---------------------------------------------------------------- composition


def test_maxpool_columnwise():
    out = compose(Tensor([[1.0, 5.0], [3.0, 2.0]]), CompositionKind.MAX_POOL)
    np.testing.assert_array_equal(out.data, [[3.0, 5.0]])


def test_maxpool_ignores_padding():
    out = compose(Tensor([[1.0, 5.0], [9.0, 9.0]]), CompositionKind.MAX_POOL, pad_mask=[False, True])
    np.testing.assert_array_equal(out.data, [[1.0, 5.0]])


def test_attentive_single_row_is_value_projection():
    rng = make_rng(1)
    composer = Composer(rng, CompositionKind.ATTENTIVE_POOL, 3)
    row = Tensor([[0.3, -1.2, 0.8]])
    out, weights = composer(row.reshape(1, 1, 3), np.ones((1, 1), dtype=bool), return_weights=True)
    assert weights.data.tolist() == [[1.0]]
    np.testing.assert_allclose(out.data, row.data @ composer.w_v.data, atol=1e-15)


def test_recurrent_is_last_unpadded_state():
    rng = make_rng(2)
    composer = Composer(rng, CompositionKind.RECURRENT, 3)
    x = Tensor(make_rng(3).normal(size=(4, 3)))
    full = compose(x[:2], CompositionKind.RECURRENT, composer=composer)
    padded = compose(x, CompositionKind.RECURRENT, pad_mask=[False, False, True, True], composer=composer)
    np.testing.assert_array_equal(full.data, padded.data)


def test_all_padded_slice_is_error():
    with pytest.raises(ValueError):
        compose(Tensor(np.ones((2, 2))), CompositionKind.MAX_POOL, pad_mask=[True, True])


@pytest.mark.parametrize("kind", KINDS)
def test_padding_never_leaks(kind):
    rng = make_rng(4)
    composer = Composer(rng, kind, 4)
    base = make_rng(5).normal(size=(5, 4))
    pad = [False, False, False, True, True]
    a = compose(Tensor(base), kind, pad_mask=pad, composer=composer)
    other = base.copy()
    other[3:] = make_rng(6).normal(size=(2, 4)) * 100
    b = compose(Tensor(other), kind, pad_mask=pad, composer=composer)
    assert a.data.tobytes() == b.data.tobytes()


@pytest.mark.parametrize("kind", KINDS)
def test_composition_permutation_covariant(kind):
    rng = make_rng(7)
    composer = Composer(rng, kind, 4)
    slices = Tensor(make_rng(8).normal(size=(1, 5, 3, 4)))
    mask = np.array([[[1, 1, 1], [1, 0, 0], [1, 1, 0], [1, 1, 1], [1, 0, 0]]], dtype=bool)
    out = composer(slices, mask).data
    perm = np.array([3, 0, 4, 2, 1])
    permuted = composer(Tensor(slices.data[:, perm]), mask[:, perm]).data
    np.testing.assert_array_equal(permuted, out[:, perm])


# ---------------------------------------------------------------- interaction


def test_no_interaction_is_identity():
    memory = Tensor(make_rng(9).normal(size=(4, 3)))
    assert interact(memory, InteractionKind.NONE) is memory


@pytest.mark.parametrize("kind", [InteractionKind.RECURRENT_CHAIN, InteractionKind.ORDERED_NEURONS_CHAIN])
def test_interaction_keeps_shape_and_is_causal(kind):
    memory = make_rng(10).normal(size=(5, 3))
    rng_seed = 11
    out = interact(Tensor(memory), kind, rng=make_rng(rng_seed)).data
    assert out.shape == (5, 3)
    changed = memory.copy()
    changed[4] += 10.0
    again = interact(Tensor(changed), kind, rng=make_rng(rng_seed)).data
    np.testing.assert_array_equal(out[:4], again[:4])


def test_cumax_zeros():
    assert ad.cumax(Tensor([0.0, 0.0])).data.tolist() == [0.5, 1.0]


def test_master_forget_gate_monotone_on_random_input():
    cell = OnLstmCell(make_rng(12), 6, 6)
    rng = make_rng(13)
    for _ in range(50):
        x = Tensor(rng.normal(size=(3, 6)) * 3)
        h = Tensor(rng.normal(size=(3, 6)))
        master_f, master_i = cell.master_gates(x, h)
        f = master_f.data
        assert np.all(np.diff(f, axis=-1) >= 0)
        assert np.all(f >= 0) and np.all(f[..., -1] <= 1 + 1e-12)
        # the input gate is the complement of a cumax: it falls along the axis
        i = master_i.data
        assert np.all(np.diff(i, axis=-1) <= 0) and np.all(i >= -1e-12) and np.all(i <= 1)


def test_recurrence_mask_carries_state():
    cell = LSTMCell(make_rng(14), 3, 3)
    xs = Tensor(make_rng(15).normal(size=(2, 4, 3)))
    mask = np.array([[1, 1, 0, 0], [1, 1, 1, 1]], dtype=bool)
    states = run_recurrence(cell, xs, mask)
    np.testing.assert_array_equal(states[1].data[0], states[3].data[0])
    alone = run_recurrence(cell, Tensor(xs.data[:1, :2]))
    np.testing.assert_array_equal(alone[-1].data[0], states[-1].data[0])


# ---------------------------------------------------------------- build_phrase_memory


def test_word_level_returns_input():
    h = Tensor(make_rng(16).normal(size=(5, 8)))
    memory, part = build_phrase_memory(h, GranularitySpec.word())
    assert memory is h and part.spans == [(i, i + 1) for i in range(5)]


def test_ngram_memory_rows():
    h = Tensor(make_rng(17).normal(size=(6, 8)))
    memory, part = build_phrase_memory(
        h, GranularitySpec.ngram(2), composition=CompositionKind.MAX_POOL, interaction=InteractionKind.NONE
    )
    assert memory.shape[0] == 3 and len(part) == 3


def test_bush_syntactic_memory(bush_short):
    h = Tensor(make_rng(18).normal(size=(6, 8)))
    memory, part = build_phrase_memory(h, GranularitySpec.syntactic(2), tree=bush_short)
    assert memory.shape[0] == 4 and part.tags == ["NP", "VBD", "NP", "PP"]


def test_syntactic_needs_tree():
    with pytest.raises(ConfigError):
        build_phrase_memory(Tensor(np.ones((3, 4))), GranularitySpec.syntactic(1))


def test_batched_matches_single_sentence(bush_short):
    """Each sentence's memory is unaffected by its batch neighbours."""
    module = PhraseMemory(make_rng(19), GranularitySpec.ngram(3), 8, 4, interaction=InteractionKind.ORDERED_NEURONS_CHAIN)
    rng = make_rng(20)
    a, b = rng.normal(size=(7, 8)), rng.normal(size=(4, 8))
    alone, _ = build_phrase_memory(Tensor(b), GranularitySpec.ngram(3), module=module,
                                   interaction=InteractionKind.ORDERED_NEURONS_CHAIN)
    h = np.zeros((2, 7, 8))
    h[0], h[1, :4] = a, b
    layout = PhraseLayout.build([ngram_partition(7, 3), ngram_partition(4, 3)], 7)
    batched, _ = module(Tensor(h), layout)
    np.testing.assert_allclose(batched.data[1, :2], alone.data, atol=1e-14)


@pytest.mark.parametrize("composition", KINDS)
@pytest.mark.parametrize("interaction", INTERACTIONS)
def test_gradients_flow_through_every_variant(composition, interaction, bush_short):
    spec = GranularitySpec.syntactic(2)
    module = PhraseMemory(make_rng(21), spec, 6, 3, composition, interaction)
    h = Tensor(make_rng(22).uniform(-1, 1, size=(6, 6)), requires_grad=True)
    w = Tensor(make_rng(23).uniform(-1, 1, size=(4, 3)))

    def loss():
        memory, _ = build_phrase_memory(h, spec, bush_short, composition, interaction, module=module)
        return ad.sum(ad.tanh(memory) * w)

    named = list(module.named_parameters()) + [("h", h)]
    errs = check_gradients(loss, [p for _, p in named], [n for n, _ in named])
    assert max(errs.values()) < 1e-3, errs
    assert all(p.grad is not None and np.any(p.grad) for _, p in named)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 12), st.integers(2, 5), st.sampled_from(KINDS))
def test_ngram_memory_length(t, n, kind):
    h = Tensor(make_rng(t * 31 + n).normal(size=(t, 4)))
    memory, part = build_phrase_memory(h, GranularitySpec.ngram(n), composition=kind)
    assert memory.shape == (-(-t // n), 4) and np.all(np.isfinite(memory.data))
