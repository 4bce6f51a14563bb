import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mgsa import autodiff as ad
from mgsa.attention import Batch, Encoder, MgSaConfig, default_head_assignment
from mgsa.autodiff import Tensor
from mgsa.gradcheck import check_gradients
from mgsa.nn import make_rng
from mgsa.objectives import UNK, TagVocabulary, phrase_tag_losses, tag_loss, total_loss


def log_softmax_oracle(z):
    # float-sum log-sum-exp, independent of the library's fused kernel
    out = []
    for row in z:
        m = max(row)
        lse = m + math.log(math.fsum(math.exp(v - m) for v in row))
        out.append([v - lse for v in row])
    return out


def test_uniform_logits_give_m_ln_v():
    # zero weights make every logit equal
    for m, v in [(1, 4), (2, 4), (5, 7), (13, 30)]:
        phrases = Tensor(make_rng(m).normal(size=(m, 3)))
        loss = tag_loss(phrases, [0] * m, Tensor(np.zeros((3, v))), Tensor(np.zeros(v)))
        assert abs(loss.item() - m * math.log(v)) < 1e-10


def test_small_uniform_examples():
    zeros = Tensor(np.zeros((2, 4)))
    assert abs(tag_loss(Tensor(np.ones((1, 2))), [3], zeros, Tensor(np.zeros(4))).item() - math.log(4)) < 1e-12
    assert abs(tag_loss(Tensor(np.ones((2, 2))), [0, 1], zeros, Tensor(np.zeros(4))).item() - 2 * math.log(4)) < 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(2, 9), st.integers(0, 2**31 - 1))
def test_random_tag_loss_matches_oracle(m, v, seed):
    rng = make_rng(seed)
    phrases, w, b = rng.normal(size=(m, 4)), rng.normal(size=(4, v)), rng.normal(size=v)
    gold = rng.integers(0, v, size=m)
    logits = (phrases @ w + b).tolist()
    expected = -math.fsum(row[g] for row, g in zip(log_softmax_oracle(logits), gold))
    got = tag_loss(Tensor(phrases), gold, Tensor(w), Tensor(b)).item()
    assert abs(got - expected) <= 1e-10 * max(1.0, abs(expected))


def test_masked_phrases_are_ignored():
    rng = make_rng(3)
    phrases, w, b = rng.normal(size=(2, 3, 4)), Tensor(rng.normal(size=(4, 5))), Tensor(rng.normal(size=5))
    gold = np.array([[1, 2, 0], [4, 0, 0]])
    mask = np.array([[True, True, False], [True, False, False]])
    batched = tag_loss(Tensor(phrases), gold, w, b, mask=mask).item()
    parts = tag_loss(Tensor(phrases[0, :2]), gold[0, :2], w, b).item() + tag_loss(Tensor(phrases[1, :1]), gold[1, :1], w, b).item()
    assert abs(batched - parts) < 1e-12


def test_tag_loss_is_nonnegative():
    rng = make_rng(4)
    for _ in range(50):
        loss = tag_loss(Tensor(rng.normal(size=(3, 4)) * 10), rng.integers(0, 6, 3), Tensor(rng.normal(size=(4, 6))),
                        Tensor(rng.normal(size=6)))
        assert loss.item() >= 0


def test_out_of_range_tag_is_error():
    with pytest.raises(ValueError):
        tag_loss(Tensor(np.ones((1, 2))), [4], Tensor(np.zeros((2, 4))), Tensor(np.zeros(4)))
    with pytest.raises(ValueError):
        tag_loss(Tensor(np.ones((2, 2))), [1], Tensor(np.zeros((2, 4))), Tensor(np.zeros(4)))


def test_tagger_gradients():
    rng = make_rng(5)
    phrases = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    w = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
    b = Tensor(rng.normal(size=5), requires_grad=True)
    errs = check_gradients(lambda: tag_loss(phrases, [0, 4, 2, 2], w, b), [phrases, w, b], ["x", "w", "b"], h=1e-5)
    assert max(errs.values()) < 1e-4


# ---------------------------------------------------------------- total loss


def test_total_loss_example():
    assert abs(total_loss(2.0, [1.0], 0.001).item() - 2.001) < 1e-12


def test_zero_weight_returns_task_loss_exactly():
    task = Tensor(np.array(1.2345678901234))
    assert total_loss(task, [Tensor(np.array(7.0))], 0.0).item() == 1.2345678901234


def test_total_loss_sums_groups_and_is_monotone_in_weight():
    values = [total_loss(1.0, [0.5, 1.5, 2.0], w).item() for w in (0.0, 0.001, 0.1, 1.0)]
    assert values == sorted(values)
    assert abs(values[-1] - 5.0) < 1e-12


def test_negative_weight_is_error():
    with pytest.raises(ValueError):
        total_loss(1.0, [1.0], -0.1)


def test_total_loss_gradient_flows_to_both_terms():
    task, tag = Tensor(np.array(2.0), requires_grad=True), Tensor(np.array(1.0), requires_grad=True)
    ad.backward(total_loss(task, [tag], 0.25))
    assert task.grad == 1.0 and tag.grad == 0.25


# ---------------------------------------------------------------- vocabulary and encoder wiring


def test_vocabulary_reserves_unknown():
    vocab = TagVocabulary(["NP", "VP", "NP"])
    assert vocab.to_list() == [UNK, "NP", "VP"]
    assert vocab.encode(["VP", "ADJP"]) == [2, 0]
    assert vocab.decode([1, 2]) == ["NP", "VP"]
    assert TagVocabulary.from_list(vocab.to_list()).to_list() == vocab.to_list()
    assert "NP" in vocab and len(vocab) == 3


def _encoder(family, n_tags):
    config = MgSaConfig(d_model=16, n_heads=4, head_assignment=default_head_assignment(4, family), seed=2)
    return Encoder(config, vocab_size=10, n_tags=n_tags)


def test_ngram_groups_have_no_tag_loss():
    out = _encoder("ngram", 6)(Batch.from_ids([[1, 2, 3, 4, 5]]))
    assert out.tags and phrase_tag_losses(out.tags, TagVocabulary()) == []


def test_syntactic_groups_give_one_loss_each(bush_short):
    vocab = TagVocabulary(["NP", "VP", "PP", "VBD", "S"])
    out = _encoder("syntactic", len(vocab))(Batch.from_ids([[1, 2, 3, 4, 5, 6]], [bush_short]))
    losses = phrase_tag_losses(out.tags, vocab)
    assert len(losses) == 3
    assert all(l.item() > 0 for l in losses)
