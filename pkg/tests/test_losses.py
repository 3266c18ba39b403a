import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from milnet import losses
from milnet import tensor as tn
from milnet.tensor import Tensor

LN2 = math.log(2)
SEEDS = range(20)
probs = st.floats(0.01, 0.99)


def _bag(seed, m=None):
    rng = np.random.default_rng(seed)
    m = m or int(rng.integers(3, 40))
    return rng.uniform(0.05, 0.95, size=m)


# -- closed forms ------------------------------------------------------------


@pytest.mark.parametrize("y", [1.0, 0.5, 0.0])
def test_bce_at_one_half(y):
    assert losses.bce(Tensor(0.5), y).item() == pytest.approx(LN2, abs=1e-6)


def test_max_squared_closed_form():
    assert losses.evaluate("max", [0.2, 0.9, 0.1], 1).loss == pytest.approx(0.005, abs=1e-9)


def test_noisy_or_closed_form():
    assert losses.noisy_or(Tensor([0.5, 0.5])).item() == pytest.approx(0.75, abs=1e-9)


def test_mmm_at_one_half():
    assert losses.evaluate("mmm", np.full(7, 0.5), 1).loss == pytest.approx(LN2, abs=1e-6)


def test_false_strong_is_mean_frame_bce():
    o = np.array([0.2, 0.7, 0.4])
    want = -np.mean(np.log(o))
    assert losses.evaluate("false_strong", o, 1).loss == pytest.approx(want, rel=1e-12)


def test_max_bce_closed_form():
    assert losses.evaluate("max_bce", [0.1, 0.8], 1).loss == pytest.approx(-math.log(0.8))


def test_bce_clipping_keeps_loss_finite():
    assert losses.bce(Tensor(0.0), 1.0).item() == pytest.approx(-math.log(1e-7), rel=1e-6)
    assert losses.bce(Tensor(1.0), 0.0).item() == pytest.approx(-math.log(1e-7), rel=1e-6)


def test_mmm_negative_bag_vanishes_only_at_floor():
    at_floor = losses.evaluate("mmm", np.full(5, 1e-7), 0).loss
    assert at_floor == pytest.approx(0.0, abs=1e-6)
    assert losses.evaluate("mmm", [1e-7, 1e-7, 0.3], 0).loss > 1e-2


def test_mmm_mean_ratio():
    o = np.full(4, 0.5)
    # only the mean term moves with the ratio
    lo = losses.evaluate("mmm", o, 1, mean_ratio=0.5).loss
    hi = losses.evaluate("mmm", o, 1, mean_ratio=1.0).loss
    assert hi == pytest.approx(lo)  # bce(0.5, t) is ln 2 for any target
    o = np.full(4, 0.25)
    got = losses.evaluate("mmm", o, 1, mean_ratio=0.2).loss
    b = lambda x, y: -(y * math.log(x) + (1 - y) * math.log(1 - x))
    assert got == pytest.approx((b(0.25, 1) + b(0.25, 0.2) + b(0.25, 0)) / 3)


# -- gradients ---------------------------------------------------------------


def test_gradient_sparsity_contrast():
    for seed in range(100):
        o = _bag(seed)
        g_max = losses.evaluate("max", o, 1).grad
        g_mmm = losses.evaluate("mmm", o, 1).grad
        assert np.count_nonzero(g_max) == 1
        assert np.count_nonzero(g_mmm) >= o.size - 2


@pytest.mark.parametrize("token", sorted(losses.LOSSES))
@pytest.mark.parametrize("label", [0, 1])
@pytest.mark.parametrize("seed", SEEDS)
def test_loss_gradcheck(token, label, seed):
    o = _bag(seed, m=12)
    fn = losses.get_loss(token)
    assert tn.gradcheck(lambda x: fn(x, label), [o]) < 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_noisy_or_gradcheck(seed):
    # long bags drive prod(1 - o) below what central differences resolve
    assert tn.gradcheck(losses.noisy_or, [_bag(seed, m=8)]) < 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_bce_gradcheck(seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.05, 0.95, size=(3, 4))
    y = rng.uniform(0, 1, size=(3, 4))
    assert tn.gradcheck(lambda a: tn.sum_(losses.bce(a, y)), [x]) < 1e-4


# -- properties --------------------------------------------------------------


@settings(max_examples=100, deadline=None)
@given(st.lists(probs, min_size=1, max_size=30), st.sampled_from(sorted(losses.LOSSES)),
       st.integers(0, 1), st.randoms(use_true_random=False))
def test_bag_losses_are_permutation_invariant(values, token, label, rnd):
    shuffled = list(values)
    rnd.shuffle(shuffled)
    a = losses.evaluate(token, values, label).loss
    b = losses.evaluate(token, shuffled, label).loss
    assert a == pytest.approx(b, rel=1e-12, abs=1e-15)


@settings(max_examples=200, deadline=None)
@given(st.lists(probs, min_size=1, max_size=30))
def test_noisy_or_dominates_max(values):
    assert losses.noisy_or(Tensor(values)).item() >= max(values) - 1e-12


@settings(max_examples=100, deadline=None)
@given(st.lists(probs, min_size=1, max_size=30), st.integers(0, 1))
def test_losses_non_negative(values, label):
    for token in losses.LOSSES:
        assert losses.evaluate(token, values, label).loss >= 0


# -- batch reductions and errors --------------------------------------------


def test_when_batch_loss_ignores_padding():
    rng = np.random.default_rng(0)
    pred = rng.uniform(0.1, 0.9, size=(2, 6))
    lengths, labels = [4, 6], [1, 0]
    base = losses.when_batch_loss(Tensor(pred), lengths, labels, "mmm").item()
    pred2 = pred.copy()
    pred2[0, 4:] = 0.999  # beyond bag 0's length
    assert losses.when_batch_loss(Tensor(pred2), lengths, labels, "mmm").item() == base
    want = (losses.evaluate("mmm", pred[0, :4], 1).loss + losses.evaluate("mmm", pred[1], 0).loss) / 2
    assert base == pytest.approx(want)


def test_who_batch_loss_is_mean_bce():
    p = np.array([[0.2, 0.9], [0.6, 0.5]])
    t = np.array([[0, 1], [1, 0]])
    want = -np.mean(t * np.log(p) + (1 - t) * np.log(1 - p))
    assert losses.who_batch_loss(Tensor(p), t).item() == pytest.approx(want)
    with pytest.raises(ValueError):
        losses.who_batch_loss(Tensor(p), t[:1])


def test_errors():
    with pytest.raises(ValueError):
        losses.get_loss("median")
    with pytest.raises(ValueError):
        losses.evaluate("mmm", [0.5], 2)
    with pytest.raises(ValueError):
        losses.evaluate("mmm", [], 1)
    with pytest.raises(ValueError):
        losses.bce(Tensor(0.5), 1.5)
