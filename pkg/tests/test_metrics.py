import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from milnet import metrics
from milnet.metrics import MetricError, auc


def pairwise_auc(scores, truth):
    """O(n^2) definition: fraction of (pos, neg) pairs ranked correctly,
    ties worth one half."""
    s = np.asarray(scores, float)
    y = np.asarray(truth, bool)
    pos, neg = s[y], s[~y]
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return wins / (pos.size * neg.size)


def test_perfect_reversed_and_tied():
    y = [0, 0, 1, 1]
    assert auc([0.1, 0.2, 0.8, 0.9], y) == 1.0
    assert auc([0.9, 0.8, 0.2, 0.1], y) == 0.0
    assert auc([0.5] * 4, y) == 0.5


def test_single_class_raises():
    with pytest.raises(MetricError, match="single class"):
        auc([0.1, 0.2], [1, 1])
    with pytest.raises(MetricError):
        auc([0.1, 0.2], [0, 0])
    with pytest.raises(MetricError):
        auc([0.1], [0, 1])


def test_matches_pairwise_oracle_on_200_sets():
    rng = np.random.default_rng(0)
    for i in range(200):
        n = int(rng.integers(2, 501))
        # coarse rounding forces plenty of ties
        s = np.round(rng.normal(size=n), int(rng.integers(0, 3)))
        y = rng.random(n) < rng.uniform(0.1, 0.9)
        y[0], y[1] = True, False
        assert auc(s, y) == pytest.approx(pairwise_auc(s, y), abs=1e-12), i


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(-20, 20), st.booleans()), min_size=2, max_size=60))
def test_monotone_transform_and_flip(pairs):
    s = np.array([p[0] for p in pairs], float)
    y = np.array([p[1] for p in pairs])
    if y.all() or not y.any():
        return
    base = auc(s, y)
    assert auc(np.exp(s / 7.0) * 3 - 1, y) == pytest.approx(base, abs=1e-12)
    assert auc(-s, y) == pytest.approx(1 - base, abs=1e-12)
    assert auc(s, ~y) == pytest.approx(1 - base, abs=1e-12)


def test_when_report_excludes_padding():
    scores = np.array([[0.9, 0.1, 0.2, 0.99], [0.3, 0.8, 0.7, 0.0]])
    grids = np.array([[1, 0, 0, 0], [0, 1, 1, 0]], bool)
    rep = metrics.when_report(scores, grids, [3, 4])
    # frame (0, 3) is padding: its 0.99 would otherwise outrank every positive
    assert (rep["n_pos"], rep["n_neg"]) == (3, 4)
    flat_s = [0.9, 0.1, 0.2, 0.3, 0.8, 0.7, 0.0]
    flat_y = [1, 0, 0, 0, 1, 1, 0]
    assert rep["auc_micro"] == pytest.approx(pairwise_auc(flat_s, flat_y))
    assert rep["auc_macro"] == pytest.approx(1.0)


def test_micro_and_macro_differ():
    # each recording ranks perfectly on its own, but their score scales clash
    scores = np.array([[0.2, 0.1, 0.1], [0.9, 0.8, 0.8]])
    grids = np.array([[1, 0, 0], [1, 0, 0]], bool)
    rep = metrics.when_report(scores, grids, [3, 3])
    assert rep["auc_macro"] == 1.0
    assert rep["auc_micro"] < 1.0


def test_who_report_excludes_absent_classes():
    scores = np.array([[0.9, 0.5, 0.2], [0.1, 0.4, 0.3], [0.8, 0.6, 0.1]])
    targets = np.array([[1, 0, 0], [0, 0, 0], [1, 1, 0]])
    rep = metrics.who_report(scores, targets, ["a", "b", "c"])
    assert rep["excluded_classes"] == ["c"]
    assert rep["n_pos"] + rep["n_neg"] == 6
    assert rep["auc_micro"] == pytest.approx(
        pairwise_auc(scores[:, :2].ravel(), targets[:, :2].ravel()))
    assert rep["auc_macro"] == pytest.approx((1.0 + 1.0) / 2)


def test_write_metrics_is_byte_stable(tmp_path):
    rep = [metrics.who_report(np.eye(3) * 0.5 + 0.2, np.eye(3), ["x", "y", "z"])]
    metrics.write_metrics(tmp_path / "a.json", rep)
    metrics.write_metrics(tmp_path / "b.json", [dict(reversed(list(rep[0].items())))])
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
