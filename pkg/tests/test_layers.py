import numpy as np
import pytest

from milnet import layers as ly
from milnet import tensor as tn
from milnet.tensor import ShapeError, Tape, Tensor

SEEDS = range(20)


def _proj(out, seed=5):
    return (out * Tensor(np.random.default_rng(seed).normal(size=out.shape))).sum()


# -- architecture ------------------------------------------------------------


def test_trunk_reduces_frequency_40_8_2_1():
    trunk, shapes = ly.build_layers(ly.trunk_specs(64), (432, 40, 1),
                                    np.random.default_rng(0), "trunk")
    pooled = [s for layer, s in zip(trunk.layers, shapes) if isinstance(layer, ly.MaxPool)]
    assert [s[1] for s in pooled] == [8, 2, 1]
    assert all(s[0] == 432 for s in shapes)
    assert shapes[-1] == (432, 1, 64)


def test_trunk_layer_sequence_and_l2():
    specs = ly.trunk_specs()
    kinds = [s.kind for s in specs]
    assert kinds.count("conv2d") == 6 and kinds.count("maxpool") == 3
    assert [s.size for s in specs if s.kind == "maxpool"] == [(1, 5), (1, 4), (1, 2)]
    assert all(s.l2 == 0.001 and s.feature_maps == 64 for s in specs if s.kind == "conv2d")


def test_when_head_specs():
    specs = ly.when_head_specs()
    gru = [s for s in specs if s.kind == "bigru"]
    dense = [s for s in specs if s.kind == "timedense"]
    assert [(s.size, s.activation, s.l2) for s in gru] == [(64, "tanh", 0.01)] * 2
    assert [(s.size, s.activation, s.l2) for s in dense] == [(64, "relu", 0.01),
                                                             (1, "sigmoid", 0.01)]


def test_who_head_specs():
    (_, dense) = ly.who_head_specs(87)
    assert (dense.size, dense.activation, dense.l2) == (87, "sigmoid", 0.001)


def test_trunk_parameter_count():
    trunk, _ = ly.build_trunk(np.random.default_rng(0))
    n = {name: p.size for name, p in trunk.named_params()}
    conv = sum(v for k, v in n.items() if ".conv2d" in k)
    bn = sum(v for k, v in n.items() if ".batchnorm" in k)
    assert conv == 640 + 5 * 36928
    assert bn == 6 * 2 * 64


def test_when_output_length_432():
    model = ly.build_when(432, 40, fmaps=4, gru_units=4, dense_units=4)
    out = model.forward(np.zeros((2, 432, 40), np.float32))
    assert out.shape == (2, 432)


def test_who_output_87_labels():
    model = ly.build_who(432, 40, 87, fmaps=4)
    out = model.forward(np.zeros((2, 432, 40), np.float32))
    assert out.shape == (2, 87)
    assert np.all((out.data > 0) & (out.data < 1))


def test_full_size_graphs_build():
    when = ly.build_when(432, 40)
    who = ly.build_who(432, 40, 87)
    assert when.parameters()["when.bigru1.fwd_kernel"].shape == (64, 192)
    assert who.parameters()["who.dense1.kernel"].shape == (64, 87)


def test_bad_band_count_and_label_count():
    with pytest.raises(ValueError):
        ly.build_when(432, 41)
    with pytest.raises(ValueError):
        ly.build_who(432, 40, 0)
    model = ly.build_who(num_labels=3, fmaps=2)
    with pytest.raises(ShapeError):
        model.forward(np.zeros((1, 10, 39), np.float32))


def test_zero_weights_give_one_half():
    model = ly.build_when(fmaps=2, gru_units=2, dense_units=2)
    for p in model.parameters().values():
        p.data[...] = 0
    out = model.forward(np.random.default_rng(0).normal(size=(2, 10, 40)).astype(np.float32))
    np.testing.assert_allclose(out.data, 0.5)


def test_initialisers():
    rng = np.random.default_rng(0)
    w = ly.glorot_uniform(rng, (30, 20), 30, 20, np.float64)
    assert np.abs(w).max() <= np.sqrt(6 / 50)
    q = ly.orthogonal(rng, 8, 24, np.float64)
    np.testing.assert_allclose(q @ q.T, np.eye(8), atol=1e-12)


def test_l2_covers_kernels_only():
    model = ly.build_when(fmaps=2, gru_units=2, dense_units=2)
    names = {id(p): n for n, p in model.parameters().items()}
    covered = sorted(names[id(p)] for _, p in model.l2_terms())
    assert all(n.endswith("kernel") and "recurrent" not in n for n in covered)
    assert len(covered) == 6 + 4 + 2
    expected = sum(c * float((p.data.astype(np.float64) ** 2).sum()) for c, p in model.l2_terms())
    assert ly.regularisation(model).item() == pytest.approx(expected, rel=1e-5)


# -- batchnorm ---------------------------------------------------------------


def test_batchnorm_train_normalises():
    x = np.random.default_rng(1).normal(3.0, 2.0, size=(4, 6, 5, 3))
    g, b = Tensor(np.ones(3)), Tensor(np.zeros(3))
    out = ly.batchnorm_forward(Tensor(x), g, b, np.zeros(3), np.ones(3)).data
    np.testing.assert_allclose(out.mean(axis=(0, 1, 2)), 0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=(0, 1, 2)), 1, atol=1e-3)


def test_batchnorm_running_stats_update():
    x = np.random.default_rng(2).normal(1.0, 3.0, size=(8, 2))
    rm, rv = np.zeros(2), np.ones(2)
    ly.batchnorm_forward(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv)
    np.testing.assert_allclose(rm, 0.01 * x.mean(axis=0))
    np.testing.assert_allclose(rv, 0.99 + 0.01 * x.var(axis=0, ddof=1))


def test_batchnorm_eval_uses_running_stats():
    x = np.random.default_rng(3).normal(size=(5, 2))
    rm, rv = np.array([1.0, -1.0]), np.array([4.0, 0.25])
    out = ly.batchnorm_forward(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv,
                               mode="eval").data
    np.testing.assert_allclose(out, (x - rm) / np.sqrt(rv + 1e-3))


@pytest.mark.parametrize("seed", SEEDS)
def test_batchnorm_gradcheck(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(4, 3, 5, 2))
    g, b = rng.normal(size=2) + 1.5, rng.normal(size=2)

    def f(xx, gg, bb):
        return _proj(ly.batchnorm_forward(xx, gg, bb, np.zeros(2), np.ones(2)))
    assert tn.gradcheck(f, [x, g, b]) < 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_batchnorm_eval_gradcheck(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, 4, 2))
    rm, rv = rng.normal(size=2), rng.uniform(0.5, 2, size=2)

    def f(xx, gg, bb):
        return _proj(ly.batchnorm_forward(xx, gg, bb, rm, rv, mode="eval"))
    assert tn.gradcheck(f, [x, rng.normal(size=2), rng.normal(size=2)]) < 1e-4


# -- GRU ---------------------------------------------------------------------


def _gru_params(rng, d, h):
    return rng.normal(size=(d, 3 * h)) * 0.5, rng.normal(size=(h, 3 * h)) * 0.5, rng.normal(size=3 * h) * 0.1


def _gru_reference(x, w, u, b):
    """Step-by-step update with gates z, r and candidate c."""
    bsz, t, _ = x.shape
    h = u.shape[0]
    out = np.zeros((bsz, t, h))
    hp = np.zeros((bsz, h))
    sig = lambda v: 1 / (1 + np.exp(-v))
    for s in range(t):
        xp = x[:, s] @ w + b
        z = sig(xp[:, :h] + hp @ u[:, :h])
        r = sig(xp[:, h:2 * h] + hp @ u[:, h:2 * h])
        c = np.tanh(xp[:, 2 * h:] + (r * hp) @ u[:, 2 * h:])
        hp = z * hp + (1 - z) * c
        out[:, s] = hp
    return out


def test_gru_matches_reference_recurrence():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 6, 3))
    w, u, b = _gru_params(rng, 3, 4)
    out = ly.gru(Tensor(x), Tensor(w), Tensor(u), Tensor(b)).data
    np.testing.assert_allclose(out, _gru_reference(x, w, u, b), atol=1e-12)


def test_gru_zero_weights_give_zero_state():
    out = ly.gru(Tensor(np.ones((2, 5, 3))), Tensor(np.zeros((3, 12))),
                 Tensor(np.zeros((4, 12))), Tensor(np.zeros(12))).data
    np.testing.assert_array_equal(out, 0)


def test_bigru_time_reversal_swaps_directions():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 5, 3))
    fwd = [Tensor(a) for a in _gru_params(rng, 3, 4)]
    bwd = [Tensor(a) for a in _gru_params(rng, 3, 4)]
    out = ly.bigru_forward(Tensor(x), fwd, bwd).data
    swapped = ly.bigru_forward(Tensor(x[:, ::-1]), bwd, fwd).data[:, ::-1]
    np.testing.assert_allclose(out, np.concatenate([swapped[..., 4:], swapped[..., :4]], -1),
                               atol=1e-12)


@pytest.mark.parametrize("reverse", [False, True])
@pytest.mark.parametrize("seed", SEEDS)
def test_gru_gradcheck(seed, reverse):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 5, 3))
    w, u, b = _gru_params(rng, 3, 4)

    def f(xx, ww, uu, bb):
        return _proj(ly.gru(xx, ww, uu, bb, reverse=reverse))
    assert tn.gradcheck(f, [x, w, u, b]) < 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_dense_gradcheck(seed):
    rng = np.random.default_rng(seed)
    layer = ly.Dense("d", 3, 2, "sigmoid", 0.0, rng, np.float64)

    def f(xx):
        return _proj(layer(xx))
    assert tn.gradcheck(f, [rng.normal(size=(2, 4, 3))]) < 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_globalavgpool_gradcheck(seed):
    x = np.random.default_rng(seed).normal(size=(2, 5, 1, 3))
    assert tn.gradcheck(lambda a: _proj(ly.GlobalAvgPool("g")(a)), [x]) < 1e-4


def test_miniature_when_gradcheck():
    """Whole-graph check at T=8 with 4 maps and GRU width 4."""
    model = ly.build_when(fmaps=4, gru_units=4, dense_units=4, seed=0, dtype=np.float64)
    x = Tensor(np.random.default_rng(1).normal(size=(2, 8, 40)))
    params = list(model.parameters().values())
    with Tape() as tape:
        loss = _proj(model.forward(x, train=True))
    grads = tape.backward(loss, params)
    # three random entries per tensor keep the finite differences cheap
    rng = np.random.default_rng(2)
    worst = 0.0
    for p in params:
        flat, g = p.data.reshape(-1), grads[p].reshape(-1)
        for k in rng.choice(flat.size, size=min(3, flat.size), replace=False):
            orig = flat[k]
            flat[k] = orig + 1e-5
            fp = _proj(model.forward(x, train=True)).item()
            flat[k] = orig - 1e-5
            fm = _proj(model.forward(x, train=True)).item()
            flat[k] = orig
            num = (fp - fm) / 2e-5
            # conv biases feed batchnorm, so their true gradient is zero;
            # the floor keeps 1e-17 round-off from reading as a mismatch
            worst = max(worst, abs(num - g[k]) / max(abs(num), abs(g[k]), 1e-6))
    assert worst < 1e-3


# -- checkpoints -------------------------------------------------------------


def test_checkpoint_round_trip_and_byte_stability(tmp_path):
    model = ly.build_when(fmaps=2, gru_units=2, dense_units=2, seed=3)
    model.trunk.layers[1].buffers["moving_mean"][:] = [0.5, -0.25]
    ly.save_checkpoint(model, tmp_path / "a.ckpt")
    back = ly.load_checkpoint(tmp_path / "a.ckpt")
    for (n, p), (m, q) in zip(model.parameters().items(), back.parameters().items()):
        assert n == m
        np.testing.assert_array_equal(p.data, q.data)
    np.testing.assert_array_equal(back.trunk.layers[1].buffers["moving_mean"], [0.5, -0.25])
    ly.save_checkpoint(back, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    x = np.random.default_rng(0).normal(size=(1, 6, 40)).astype(np.float32)
    np.testing.assert_array_equal(model.predict(x), back.predict(x))


def test_checkpoint_rejects_foreign_file(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b'{"format": "other"}\n')
    with pytest.raises(ValueError):
        ly.read_checkpoint(tmp_path / "x.ckpt")


def test_same_seed_same_weights():
    a = ly.build_who(num_labels=5, fmaps=3, seed=11)
    b = ly.build_who(num_labels=5, fmaps=3, seed=11)
    for p, q in zip(a.parameters().values(), b.parameters().values()):
        np.testing.assert_array_equal(p.data, q.data)
