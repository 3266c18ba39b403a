"""Layers and the WHEN / WHO model builders.

All activations are channels-last: a feature block enters as B x T x F,
is lifted to B x T x F x 1 for the convolutional trunk and leaves the
trunk as B x T x 1 x C.  The trunk is six 3x3 'same' convolutions, each
followed by batch normalisation and ReLU, with (1, 5), (1, 4), (1, 2)
max-pools after the 2nd, 4th and 6th blocks so that 40 bands shrink to
8, 2 and finally 1 while T is left untouched.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from milnet import kernels
from milnet import tensor as tn
from milnet.tensor import ShapeError, Tensor

N_BANDS = 40
BN_MOMENTUM = 0.99
BN_EPSILON = 1e-3


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    size: tuple | int | None = None
    feature_maps: int | None = None
    activation: str | None = None
    l2: float = 0.0

    def __post_init__(self):
        if self.l2 < 0:
            raise ValueError(f"l2 coefficient must be >= 0, got {self.l2}")


def trunk_specs(fmaps=64):
    specs = []
    for pool in (5, 4, 2):
        for _ in range(2):
            specs += [LayerSpec("conv2d", (3, 3), fmaps, "linear", 0.001),
                      LayerSpec("batchnorm"),
                      LayerSpec("activation", activation="relu")]
        specs.append(LayerSpec("maxpool", (1, pool)))
    return specs


def when_head_specs(gru_units=64, dense_units=64):
    return [LayerSpec("reshape"),
            LayerSpec("bigru", gru_units, activation="tanh", l2=0.01),
            LayerSpec("bigru", gru_units, activation="tanh", l2=0.01),
            LayerSpec("timedense", dense_units, activation="relu", l2=0.01),
            LayerSpec("timedense", 1, activation="sigmoid", l2=0.01),
            LayerSpec("flatten")]


def who_head_specs(num_labels):
    return [LayerSpec("globalavgpool"),
            LayerSpec("dense", num_labels, activation="sigmoid", l2=0.001)]


# -- initialisers ------------------------------------------------------------


def glorot_uniform(rng, shape, fan_in, fan_out, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def orthogonal(rng, rows, cols, dtype):
    a = rng.normal(size=(max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return np.ascontiguousarray(q[:rows, :cols], dtype=dtype)


def _param(data, name):
    return Tensor(data, requires_grad=True, name=name)


# -- fused primitives --------------------------------------------------------


def batchnorm_forward(x, gamma, beta, running_mean, running_var, mode="train",
                      momentum=BN_MOMENTUM, eps=BN_EPSILON):
    """Normalise over every axis but the last (the feature-map axis).

    In train mode the minibatch statistics are used and ``running_mean`` /
    ``running_var`` (numpy arrays) are updated in place.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"batchnorm: unknown mode {mode!r}")
    xd = x.data
    c = xd.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm: input {xd.shape} vs scale {gamma.shape}")
    n = xd.size // c
    if mode == "train":
        if n < 2:
            raise ValueError("batchnorm: train mode needs more than one value per feature map")
        mu = tn.colsum(xd, (c,)) / n
        centred = xd - mu
        var = tn.colsum(centred * centred, (c,)) / n
        running_mean *= momentum
        running_mean += (1 - momentum) * mu
        running_var *= momentum
        running_var += (1 - momentum) * var * (n / (n - 1))
    else:
        if running_mean is None or running_var is None:
            raise ValueError("batchnorm: eval mode needs running statistics")
        mu, var = running_mean, running_var
        centred = xd - mu.astype(xd.dtype)
    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = centred * inv
    gd, bd = gamma.data, beta.data
    out = xhat * gd + bd

    def backward(g):
        dgamma = tn.colsum(g * xhat, (c,)) if gamma.requires_grad else None
        sum_g = tn.colsum(g, (c,))
        dbeta = sum_g if beta.requires_grad else None
        if mode == "train":
            # dxhat = g * gamma; its column sums follow from those of g
            dx = (gd * inv / n) * (n * g - sum_g - xhat * tn.colsum(g * xhat, (c,)))
        else:
            dx = g * (gd * inv)
        return dx, dgamma, dbeta

    return tn.make_op("batchnorm", out, (x, gamma, beta), backward)


def gru(x, kernel, recurrent, bias, reverse=False):
    """One GRU direction over a B x T x D sequence -> B x T x H."""
    xd = x.data
    if xd.ndim != 3 or kernel.shape[0] != xd.shape[2] or kernel.shape[1] % 3:
        raise ShapeError(f"gru: input {xd.shape} and kernel {kernel.shape} do not conform")
    h = kernel.shape[1] // 3
    if recurrent.shape != (h, 3 * h) or bias.shape != (3 * h,):
        raise ShapeError(f"gru: recurrent {recurrent.shape} / bias {bias.shape} "
                         f"do not match kernel {kernel.shape}")
    b, t, d = xd.shape
    wd, ud = kernel.data, recurrent.data
    xp = np.ascontiguousarray(xd @ wd + bias.data)
    hs, zs, rs, cs = kernels.gru_forward_scan(xp, ud, reverse)

    def backward(g):
        dxp, du = kernels.gru_backward_scan(g, ud, hs, zs, rs, cs, reverse)
        dx = dxp @ wd.T if x.requires_grad else None
        dw = xd.reshape(-1, d).T @ dxp.reshape(-1, 3 * h)
        db = dxp.sum(axis=(0, 1))
        return dx, dw, du, db

    return tn.make_op("gru", hs, (x, kernel, recurrent, bias), backward)


def bigru_forward(x, fwd, bwd):
    """Bidirectional GRU; ``fwd``/``bwd`` are (kernel, recurrent, bias)
    triples.  Per-step outputs are concatenated forward-first."""
    return tn.concat([gru(x, *fwd), gru(x, *bwd, reverse=True)], axis=-1)


# -- layers ------------------------------------------------------------------


class Layer:
    name = ""

    def __init__(self):
        self.params: OrderedDict[str, Tensor] = OrderedDict()
        self.buffers: OrderedDict[str, np.ndarray] = OrderedDict()
        self.l2: dict[str, float] = {}

    def out_shape(self, shape):
        return shape

    def __call__(self, x, train=False):
        raise NotImplementedError


class Conv2D(Layer):
    def __init__(self, name, in_channels, maps, kernel, l2, rng, dtype):
        super().__init__()
        self.name = name
        kh, kw = kernel
        self.maps = maps
        self.params["kernel"] = _param(glorot_uniform(
            rng, (kh, kw, in_channels, maps), kh * kw * in_channels, kh * kw * maps, dtype),
            f"{name}.kernel")
        self.params["bias"] = _param(np.zeros(maps, dtype), f"{name}.bias")
        self.l2["kernel"] = l2

    def out_shape(self, shape):
        t, f, _ = shape
        return (t, f, self.maps)

    def __call__(self, x, train=False):
        return tn.conv2d(x, self.params["kernel"]) + self.params["bias"]


class BatchNorm(Layer):
    def __init__(self, name, channels, dtype):
        super().__init__()
        self.name = name
        self.params["gamma"] = _param(np.ones(channels, dtype), f"{name}.gamma")
        self.params["beta"] = _param(np.zeros(channels, dtype), f"{name}.beta")
        self.buffers["moving_mean"] = np.zeros(channels, dtype)
        self.buffers["moving_var"] = np.ones(channels, dtype)

    def __call__(self, x, train=False):
        return batchnorm_forward(x, self.params["gamma"], self.params["beta"],
                                 self.buffers["moving_mean"], self.buffers["moving_var"],
                                 "train" if train else "eval")


_ACTIVATIONS = {"relu": tn.relu, "sigmoid": tn.sigmoid, "tanh": tn.tanh,
                "linear": lambda x: x}


class Activation(Layer):
    def __init__(self, name, fn):
        super().__init__()
        self.name = name
        self.fn = _ACTIVATIONS[fn]

    def __call__(self, x, train=False):
        return self.fn(x)


class MaxPool(Layer):
    def __init__(self, name, window):
        super().__init__()
        self.name = name
        self.window = tuple(window)

    def out_shape(self, shape):
        t, f, c = shape
        kt, kf = self.window
        if t is not None and t % kt or f % kf:
            raise ShapeError(f"{self.name}: window {self.window} does not tile {shape}")
        return (None if t is None else t // kt, f // kf, c)

    def __call__(self, x, train=False):
        return tn.maxpool2d(x, self.window)


class Reshape(Layer):
    """B x T x F x C -> B x T x (F*C)."""

    def __init__(self, name):
        super().__init__()
        self.name = name

    def out_shape(self, shape):
        t, f, c = shape
        return (t, f * c)

    def __call__(self, x, train=False):
        b, t, f, c = x.shape
        return tn.reshape(x, (b, t, f * c))


class BiGRU(Layer):
    def __init__(self, name, in_dim, units, l2, rng, dtype):
        super().__init__()
        self.name = name
        self.units = units
        for side in ("fwd", "bwd"):
            self.params[f"{side}_kernel"] = _param(
                glorot_uniform(rng, (in_dim, 3 * units), in_dim, 3 * units, dtype),
                f"{name}.{side}_kernel")
            self.params[f"{side}_recurrent"] = _param(
                orthogonal(rng, units, 3 * units, dtype), f"{name}.{side}_recurrent")
            self.params[f"{side}_bias"] = _param(np.zeros(3 * units, dtype),
                                                 f"{name}.{side}_bias")
            self.l2[f"{side}_kernel"] = l2

    def direction(self, side):
        p = self.params
        return p[f"{side}_kernel"], p[f"{side}_recurrent"], p[f"{side}_bias"]

    def out_shape(self, shape):
        t, _ = shape
        return (t, 2 * self.units)

    def __call__(self, x, train=False):
        return bigru_forward(x, self.direction("fwd"), self.direction("bwd"))


class Dense(Layer):
    """Dense over the last axis; applied per time step on 3-D input."""

    def __init__(self, name, in_dim, units, activation, l2, rng, dtype):
        super().__init__()
        self.name = name
        self.units = units
        self.fn = _ACTIVATIONS[activation]
        self.params["kernel"] = _param(glorot_uniform(rng, (in_dim, units), in_dim, units, dtype),
                                       f"{name}.kernel")
        self.params["bias"] = _param(np.zeros(units, dtype), f"{name}.bias")
        self.l2["kernel"] = l2

    def out_shape(self, shape):
        return shape[:-1] + (self.units,)

    def __call__(self, x, train=False):
        return self.fn(tn.matmul(x, self.params["kernel"]) + self.params["bias"])


class GlobalAvgPool(Layer):
    def __init__(self, name):
        super().__init__()
        self.name = name

    def out_shape(self, shape):
        return (shape[-1],)

    def __call__(self, x, train=False):
        return tn.mean(x, axis=(1, 2))


class Flatten(Layer):
    """B x T x 1 -> B x T."""

    def __init__(self, name):
        super().__init__()
        self.name = name

    def out_shape(self, shape):
        return shape[:-1]

    def __call__(self, x, train=False):
        return tn.reshape(x, x.shape[:-1])


class Sequential:
    def __init__(self, layers, prefix):
        self.layers = list(layers)
        self.prefix = prefix

    def __call__(self, x, train=False):
        for layer in self.layers:
            x = layer(x, train)
        return x

    def named_params(self):
        for layer in self.layers:
            for key, p in layer.params.items():
                yield f"{self.prefix}.{layer.name}.{key}", p

    def named_buffers(self):
        for layer in self.layers:
            for key, buf in layer.buffers.items():
                yield f"{self.prefix}.{layer.name}.{key}", buf

    def l2_terms(self):
        for layer in self.layers:
            for key, coeff in layer.l2.items():
                if coeff > 0:
                    yield coeff, layer.params[key]


def build_layers(specs, in_shape, rng, prefix, dtype=np.float32):
    """Instantiate ``specs`` from a per-sample input shape, checking that
    the stack composes.  Returns (Sequential, per-layer output shapes)."""
    layers, shapes = [], []
    shape = tuple(in_shape)
    counts: dict[str, int] = {}
    for spec in specs:
        counts[spec.kind] = counts.get(spec.kind, 0) + 1
        name = f"{spec.kind}{counts[spec.kind]}"
        k = spec.kind
        if k == "conv2d":
            if len(shape) != 3:
                raise ShapeError(f"{name}: needs T x F x C input, got {shape}")
            layer = Conv2D(name, shape[2], spec.feature_maps, spec.size, spec.l2, rng, dtype)
        elif k == "batchnorm":
            layer = BatchNorm(name, shape[-1], dtype)
        elif k == "activation":
            layer = Activation(name, spec.activation)
        elif k == "maxpool":
            layer = MaxPool(name, spec.size)
        elif k == "reshape":
            if len(shape) != 3:
                raise ShapeError(f"{name}: needs T x F x C input, got {shape}")
            layer = Reshape(name)
        elif k == "bigru":
            if len(shape) != 2:
                raise ShapeError(f"{name}: needs T x D input, got {shape}")
            layer = BiGRU(name, shape[1], spec.size, spec.l2, rng, dtype)
        elif k in ("timedense", "dense"):
            want = 2 if k == "timedense" else 1
            if len(shape) != want:
                raise ShapeError(f"{name}: needs {want}-d per-sample input, got {shape}")
            layer = Dense(name, shape[-1], spec.size, spec.activation, spec.l2, rng, dtype)
        elif k == "globalavgpool":
            if len(shape) != 3:
                raise ShapeError(f"{name}: needs T x F x C input, got {shape}")
            layer = GlobalAvgPool(name)
        elif k == "flatten":
            if shape[-1] != 1:
                raise ShapeError(f"{name}: only flattens a trailing unit axis, got {shape}")
            layer = Flatten(name)
        else:
            raise ValueError(f"unknown layer kind {k!r}")
        shape = layer.out_shape(shape)
        layers.append(layer)
        shapes.append(shape)
    return Sequential(layers, prefix), shapes


# -- models ------------------------------------------------------------------


class ModelGraph:
    """A trunk plus one task head.

    ``trunk`` may be shared between graphs (tied-weights training), in
    which case both graphs hold the very same parameter tensors.
    """

    def __init__(self, kind, trunk, head, config):
        self.kind = kind
        self.trunk = trunk
        self.head = head
        self.config = dict(config)

    @property
    def layers(self):
        return self.trunk.layers + self.head.layers

    @property
    def trunk_marker(self):
        return len(self.trunk.layers)

    def parameters(self):
        return OrderedDict(list(self.trunk.named_params()) + list(self.head.named_params()))

    def buffers(self):
        return OrderedDict(list(self.trunk.named_buffers()) + list(self.head.named_buffers()))

    def l2_terms(self):
        return list(self.trunk.l2_terms()) + list(self.head.l2_terms())

    def forward(self, x, train=False):
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        b, t, f = x.shape
        if f != self.config["n_bands"]:
            raise ShapeError(f"{self.kind}: expected {self.config['n_bands']} bands, got {f}")
        return self.head(self.trunk(tn.reshape(x, (b, t, f, 1)), train), train)

    __call__ = forward

    @property
    def dtype(self):
        return next(iter(self.parameters().values())).dtype

    def predict(self, features, batch_size=8):
        return predict(lambda x: self.forward(x, train=False), features, batch_size)


class JointGraph:
    """Shared trunk with a WHEN head and a WHO head, one optimiser."""

    kind = "joint"

    def __init__(self, trunk, when_head, who_head, config):
        self.trunk = trunk
        self.when_head = when_head
        self.who_head = who_head
        self.config = dict(config)

    @property
    def layers(self):
        return self.trunk.layers + self.when_head.layers + self.who_head.layers

    @property
    def trunk_marker(self):
        return len(self.trunk.layers)

    def parameters(self):
        return OrderedDict(list(self.trunk.named_params()) + list(self.when_head.named_params())
                           + list(self.who_head.named_params()))

    def buffers(self):
        return OrderedDict(list(self.trunk.named_buffers())
                           + list(self.when_head.named_buffers())
                           + list(self.who_head.named_buffers()))

    def l2_terms(self):
        return (list(self.trunk.l2_terms()) + list(self.when_head.l2_terms())
                + list(self.who_head.l2_terms()))

    @property
    def dtype(self):
        return next(iter(self.parameters().values())).dtype

    def forward(self, x, train=False):
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        b, t, f = x.shape
        if f != self.config["n_bands"]:
            raise ShapeError(f"joint: expected {self.config['n_bands']} bands, got {f}")
        shared = self.trunk(tn.reshape(x, (b, t, f, 1)), train)
        return self.when_head(shared, train), self.who_head(shared, train)

    __call__ = forward

    def view(self, task):
        """A ModelGraph over the shared trunk and one head (no copying)."""
        head = self.when_head if task == "when" else self.who_head
        cfg = dict(self.config, kind=task)
        return ModelGraph(task, self.trunk, head, cfg)


def predict(fn, features, batch_size=8):
    outs = []
    for start in range(0, len(features), batch_size):
        outs.append(fn(features[start:start + batch_size]).data)
    return np.concatenate(outs, axis=0)


def regularisation(model) -> Tensor:
    """Sum of coeff * ||kernel||^2 over every kernel with coeff > 0."""
    total = None
    for coeff, w in model.l2_terms():
        term = tn.sum_(w * w) * coeff
        total = term if total is None else total + term
    return total if total is not None else Tensor(np.zeros((), dtype=np.float32))


def _check_bands(n_bands):
    if n_bands != N_BANDS:
        raise ValueError(f"the trunk pools 40 bands down to 1; got F={n_bands}")


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def build_trunk(rng, fmaps=64, n_bands=N_BANDS, dtype=np.float32):
    _check_bands(n_bands)
    trunk, shapes = build_layers(trunk_specs(fmaps), (None, n_bands, 1), rng, "trunk", dtype)
    return trunk, shapes[-1]


def build_when(T=None, F=N_BANDS, fmaps=64, gru_units=64, dense_units=64, seed=0,
               dtype=np.float32, trunk=None):
    """WHEN detector: frame-wise event probability, B x T x F -> B x T.

    ``T`` only documents the intended clip length; the graph accepts any
    number of frames.
    """
    _check_bands(F)
    rng = _rng(seed)
    if trunk is None:
        trunk, _ = build_trunk(rng, fmaps, F, dtype)
    out = (None, 1, trunk.layers[0].maps)
    head, _ = build_layers(when_head_specs(gru_units, dense_units), out, rng, "when", dtype)
    cfg = dict(kind="when", n_bands=F, fmaps=fmaps, gru_units=gru_units,
               dense_units=dense_units, dtype=np.dtype(dtype).name)
    return ModelGraph("when", trunk, head, cfg)


def build_who(T=None, F=N_BANDS, num_labels=87, fmaps=64, seed=0, dtype=np.float32,
              trunk=None):
    """WHO tagger: clip-level class probabilities, B x T x F -> B x L."""
    if num_labels < 1:
        raise ValueError(f"num_labels must be >= 1, got {num_labels}")
    _check_bands(F)
    rng = _rng(seed)
    if trunk is None:
        trunk, _ = build_trunk(rng, fmaps, F, dtype)
    out = (None, 1, trunk.layers[0].maps)
    head, _ = build_layers(who_head_specs(num_labels), out, rng, "who", dtype)
    cfg = dict(kind="who", n_bands=F, fmaps=fmaps, num_labels=num_labels,
               dtype=np.dtype(dtype).name)
    return ModelGraph("who", trunk, head, cfg)


def build_joint(T=None, F=N_BANDS, num_labels=87, fmaps=64, gru_units=64,
                dense_units=64, seed=0, dtype=np.float32):
    if num_labels < 1:
        raise ValueError(f"num_labels must be >= 1, got {num_labels}")
    _check_bands(F)
    rng = _rng(seed)
    trunk, _ = build_trunk(rng, fmaps, F, dtype)
    out = (None, 1, fmaps)
    when_head, _ = build_layers(when_head_specs(gru_units, dense_units), out, rng, "when", dtype)
    who_head, _ = build_layers(who_head_specs(num_labels), out, rng, "who", dtype)
    cfg = dict(kind="joint", n_bands=F, fmaps=fmaps, gru_units=gru_units,
               dense_units=dense_units, num_labels=num_labels, dtype=np.dtype(dtype).name)
    return JointGraph(trunk, when_head, who_head, cfg)


def build_from_config(cfg):
    cfg = dict(cfg)
    kind = cfg.pop("kind")
    dtype = np.dtype(cfg.pop("dtype", "float32"))
    F = cfg.pop("n_bands", N_BANDS)
    builder = {"when": build_when, "who": build_who, "joint": build_joint}[kind]
    return builder(F=F, dtype=dtype, **cfg)


# -- checkpoints -------------------------------------------------------------

CKPT_MAGIC = "milnet-ckpt-1"


def state_arrays(model):
    state = OrderedDict((k, p.data) for k, p in model.parameters().items())
    state.update(model.buffers())
    return state


def save_checkpoint(model, path):
    """JSON manifest line, newline, then one little-endian float32 blob.

    Manifest entries give name, shape and byte offset into the blob.
    """
    entries, chunks, offset = [], [], 0
    for name, arr in state_arrays(model).items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    manifest = {"format": CKPT_MAGIC, "config": model.config, "tensors": entries}
    with open(path, "wb") as fh:
        fh.write(json.dumps(manifest, separators=(",", ":")).encode("utf-8"))
        fh.write(b"\n")
        for raw in chunks:
            fh.write(raw)


def read_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    head, sep, body = blob.partition(b"\n")
    if not sep:
        raise ValueError(f"{path}: missing checkpoint manifest")
    manifest = json.loads(head)
    if manifest.get("format") != CKPT_MAGIC:
        raise ValueError(f"{path}: not a milnet checkpoint")
    arrays = OrderedDict()
    for e in manifest["tensors"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(body, dtype="<f4", count=count, offset=e["offset"])
        arrays[e["name"]] = arr.reshape(e["shape"])
    return manifest, arrays


def load_state(model, arrays):
    params, bufs = model.parameters(), model.buffers()
    for name, arr in arrays.items():
        if name in params:
            target = params[name].data
        elif name in bufs:
            target = bufs[name]
        else:
            raise KeyError(f"checkpoint tensor {name!r} has no place in the model")
        if target.shape != arr.shape:
            raise ShapeError(f"{name}: checkpoint {arr.shape} vs model {target.shape}")
        target[...] = arr


def load_checkpoint(path):
    manifest, arrays = read_checkpoint(path)
    model = build_from_config(manifest["config"])
    load_state(model, arrays)
    return model
