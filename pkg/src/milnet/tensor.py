"""Dense n-d arrays with tape-based reverse-mode differentiation.

Every primitive computes its forward value with numpy and, when a
:class:`Tape` is active and any input requires a gradient, appends a node
holding the saved state needed for the backward rule.  ``Tape.backward``
replays the nodes in reverse order; leaf gradients accumulate into
``Tensor.grad`` so two backward passes over the same tape double them.

Broadcasting is limited to leading-axis expansion: in a binary op the
smaller operand's shape must be a suffix of the larger one's.
"""

from __future__ import annotations

import numpy as np

CHECK_FINITE = True

_active: list["Tape"] = []


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "is_leaf", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.is_leaf = True
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def max(self, axis=None):
        return max_(self, axis)

    def min(self, axis=None):
        return min_(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of primitive applications.

    Use as a context manager; primitives executed inside the block are
    recorded.  Tapes may be nested, in which case the innermost records.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        _active.append(self)
        return self

    def __exit__(self, *exc):
        _active.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def backward(self, loss: Tensor, params=None, accumulate=True):
        """Propagate d(loss)/d(.) to every leaf reached from ``loss``.

        Leaf gradients are accumulated into ``.grad`` unless
        ``accumulate`` is False.  Returns a dict
        mapping each tensor in ``params`` (or every reached leaf when
        ``params`` is None) to the gradient contributed by this pass;
        tensors that do not participate map to zeros.
        """
        if loss.data.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
        grads = {id(loss): np.ones_like(loss.data)}
        leaves = {}
        if loss.is_leaf and loss.requires_grad:
            leaves[id(loss)] = loss
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if t.is_leaf:
                    leaves[key] = t
        out = {}
        for key, t in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            g = g.astype(t.dtype, copy=False)
            if accumulate:
                t.grad = g.copy() if t.grad is None else t.grad + g
            out[t] = g
        if params is None:
            return out
        return {p: out.get(p, np.zeros_like(p.data)) for p in params}


def as_tensor(x, like=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _check(name, data):
    if CHECK_FINITE and not np.isfinite(data).all():
        raise NonFiniteError(f"{name}: produced non-finite values")


def make_op(name, data, inputs, backward) -> Tensor:
    """Wrap ``data`` as the output of primitive ``name``.

    ``backward`` maps the output gradient to a tuple of input gradients
    (``None`` entries for inputs that need none).  Exposed so that fused
    layer primitives can live next to the layers that use them.
    """
    _check(name, data)
    req = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=req)
    out.is_leaf = False
    if req and _active:
        _active[-1].nodes.append(_Node(out, tuple(inputs), backward))
    return out


def _pair(name, a, b):
    if not isinstance(a, Tensor):
        a = as_tensor(a, like=b)
    if not isinstance(b, Tensor):
        b = as_tensor(b, like=a)
    sa, sb = a.shape, b.shape
    if sa == sb:
        return a, b
    if len(sb) <= len(sa) and sa[len(sa) - len(sb):] == sb:
        return a, b
    if len(sa) < len(sb) and sb[len(sb) - len(sa):] == sa:
        return a, b
    raise ShapeError(f"{name}: shapes {sa} and {sb} do not conform (only leading-axis broadcast)")


def colsum(x, trailing_shape):
    """Sum over all leading axes, leaving ``trailing_shape``.

    Done as a ones-vector product: BLAS is far quicker than numpy's
    strided reduction when the kept axes are short.
    """
    n = int(np.prod(trailing_shape)) if trailing_shape else 1
    x2 = np.asarray(x).reshape(-1, n)
    return (np.ones(x2.shape[0], dtype=x2.dtype) @ x2).reshape(trailing_shape)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    return colsum(g, shape) if g.ndim > len(shape) else g


# -- elementwise -------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair("add", a, b)
    sa, sb = a.shape, b.shape
    return make_op("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair("sub", a, b)
    sa, sb = a.shape, b.shape
    return make_op("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair("mul", a, b)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_op("mul", ad * bd, (a, b), backward)


def neg(a) -> Tensor:
    return make_op("neg", -a.data, (a,), lambda g: (-g,))


def relu(a) -> Tensor:
    mask = a.data > 0
    return make_op("relu", np.where(mask, a.data, 0).astype(a.dtype), (a,),
                   lambda g: (g * mask,))


def _sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a) -> Tensor:
    s = _sigmoid(a.data)
    return make_op("sigmoid", s, (a,), lambda g: (g * s * (1 - s),))


def tanh(a) -> Tensor:
    t = np.tanh(a.data)
    return make_op("tanh", t, (a,), lambda g: (g * (1 - t * t),))


def exp(a) -> Tensor:
    e = np.exp(a.data)
    return make_op("exp", e, (a,), lambda g: (g * e,))


def log(a) -> Tensor:
    x = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x)
    return make_op("log", out, (a,), lambda g: (g / x,))


def clip(a, lo, hi) -> Tensor:
    """Clamp into [lo, hi]; gradient is zero where clamping was active."""
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return make_op("clip", np.clip(x, lo, hi), (a,), lambda g: (g * inside,))


# -- linear algebra ----------------------------------------------------------


def matmul(a, b) -> Tensor:
    """(..., K) @ (K, N) -> (..., N)."""
    a = as_tensor(a)
    b = as_tensor(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    ad, bd = a.data, b.data
    k, n = bd.shape

    def backward(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = ad.reshape(-1, k).T @ g.reshape(-1, n) if b.requires_grad else None
        return ga, gb

    return make_op("matmul", ad @ bd, (a, b), backward)


# -- reductions --------------------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def _expand(g, shape, axes):
    if axes is None:
        return np.broadcast_to(g, shape)
    return np.broadcast_to(np.expand_dims(g, axes), shape)


def sum_(a, axis=None) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape
    return make_op("sum", a.data.sum(axis=axes), (a,),
                   lambda g: (_expand(g, shape, axes).copy(),))


def mean(a, axis=None) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape
    count = a.size if axes is None else int(np.prod([shape[ax] for ax in axes]))
    return make_op("mean", a.data.mean(axis=axes), (a,),
                   lambda g: (_expand(g / count, shape, axes).copy(),))


def _arg_reduce(name, a, axis, pick):
    """max/min over one axis (or all); gradient goes to the first extremum."""
    x = a.data
    if a.size == 0:
        raise ShapeError(f"{name}: empty input")
    if axis is None:
        idx = pick(x.reshape(-1))
        shape = x.shape

        def backward(g):
            out = np.zeros(x.size, dtype=x.dtype)
            out[idx] = g
            return (out.reshape(shape),)

        return make_op(name, x.reshape(-1)[idx], (a,), backward)
    ax = axis % x.ndim
    idx = np.expand_dims(pick(x, axis=ax), ax)
    val = np.take_along_axis(x, idx, axis=ax).squeeze(ax)

    def backward(g):
        out = np.zeros_like(x)
        np.put_along_axis(out, idx, np.expand_dims(g, ax), axis=ax)
        return (out,)

    return make_op(name, val, (a,), backward)


def max_(a, axis=None) -> Tensor:
    return _arg_reduce("max", a, axis, np.argmax)


def min_(a, axis=None) -> Tensor:
    return _arg_reduce("min", a, axis, np.argmin)


def prod(a, axis=None) -> Tensor:
    """Product over one axis (or all); exact gradient even with zero factors."""
    x = a.data
    ax = -1 if axis is None else axis % x.ndim
    xm = x.reshape(-1) if axis is None else np.moveaxis(x, ax, -1)
    # d/dx_j prod = prod_{k<j} x_k * prod_{k>j} x_k
    ones = np.ones(xm.shape[:-1] + (1,), dtype=x.dtype)
    left = np.concatenate([ones, np.cumprod(xm, axis=-1)[..., :-1]], axis=-1)
    right = np.concatenate([np.cumprod(xm[..., ::-1], axis=-1)[..., :-1][..., ::-1], ones], axis=-1)
    val = np.prod(xm, axis=-1)

    def backward(g):
        gm = np.asarray(g)[..., None] * left * right
        if axis is None:
            return (gm.reshape(x.shape),)
        return (np.moveaxis(gm, -1, ax),)

    return make_op("prod", val, (a,), backward)


# -- structural --------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} into {tuple(shape)}") from None
    return make_op("reshape", out, (a,), lambda g: (g.reshape(old),))


def transpose(a, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inv = tuple(np.argsort(axes))
    return make_op("transpose", np.ascontiguousarray(a.data.transpose(axes)), (a,),
                   lambda g: (g.transpose(inv),))


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
                d1 != d2 for i, (d1, d2) in enumerate(zip(ref, t.shape)) if i != ax):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} differ off axis {ax}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) if t.requires_grad else None
            for i, t in enumerate(tensors))

    return make_op("concat", np.concatenate([t.data for t in tensors], axis=ax),
                   tensors, backward)


def _is_basic(index):
    if not isinstance(index, tuple):
        index = (index,)
    return all(isinstance(i, (slice, int, type(Ellipsis))) or i is None for i in index)


def getitem(a, index) -> Tensor:
    """Slicing.  Basic indices scatter directly; fancy ones via add.at."""
    x = a.data
    try:
        out = x[index]
    except IndexError as err:
        raise ShapeError(f"slice: {err} for shape {x.shape}") from None
    basic = _is_basic(index)

    def backward(g):
        full = np.zeros_like(x)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return make_op("slice", np.array(out, copy=True), (a,), backward)


# -- convolution and pooling (channels-last: B x T x F x C) ------------------


def _im2col(xp, kh, kw, t, f):
    # (B, T+kh-1, F+kw-1, C) -> (B*T*F, kh*kw*C), ordered (i, j, c)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(-1, kh * kw * xp.shape[3])


def conv2d(x, w) -> Tensor:
    """'same'-padded stride-1 2-D convolution, kernel (kh, kw, C_in, C_out).

    Lowered to one matrix product over im2col columns; the columns are
    rebuilt in the backward pass instead of being kept alive.  Even kernels
    are rejected since 'same' padding would be asymmetric.
    """
    x = as_tensor(x)
    w = as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ShapeError(f"conv2d: input {x.shape} and kernel {w.shape} do not conform")
    kh, kw, cin, cout = w.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: 'same' padding needs odd kernel, got {w.shape}")
    b, t, f, _ = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    w2 = w.data.reshape(kh * kw * cin, cout)
    out = (_im2col(xp, kh, kw, t, f) @ w2).reshape(b, t, f, cout)

    def backward(g):
        g2 = g.reshape(-1, cout)
        gx = gw = None
        if w.requires_grad:
            gw = (_im2col(xp, kh, kw, t, f).T @ g2).reshape(w.shape)
        if x.requires_grad:
            # input gradient = 'same' correlation of g with the flipped,
            # channel-transposed kernel
            gp = np.pad(g, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
            wf = w.data[::-1, ::-1].transpose(0, 1, 3, 2).reshape(kh * kw * cout, cin)
            gx = (_im2col(gp, kh, kw, t, f) @ wf).reshape(b, t, f, cin)
        return gx, gw

    return make_op("conv2d", out, (x, w), backward)


def maxpool2d(x, window) -> Tensor:
    """Non-overlapping max-pool over (time, frequency) of a B x T x F x C input."""
    kt, kf = window
    b, t, f, c = x.shape
    if t % kt or f % kf:
        raise ShapeError(f"maxpool2d: window {window} does not tile input {x.shape}")
    blocks = x.data.reshape(b, t // kt, kt, f // kf, kf, c)
    blocks = blocks.transpose(0, 1, 3, 5, 2, 4).reshape(b, t // kt, f // kf, c, kt * kf)
    idx = np.argmax(blocks, axis=-1)[..., None]
    out = np.take_along_axis(blocks, idx, axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, idx, g[..., None], axis=-1)
        gb = gb.reshape(b, t // kt, f // kf, c, kt, kf).transpose(0, 1, 4, 2, 5, 3)
        return (gb.reshape(b, t, f, c),)

    return make_op("maxpool2d", out, (x,), backward)


# -- gradient checking -------------------------------------------------------


def numerical_grad(fn, arrays, index, eps=1e-5):
    """Central differences of scalar ``fn(*arrays)`` w.r.t. ``arrays[index]``."""
    x = arrays[index]
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + eps
        fp = float(fn(*arrays))
        flat[k] = orig - eps
        fm = float(fn(*arrays))
        flat[k] = orig
        gflat[k] = (fp - fm) / (2 * eps)
    return grad


def relative_error(analytic, numeric):
    """Max-norm relative error ``max|a - n| / max(max|a|, max|n|)``."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def gradcheck(fn, arrays, eps=1e-5):
    """Compare tape gradients of ``fn`` (Tensors -> scalar Tensor) with
    central differences.  Returns the worst relative error over inputs."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = fn(*tensors)
    grads = tape.backward(loss, tensors)

    def scalar(*arrs):
        return fn(*[Tensor(a) for a in arrs]).item()

    worst = 0.0
    for i, t in enumerate(tensors):
        num = numerical_grad(scalar, arrays, i, eps)
        worst = max(worst, relative_error(grads[t], num))
    return worst
