"""Differentiable primitives over channels-last tensors.

Every function accepts :class:`Tensor` or array-like operands and returns a
new :class:`Tensor`. When a :class:`Tape` is active the op records a
vector-Jacobian product so that ``Tape.backward`` can replay it.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from ..errors import DimensionError
from .tensor import Tensor, make_op


def lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` by undoing numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, lift(b, a)
    b = lift(b)
    return lift(a, b), b


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return make_op(
        "add", a.data + b.data, (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return make_op(
        "sub", a.data - b.data, (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return make_op(
        "mul", a.data * b.data, (a, b),
        lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def vjp(g):
        return unbroadcast(g / b.data, a.shape), unbroadcast(-g * out / b.data, b.shape)

    return make_op("div", out, (a, b), vjp)


def neg(x) -> Tensor:
    x = lift(x)
    return make_op("neg", -x.data, (x,), lambda g: (-g,))


def square(x) -> Tensor:
    x = lift(x)
    return make_op("square", x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def exp(x) -> Tensor:
    x = lift(x)
    out = np.exp(x.data)
    return make_op("exp", out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = lift(x)
    return make_op("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def sigmoid(x) -> Tensor:
    x = lift(x)
    out = _sigmoid(x.data)
    return make_op("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def softplus(x) -> Tensor:
    """log(1 + e^x), evaluated without overflow."""
    x = lift(x)
    d = x.data
    out = np.maximum(d, 0) + np.log1p(np.exp(-np.abs(d)))
    return make_op("softplus", out, (x,), lambda g: (g * _sigmoid(d),))


def relu(x) -> Tensor:
    x = lift(x)
    mask = x.data > 0
    return make_op("relu", x.data * mask, (x,), lambda g: (g * mask,))


def squared_relu(x) -> Tensor:
    x = lift(x)
    r = np.maximum(x.data, 0)
    return make_op("squared_relu", r * r, (x,), lambda g: (2.0 * g * r,))


def gelu(x) -> Tensor:
    x = lift(x)
    d = x.data
    cdf = 0.5 * (1.0 + erf(d / math.sqrt(2.0)))
    out = (d * cdf).astype(d.dtype, copy=False)

    def vjp(g):
        pdf = np.exp(-0.5 * d * d) / math.sqrt(2.0 * math.pi)
        return ((g * (cdf + d * pdf)).astype(d.dtype, copy=False),)

    return make_op("gelu", out, (x,), vjp)


def clip(x, lo: float, hi: float) -> Tensor:
    x = lift(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return make_op("clip", np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


# ---------------------------------------------------------------- reductions


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = lift(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return make_op("sum", np.asarray(out), (x,), vjp)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = lift(x)
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def softmax(x, axis: int = -1) -> Tensor:
    x = lift(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return make_op(
        "softmax", out, (x,),
        lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),),
    )


# ---------------------------------------------------------------- structure


def reshape(x, shape) -> Tensor:
    x = lift(x)
    return make_op("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None) -> Tensor:
    x = lift(x)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_op("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def getitem(x, idx) -> Tensor:
    x = lift(x)
    basic = _is_basic_index(idx)

    def vjp(g):
        gx = np.zeros_like(x.data)
        if basic:
            gx[idx] += g
        else:
            np.add.at(gx, idx, g)
        return (gx,)

    return make_op("getitem", np.array(x.data[idx]), (x,), vjp)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [lift(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return make_op("concat", out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product; ``a`` may carry leading batch dimensions."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.ndim == 2:
            k, n = b.shape
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return make_op("matmul", out, (a, b), vjp)


def linear(x, weight, bias=None) -> Tensor:
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# ---------------------------------------------------------------- convolution


def _out_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _check_conv(x, kh, kw, stride, padding, name):
    if x.ndim != 3:
        raise DimensionError(f"{name}: expected (H, W, C) input, got {x.shape}")
    if kh < 1 or kw < 1 or stride < 1 or padding < 0:
        raise DimensionError(f"{name}: bad kernel/stride/padding {kh}x{kw}/{stride}/{padding}")
    h, w = x.shape[:2]
    ho, wo = _out_size(h, kh, stride, padding), _out_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise DimensionError(f"{name}: output would be {ho}x{wo} for input {h}x{w}")
    return ho, wo


def _taps(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int):
    for i in range(kh):
        for j in range(kw):
            yield i, j, (slice(i, i + stride * (ho - 1) + 1, stride),
                         slice(j, j + stride * (wo - 1) + 1, stride))


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an (H, W, Cin) map with a (kh, kw, Cin, Cout) kernel."""
    x, weight = _pair(x, weight)
    if weight.ndim != 4 or weight.shape[2] != x.shape[-1]:
        raise DimensionError(f"conv2d: kernel {weight.shape} does not fit input {x.shape}")
    kh, kw, cin, cout = weight.shape
    ho, wo = _check_conv(x, kh, kw, stride, padding, "conv2d")
    h, w = x.shape[:2]
    p = padding
    xp = np.pad(x.data, ((p, p), (p, p), (0, 0))) if p else x.data
    wd = weight.data

    out = np.zeros((ho * wo, cout), dtype=np.result_type(x.dtype, wd.dtype))
    for i, j, sl in _taps(xp, kh, kw, stride, ho, wo):
        out += xp[sl].reshape(-1, cin) @ wd[i, j]
    out = out.reshape(ho, wo, cout)
    inputs = [x, weight]
    if bias is not None:
        bias = lift(bias, x)
        out += bias.data
        inputs.append(bias)

    def vjp(g):
        g2 = g.reshape(-1, cout)
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(wd)
        for i, j, sl in _taps(xp, kh, kw, stride, ho, wo):
            gw[i, j] = xp[sl].reshape(-1, cin).T @ g2
            gxp[sl] += (g2 @ wd[i, j].T).reshape(ho, wo, cin)
        grads = [gxp[p:p + h, p:p + w], gw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return make_op("conv2d", out, inputs, vjp)


def depthwise_conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Per-channel spatial filtering with a (kh, kw, C) kernel."""
    x, weight = _pair(x, weight)
    if weight.ndim != 3 or weight.shape[2] != x.shape[-1]:
        raise DimensionError(f"depthwise_conv2d: kernel {weight.shape} does not fit {x.shape}")
    kh, kw, c = weight.shape
    ho, wo = _check_conv(x, kh, kw, stride, padding, "depthwise_conv2d")
    h, w = x.shape[:2]
    p = padding
    xp = np.pad(x.data, ((p, p), (p, p), (0, 0))) if p else x.data
    wd = weight.data

    out = np.zeros((ho, wo, c), dtype=np.result_type(x.dtype, wd.dtype))
    for i, j, sl in _taps(xp, kh, kw, stride, ho, wo):
        out += xp[sl] * wd[i, j]
    inputs = [x, weight]
    if bias is not None:
        bias = lift(bias, x)
        out += bias.data
        inputs.append(bias)

    def vjp(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(wd)
        for i, j, sl in _taps(xp, kh, kw, stride, ho, wo):
            gw[i, j] = (xp[sl] * g).sum(axis=(0, 1))
            gxp[sl] += g * wd[i, j]
        grads = [gxp[p:p + h, p:p + w], gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 1)))
        return grads

    return make_op("depthwise_conv2d", out, inputs, vjp)


# ---------------------------------------------------------------- normalisation


def layer_norm(x, gamma, beta, eps: float = 1e-6) -> Tensor:
    """Normalise over the last (channel) axis, then scale and shift."""
    x = lift(x)
    gamma, beta = lift(gamma, x), lift(beta, x)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"layer_norm: affine {gamma.shape}/{beta.shape} vs channels {c}")
    d = x.data
    mu = d.mean(axis=-1, keepdims=True)
    xc = d - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def vjp(g):
        gxhat = g * gamma.data
        gx = rstd * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                     - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(d.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make_op("layer_norm", out, (x, gamma, beta), vjp)


# ---------------------------------------------------------------- resampling


def interp_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Half-pixel-centred linear interpolation weights of shape (n_out, n_in)."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    for dst in range(n_out):
        src = max((dst + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0 if i0 < n_in - 1 else 0.0
        m[dst, i0] += 1.0 - frac
        m[dst, i1] += frac
    return m


def resize_bilinear(x, size: tuple[int, int]) -> Tensor:
    """Bilinearly resample an (H, W, C) map to ``size`` = (H', W')."""
    x = lift(x)
    if x.ndim != 3:
        raise DimensionError(f"resize_bilinear: expected (H, W, C), got {x.shape}")
    h, w, _ = x.shape
    ho, wo = size
    if (ho, wo) == (h, w):
        return x
    my = interp_matrix(h, ho, x.dtype)
    mx = interp_matrix(w, wo, x.dtype)
    c = x.shape[2]
    rows = (my @ x.data.reshape(h, -1)).reshape(ho, w, c)
    out = np.matmul(mx, rows)

    def vjp(g):
        grows = np.matmul(mx.T, g)
        return ((my.T @ grows.reshape(ho, -1)).reshape(h, w, c),)

    return make_op("resize_bilinear", out, (x,), vjp)


# ---------------------------------------------------------------- operator sugar

Tensor.__add__ = add
Tensor.__radd__ = lambda self, other: add(other, self)
Tensor.__sub__ = sub
Tensor.__rsub__ = lambda self, other: sub(other, self)
Tensor.__mul__ = mul
Tensor.__rmul__ = lambda self, other: mul(other, self)
Tensor.__truediv__ = div
Tensor.__rtruediv__ = lambda self, other: div(other, self)
Tensor.__neg__ = neg
Tensor.__matmul__ = matmul
Tensor.__rmatmul__ = lambda self, other: matmul(other, self)
Tensor.__getitem__ = getitem
Tensor.reshape = lambda self, *shape: reshape(self, shape[0] if len(shape) == 1 else shape)
Tensor.transpose = transpose
Tensor.sum = sum
Tensor.mean = mean
