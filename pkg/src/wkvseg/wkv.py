"""Q-Shift neighbourhood mixing and the bidirectional WKV operator.

Bi-WKV for one channel, with per-step decay ``d = w / L``::

    y_t = (sum_{i != t} exp(-(|t-i|-1) d + k_i) v_i + exp(u + k_t) v_t)
          / (sum_{i != t} exp(-(|t-i|-1) d + k_i) + exp(u + k_t))

``bi_wkv_reference`` evaluates this directly in O(L^2 C). ``bi_wkv_scan``
runs one left-to-right and one right-to-left recurrence per channel. Every
running sum is held as ``mantissa * exp(p)`` where ``p`` is the largest
exponent seen so far, so nothing overflows for |k| up to ~60 or underflows
to a 0/0 ratio.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from .core import Module, Parameter, Tensor, make_op, ops
from .core.tensor import DEFAULT_DTYPE
from .errors import ConfigurationError, DimensionError

QSHIFT_VARIANTS = ("additive", "interpolation")


@dataclass
class WkvParams:
    """Per-channel decay ``w`` (non-negative) and current-token bonus ``u``."""

    w: np.ndarray
    u: np.ndarray

    def __post_init__(self):
        self.w = np.asarray(self.w)
        self.u = np.asarray(self.u)
        if self.w.shape != self.u.shape or self.w.ndim != 1:
            raise DimensionError(f"w {self.w.shape} and u {self.u.shape} must be equal 1-D")


def _check(k, v, p: WkvParams):
    k, v = np.asarray(k), np.asarray(v)
    if k.ndim != 2 or k.shape != v.shape:
        raise DimensionError(f"K {k.shape} and V {v.shape} must both be (L, C)")
    if k.shape[0] < 1:
        raise DimensionError("sequence length must be >= 1")
    if p.w.shape != (k.shape[1],):
        raise DimensionError(f"w has {p.w.shape[0]} channels, K has {k.shape[1]}")
    return k, v


# ----------------------------------------------------------------- reference


def bi_wkv_reference(k, v, p: WkvParams) -> np.ndarray:
    """Quadratic-time evaluation at 64-bit, max-exponent shifted per position."""
    k, v = _check(k, v, p)
    dtype = np.result_type(k.dtype, np.float32)
    k64, v64 = k.astype(np.float64), v.astype(np.float64)
    w64, u64 = p.w.astype(np.float64), p.u.astype(np.float64)
    L = k.shape[0]
    idx = np.arange(L)
    out = np.empty_like(k64)
    for t in range(L):
        dist = (np.abs(t - idx) - 1.0)[:, None]
        expo = -dist / L * w64[None, :] + k64
        expo[t] = u64 + k64[t]
        m = expo.max(axis=0)
        e = np.exp(expo - m)
        out[t] = (e * v64).sum(axis=0) / e.sum(axis=0)
    return out.astype(dtype)


# ----------------------------------------------------------------- scan kernels


@numba.njit(cache=True)
def _fwd_kernel(k, v, w, u, y):
    L, C = k.shape
    # left-side state before position t: exponent, numerator, denominator
    pa = np.empty(L, k.dtype)
    na = np.empty(L, k.dtype)
    da = np.empty(L, k.dtype)
    st = np.empty(3, k.dtype)
    for c in range(C):
        d = w[c] / L
        st[0] = -np.inf
        st[1] = 0.0
        st[2] = 0.0
        for t in range(L):
            pa[t] = st[0]
            na[t] = st[1]
            da[t] = st[2]
            q = max(st[0] - d, k[t, c])
            e1 = math.exp(st[0] - d - q)
            e2 = math.exp(k[t, c] - q)
            st[1] = e1 * st[1] + e2 * v[t, c]
            st[2] = e1 * st[2] + e2
            st[0] = q
        st[0] = -np.inf
        st[1] = 0.0
        st[2] = 0.0
        for t in range(L - 1, -1, -1):
            ku = u[c] + k[t, c]
            q = max(max(pa[t], st[0]), ku)
            ea = math.exp(pa[t] - q)
            ec = math.exp(st[0] - q)
            eu = math.exp(ku - q)
            y[t, c] = (ea * na[t] + ec * st[1] + eu * v[t, c]) / (ea * da[t] + ec * st[2] + eu)
            q = max(st[0] - d, k[t, c])
            e1 = math.exp(st[0] - d - q)
            e2 = math.exp(k[t, c] - q)
            st[1] = e1 * st[1] + e2 * v[t, c]
            st[2] = e1 * st[2] + e2
            st[0] = q


@numba.njit(cache=True)
def _side_states(k, v, c, d, reverse, p, n, m, dn, dm):
    """Exclusive one-sided sums and their d-derivatives for channel ``c``.

    For each t: n[t]*exp(p[t]) = sum over the side of exp(-(|t-i|-1)d + k_i) v_i,
    m is the same without v, dn/dm are derivatives of n/m with respect to d.
    """
    L = k.shape[0]
    s_p, s_n, s_m, s_dn, s_dm = -np.inf, 0.0, 0.0, 0.0, 0.0
    for j in range(L):
        t = L - 1 - j if reverse else j
        p[t] = s_p
        n[t] = s_n
        m[t] = s_m
        dn[t] = s_dn
        dm[t] = s_dm
        q = max(s_p - d, k[t, c])
        e1 = math.exp(s_p - d - q)
        e2 = math.exp(k[t, c] - q)
        s_dn = e1 * (s_dn - s_n)
        s_dm = e1 * (s_dm - s_m)
        s_n = e1 * s_n + e2 * v[t, c]
        s_m = e1 * s_m + e2
        s_p = q


@numba.njit(cache=True)
def _adjoint_side(k, v, c, d, reverse, qexp, alpha, alpha_y, gk, gv):
    """Accumulate the cross terms of dK, dV coming from one side.

    Sums alpha_t * exp(-(|t-i|-1) d - q_t) over t on one side of i, again in
    running-max form, then scales by exp(k_i).
    """
    L = k.shape[0]
    s_p, s_a, s_b = -np.inf, 0.0, 0.0
    for j in range(L):
        i = L - 1 - j if reverse else j
        if s_p > -np.inf:
            scale = math.exp(k[i, c] + s_p)
            gv[i, c] += scale * s_a
            gk[i, c] += scale * (v[i, c] * s_a - s_b)
        e_new = -qexp[i]
        q = max(s_p - d, e_new)
        e1 = math.exp(s_p - d - q)
        e2 = math.exp(e_new - q)
        s_a = e1 * s_a + e2 * alpha[i]
        s_b = e1 * s_b + e2 * alpha_y[i]
        s_p = q


@numba.njit(cache=True)
def _bwd_kernel(k, v, w, u, gy, gk, gv, gw, gu):
    L, C = k.shape
    pa = np.empty(L)
    na = np.empty(L)
    ma = np.empty(L)
    dna = np.empty(L)
    dma = np.empty(L)
    pc = np.empty(L)
    nc = np.empty(L)
    mc = np.empty(L)
    dnc = np.empty(L)
    dmc = np.empty(L)
    qexp = np.empty(L)
    alpha = np.empty(L)
    alpha_y = np.empty(L)
    for c in range(C):
        d = w[c] / L
        _side_states(k, v, c, d, False, pa, na, ma, dna, dma)
        _side_states(k, v, c, d, True, pc, nc, mc, dnc, dmc)
        gd = 0.0
        g_u = 0.0
        for t in range(L):
            ku = u[c] + k[t, c]
            q = max(max(pa[t], pc[t]), ku)
            ea = math.exp(pa[t] - q)
            ec = math.exp(pc[t] - q)
            eu = math.exp(ku - q)
            den = ea * ma[t] + ec * mc[t] + eu
            y = (ea * na[t] + ec * nc[t] + eu * v[t, c]) / den
            a = gy[t, c] / den  # true adjoint is a * exp(-q)
            qexp[t] = q
            alpha[t] = a
            alpha_y[t] = a * y
            gd += a * ((ea * dna[t] + ec * dnc[t]) - y * (ea * dma[t] + ec * dmc[t]))
            g_u += a * eu * (v[t, c] - y)
            gv[t, c] += a * eu
            gk[t, c] += a * eu * (v[t, c] - y)
        _adjoint_side(k, v, c, d, False, qexp, alpha, alpha_y, gk, gv)
        _adjoint_side(k, v, c, d, True, qexp, alpha, alpha_y, gk, gv)
        gw[c] = gd / L
        gu[c] = g_u


def bi_wkv_scan(k, v, p: WkvParams) -> np.ndarray:
    """Linear-time Bi-WKV via forward and backward recurrences per channel.

    The running states are always 64-bit; the result is returned in the
    input precision.
    """
    k, v = _check(k, v, p)
    dtype = np.result_type(k.dtype, np.float32)
    k64 = np.ascontiguousarray(k, dtype=np.float64)
    v64 = np.ascontiguousarray(v, dtype=np.float64)
    y = np.empty_like(k64)
    _fwd_kernel(k64, v64, p.w.astype(np.float64), p.u.astype(np.float64), y)
    return y.astype(dtype, copy=False)


def bi_wkv_backward(k, v, p: WkvParams, grad_out):
    """Gradients of ``sum(grad_out * bi_wkv_scan(k, v, p))``.

    Returns ``(grad_k, grad_v, grad_w, grad_u)``; accumulation is 64-bit and
    the results are cast back to the input precision.
    """
    k, v = _check(k, v, p)
    dtype = np.result_type(k.dtype, np.float32)
    k64 = np.ascontiguousarray(k, dtype=np.float64)
    v64 = np.ascontiguousarray(v, dtype=np.float64)
    gy = np.ascontiguousarray(grad_out, dtype=np.float64)
    if gy.shape != k.shape:
        raise DimensionError(f"grad_out {gy.shape} does not match {k.shape}")
    gk = np.zeros_like(k64)
    gv = np.zeros_like(k64)
    gw = np.zeros(k.shape[1])
    gu = np.zeros(k.shape[1])
    _bwd_kernel(k64, v64, p.w.astype(np.float64), p.u.astype(np.float64), gy, gk, gv, gw, gu)
    return gk.astype(dtype), gv.astype(dtype), gw.astype(dtype), gu.astype(dtype)


def bi_wkv(k: Tensor, v: Tensor, w: Tensor, u: Tensor) -> Tensor:
    """Differentiable Bi-WKV on (L, C) tensors; ``w`` must already be >= 0."""
    k, v = ops.lift(k), ops.lift(v, k)
    w, u = ops.lift(w, k), ops.lift(u, k)
    params = WkvParams(w.data, u.data)
    out = bi_wkv_scan(k.data, v.data, params)
    return make_op(
        "bi_wkv", out, (k, v, w, u),
        lambda g: bi_wkv_backward(k.data, v.data, params, g),
    )


# ----------------------------------------------------------------- Q-Shift


def _shift4(x: np.ndarray, inverse: bool = False) -> np.ndarray:
    """Move each quarter of the channels one pixel, zero filled.

    Groups in order take their value from the pixel above, below, left and
    right. ``inverse`` applies the adjoint (opposite) shifts.
    """
    h, w, c = x.shape
    g = c // 4
    out = np.zeros_like(x)
    up, down, left, right = (slice(0, g), slice(g, 2 * g), slice(2 * g, 3 * g), slice(3 * g, c))
    if not inverse:
        out[1:, :, up] = x[:-1, :, up]
        out[:-1, :, down] = x[1:, :, down]
        out[:, 1:, left] = x[:, :-1, left]
        out[:, :-1, right] = x[:, 1:, right]
    else:
        out[:-1, :, up] = x[1:, :, up]
        out[1:, :, down] = x[:-1, :, down]
        out[:, :-1, left] = x[:, 1:, left]
        out[:, 1:, right] = x[:, :-1, right]
    return out


def neighbor_shift(x) -> Tensor:
    x = ops.lift(x)
    if x.ndim != 3 or x.shape[-1] % 4:
        raise ConfigurationError(f"Q-Shift needs (H, W, C) with C % 4 == 0, got {x.shape}")
    return make_op("shift4", _shift4(x.data), (x,), lambda g: (_shift4(g, inverse=True),))


class QShift(Module):
    """Learnable per-channel blend of a token with its shifted neighbours.

    ``additive`` returns ``x + (1 - mu) * x'``; ``interpolation`` returns
    ``mu * x + (1 - mu) * x'``. ``mu`` is clamped to [0, 1] when applied.
    """

    def __init__(self, channels: int, mu: float | np.ndarray = 0.5, variant: str = "additive"):
        if variant not in QSHIFT_VARIANTS:
            raise ConfigurationError(f"unknown Q-Shift variant {variant!r}")
        if channels % 4:
            raise ConfigurationError(f"Q-Shift needs channels divisible by 4, got {channels}")
        self.variant = variant
        self.mu = Parameter(np.broadcast_to(np.asarray(mu, DEFAULT_DTYPE), (channels,)).copy(), "mu")

    def forward(self, x) -> Tensor:
        return q_shift(x, self)


def q_shift(x, cfg: QShift) -> Tensor:
    x = ops.lift(x)
    shifted = neighbor_shift(x)
    mu = ops.clip(cfg.mu, 0.0, 1.0)
    mix = ops.mul(ops.sub(1.0, mu), shifted)
    if cfg.variant == "additive":
        return ops.add(x, mix)
    return ops.add(ops.mul(mu, x), mix)
