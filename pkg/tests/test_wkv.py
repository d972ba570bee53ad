import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from wkvseg.core import Tape, Tensor, finite_diff_grad, ops, rel_error
from wkvseg.errors import ConfigurationError, DimensionError
from wkvseg.gradsuite import TOLERANCE, cases
from wkvseg.wkv import (
    QShift,
    WkvParams,
    bi_wkv,
    bi_wkv_backward,
    bi_wkv_reference,
    bi_wkv_scan,
    neighbor_shift,
    q_shift,
)


def transcribed(k, v, w, u):
    """Straight-line weighted average, one (t, c) at a time, no shifting."""
    L, C = k.shape
    out = np.zeros((L, C))
    for c in range(C):
        for t in range(L):
            num = math.exp(u[c] + k[t, c]) * v[t, c]
            den = math.exp(u[c] + k[t, c])
            for i in range(L):
                if i == t:
                    continue
                e = math.exp(-(abs(t - i) - 1) / L * w[c] + k[i, c])
                num += e * v[i, c]
                den += e
            out[t, c] = num / den
    return out


def random_case(seed, L, C, dtype=np.float64, kscale=1.0):
    rng = np.random.default_rng(seed)
    k = (kscale * rng.standard_normal((L, C))).astype(dtype)
    v = rng.standard_normal((L, C)).astype(dtype)
    p = WkvParams(rng.uniform(0.0, 5.0, C).astype(dtype), rng.standard_normal(C).astype(dtype))
    return k, v, p


def max_rel(a, b):
    """Per-channel normwise relative error, max over channels."""
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    scale = np.maximum(np.abs(b).max(axis=0), 1e-300)
    return float((np.abs(a - b).max(axis=0) / scale).max())


class TestReference:
    def test_singleton(self, rng):
        k, v = rng.standard_normal((1, 3)), rng.standard_normal((1, 3))
        out = bi_wkv_reference(k, v, WkvParams(np.ones(3), rng.standard_normal(3)))
        np.testing.assert_allclose(out, v, rtol=1e-15)

    def test_uniform_average(self, rng):
        v = rng.standard_normal((7, 2))
        out = bi_wkv_reference(np.zeros((7, 2)), v, WkvParams(np.zeros(2), np.zeros(2)))
        np.testing.assert_allclose(out, np.broadcast_to(v.mean(axis=0), (7, 2)), rtol=1e-13)

    def test_transcription_seed42(self):
        rng = np.random.default_rng(42)
        k, v = rng.standard_normal((5, 2)), rng.standard_normal((5, 2))
        w, u = rng.uniform(0, 3, 2), rng.standard_normal(2)
        ref = bi_wkv_reference(k, v, WkvParams(w, u))
        np.testing.assert_allclose(ref, transcribed(k, v, w, u), rtol=1e-12)
        np.testing.assert_allclose(bi_wkv_scan(k, v, WkvParams(w, u)), ref, rtol=1e-10)

    def test_shape_errors(self):
        p = WkvParams(np.ones(3), np.ones(3))
        with pytest.raises(DimensionError):
            bi_wkv_reference(np.ones((4, 3)), np.ones((5, 3)), p)
        with pytest.raises(DimensionError):
            bi_wkv_scan(np.ones((4, 2)), np.ones((4, 2)), p)

    def test_params_validated(self):
        with pytest.raises((DimensionError, ValueError)):
            WkvParams(np.ones(3), np.ones(2))


class TestScanEquivalence:
    @given(st.integers(0, 2**31 - 1), st.integers(1, 512), st.integers(1, 64))
    def test_float64(self, seed, L, C):
        k, v, p = random_case(seed, L, C)
        assert max_rel(bi_wkv_scan(k, v, p), bi_wkv_reference(k, v, p)) < 1e-10

    @given(st.integers(0, 2**31 - 1), st.integers(1, 512), st.integers(1, 64))
    def test_float32(self, seed, L, C):
        k, v, p = random_case(seed, L, C, np.float32)
        out = bi_wkv_scan(k, v, p)
        assert out.dtype == np.float32
        assert max_rel(out, bi_wkv_reference(k, v, p)) < 1e-4

    @pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-10), (np.float32, 1e-4)])
    def test_alternating_pm50(self, dtype, tol):
        L, C = 1024, 4
        rng = np.random.default_rng(3)
        k = np.where(np.arange(L)[:, None] % 2 == 0, 50.0, -50.0) * np.ones((1, C))
        v = rng.standard_normal((L, C))
        p = WkvParams(rng.uniform(0, 5, C), rng.standard_normal(C))
        k, v = k.astype(dtype), v.astype(dtype)
        p = WkvParams(p.w.astype(dtype), p.u.astype(dtype))
        out = bi_wkv_scan(k, v, p)
        assert np.isfinite(out).all()
        assert max_rel(out, bi_wkv_reference(k, v, p)) < tol

    def test_extreme_exponents_long_sequence(self):
        L, C = 1 << 16, 2
        rng = np.random.default_rng(5)
        k = rng.uniform(-60, 60, (L, C))
        v = rng.standard_normal((L, C))
        out = bi_wkv_scan(k, v, WkvParams(np.array([0.0, 50.0]), np.zeros(C)))
        assert np.isfinite(out).all()
        assert np.all(out <= v.max(axis=0) + 1e-9) and np.all(out >= v.min(axis=0) - 1e-9)

    def test_large_decay_approaches_local_window(self, rng):
        L, C = 32, 3
        k, v = rng.standard_normal((L, C)), rng.standard_normal((L, C))
        u = rng.standard_normal(C)
        e = np.exp(k)
        num, den = np.exp(u + k) * v, np.exp(u + k)
        num[1:] += e[:-1] * v[:-1]
        den[1:] += e[:-1]
        num[:-1] += e[1:] * v[1:]
        den[:-1] += e[1:]
        local = num / den
        gaps = [np.abs(bi_wkv_scan(k, v, WkvParams(np.full(C, w), u)) - local).max()
                for w in (10.0, 100.0, 1000.0, 10000.0)]
        assert all(a > b for a, b in zip(gaps, gaps[1:]))
        assert gaps[-1] < 1e-6


class TestProperties:
    @given(st.integers(0, 10_000))
    def test_channel_permutation(self, seed):
        k, v, p = random_case(seed, 20, 6)
        perm = np.random.default_rng(seed).permutation(6)
        out = bi_wkv_scan(k, v, p)
        permuted = bi_wkv_scan(k[:, perm], v[:, perm], WkvParams(p.w[perm], p.u[perm]))
        np.testing.assert_allclose(permuted, out[:, perm], rtol=1e-12)

    @given(st.integers(0, 10_000), st.floats(-20, 20))
    def test_key_shift_invariance(self, seed, s):
        k, v, p = random_case(seed, 16, 3)
        shifted = k.copy()
        shifted[:, 1] += s
        np.testing.assert_allclose(bi_wkv_scan(shifted, v, p), bi_wkv_scan(k, v, p), rtol=1e-9, atol=1e-12)

    @given(st.integers(0, 10_000), st.floats(-3, 3))
    def test_linear_in_values(self, seed, a):
        k, v, p = random_case(seed, 12, 4)
        v2 = np.random.default_rng(seed + 1).standard_normal(v.shape)
        lhs = bi_wkv_scan(k, a * v + v2, p)
        rhs = a * bi_wkv_scan(k, v, p) + bi_wkv_scan(k, v2, p)
        np.testing.assert_allclose(lhs, rhs, rtol=1e-9, atol=1e-12)


class TestBackward:
    def test_zero_upstream(self, rng):
        k, v, p = random_case(1, 8, 3)
        for g in bi_wkv_backward(k, v, p, np.zeros_like(k)):
            np.testing.assert_array_equal(g, 0.0)

    def test_small_case_matches_finite_differences(self):
        k, v, p = random_case(11, 3, 1)
        g_out = np.random.default_rng(12).standard_normal((3, 1))
        gk, gv, gw, gu = bi_wkv_backward(k, v, p, g_out)

        def f_k(x):
            return np.sum(g_out * bi_wkv_scan(x, v, p))

        def f_w(x):
            return np.sum(g_out * bi_wkv_scan(k, v, WkvParams(x, p.u)))

        assert rel_error(gk, finite_diff_grad(f_k, k)) < 1e-4
        assert rel_error(gw, finite_diff_grad(f_w, p.w)) < 1e-4

    def test_uniform_average_value_gradient(self, rng):
        L = 6
        g_out = rng.standard_normal((L, 2))
        _, gv, _, _ = bi_wkv_backward(np.zeros((L, 2)), rng.standard_normal((L, 2)),
                                      WkvParams(np.zeros(2), np.zeros(2)), g_out)
        np.testing.assert_allclose(gv, np.broadcast_to(g_out.sum(axis=0) / L, (L, 2)), rtol=1e-12)

    @given(st.integers(0, 10_000))
    def test_random_gradients(self, seed):
        k, v, p = random_case(seed, 10, 3)
        g_out = np.random.default_rng(seed).standard_normal(k.shape)
        gk, gv, gw, gu = bi_wkv_backward(k, v, p, g_out)
        checks = [
            (gk, lambda x: np.sum(g_out * bi_wkv_scan(x, v, p)), k),
            (gv, lambda x: np.sum(g_out * bi_wkv_scan(k, x, p)), v),
            (gw, lambda x: np.sum(g_out * bi_wkv_scan(k, v, WkvParams(x, p.u))), p.w),
            (gu, lambda x: np.sum(g_out * bi_wkv_scan(k, v, WkvParams(p.w, x))), p.u),
        ]
        for analytic, f, x in checks:
            assert rel_error(analytic, finite_diff_grad(f, x, 1e-4)) < 1e-4

    def test_stress_case_gradients_finite(self):
        L = 1024
        k = np.where(np.arange(L)[:, None] % 2 == 0, 50.0, -50.0) * np.ones((1, 2))
        v = np.random.default_rng(0).standard_normal((L, 2))
        grads = bi_wkv_backward(k, v, WkvParams(np.ones(2), np.zeros(2)), np.ones((L, 2)))
        assert all(np.isfinite(g).all() for g in grads)

    def test_autodiff_op(self, rng):
        k = Tensor(rng.standard_normal((5, 2)), requires_grad=True)
        v = Tensor(rng.standard_normal((5, 2)), requires_grad=True)
        w = Tensor(np.array([0.5, 2.0]), requires_grad=True)
        u = Tensor(np.array([0.1, -0.3]), requires_grad=True)
        with Tape() as tape:
            loss = ops.sum(bi_wkv(k, v, w, u))
        tape.backward(loss)
        gk, gv, gw, gu = bi_wkv_backward(k.data, v.data, WkvParams(w.data, u.data), np.ones((5, 2)))
        np.testing.assert_array_equal(k.grad, gk)
        np.testing.assert_array_equal(w.grad, gw)

    @pytest.mark.parametrize("case", cases("wkv"), ids=lambda c: c.name)
    def test_gradcheck_suite(self, case):
        for report in case.run(1e-3):
            assert report.passed(TOLERANCE), report


class TestQShift:
    @pytest.mark.parametrize("variant", ["additive", "interpolation"])
    def test_mu_one_is_identity(self, rng, variant):
        x = rng.standard_normal((4, 5, 8))
        layer = QShift(8, 1.0, variant).astype(np.float64)
        np.testing.assert_array_equal(layer(x).data, x)

    def test_constant_field_interior(self):
        x = np.full((5, 5, 8), 2.5)
        out = QShift(8, 0.3, "interpolation").astype(np.float64)(x).data
        np.testing.assert_allclose(out[1:-1, 1:-1], 2.5, rtol=1e-12)

    def test_constant_field_additive_gain(self):
        x = np.full((5, 5, 4), 1.0)
        out = QShift(4, 0.25).astype(np.float64)(x).data
        np.testing.assert_allclose(out[2, 2], 1.75, rtol=1e-12)

    @pytest.mark.parametrize("group,dest", [(0, (2, 1)), (1, (0, 1)), (2, (1, 2)), (3, (1, 0))])
    def test_impulse_moves_one_pixel(self, group, dest):
        # groups: from above, from below, from the left, from the right
        x = np.zeros((3, 3, 4))
        x[1, 1, group] = 1.0
        out = QShift(4, 0.0, "interpolation").astype(np.float64)(x).data[..., group]
        expected = np.zeros((3, 3))
        expected[dest] = 1.0
        np.testing.assert_array_equal(out, expected)

    def test_zero_padding_at_borders(self):
        x = np.ones((2, 2, 4))
        shifted = neighbor_shift(x).data
        assert shifted[0, :, 0].sum() == 0 and shifted[1, :, 1].sum() == 0
        assert shifted[:, 0, 2].sum() == 0 and shifted[:, 1, 3].sum() == 0

    def test_mu_clamped(self, rng):
        x = rng.standard_normal((3, 3, 4))
        hi = QShift(4, 1.7).astype(np.float64)
        np.testing.assert_array_equal(hi(x).data, x)

    def test_channels_must_divide_by_four(self):
        with pytest.raises(ConfigurationError):
            QShift(6)
        with pytest.raises(ConfigurationError):
            neighbor_shift(np.ones((2, 2, 6)))

    def test_unknown_variant(self):
        with pytest.raises(ConfigurationError):
            QShift(4, variant="diagonal")

    def test_functional_form(self, rng):
        x = rng.standard_normal((3, 4, 8))
        layer = QShift(8, 0.4).astype(np.float64)
        np.testing.assert_array_equal(q_shift(x, layer).data, layer(x).data)
