import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from wkvseg.bench import CSV_HEADER, BenchOp, BenchRecord, bench, noop_op, read_csv, scaling_exponent, wkv_ops, write_csv
from wkvseg.errors import ContractError, DimensionError
from wkvseg.metrics import boundary_band, boundary_iou, default_band_width, iou


def band_oracle(mask, d):
    """Mask pixels with a complement pixel (or off-image position) within Chebyshev distance d."""
    h, w = mask.shape
    out = np.zeros_like(mask)
    for i in range(h):
        for j in range(w):
            if not mask[i, j]:
                continue
            for di in range(-d, d + 1):
                for dj in range(-d, d + 1):
                    y, x = i + di, j + dj
                    if not (0 <= y < h and 0 <= x < w) or not mask[y, x]:
                        out[i, j] = True
    return out


def iou_oracle(a, b):
    inter = sum(1 for x, y in zip(a.ravel(), b.ravel()) if x and y)
    union = sum(1 for x, y in zip(a.ravel(), b.ravel()) if x or y)
    return inter / union if union else 1.0


masks = st.integers(0, 10_000).map(lambda s: np.random.default_rng(s).uniform(size=(9, 11)) > 0.4)


class TestIoU:
    def test_identical(self):
        m = np.zeros((5, 5), bool)
        m[1:3, 2:5] = True
        assert iou(m, m) == 1.0

    def test_disjoint(self):
        a, b = np.zeros((4, 4), bool), np.zeros((4, 4), bool)
        a[0], b[3] = True, True
        assert iou(a, b) == 0.0

    def test_two_by_two(self):
        a = np.array([[1, 1], [0, 0]], bool)
        b = np.array([[0, 1], [0, 1]], bool)
        assert iou(a, b) == pytest.approx(1 / 3, abs=0)

    def test_both_empty(self):
        assert iou(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            iou(np.zeros((2, 2)), np.zeros((2, 3)))

    @given(masks, masks)
    def test_symmetric_and_matches_count(self, a, b):
        assert iou(a, b) == iou(b, a)
        assert iou(a, b) == pytest.approx(iou_oracle(a, b), abs=1e-15)
        assert 0.0 <= iou(a, b) <= 1.0


class TestBoundaryIoU:
    @given(masks, st.integers(1, 3))
    def test_band_matches_brute_force(self, m, d):
        np.testing.assert_array_equal(boundary_band(m, d), band_oracle(m, d))

    @given(masks, masks)
    def test_symmetric(self, a, b):
        assert boundary_iou(a, b, 1) == boundary_iou(b, a, 1)

    @pytest.mark.parametrize("d", [1, 2, 5])
    def test_identical(self, d):
        m = np.zeros((20, 20), bool)
        m[3:15, 4:11] = True
        assert boundary_iou(m, m, d) == 1.0

    def test_shifted_square(self):
        a = np.zeros((32, 32), bool)
        a[8:24, 4:20] = True
        b = np.roll(a, 8, axis=1)
        assert iou(a, b) == pytest.approx(1 / 3)
        assert boundary_iou(a, b, 1) < iou(a, b)

    def test_full_image_with_hole(self):
        a = np.ones((9, 9), bool)
        b = a.copy()
        b[4, 4] = False
        band_a, band_b = band_oracle(a, 1), band_oracle(b, 1)
        assert band_a.sum() == 32 and band_b.sum() == 40
        assert boundary_iou(a, b, 1) == pytest.approx(32 / 40, abs=0)
        assert boundary_iou(a, b, 1) == iou_oracle(band_a, band_b)

    def test_default_width(self):
        assert default_band_width((64, 64)) == 2
        assert default_band_width((10, 10)) == 1
        assert default_band_width((1024, 1024)) == 29

    def test_width_contract(self):
        with pytest.raises(ContractError):
            boundary_band(np.ones((3, 3)), 0)


def records(exponent, c=0.37):
    return [BenchRecord("x", n, 1, 5, c * n ** exponent, 0.0, 1.0) for n in (2 ** 10, 2 ** 12, 2 ** 13, 2 ** 16)]


class TestScalingExponent:
    @pytest.mark.parametrize("p", [1.0, 2.0, 0.5, 1.3])
    def test_exact_power_law(self, p):
        assert abs(scaling_exponent(records(p)) - p) < 1e-9

    def test_too_few(self):
        with pytest.raises(ContractError):
            scaling_exponent(records(1.0)[:2])

    def test_nonpositive(self):
        bad = records(1.0)
        bad[0] = BenchRecord("x", 1024, 1, 5, 0.0, 0.0, 0.0)
        with pytest.raises(ContractError):
            scaling_exponent(bad)


class TestBench:
    def test_noop_floor(self):
        recs = bench(noop_op(), [1, 2, 3], repeats=5)
        assert all(r.median_ms < 1.0 for r in recs)
        assert all(r.p10_ms <= r.median_ms <= r.p90_ms for r in recs)

    def test_contracts(self):
        with pytest.raises(ContractError):
            bench(noop_op(), [1, 2])
        with pytest.raises(ContractError):
            bench(noop_op(), [3, 2, 1])
        with pytest.raises(ContractError):
            bench(noop_op(), [1, 2, 3], repeats=4)

    def test_failing_size_skipped(self):
        def setup(n, c, rng):
            if n == 2:
                raise RuntimeError("boom")
            return lambda: None
        with pytest.warns(UserWarning, match="boom"):
            recs = bench(BenchOp("flaky", setup), [1, 2, 3])
        assert [r.input_tokens for r in recs] == [1, 3]

    def test_inputs_depend_only_on_seed_and_size(self):
        seen = []

        def setup(n, c, rng):
            seen.append(rng.standard_normal())
            return lambda: None
        bench(BenchOp("probe", setup), [4, 8, 16], seed=3)
        bench(BenchOp("probe", setup), [8, 16, 32], seed=3)
        assert seen[1:3] == seen[3:5]

    def test_scan_grows_slower_than_reference(self):
        ops_ = wkv_ops()
        sizes = [2 ** e for e in range(8, 12)]
        scan = bench(ops_["bi_wkv_scan"], sizes, channels=16)
        ref = bench(ops_["bi_wkv_reference"], sizes, channels=16)
        scan_ratio = scan[-1].median_ms / scan[0].median_ms
        ref_ratio = ref[-1].median_ms / ref[0].median_ms
        assert ref_ratio >= 4 * scan_ratio

    def test_scan_monotone(self):
        recs = bench(wkv_ops()["bi_wkv_scan"], [2 ** 12, 2 ** 14, 2 ** 16], repeats=5)
        med = [r.median_ms for r in recs]
        assert med == sorted(med)

    def test_csv_round_trip(self, tmp_path):
        recs = records(1.0)
        write_csv(tmp_path / "b.csv", recs)
        assert (tmp_path / "b.csv").read_text().splitlines()[0] == ",".join(CSV_HEADER)
        back = read_csv(tmp_path / "b.csv")
        assert [r.input_tokens for r in back] == [r.input_tokens for r in recs]
        np.testing.assert_allclose([r.median_ms for r in back], [r.median_ms for r in recs], rtol=1e-6)
