import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gmsr import metrics as M

import oracles


def pair(shape=(4, 4, 3), seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(size=shape), rng.uniform(size=shape)


class TestRmsePsnr:
    def test_identical(self):
        z, _ = pair()
        assert M.rmse(z, z) == 0.0
        assert M.psnr(z, z) == math.inf

    def test_constant_error(self):
        ref = np.full((5, 5, 2), 0.5)
        assert M.rmse(ref + 0.1, ref) == pytest.approx(0.1, abs=1e-15)
        assert M.psnr(ref + 0.1, ref) == pytest.approx(20.0, abs=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_match_direct_formulas(self, seed):
        z, ref = pair(seed=seed)
        assert abs(M.rmse(z, ref) - oracles.rmse(z, ref)) < 1e-12
        assert abs(M.psnr(z, ref) - oracles.psnr(z, ref)) < 1e-12

    def test_psnr_decreases_with_noise(self):
        ref = np.random.default_rng(1).uniform(size=(16, 16, 4))
        noise = np.random.default_rng(2).normal(size=ref.shape)
        vals = [M.psnr(ref + a * noise, ref) for a in (0.01, 0.05, 0.2)]
        assert vals[0] > vals[1] > vals[2]

    def test_errors(self):
        with pytest.raises(ValueError):
            M.rmse(np.zeros(3), np.zeros(4))
        with pytest.raises(ValueError):
            M.psnr(np.zeros(3), np.ones(3), peak=0)


class TestAssim:
    def test_identity(self):
        z, _ = pair((12, 12, 3))
        assert M.assim(z, z) == pytest.approx(1.0, abs=1e-15)

    def test_inverted_structure(self):
        ref = np.tile(np.linspace(0, 1, 12), (12, 1))[:, :, None]
        assert M.assim(1 - ref, ref) < 1.0

    def test_symmetric(self):
        z, ref = pair((9, 10, 2), seed=3)
        assert M.assim(z, ref) == pytest.approx(M.assim(ref, z), abs=1e-15)

    @pytest.mark.parametrize("shape,k", [((8, 8), 7), ((11, 11), 11), ((13, 9), 9), ((16, 12), 11)])
    def test_matches_sliding_window_reference(self, shape, k):
        z, ref = pair(shape, seed=sum(shape))
        assert abs(M.ssim_band(z, ref) - oracles.ssim_sliding(z, ref, k)) < 1e-10

    def test_window_shrinks(self):
        assert M.window_size(64, 64) == 11
        assert M.window_size(8, 20) == 7
        assert M.window_size(3, 3) == 3
        with pytest.raises(ValueError):
            M.window_size(2, 9)

    def test_gaussian_window(self):
        w = M.gaussian_window(11)
        assert w.sum() == pytest.approx(1.0, abs=1e-15)
        ref = np.array(oracles.gaussian_kernel(11))
        np.testing.assert_allclose(w, ref, atol=1e-15)


class TestSam:
    def test_identical(self):
        z, _ = pair()
        assert M.sam(z, z) == pytest.approx(0.0, abs=1e-6)

    def test_orthogonal(self):
        a = np.array([[[1.0, 0.0]]])
        b = np.array([[[0.0, 1.0]]])
        assert M.sam(a, b) == pytest.approx(90.0, abs=1e-12)

    def test_scale_invariance(self):
        z, ref = pair(seed=4)
        assert M.sam(2.5 * ref, ref) == pytest.approx(0.0, abs=1e-6)
        field = np.random.default_rng(5).uniform(0.1, 10, size=(4, 4, 1))
        assert abs(M.sam(z * field, ref) - M.sam(z, ref)) < 1e-10
        assert abs(M.sam(z, ref * field) - M.sam(z, ref)) < 1e-10

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_direct_formula(self, seed):
        z, ref = pair(seed=seed)
        assert abs(M.sam(z, ref) - oracles.sam_degrees(z, ref)) < 1e-12

    def test_zero_spectra_excluded(self):
        z, ref = pair(seed=6)
        z[0, 0] = 0.0
        ref[1, 2] = 0.0
        value, excluded = M.sam(z, ref, return_excluded=True)
        assert excluded == 2
        assert abs(value - oracles.sam_degrees(z, ref)) < 1e-12

    @given(st.integers(0, 10_000))
    @settings(max_examples=25)
    def test_range(self, seed):
        rng = np.random.default_rng(seed)
        v = M.sam(rng.normal(size=(3, 3, 4)), rng.normal(size=(3, 3, 4)))
        assert 0.0 <= v <= 180.0


class TestReport:
    def test_per_band_aggregates_to_rmse(self):
        z, ref = pair((6, 5, 4), seed=7)
        rep = M.evaluate(z, ref)
        band_mse = [np.mean(rep.per_band_rmse[:, :, c] ** 2) for c in range(4)]
        assert abs(math.sqrt(np.mean(band_mse)) - rep.rmse) < 1e-12
        assert rep.per_band_rmse.shape == (6, 5, 4)

    def test_csv_row_and_inf(self):
        z, _ = pair((5, 5, 2))
        rep = M.evaluate(z, z)
        row = rep.csv_row("x")
        assert row.split(",")[0] == "x" and row.split(",")[2] == "inf"
        assert M.MetricsReport.CSV_HEADER == "name,rmse,psnr,assim,sam"
        assert not rep.is_finite()

    def test_invariants(self):
        z, ref = pair((7, 7, 3), seed=8)
        rep = M.evaluate(z, ref)
        assert rep.rmse >= 0 and 0 <= rep.sam <= 180 and rep.assim <= 1
        assert rep.is_finite()
