import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from hetsample.errors import MetricError
from hetsample.image_metrics import (
    DetrendModel,
    MetricVector,
    Skeleton,
    arc_length,
    contrast,
    detrend,
    detrend_metrics,
    extract_metrics,
    fit_detrend,
    gaussian_blur,
    medial_heterogeneity,
    noise_sigma,
    skeletonize,
    vessel_density,
)

from . import oracles

EIGHT = np.ones((3, 3), dtype=bool)


def noisy_constant(sigma, seed, shape=(256, 256), level=128.0):
    return level + np.random.default_rng(seed).normal(0, sigma, size=shape)


def is_simple_path(lines):
    """One 8-connected component, two endpoints, no pixel with more than two neighbours."""
    _, n_components = ndimage.label(lines, structure=EIGHT)
    neighbours = ndimage.convolve(lines.astype(int), EIGHT.astype(int), mode="constant") - 1
    degree = neighbours[lines]
    return n_components == 1 and degree.max() <= 2 and np.count_nonzero(degree == 1) == 2


class TestContrast:
    def test_two_levels(self):
        mask = np.zeros((10, 10), bool)
        mask[3:6] = True
        image = np.where(mask, 100.0, 50.0)
        assert contrast(image, mask) == 2.0

    def test_equal_levels(self):
        mask = np.eye(8, dtype=bool)
        assert contrast(np.full((8, 8), 7.0), mask) == 1.0

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(0)
        image = rng.uniform(1, 255, size=(37, 41))
        mask = rng.random((37, 41)) < 0.3
        fg = [image[i, j] for i in range(37) for j in range(41) if mask[i, j]]
        bg = [image[i, j] for i in range(37) for j in range(41) if not mask[i, j]]
        want = (sum(fg) / len(fg)) / (sum(bg) / len(bg))
        assert contrast(image, mask) == pytest.approx(want, abs=1e-12)

    @pytest.mark.parametrize("c", [0.5, 3.0, 1e-3, 17.25])
    def test_scale_invariant(self, c):
        rng = np.random.default_rng(1)
        image = rng.uniform(1, 100, size=(20, 20))
        mask = rng.random((20, 20)) < 0.5
        assert contrast(c * image, mask) == pytest.approx(contrast(image, mask), abs=1e-9)

    def test_errors(self):
        image = np.ones((4, 4))
        with pytest.raises(MetricError):
            contrast(image, np.zeros((4, 4), bool))
        with pytest.raises(MetricError):
            contrast(image, np.ones((4, 4), bool))
        mask = np.eye(4, dtype=bool)
        with pytest.raises(MetricError, match="undefined contrast"):
            contrast(np.where(mask, 5.0, 0.0), mask)
        with pytest.raises(ValueError):
            contrast(np.ones((4, 4)), np.ones((3, 4), bool))


class TestNoiseSigma:
    def test_constant_image(self):
        assert noise_sigma(np.full((64, 64), 42.0), np.zeros((64, 64), bool)) == 0.0

    @pytest.mark.parametrize("sigma,tol", [(10, 1), (20, 2)])
    def test_recovers_gaussian_sigma(self, sigma, tol):
        mask = np.zeros((256, 256), bool)
        est = [noise_sigma(noisy_constant(sigma, s), mask) for s in range(10)]
        assert abs(np.mean(est) - sigma) < tol

    def test_foreground_excluded(self):
        # a wildly varying "vessel" region must not leak into the estimate
        rng = np.random.default_rng(3)
        image = noisy_constant(5, 3)
        mask = np.zeros_like(image, bool)
        mask[100:140, :] = True
        image[mask] += rng.uniform(0, 1000, size=mask.sum())
        assert abs(noise_sigma(image, mask) - 5) < 0.5

    def test_odd_size_drops_last_row_and_column(self):
        image = noisy_constant(4, 2, shape=(65, 67))
        image[-1, :] = 1e6
        image[:, -1] = -1e6
        mask = np.zeros(image.shape, bool)
        assert noise_sigma(image, mask) == noise_sigma(image[:64, :66], mask[:64, :66])

    def test_insufficient_background(self):
        mask = np.ones((64, 64), bool)
        mask[:10, :10] = False
        with pytest.raises(MetricError, match="insufficient background"):
            noise_sigma(noisy_constant(3, 0, shape=(64, 64)), mask)

    def test_shift_invariant_and_scale_linear(self):
        mask = np.zeros((256, 256), bool)
        image = noisy_constant(8, 5)
        base = noise_sigma(image, mask)
        assert noise_sigma(image + 1000.0, mask) == pytest.approx(base, rel=1e-9)
        assert noise_sigma(2.5 * image, mask) == pytest.approx(2.5 * base, rel=0.05)


class TestSkeleton:
    def test_empty(self):
        s = skeletonize(np.zeros((10, 10), bool))
        assert s.arc_length == 0 and len(s) == 0

    def test_thin_line_unchanged(self):
        mask = np.zeros((11, 60), bool)
        mask[5, 3:53] = True
        s = skeletonize(mask)
        np.testing.assert_array_equal(s.mask, mask)
        assert s.arc_length == 49

    def test_filled_bar(self):
        mask = np.zeros((30, 220), bool)
        mask[10:20, 10:210] = True
        s = skeletonize(mask)
        assert is_simple_path(s.mask)
        assert abs(s.arc_length - 190) <= 19
        np.testing.assert_array_equal(skeletonize(s.mask).mask, s.mask)

    def test_single_pixel(self):
        mask = np.zeros((5, 5), bool)
        mask[2, 2] = True
        s = skeletonize(mask)
        assert len(s) == 1 and s.arc_length == 0

    def test_diagonal_steps(self):
        lines = np.eye(5, dtype=bool)
        assert arc_length(lines) == pytest.approx(4 * math.sqrt(2))

    def test_pixels_are_xy(self):
        mask = np.zeros((4, 6), bool)
        mask[1, 2:5] = True
        assert skeletonize(mask).pixels.tolist() == [[2, 1], [3, 1], [4, 1]]

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_subset_of_mask_and_idempotent(self, seed):
        rng = np.random.default_rng(seed)
        mask = ndimage.binary_dilation(rng.random((48, 48)) < 0.02, iterations=2)
        s = skeletonize(mask)
        assert not np.any(s.mask & ~mask)
        np.testing.assert_array_equal(skeletonize(s.mask).mask, s.mask)
        counts = ndimage.convolve(s.mask.astype(int), EIGHT.astype(int), mode="constant")
        assert (s.arc_length == 0) == (not np.any(counts[s.mask] > 1))


class TestVesselDensity:
    def test_empty(self):
        assert vessel_density(Skeleton(np.zeros((4, 4), bool), 0.0), 16) == 0.0

    def test_ratio(self):
        assert vessel_density(Skeleton(np.zeros((1, 1), bool), 49.0), 256 * 256) == 49 / 65536

    def test_grid_of_bars(self):
        mask = np.zeros((256, 256), bool)
        for top in (20, 80, 140, 200):
            mask[top:top + 5, 60:180] = True
        mask[100:220, 20:25] = True
        hand = (4 * 120 + 120) / mask.size
        got = vessel_density(skeletonize(mask), mask.size)
        assert abs(got - hand) / hand < 0.10

    def test_padding(self):
        mask = np.zeros((64, 64), bool)
        mask[30:34, 8:56] = True
        small = skeletonize(mask)
        padded = np.pad(mask, ((0, 64), (0, 0)))
        big = skeletonize(padded)
        assert vessel_density(big, mask.size) == pytest.approx(vessel_density(small, mask.size))
        assert vessel_density(big, padded.size) == pytest.approx(vessel_density(small, mask.size) / 2, rel=0.1)

    def test_bound(self):
        mask = np.random.default_rng(2).random((64, 64)) < 0.5
        assert vessel_density(skeletonize(mask), mask.size) <= math.sqrt(2)


class TestBlur:
    def test_constant(self):
        np.testing.assert_allclose(gaussian_blur(np.full((30, 20), 3.7)), 3.7, atol=1e-9)

    def test_impulse_sums_to_one(self):
        image = np.zeros((41, 41))
        image[20, 20] = 1
        assert gaussian_blur(image, 1.0).sum() == pytest.approx(1.0, abs=1e-9)
        assert gaussian_blur(image, 2.5).sum() == pytest.approx(1.0, abs=1e-9)

    @pytest.mark.parametrize("shape,sigma", [((15, 12), 1.0), ((9, 23), 1.7), ((3, 2), 1.0)])
    def test_matches_dense_convolution(self, shape, sigma):
        image = np.random.default_rng(4).uniform(0, 255, size=shape)
        want = np.array(oracles.blur_dense(image.tolist(), sigma))
        np.testing.assert_allclose(gaussian_blur(image, sigma), want, atol=1e-9, rtol=0)

    def test_rejects_bad_sigma(self):
        with pytest.raises(ValueError):
            gaussian_blur(np.ones((3, 3)), 0)


class TestHeterogeneity:
    def test_constant_image(self):
        mask = np.zeros((20, 20), bool)
        mask[10, 3:17] = True
        h, m = medial_heterogeneity(np.full((20, 20), 9.0), skeletonize(mask))
        assert h == pytest.approx(0, abs=1e-9)
        assert m == pytest.approx(9.0)

    def test_two_pixels(self):
        image = np.full((40, 40), 10.0)
        image[:, 20:] = 20.0
        lines = np.zeros((40, 40), bool)
        lines[20, 5] = lines[20, 35] = True
        h, m = medial_heterogeneity(image, Skeleton(lines, 0.0))
        assert h == pytest.approx(5.0, abs=1e-9)
        assert m == pytest.approx(15.0, abs=1e-9)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(7)
        image = rng.uniform(0, 100, size=(24, 24))
        mask = np.zeros((24, 24), bool)
        mask[6:9, 2:22] = True
        mask[2:22, 15:18] = True
        skel = skeletonize(mask)
        blurred = oracles.blur_dense(image.tolist(), 1.0)
        vals = [blurred[y][x] for x, y in skel.pixels.tolist()]
        mean = sum(vals) / len(vals)
        std = math.sqrt(sum((v - mean) ** 2 for v in vals) / len(vals))
        h, m = medial_heterogeneity(image, skel)
        assert h == pytest.approx(std, abs=1e-9)
        assert m == pytest.approx(mean, abs=1e-9)

    def test_empty_skeleton(self):
        with pytest.raises(MetricError, match="no medial line"):
            medial_heterogeneity(np.ones((5, 5)), skeletonize(np.zeros((5, 5), bool)))


class TestDetrend:
    def test_exact_line(self):
        model = fit_detrend([(m, 2 * m + 1) for m in (0.5, 1.0, 4.0, 9.0)])
        assert model.slope == pytest.approx(2, abs=1e-9)
        assert model.intercept == pytest.approx(1, abs=1e-9)

    def test_two_points(self):
        assert fit_detrend([(0, 0), (1, 1)]) == DetrendModel(1.0, 0.0)

    def test_matches_normal_equations(self):
        rng = np.random.default_rng(5)
        ms = rng.uniform(20, 200, 50)
        hs = 0.3 * ms + 4 + rng.normal(0, 3, 50)
        model = fit_detrend(list(zip(ms, hs)))
        a, b = oracles.ols(ms.tolist(), hs.tolist())
        assert model.slope == pytest.approx(a, abs=1e-9)
        assert model.intercept == pytest.approx(b, abs=1e-9)

    def test_degenerate(self):
        with pytest.raises(MetricError, match="degenerate fit"):
            fit_detrend([(3, 1), (3, 2)])
        with pytest.raises(MetricError):
            fit_detrend([(3, 1)])

    def test_apply(self):
        model = DetrendModel(0.0, 4.0)
        assert detrend(10, 123.0, model) == 6
        line = DetrendModel(2.0, 1.0)
        assert detrend(line.expected(3.5), 3.5, line) == 0

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(3, 200))
    def test_residuals_centred_and_uncorrelated(self, seed, n):
        rng = np.random.default_rng(seed)
        ms = rng.uniform(0, 100, n)
        hs = rng.normal(0, 1, n) + 0.1 * ms
        model = fit_detrend(list(zip(ms, hs)))
        res = np.array([detrend(h, m, model) for m, h in zip(ms, hs)])
        assert abs(res.mean()) < 1e-6
        assert abs(np.corrcoef(res, ms)[0, 1]) < 1e-6 or res.std() < 1e-9


class TestExtractMetrics:
    @pytest.fixture
    def bar(self):
        rng = np.random.default_rng(0)
        image = 50 + rng.normal(0, 5, size=(128, 128))
        mask = np.zeros((128, 128), bool)
        mask[60:68, 10:118] = True
        image[mask] += 100
        return image, mask

    def test_bright_bar(self, bar):
        image, mask = bar
        v = extract_metrics(image, mask)
        assert v.ok
        assert v.contrast == pytest.approx(3.0, rel=0.01)
        assert v.noise_sigma == pytest.approx(5.0, rel=0.1)
        assert v.vessel_density == pytest.approx(100 / mask.size, rel=0.1)
        assert v.detrended_heterogeneity is None
        h, m = medial_heterogeneity(image, skeletonize(mask))
        assert (v.heterogeneity, v.mean_medial_intensity) == (h, m)

    def test_all_background(self):
        v = extract_metrics(noisy_constant(3, 1, shape=(64, 64)), np.zeros((64, 64), bool))
        assert set(v.errors) == {"contrast", "heterogeneity"}
        assert v.contrast is None and v.heterogeneity is None
        assert v.noise_sigma is not None and v.vessel_density == 0.0

    def test_dataset_detrend(self):
        vectors = [MetricVector(heterogeneity=h, mean_medial_intensity=m) for m, h in [(1, 2), (2, 5), (3, 5), (4, 9)]]
        vectors.append(MetricVector(errors={"heterogeneity": "no medial line"}))
        model = detrend_metrics(vectors)
        res = [v.detrended_heterogeneity for v in vectors[:4]]
        assert sum(res) == pytest.approx(0, abs=1e-9)
        assert vectors[4].detrended_heterogeneity is None
        assert res[0] == pytest.approx(2 - model.expected(1))
