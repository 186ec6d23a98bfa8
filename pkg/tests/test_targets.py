import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import logsumexp

from trackfeat.geometry import Warp
from trackfeat.targets import (PriorParams, TargetDistribution, coverage_loss, cross_entropy, detector_loss,
                               gaussian_kernel_1d, log_posterior, rasterize_deltas, reflect_blur_matrix,
                               smooth_log_prior, softmax_map, topk_target, two_view_log_prior)
from trackfeat.types import KeypointSet, PixelGrid

from conftest import max_rel_err, numeric_grad


def _target(shape, cells):
    return TargetDistribution(PixelGrid(shape[1], shape[0]), np.array(sorted(cells), dtype=np.int64))


def _identity_warp(h, w, shift=0):
    c = PixelGrid(w, h).centers().copy()
    c[..., 0] += shift
    dom = (c[..., 0] >= 0) & (c[..., 0] < w)
    return Warp(np.where(dom[..., None], c, np.nan), dom)


class TestRasterize:
    def test_nearest_cell(self):
        m = rasterize_deltas(KeypointSet([[3.2, 4.8]]), PixelGrid(8, 8))
        assert m[4, 3] == 1.0 and m.sum() == 1.0

    def test_idempotent(self):
        m = rasterize_deltas(KeypointSet([[1.1, 1.2], [1.9, 1.7]]), PixelGrid(4, 4))
        assert m[1, 1] == 1.0 and m.sum() == 1.0

    def test_empty(self):
        assert not rasterize_deltas(KeypointSet(np.zeros((0, 2))), PixelGrid(4, 4)).any()

    def test_rejects_outside(self):
        with pytest.raises(ValueError):
            rasterize_deltas(KeypointSet([[4.0, 1.0]]), PixelGrid(4, 4))


class TestSmoothLogPrior:
    def test_isolated_peak(self):
        d = np.zeros((21, 21))
        d[10, 10] = 1
        h = smooth_log_prior(d)
        assert abs(h[10, 10] - 50.0) <= 1e-9
        assert h[0, 0] == 0.0 and h[10, 0] == 0.0

    def test_zero_map(self):
        assert not smooth_log_prior(np.zeros((9, 9))).any()

    def test_neighbouring_deltas_kernel_sum(self):
        d = np.zeros((11, 11))
        d[5, 4] = d[5, 5] = 1
        h = smooth_log_prior(d)
        # direct 2-D kernel summation with the truncated, renormalized Gaussian
        x = np.arange(-2, 3)
        k = np.exp(-0.5 * (x / 0.5) ** 2)
        k /= k.sum()
        k2 = np.outer(k, k)
        expected = np.zeros((11, 11))
        for r, c in [(5, 4), (5, 5)]:
            expected[r - 2:r + 3, c - 2:c + 3] += k2
        expected *= 50.0 / k2[2, 2]
        np.testing.assert_allclose(h, expected, atol=1e-9)
        assert h[5, 5] == pytest.approx(50.0 * (1 + k[1] / k[2]))

    def test_peak_to_baseline_ratio(self):
        d = np.zeros((9, 9))
        d[4, 4] = 1
        h = smooth_log_prior(d, PriorParams(vartheta=7.0))
        assert math.exp(h[4, 4]) / math.exp(h[0, 0]) == pytest.approx(math.exp(7.0), rel=1e-12)


class TestTwoViewPrior:
    def test_uniform_other_view(self):
        h_a = np.random.default_rng(0).random((6, 6))
        w = _identity_warp(6, 6)
        out_a, _ = two_view_log_prior(h_a, np.zeros((6, 6)), w, w)
        np.testing.assert_allclose(out_a, h_a)

    def test_shared_track_doubles_peak(self):
        d_a = np.zeros((16, 16))
        d_a[8, 4] = d_a[3, 12] = 1
        d_b = np.zeros((16, 16))
        d_b[8, 4] = 1  # only the first track is seen in both views
        w = _identity_warp(16, 16)
        out_a, out_b = two_view_log_prior(smooth_log_prior(d_a), smooth_log_prior(d_b), w, w)
        assert out_a[8, 4] == pytest.approx(100.0)
        assert out_a[3, 12] == pytest.approx(50.0)
        assert out_b[3, 12] == pytest.approx(50.0)

    def test_outside_domain_keeps_own(self):
        rng = np.random.default_rng(1)
        h_a, h_b = rng.random((5, 8)), rng.random((5, 8))
        w = _identity_warp(5, 8, shift=3)
        out_a, _ = two_view_log_prior(h_a, h_b, w, w)
        np.testing.assert_allclose(out_a[:, 5:], h_a[:, 5:])
        np.testing.assert_allclose(out_a[:, :5], h_a[:, :5] + h_b[:, 3:], atol=1e-9)


class TestPosterior:
    def test_zero_scores(self):
        p = np.arange(12.0).reshape(3, 4)
        np.testing.assert_array_equal(log_posterior(p, np.zeros((3, 4))), p)

    def test_flat_prior_argmax(self):
        s = np.random.default_rng(2).standard_normal((5, 5))
        assert np.argmax(log_posterior(np.zeros((5, 5)), s)) == np.argmax(s)

    def test_hand_sum(self):
        prior = np.array([[50, 0, 0, 0], [0, 100, 0, 0], [0, 0, 0, 0], [0, 0, 0, 50.0]])
        scores = np.array([[1, -1, 0, 2], [0, -3, 0, 0], [5, 0, 0, 0], [0, 0, 0, -50.0]])
        out = log_posterior(prior, scores)
        assert out[0, 0] == 51 and out[1, 1] == 97 and out[2, 0] == 5 and out[3, 3] == 0 and out[0, 3] == 2

    def test_grid_mismatch(self):
        with pytest.raises(ValueError):
            log_posterior(np.zeros((3, 3)), np.zeros((3, 4)))

    def test_does_not_alias_scores(self):
        s = np.ones((2, 2))
        out = log_posterior(np.zeros((2, 2)), s)
        out[0, 0] = 9
        assert s[0, 0] == 1


class TestTopK:
    def test_point_mass(self):
        p = np.random.default_rng(3).standard_normal((4, 5))
        (t,) = topk_target([p], 1)
        assert t.support.tolist() == [int(np.argmax(p))]

    def test_constant_ties_raster_order(self):
        (t,) = topk_target([np.zeros((3, 3))], 5)
        assert t.support.tolist() == [0, 1, 2, 3, 4]

    def test_batch_level_selection(self):
        t = topk_target([np.zeros((3, 3)), np.ones((3, 3))], 4)
        assert t[0].skip and t[0].weight == 0.0
        assert t[1].support.tolist() == [0, 1, 2, 3]
        assert t[1].dense().sum() == pytest.approx(1.0)

    def test_rejects_bad_k(self):
        with pytest.raises(ValueError):
            topk_target([np.zeros((2, 2))], 5)
        with pytest.raises(ValueError):
            topk_target([np.zeros((2, 2))], 0)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 4), st.integers(0, 2 ** 31), st.integers(1, 3))
    def test_exact_support_size_with_ties(self, n, seed, levels):
        rng = np.random.default_rng(seed)
        maps = [rng.integers(0, levels, (3, 4)).astype(float) for _ in range(n)]
        k = int(rng.integers(1, 12 * n + 1))
        ts = topk_target(maps, k)
        assert sum(len(t.support) for t in ts) == k
        # every selected value is at least every unselected one
        sel = np.concatenate([m.ravel()[t.support] for m, t in zip(maps, ts)])
        rest = np.concatenate([np.delete(m.ravel(), t.support) for m, t in zip(maps, ts)])
        if len(rest):
            assert sel.min() >= rest.max()


class TestCrossEntropy:
    def test_uniform(self):
        loss, _ = cross_entropy(np.zeros((2, 2)), _target((2, 2), range(4)))
        assert loss == pytest.approx(math.log(4), abs=1e-12)

    def test_matching_softmax_is_minimum(self):
        s = np.full((3, 3), -30.0)
        s.ravel()[[1, 5, 7]] = 0.0
        loss, _ = cross_entropy(s, _target((3, 3), [1, 5, 7]))
        assert loss == pytest.approx(math.log(3), abs=1e-10)

    def test_logsumexp_oracle(self):
        s = np.random.default_rng(4).standard_normal((3, 3))
        loss, grad = cross_entropy(s, _target((3, 3), [4]))
        assert abs(loss - (logsumexp(s) - s[1, 1])) < 1e-10
        expected = np.exp(s - logsumexp(s))
        expected[1, 1] -= 1
        np.testing.assert_allclose(grad, expected, atol=1e-12)

    def test_skip_target(self):
        loss, grad = cross_entropy(np.ones((2, 2)), _target((2, 2), []))
        assert loss == 0.0 and not grad.any()

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2 ** 31), st.integers(1, 9))
    def test_lower_bound(self, seed, m):
        rng = np.random.default_rng(seed)
        s = rng.standard_normal((3, 3)) * 3
        cells = rng.choice(9, size=m, replace=False)
        loss, _ = cross_entropy(s, _target((3, 3), cells))
        assert loss >= math.log(m) - 1e-12

    def test_soft_target_degenerates_to_peak(self):
        # without binarization a point mass at argmax q beats predicting q itself
        for q in ([0.7, 0.2, 0.1], [0.5, 0.25, 0.25], [0.4, 0.3, 0.2, 0.1]):
            q = np.array(q)
            assert np.max(q) > np.exp(-(-np.sum(q * np.log(q))))
            ce_match = -np.sum(q * np.log(q))
            ce_peak = -np.log(q.max())
            assert ce_peak < ce_match


class TestCoverage:
    def test_uniform(self):
        loss, _ = coverage_loss(np.zeros((10, 12)), np.ones((10, 12), bool), PriorParams(sigma_coverage=2.0))
        assert loss == pytest.approx(math.log(120), abs=1e-10)

    def test_prefers_valid_region(self):
        valid = np.ones((16, 16), bool)
        valid[:6] = False  # sky
        inside = np.where(valid, 5.0, -5.0)
        params = PriorParams(sigma_coverage=2.0)
        assert coverage_loss(inside, valid, params)[0] < coverage_loss(-inside, valid, params)[0]

    def test_dense_convolution_oracle(self):
        rng = np.random.default_rng(5)
        s = rng.standard_normal((8, 8))
        valid = rng.random((8, 8)) > 0.3
        sigma = 1.5
        loss, _ = coverage_loss(s, valid, PriorParams(sigma_coverage=sigma))
        # explicit 64 x 64 convolution with mirrored indices
        radius = math.ceil(3 * sigma)
        k = gaussian_kernel_1d(sigma, radius)

        def mirror(i):
            i = i % 16
            return 15 - i if i >= 8 else i

        conv = np.zeros((64, 64))
        for r in range(8):
            for c in range(8):
                for dr in range(-radius, radius + 1):
                    for dc in range(-radius, radius + 1):
                        conv[r * 8 + c, mirror(r + dr) * 8 + mirror(c + dc)] += k[dr + radius] * k[dc + radius]
        p = softmax_map(s).ravel()
        m = valid.ravel() / valid.sum()
        expected = -np.sum((conv @ m) * np.log(conv @ p))
        assert abs(loss - expected) < 1e-8

    def test_blur_matrix_doubly_stochastic(self):
        b = reflect_blur_matrix(7, 3.0, 9)
        np.testing.assert_allclose(b.sum(0), 1.0, atol=1e-12)
        np.testing.assert_allclose(b.sum(1), 1.0, atol=1e-12)
        np.testing.assert_allclose(b, b.T, atol=1e-12)

    def test_rejects_empty_mask(self):
        with pytest.raises(ValueError):
            coverage_loss(np.zeros((4, 4)), np.zeros((4, 4), bool))


class TestDetectorLoss:
    def test_coverage_disabled(self):
        s = np.random.default_rng(6).standard_normal((8, 8))
        t = _target((8, 8), [3, 9, 40])
        valid = np.ones((8, 8), bool)
        l0, g0 = detector_loss(s, t, valid, PriorParams(coverage_weight=0.0))
        l1, g1 = cross_entropy(s, t)
        assert l0 == l1
        np.testing.assert_array_equal(g0, g1)

    def test_sum_of_terms(self):
        rng = np.random.default_rng(7)
        s = rng.standard_normal((8, 8))
        t = _target((8, 8), [3, 9, 40])
        valid = rng.random((8, 8)) > 0.4
        params = PriorParams(sigma_coverage=2.0)
        loss, _ = detector_loss(s, t, valid, params)
        assert loss == pytest.approx(cross_entropy(s, t)[0] + coverage_loss(s, valid, params)[0], abs=1e-12)

    @pytest.mark.parametrize("shape", [(8, 8), (5, 11), (16, 16)])
    def test_gradient_finite_differences(self, shape):
        rng = np.random.default_rng(8)
        s = rng.standard_normal(shape)
        t = _target(shape, rng.choice(s.size, 4, replace=False))
        valid = rng.random(shape) > 0.3
        params = PriorParams(sigma_coverage=2.5)
        _, grad = detector_loss(s, t, valid, params)
        fd = numeric_grad(lambda x: detector_loss(x, t, valid, params)[0], s)
        assert max_rel_err(grad, fd) < 1e-4

    def test_coverage_gradient_finite_differences(self):
        rng = np.random.default_rng(9)
        s = rng.standard_normal((16, 13))
        valid = rng.random((16, 13)) > 0.5
        # a blur much wider than the grid flattens the loss to FD noise level
        params = PriorParams(sigma_coverage=3.0)
        _, grad = coverage_loss(s, valid, params)
        fd = numeric_grad(lambda x: coverage_loss(x, valid, params)[0], s)
        assert max_rel_err(grad, fd) < 1e-4
