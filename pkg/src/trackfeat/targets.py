"""Detection targets and losses.

Maps are ``(H, W)`` float arrays of unnormalized log-densities. The log
baseline 0 stands for the uniform component of the prior; an isolated track
reaches ``vartheta`` so its peak is ``exp(vartheta)`` times the baseline.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import logsumexp

from . import kernels
from .geometry import Warp, warp_log_map
from .types import KeypointSet, PixelGrid


@dataclass(frozen=True)
class PriorParams:
    sigma_prior: float = 0.5
    vartheta: float = 50.0
    sigma_coverage: float = 12.5
    k_per_image: int = 1024
    coverage_weight: float = 1.0

    def __post_init__(self):
        for name in ("sigma_prior", "vartheta", "sigma_coverage", "k_per_image"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.coverage_weight < 0:
            raise ValueError("coverage_weight must be non-negative")


@dataclass(frozen=True)
class TargetDistribution:
    """Uniform distribution over ``support`` (flat cell indices) on a grid."""

    grid: PixelGrid
    support: np.ndarray

    @property
    def skip(self):
        return len(self.support) == 0

    @property
    def weight(self):
        return 1.0 / len(self.support) if len(self.support) else 0.0

    def dense(self):
        t = np.zeros(self.grid.size)
        if len(self.support):
            t[self.support] = self.weight
        return t.reshape(self.grid.shape)


def gaussian_kernel_1d(sigma, radius):
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


# ------------------------------------------------------------------ prior


def rasterize_deltas(kps: KeypointSet, grid: PixelGrid):
    """Binary map with a 1 in the cell nearest each keypoint."""
    out = np.zeros(grid.shape)
    if len(kps) == 0:
        return out
    if not np.all(grid.contains(kps.coords)):
        raise ValueError("keypoint outside grid")
    cols = np.floor(kps.coords[:, 0]).astype(np.int64)
    rows = np.floor(kps.coords[:, 1]).astype(np.int64)
    out[rows, cols] = 1.0
    return out


def smooth_log_prior(delta_map, params: PriorParams = PriorParams()):
    """Gaussian-smoothed deltas scaled so an isolated delta peaks at vartheta."""
    radius = math.ceil(4 * params.sigma_prior)
    k = gaussian_kernel_1d(params.sigma_prior, radius)
    blurred = kernels.separable_filter(np.asarray(delta_map, dtype=np.float64), k)
    return params.vartheta * blurred / (k[radius] * k[radius])


def two_view_log_prior(h_a, h_b, warp_ab: Warp, warp_ba: Warp):
    """Per-view log-priors combined with the other view's warped prior."""
    return h_a + warp_log_map(h_b, warp_ab), h_b + warp_log_map(h_a, warp_ba)


def log_posterior(log_prior, scores):
    log_prior = np.asarray(log_prior, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    if log_prior.shape != scores.shape:
        raise ValueError(f"grid mismatch {log_prior.shape} vs {scores.shape}")
    # scores enter as constants: the target never carries gradient
    return log_prior + scores.copy()


def topk_target(posteriors, k_total):
    """Batch-level top-k binarization.

    Exactly ``k_total`` cells are taken across all maps, ordered by
    (value desc, image asc, row asc, col asc).
    """
    posteriors = [np.asarray(p, dtype=np.float64) for p in posteriors]
    total = sum(p.size for p in posteriors)
    if not 1 <= k_total <= total:
        raise ValueError(f"k_total={k_total} outside [1, {total}]")
    values = np.concatenate([p.ravel() for p in posteriors])
    img_of = np.concatenate([np.full(p.size, i) for i, p in enumerate(posteriors)])
    # flat order within an image is already (row, col) raster order
    flat_of = np.concatenate([np.arange(p.size) for p in posteriors])
    order = np.lexsort((flat_of, img_of, -values))[:k_total]
    out = []
    for i, p in enumerate(posteriors):
        sel = np.sort(flat_of[order[img_of[order] == i]])
        out.append(TargetDistribution(PixelGrid.of(p), sel))
    return out


# ----------------------------------------------------------------- losses


def softmax_map(scores):
    s = np.asarray(scores, dtype=np.float64)
    return np.exp(s - logsumexp(s))


def cross_entropy(scores, target: TargetDistribution):
    """CE of softmax(scores) against the target: (loss, dloss/dscores)."""
    scores = np.asarray(scores, dtype=np.float64)
    if target.skip:
        return 0.0, np.zeros_like(scores)
    if scores.shape != target.grid.shape:
        raise ValueError("score map and target grid differ")
    lse = logsumexp(scores)
    flat = scores.ravel()
    loss = lse - flat[target.support].mean()
    grad = np.exp(scores - lse) - target.dense()
    return float(loss), grad


def reflect_blur_matrix(n, sigma, radius):
    """Dense 1-D Gaussian blur with half-sample symmetric boundaries.

    The matrix is symmetric and doubly stochastic, so the blur keeps both
    mass and constants; offsets wider than the signal fold back repeatedly.
    """
    k = gaussian_kernel_1d(sigma, radius)
    m = np.zeros((n, n))
    period = 2 * n
    for i in range(n):
        for off in range(-radius, radius + 1):
            j = (i + off) % period
            if j >= n:
                j = period - 1 - j
            m[i, j] += k[off + radius]
    return m


@lru_cache(maxsize=32)
def _blur_pair(h, w, sigma):
    radius = math.ceil(3 * sigma)
    return reflect_blur_matrix(h, sigma, radius), reflect_blur_matrix(w, sigma, radius)


def coverage_blur(p, sigma):
    by, bx = _blur_pair(p.shape[0], p.shape[1], float(sigma))
    return by @ p @ bx.T


def coverage_loss(scores, mvs_valid, params: PriorParams = PriorParams()):
    """Blurred CE pushing detection mass into the MVS-valid region."""
    scores = np.asarray(scores, dtype=np.float64)
    valid = np.asarray(mvs_valid, dtype=bool)
    if valid.shape != scores.shape:
        raise ValueError("mask and score map differ in shape")
    if not valid.any():
        raise ValueError("MVS mask has no valid cell")
    by, bx = _blur_pair(scores.shape[0], scores.shape[1], float(params.sigma_coverage))
    p = softmax_map(scores)
    bp = by @ p @ bx.T
    bm = by @ (valid / valid.sum()) @ bx.T
    loss = -np.sum(bm * np.log(bp))
    g_bp = -bm / bp
    g_p = by.T @ g_bp @ bx
    grad = p * (g_p - np.sum(p * g_p))
    return float(loss), grad


def detector_loss(scores, target: TargetDistribution, mvs_valid, params: PriorParams = PriorParams()):
    loss, grad = cross_entropy(scores, target)
    if params.coverage_weight > 0:
        c_loss, c_grad = coverage_loss(scores, mvs_valid, params)
        loss += params.coverage_weight * c_loss
        grad = grad + params.coverage_weight * c_grad
    return loss, grad
