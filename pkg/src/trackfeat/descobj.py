"""Dual-softmax matching distribution and the descriptor log-likelihood."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import log_softmax

from .geometry import Warp, warp_coords
from .types import DescriptorSet, KeypointSet, PixelGrid


@dataclass(frozen=True)
class MatchParams:
    inverse_temperature: float = 20.0
    mutual_dist_frac: float = 0.005
    confidence_threshold: float = 0.01

    def __post_init__(self):
        if not (self.inverse_temperature > 0 and self.mutual_dist_frac > 0 and self.confidence_threshold > 0):
            raise ValueError("match parameters must be positive")


def _vectors(d):
    return d.vectors if isinstance(d, DescriptorSet) else np.asarray(d, dtype=np.float64)


def similarity_logits(desc_a, desc_b, params: MatchParams = MatchParams()):
    a, b = _vectors(desc_a), _vectors(desc_b)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"descriptor dims differ: {a.shape[1]} vs {b.shape[1]}")
    return params.inverse_temperature * (a @ b.T)


def conditional_log_distributions(logits):
    """(log p(a_i | b_j), log p(b_j | a_i)), both indexed [i, j]."""
    logits = np.asarray(logits, dtype=np.float64)
    return log_softmax(logits, axis=0), log_softmax(logits, axis=1)


def conditional_distributions(logits):
    """Column softmax p(a_i | b_j) and row softmax p(b_j | a_i)."""
    la, lb = conditional_log_distributions(logits)
    return np.exp(la), np.exp(lb)


def gt_correspondences(kps_a: KeypointSet, kps_b: KeypointSet, warp_ab: Warp, params: MatchParams = MatchParams(),
                       grid: PixelGrid | None = None):
    """Mutual nearest neighbours in warped space, both distances under the cap.

    Returns an (M, 2) int array of (index into A, index into B).
    """
    grid = grid or warp_ab.grid
    max_dist = params.mutual_dist_frac * grid.diagonal
    warped, kept = warp_coords(kps_a.coords, warp_ab)
    if len(kept) == 0 or len(kps_b) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    d = np.linalg.norm(warped[:, None, :] - kps_b.coords[None, :, :], axis=-1)
    nn_ab = np.argmin(d, axis=1)
    nn_ba = np.argmin(d, axis=0)
    rows = np.arange(len(kept))
    mutual = (nn_ba[nn_ab] == rows) & (d[rows, nn_ab] < max_dist)
    return np.column_stack([kept[mutual], nn_ab[mutual]]).astype(np.int64)


def descriptor_loss(desc_a, desc_b, gt, params: MatchParams = MatchParams()):
    """Mean negative log-likelihood of GT pairs under both conditionals.

    Returns (loss, dloss/d desc_a, dloss/d desc_b). Gradients are taken with
    respect to the vectors as given.
    """
    a, b = _vectors(desc_a), _vectors(desc_b)
    gt = np.asarray(gt, dtype=np.int64).reshape(-1, 2)
    if len(gt) == 0:
        warnings.warn("descriptor_loss called with no correspondences", RuntimeWarning, stacklevel=2)
        return 0.0, np.zeros_like(a), np.zeros_like(b)
    tau = params.inverse_temperature
    logits = similarity_logits(a, b, params)
    la, lb = conditional_log_distributions(logits)
    ia, ib = gt[:, 0], gt[:, 1]
    m = len(gt)
    loss = -(la[ia, ib].sum() + lb[ia, ib].sum()) / m

    pa, pb = np.exp(la), np.exp(lb)
    g = np.zeros_like(logits)
    # column term: every GT pair touches column ib
    np.add.at(g, (slice(None), ib), pa[:, ib])
    # row term: every GT pair touches row ia
    np.add.at(g, (ia, slice(None)), pb[ia, :])
    np.add.at(g, (ia, ib), -2.0)
    g /= m
    return float(loss), tau * g @ b, tau * g.T @ a
