"""Inference-time keypoint sampling and matching."""
from __future__ import annotations

import numpy as np

from . import kernels
from .descobj import MatchParams, conditional_log_distributions, similarity_logits
from .geometry import Warp, warp_coords
from .types import DescriptorSet, KeypointSet, MatchSet


def sample_keypoints(scores, k: int) -> KeypointSet:
    """Top-k cells of a score map at their centers; no NMS, ties in raster order."""
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = np.asarray(scores, dtype=np.float64)
    h, w = scores.shape
    flat = scores.ravel()
    k = min(int(k), flat.size)
    order = np.argsort(-flat, kind="stable")[:k]
    coords = np.column_stack([order % w + 0.5, order // w + 0.5]).astype(np.float64)
    return KeypointSet(coords, flat[order])


def sample_descriptors(desc_grid, kps: KeypointSet) -> DescriptorSet:
    """Bilinear lookup in a (D, H, W) grid, renormalized to unit length."""
    desc_grid = np.asarray(desc_grid, dtype=np.float64)
    v = kernels.bilinear_sample(desc_grid, kps.coords)
    v /= np.maximum(np.linalg.norm(v, axis=1, keepdims=True), 1e-12)
    return DescriptorSet(v, kps)


def dual_softmax_confidence(desc_a, desc_b, params: MatchParams = MatchParams()):
    la, lb = conditional_log_distributions(similarity_logits(desc_a, desc_b, params))
    return np.exp(la + lb)


def dual_softmax_match(desc_a, desc_b, params: MatchParams = MatchParams()) -> MatchSet:
    """Mutual argmax of p(a|b) p(b|a) above the confidence threshold.

    Argmax ties resolve to the lowest index.
    """
    conf = dual_softmax_confidence(desc_a, desc_b, params)
    if conf.size == 0:
        return MatchSet()
    best_b = np.argmax(conf, axis=1)
    best_a = np.argmax(conf, axis=0)
    ia = np.arange(conf.shape[0])
    c = conf[ia, best_b]
    keep = (best_a[best_b] == ia) & (c >= params.confidence_threshold)
    return MatchSet(ia[keep], best_b[keep], c[keep])


def warp_quantized_match(warp_ab: Warp, kps_a: KeypointSet, kps_b: KeypointSet, radius: float | None = None) -> MatchSet:
    """Match by warping A keypoints and snapping to the nearest B keypoint.

    ``radius`` defaults to 1% of the target image diagonal. Contended B
    keypoints keep only their closest A keypoint.
    """
    if radius is None:
        grid = warp_ab.target_grid or warp_ab.grid
        radius = 0.01 * grid.diagonal
    warped, kept = warp_coords(kps_a.coords, warp_ab)
    if len(kept) == 0 or len(kps_b) == 0:
        return MatchSet()
    d = np.linalg.norm(warped[:, None, :] - kps_b.coords[None, :, :], axis=-1)
    nn = np.argmin(d, axis=1)
    dist = d[np.arange(len(kept)), nn]
    cand = np.flatnonzero(dist <= radius)
    # closest A per B; ties go to the lower A index
    order = cand[np.lexsort((kept[cand], dist[cand]))]
    seen = set()
    out = []
    for r in order:
        b = int(nn[r])
        if b not in seen:
            seen.add(b)
            out.append((int(kept[r]), b))
    out.sort()
    ia = np.array([p[0] for p in out], dtype=np.int64)
    ib = np.array([p[1] for p in out], dtype=np.int64)
    return MatchSet(ia, ib, np.ones(len(out)))


def match_precision(matches: MatchSet, kps_a: KeypointSet, kps_b: KeypointSet, warp_ab: Warp, px: float = 2.0):
    """Fraction of matches whose B keypoint lies within ``px`` of the warped A keypoint.

    Matches whose A keypoint has no ground-truth warp count as wrong.
    """
    if len(matches) == 0:
        return 0.0
    warped, kept = warp_coords(kps_a.coords[matches.idx_a], warp_ab)
    ok = np.zeros(len(matches), dtype=bool)
    ok[kept] = np.linalg.norm(warped - kps_b.coords[matches.idx_b[kept]], axis=1) < px
    return float(ok.mean())
