"""Repeatability, relative-pose errors, AUC, mAA, and an 8-point RANSAC solver."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Camera, Warp, warp_coords
from .types import KeypointSet

REPEATABILITY_THRESHOLDS = (0.001, 0.002, 0.005)
AUC_THRESHOLDS = (5.0, 10.0, 20.0)
FAILED_POSE_DEG = 180.0


# ------------------------------------------------------------ repeatability


@dataclass
class Repeatability:
    fractions: np.ndarray
    thresholds_px: np.ndarray
    count: int

    @property
    def empty(self):
        return self.count == 0


def repeatability(kps_a: KeypointSet, kps_b: KeypointSet, warp_ab: Warp,
                  thresholds=REPEATABILITY_THRESHOLDS) -> Repeatability:
    """Share of A keypoints in the warp domain with a B keypoint within each threshold.

    Thresholds are fractions of the target image diagonal.
    """
    grid = warp_ab.target_grid or warp_ab.grid
    thr = np.asarray(thresholds, dtype=np.float64) * grid.diagonal
    warped, kept = warp_coords(kps_a.coords, warp_ab)
    if len(kept) == 0 or len(kps_b) == 0:
        return Repeatability(np.zeros(len(thr)), thr, len(kept))
    d = np.linalg.norm(warped[:, None, :] - kps_b.coords[None, :, :], axis=-1).min(axis=1)
    return Repeatability((d[:, None] < thr[None, :]).mean(axis=0), thr, len(kept))


# ------------------------------------------------------------- pose errors


@dataclass(frozen=True)
class PoseError:
    rot_deg: float
    trans_deg: float
    trans_m: float
    trans_defined: bool = True

    @property
    def max_deg(self):
        return max(abs(self.rot_deg), abs(self.trans_deg))


def _angle_deg(cos_val):
    return float(np.degrees(np.arccos(np.clip(cos_val, -1.0, 1.0))))


def pose_errors(est_R, est_t, gt_R, gt_t) -> PoseError:
    est_R, gt_R = np.asarray(est_R, dtype=np.float64), np.asarray(gt_R, dtype=np.float64)
    est_t, gt_t = np.asarray(est_t, dtype=np.float64), np.asarray(gt_t, dtype=np.float64)
    rot = _angle_deg((np.trace(est_R.T @ gt_R) - 1.0) / 2.0)
    n_est, n_gt = np.linalg.norm(est_t), np.linalg.norm(gt_t)
    metric = float(np.linalg.norm(gt_t - est_t))
    if n_est == 0 or n_gt == 0:
        return PoseError(rot, float("nan"), metric, trans_defined=False)
    return PoseError(rot, _angle_deg(est_t @ gt_t / (n_est * n_gt)), metric)


def auc(errors, thresholds=AUC_THRESHOLDS):
    """Area under the pose-precision curve, trapezoid on a 1 degree grid.

    Precision at t is the share of errors below t; at t = 0 the right limit
    (share of exactly-zero errors) is used.
    """
    errors = np.asarray(errors, dtype=np.float64).reshape(-1)
    if errors.size == 0:
        raise ValueError("auc needs at least one error")
    if not np.all(np.isfinite(errors)):
        raise ValueError("errors must be finite; encode failures as 180 degrees")
    out = []
    for T in thresholds:
        n_steps = int(np.ceil(T - 1e-12))
        ts = np.minimum(np.arange(n_steps + 1, dtype=np.float64), T)
        prec = (errors[None, :] < ts[:, None]).mean(axis=1)
        prec[0] = np.mean(errors <= 0.0)
        area = np.sum(np.diff(ts) * (prec[1:] + prec[:-1]) / 2.0)
        out.append(area / T)
    return np.array(out)


@dataclass(frozen=True)
class ThresholdGrid:
    rot_deg: tuple = tuple(np.linspace(1, 10, 10).tolist())
    trans_m: tuple = tuple(np.geomspace(0.2, 5, 10).tolist())

    def __post_init__(self):
        if len(self.rot_deg) != 10 or len(self.trans_m) != 10:
            raise ValueError("threshold grids have exactly 10 entries each")
        if np.any(np.diff(self.rot_deg) <= 0) or np.any(np.diff(self.trans_m) <= 0):
            raise ValueError("thresholds must be ascending")


def maa(errors, grid: ThresholdGrid = ThresholdGrid(), scenes=None):
    """Mean accuracy over paired (rotation, metric translation) thresholds.

    With ``scenes`` labels the accuracy is computed per scene, then averaged.
    """
    errors = list(errors)
    if not errors:
        raise ValueError("maa needs at least one pose error")
    rot = np.array([e.rot_deg for e in errors])
    tr = np.array([e.trans_m for e in errors])
    thr_r = np.asarray(grid.rot_deg)
    thr_t = np.asarray(grid.trans_m)

    def _acc(mask):
        ok = (rot[mask, None] < thr_r[None, :]) & (tr[mask, None] < thr_t[None, :])
        return ok.mean(axis=0).mean()

    if scenes is None:
        return float(_acc(np.ones(len(errors), dtype=bool)))
    labels = np.asarray(scenes)
    return float(np.mean([_acc(labels == s) for s in sorted(set(labels.tolist()))]))


# -------------------------------------------------------- relative pose


@dataclass
class PoseEstimate:
    R: np.ndarray
    t: np.ndarray
    inliers: np.ndarray
    degenerate: bool = False


def _normalize_points(x):
    c = x.mean(axis=0)
    d = np.sqrt(((x - c) ** 2).sum(axis=1)).mean()
    s = np.sqrt(2) / d if d > 0 else 1.0
    T = np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])
    return np.column_stack([x, np.ones(len(x))]) @ T.T, T


def eight_point(xa, xb):
    """Essential matrix from >= 8 normalized-camera correspondences.

    Returns (E, degenerate).
    """
    ha, ta = _normalize_points(xa)
    hb, tb = _normalize_points(xb)
    A = (hb[:, :, None] * ha[:, None, :]).reshape(len(ha), 9)
    _, s, vt = np.linalg.svd(A, full_matrices=True)
    # a rank < 8 design leaves a solution space of dimension >= 2
    degenerate = len(s) < 8 or s[7] <= 1e-10 * s[0]
    E = tb.T @ vt[-1].reshape(3, 3) @ ta
    u, _, vt = np.linalg.svd(E)
    E = u @ np.diag([1.0, 1.0, 0.0]) @ vt
    return E / np.linalg.norm(E), bool(degenerate)


def sampson_sq(E, xa, xb):
    ha = np.column_stack([xa, np.ones(len(xa))])
    hb = np.column_stack([xb, np.ones(len(xb))])
    ex = ha @ E.T
    etx = hb @ E
    num = np.sum(hb * ex, axis=1) ** 2
    den = ex[:, 0] ** 2 + ex[:, 1] ** 2 + etx[:, 0] ** 2 + etx[:, 1] ** 2
    return num / np.maximum(den, 1e-300)


def triangulate(xa, xb, R, t):
    """Linear triangulation; returns depths in camera A and camera B."""
    n = len(xa)
    pa = np.hstack([np.eye(3), np.zeros((3, 1))])
    pb = np.hstack([R, t[:, None]])
    M = np.empty((n, 4, 4))
    M[:, 0] = xa[:, 0:1] * pa[2] - pa[0]
    M[:, 1] = xa[:, 1:2] * pa[2] - pa[1]
    M[:, 2] = xb[:, 0:1] * pb[2] - pb[0]
    M[:, 3] = xb[:, 1:2] * pb[2] - pb[1]
    X = np.linalg.svd(M)[2][:, -1]
    X = X[:, :3] / X[:, 3:4]
    return X[:, 2], (X @ R.T + t)[:, 2]


def decompose_essential(E, xa, xb):
    """Pick the (R, t) candidate with the most points in front of both cameras."""
    u, _, vt = np.linalg.svd(E)
    if np.linalg.det(u) < 0:
        u = -u
    if np.linalg.det(vt) < 0:
        vt = -vt
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    best, best_count = None, -1
    for R in (u @ W @ vt, u @ W.T @ vt):
        for t in (u[:, 2], -u[:, 2]):
            za, zb = triangulate(xa, xb, R, t)
            count = int(np.sum((za > 0) & (zb > 0)))
            if count > best_count:
                best, best_count = (R, t / np.linalg.norm(t)), count
    return best


def estimate_relative_pose(pts_a, pts_b, cam_a: Camera, cam_b: Camera, iterations: int = 1000,
                           inlier_threshold: float = 1.0, seed: int = 0,
                           confidence: float = 0.9999) -> PoseEstimate:
    """RANSAC over 8-point essential matrices with Sampson inliers.

    Hypotheses are ranked by truncated Sampson cost (MSAC) and sampling stops
    once ``confidence`` is reached or ``iterations`` run out.
    ``inlier_threshold`` is in pixels; t is returned with unit norm.
    """
    pts_a = np.asarray(pts_a, dtype=np.float64).reshape(-1, 2)
    pts_b = np.asarray(pts_b, dtype=np.float64).reshape(-1, 2)
    n = len(pts_a)
    if n < 8 or len(pts_b) != n:
        raise ValueError(f"need >= 8 matched points, got {n}")
    xa = (np.column_stack([pts_a, np.ones(n)]) @ np.linalg.inv(cam_a.K).T)[:, :2]
    xb = (np.column_stack([pts_b, np.ones(n)]) @ np.linalg.inv(cam_b.K).T)[:, :2]
    focal = np.mean([cam_a.K[0, 0], cam_a.K[1, 1], cam_b.K[0, 0], cam_b.K[1, 1]])
    thr_sq = (inlier_threshold / focal) ** 2

    rng = np.random.default_rng(seed)

    def msac(E):
        err = sampson_sq(E, xa, xb)
        return np.minimum(err, thr_sq).sum(), err < thr_sq

    best_E, best_score, best_inl = None, np.inf, None
    needed = iterations
    it = 0
    while it < min(iterations, needed):
        it += 1
        sample = rng.choice(n, 8, replace=False)
        E, degenerate = eight_point(xa[sample], xb[sample])
        if degenerate:
            continue
        score, inl = msac(E)
        if score < best_score:
            best_E, best_score, best_inl = E, score, inl
            w = inl.mean()
            if w >= 1.0:
                needed = it
            elif w > 0:
                needed = int(np.ceil(np.log(1 - confidence) / np.log1p(-w ** 8)))
    # every minimal sample degenerate: fall back to all points and report it
    degenerate = best_E is None
    if best_E is None:
        best_E = eight_point(xa, xb)[0]
        best_score, best_inl = msac(best_E)
    # least-squares refit on the inliers, kept only if it lowers the MSAC cost
    for _ in range(3):
        if best_inl.sum() < 8:
            break
        E, deg = eight_point(xa[best_inl], xb[best_inl])
        score, inl = msac(E)
        if deg or score >= best_score:
            break
        best_E, best_score, best_inl = E, score, inl
    if best_inl.sum() >= 8:
        degenerate |= eight_point(xa[best_inl], xb[best_inl])[1]
    R, t = decompose_essential(best_E, xa[best_inl], xb[best_inl])
    return PoseEstimate(R, t, best_inl, degenerate)
