"""Pinhole cameras, depth maps, and dense two-view warps."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .types import KeypointSet, PixelGrid

# relative depth mismatch above which a warped pixel counts as occluded
OCCLUSION_TOL = 0.02


@dataclass(frozen=True)
class Camera:
    """World-to-camera pose ``x_cam = R @ X + t`` with intrinsics ``K``."""

    K: np.ndarray
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        K = np.asarray(self.K, dtype=np.float64).reshape(3, 3)
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError(f"rotation determinant {np.linalg.det(R)!r} is not 1")
        if K[2, 2] != 1.0 or K[1, 0] != 0 or K[2, 0] != 0 or K[2, 1] != 0:
            raise ValueError("intrinsics must be upper triangular with K[2,2] = 1")
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @property
    def center(self):
        return -self.R.T @ self.t

    def relative_to(self, other: Camera):
        """(R, t) mapping this camera's frame into ``other``'s frame."""
        r_rel = other.R @ self.R.T
        return r_rel, other.t - r_rel @ self.t


@dataclass(frozen=True)
class DepthMap:
    depth: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        depth = np.asarray(self.depth, dtype=np.float64)
        valid = np.asarray(self.valid, dtype=bool)
        if depth.ndim != 2 or depth.shape != valid.shape:
            raise ValueError("depth and valid must be 2-D arrays of equal shape")
        if np.any(~(depth[valid] > 0)):
            raise ValueError("depth must be positive wherever valid")
        object.__setattr__(self, "depth", depth)
        object.__setattr__(self, "valid", valid)

    @property
    def grid(self):
        return PixelGrid.of(self.depth)


@dataclass(frozen=True)
class Warp:
    """Per-pixel target coordinates in the other view; NaN off the domain."""

    target: np.ndarray
    domain: np.ndarray
    target_grid: PixelGrid | None = None

    @property
    def grid(self):
        return PixelGrid.of(self.domain)


def project(point3d, camera: Camera):
    """Project one world point. Returns (pixel xy, in-front-of-camera flag)."""
    xc = camera.R @ np.asarray(point3d, dtype=np.float64) + camera.t
    if xc[2] <= 1e-9:
        return np.full(2, np.nan), False
    uvw = camera.K @ xc
    return uvw[:2] / uvw[2], True


def project_points(points3d, camera: Camera):
    """Vectorized ``project`` for an (N, 3) array; also returns camera-space depth."""
    pts = np.asarray(points3d, dtype=np.float64).reshape(-1, 3)
    xc = pts @ camera.R.T + camera.t
    z = xc[:, 2]
    front = z > 1e-9
    uv = np.full((len(pts), 2), np.nan)
    uvw = xc[front] @ camera.K.T
    uv[front] = uvw[:, :2] / uvw[:, 2:3]
    return uv, front, z


def backproject(pixels, depth, camera: Camera):
    """Lift pixels with z-depth to world points."""
    pix = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    d = np.broadcast_to(np.asarray(depth, dtype=np.float64), (len(pix),))
    rays = np.column_stack([pix, np.ones(len(pix))]) @ np.linalg.inv(camera.K).T
    xc = rays * d[:, None]
    return (xc - camera.t) @ camera.R


def build_warp(depth_a: DepthMap, cam_a: Camera, cam_b: Camera, depth_b: DepthMap) -> Warp:
    """Dense A->B warp of every valid A pixel center, with occlusion test."""
    r_ab, t_ab = cam_a.relative_to(cam_b)
    target, domain = kernels.build_warp_field(
        depth_a.depth, depth_a.valid, np.linalg.inv(cam_a.K), r_ab, t_ab, cam_b.K,
        depth_b.depth, depth_b.valid, OCCLUSION_TOL,
    )
    return Warp(target, domain, depth_b.grid)


def _linear_stencil(coords, h, w):
    # Bilinear stencil over cell centers that extrapolates linearly in the
    # half-pixel border instead of clamping.
    u = coords[:, 0] - 0.5
    v = coords[:, 1] - 0.5
    i0 = np.clip(np.floor(u), 0, max(w - 2, 0)).astype(np.int64)
    j0 = np.clip(np.floor(v), 0, max(h - 2, 0)).astype(np.int64)
    fu = u - i0 if w > 1 else np.zeros_like(u)
    fv = v - j0 if h > 1 else np.zeros_like(v)
    i1 = np.minimum(i0 + 1, w - 1)
    j1 = np.minimum(j0 + 1, h - 1)
    corners = [(j0, i0), (j0, i1), (j1, i0), (j1, i1)]
    weights = [(1 - fv) * (1 - fu), (1 - fv) * fu, fv * (1 - fu), fv * fu]
    return corners, weights


def warp_coords(coords, warp: Warp):
    """Warp raw (N, 2) coordinates. Returns (warped (M, 2), kept index array)."""
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    grid = warp.grid
    inside = grid.contains(coords)
    pts = np.where(inside[:, None], coords, 0.5)
    corners, weights = _linear_stencil(pts, grid.height, grid.width)
    keep = inside.copy()
    out = np.zeros((len(pts), 2))
    for (jj, ii), wt in zip(corners, weights):
        used = wt != 0
        keep &= ~used | warp.domain[jj, ii]
        tgt = warp.target[jj, ii]
        out += np.where(used[:, None], wt[:, None] * np.nan_to_num(tgt), 0.0)
    kept = np.flatnonzero(keep)
    return out[kept], kept


def warp_points(points: KeypointSet, warp: Warp):
    """Warp a keypoint set; points off the warp domain are dropped."""
    coords, kept = warp_coords(points.coords, warp)
    return KeypointSet(coords, points.scores[kept]), kept


def warp_log_map(log_map, warp: Warp):
    """Pull a log-map defined over B back onto A's grid through the A->B warp.

    Pixels outside the warp domain get 0, the uniform log baseline.
    """
    log_map = np.asarray(log_map, dtype=np.float64)
    out = np.zeros(warp.grid.shape)
    dom = warp.domain
    if dom.any():
        out[dom] = kernels.bilinear_sample(log_map[None], warp.target[dom])[:, 0]
    return out
