"""Procedural two-view scenes with exact geometry and simulated SfM tracks.

A textured surface (tilted plane, optionally with smooth bumps) is seen by two
pinhole cameras. Above a horizontal edge in world space the surface ends and
the view shows flat "sky" with no valid depth. Every track is a 3D point on
the surface, painted into the texture as a small bright or dark blob, and the
base detector is simulated by one Bernoulli flag per view.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from functools import cached_property

import numpy as np

from .geometry import OCCLUSION_TOL, Camera, DepthMap, build_warp, project_points, warp_coords
from .types import KeypointSet, PixelGrid

SKY_INTENSITY = 0.9


@dataclass(frozen=True)
class SceneParams:
    width: int = 64
    height: int = 64
    focal: float = 0.0  # pixels; 0 means "same as width"
    baseline_min: float = 0.3
    baseline_max: float = 0.8
    depth_min: float = 4.0
    depth_max: float = 6.0
    surface: str = "plane"
    track_count: int = 40
    detection_prob: float = 0.5
    octaves: int = 4
    sky_frac: float = 0.2
    max_tilt: float = 0.25
    bump_amplitude: float = 0.12
    blob_radius_px: float = 1.1
    max_roll_deg: float = 4.0
    min_track_sep_px: float = 4.0

    def validate(self):
        if self.width < 16 or self.height < 16:
            raise ValueError(f"grid must be at least 16x16, got {self.width}x{self.height}")
        if not 0.0 < self.detection_prob <= 1.0:
            raise ValueError("detection_prob must lie in (0, 1]")
        if self.track_count < 1:
            raise ValueError("track_count must be >= 1")
        if self.surface not in ("plane", "heightfield"):
            raise ValueError(f"unknown surface type {self.surface!r}")
        if not 0.0 <= self.sky_frac < 1.0:
            raise ValueError("sky_frac must lie in [0, 1)")
        if self.baseline_min <= 0 or self.baseline_max < self.baseline_min:
            raise ValueError("invalid baseline range")
        if self.depth_min <= 0 or self.depth_max < self.depth_min:
            raise ValueError("invalid depth range")
        return self

    @property
    def focal_px(self):
        return float(self.focal) if self.focal > 0 else float(self.width)

    def as_dict(self):
        return asdict(self)


@dataclass
class TrackSet:
    points3d: np.ndarray
    detected_a: np.ndarray
    detected_b: np.ndarray

    def __post_init__(self):
        self.points3d = np.asarray(self.points3d, dtype=np.float64).reshape(-1, 3)
        self.detected_a = np.asarray(self.detected_a, dtype=bool).reshape(-1)
        self.detected_b = np.asarray(self.detected_b, dtype=bool).reshape(-1)
        if not np.all(self.detected_a | self.detected_b):
            raise ValueError("every track needs at least one detection flag")

    def __len__(self):
        return len(self.points3d)


@dataclass
class Scene:
    image_a: np.ndarray
    image_b: np.ndarray
    depth_a: DepthMap
    depth_b: DepthMap
    cam_a: Camera
    cam_b: Camera
    tracks: TrackSet
    seed: int
    params: SceneParams = field(default_factory=SceneParams)

    @property
    def grid(self):
        return PixelGrid.of(self.image_a)

    @cached_property
    def warp_ab(self):
        return build_warp(self.depth_a, self.cam_a, self.cam_b, self.depth_b)

    @cached_property
    def warp_ba(self):
        return build_warp(self.depth_b, self.cam_b, self.cam_a, self.depth_a)

    def view(self, name):
        """(image, depth, camera) of view 'A' or 'B'."""
        if name == "A":
            return self.image_a, self.depth_a, self.cam_a
        if name == "B":
            return self.image_b, self.depth_b, self.cam_b
        raise ValueError(f"view must be 'A' or 'B', got {name!r}")

    def warp(self, src, dst):
        return self.warp_ab if (src, dst) == ("A", "B") else self.warp_ba


class _Surface:
    """Z = z0 + a X + c Y + bumps(X, Y), existing only for Y >= y_sky."""

    def __init__(self, z0, a, c, bumps, y_sky):
        self.z0, self.a, self.c = z0, a, c
        self.bumps = bumps  # rows of (amplitude, kx, ky, phase)
        self.y_sky = y_sky

    def height(self, x, y):
        z = self.z0 + self.a * x + self.c * y
        for amp, kx, ky, ph in self.bumps:
            z = z + amp * np.sin(kx * x + ky * y + ph)
        return z

    def slope(self, x, y):
        gx = np.full_like(x, self.a)
        gy = np.full_like(y, self.c)
        for amp, kx, ky, ph in self.bumps:
            cs = amp * np.cos(kx * x + ky * y + ph)
            gx = gx + kx * cs
            gy = gy + ky * cs
        return gx, gy

    def intersect(self, origin, dirs):
        """Ray parameters s of the surface hit (NaN where the ray misses)."""
        ox, oy, oz = origin
        dx, dy, dz = dirs[:, 0], dirs[:, 1], dirs[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            s = (self.z0 + self.a * ox + self.c * oy - oz) / (dz - self.a * dx - self.c * dy)
        if self.bumps:
            for _ in range(40):
                x, y = ox + s * dx, oy + s * dy
                f = self.height(x, y) - (oz + s * dz)
                gx, gy = self.slope(x, y)
                s = s - f / (gx * dx + gy * dy - dz)
            x, y = ox + s * dx, oy + s * dy
            resid = np.abs(self.height(x, y) - (oz + s * dz))
            s = np.where(resid < 1e-10, s, np.nan)
        y_hit = oy + s * dy
        ok = np.isfinite(s) & (s > 0) & (y_hit >= self.y_sky)
        return np.where(ok, s, np.nan)


def _look_at(center, target, roll):
    z = target - center
    z = z / np.linalg.norm(z)
    x = np.cross(np.array([0.0, 1.0, 0.0]), z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    r = np.stack([x, y, z])
    cr, sr = np.cos(roll), np.sin(roll)
    roll_m = np.array([[cr, -sr, 0.0], [sr, cr, 0.0], [0.0, 0.0, 1.0]])
    r = roll_m @ r
    # re-orthonormalize so det(R) = 1 holds to machine precision
    u, _, vt = np.linalg.svd(r)
    return u @ vt


def _value_noise(x, y, tables, base_freq):
    out = np.zeros_like(x)
    amp, total = 1.0, 0.0
    for o, table in enumerate(tables):
        n = table.shape[0]
        fx = x * base_freq * 2 ** o
        fy = y * base_freq * 2 ** o
        ix, iy = np.floor(fx), np.floor(fy)
        tx, ty = fx - ix, fy - iy
        tx = tx * tx * tx * (tx * (tx * 6 - 15) + 10)
        ty = ty * ty * ty * (ty * (ty * 6 - 15) + 10)
        ix = ix.astype(np.int64) % n
        iy = iy.astype(np.int64) % n
        ix1, iy1 = (ix + 1) % n, (iy + 1) % n
        v = ((1 - ty) * ((1 - tx) * table[iy, ix] + tx * table[iy, ix1])
             + ty * ((1 - tx) * table[iy1, ix] + tx * table[iy1, ix1]))
        out += amp * v
        total += amp
        amp *= 0.5
    return out / total


def _pixel_rays(cam: Camera, coords):
    rays_cam = np.column_stack([coords, np.ones(len(coords))]) @ np.linalg.inv(cam.K).T
    return rays_cam @ cam.R  # world directions (rows), z-depth scale preserved per ray


def _render_view(cam, grid, surface, texture):
    coords = grid.centers().reshape(-1, 2)
    dirs = _pixel_rays(cam, coords)
    s = surface.intersect(cam.center, dirs)
    hit = np.isfinite(s)
    pts = cam.center + np.nan_to_num(s)[:, None] * dirs
    # z-depth in this camera's frame
    depth = np.where(hit, (pts @ cam.R.T + cam.t)[:, 2], 0.0)
    img = np.full(len(coords), SKY_INTENSITY)
    img[hit] = texture(pts[hit, 0], pts[hit, 1])
    shape = grid.shape
    return img.reshape(shape), DepthMap(depth.reshape(shape), hit.reshape(shape))


def make_scene(params: SceneParams, seed: int) -> Scene:
    """Deterministic scene from ``(params, seed)``."""
    params.validate()
    rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
    grid = PixelGrid(params.width, params.height)
    f = params.focal_px
    K = np.array([[f, 0.0, params.width / 2], [0.0, f, params.height / 2], [0.0, 0.0, 1.0]])

    z0 = rng.uniform(params.depth_min, params.depth_max)
    a, c = rng.uniform(-params.max_tilt, params.max_tilt, size=2)
    bumps = []
    if params.surface == "heightfield":
        for _ in range(3):
            wavelength = rng.uniform(1.5, 3.0) * z0 / 5.0
            ang = rng.uniform(0, np.pi)
            k = 2 * np.pi / wavelength
            amp = params.bump_amplitude * rng.uniform(0.5, 1.0) / 3.0
            bumps.append((amp, k * np.cos(ang), k * np.sin(ang), rng.uniform(0, 2 * np.pi)))
    y_sky = (params.sky_frac * params.height - params.height / 2) / f * z0
    surface = _Surface(z0, a, c, bumps, y_sky)

    cam_a = Camera(K, np.eye(3), np.zeros(3))
    baseline = rng.uniform(params.baseline_min, params.baseline_max)
    phi = rng.uniform(-0.4, 0.4) + (np.pi if rng.random() < 0.5 else 0.0)
    center_b = baseline * np.array([np.cos(phi), 0.3 * np.sin(phi), rng.uniform(-0.2, 0.2)])
    look = np.array([rng.uniform(-0.1, 0.1) * z0, rng.uniform(0.0, 0.1) * z0, z0])
    r_b = _look_at(center_b, look, np.deg2rad(rng.uniform(-params.max_roll_deg, params.max_roll_deg)))
    cam_b = Camera(K, r_b, -r_b @ center_b)

    # tracks: sample surface points seen from a random view, keep them apart
    min_sep = params.min_track_sep_px * z0 / f
    depths = {}
    cams = {"A": cam_a, "B": cam_b}
    for name, cam in cams.items():
        dirs = _pixel_rays(cam, grid.centers().reshape(-1, 2))
        depths[name] = np.isfinite(surface.intersect(cam.center, dirs)).reshape(grid.shape)
    points = []
    attempts = 0
    while len(points) < params.track_count and attempts < 200 * params.track_count:
        attempts += 1
        name = "A" if rng.random() < 0.5 else "B"
        xy = rng.uniform([0.0, 0.0], [params.width, params.height])
        if not depths[name][int(xy[1]), int(xy[0])]:
            continue
        cam = cams[name]
        d = _pixel_rays(cam, xy[None])
        s = surface.intersect(cam.center, d)[0]
        if not np.isfinite(s):
            continue
        p = cam.center + s * d[0]
        if points and np.min(np.hypot(*(np.asarray(points)[:, :2] - p[:2]).T)) < min_sep:
            continue
        points.append(p)
    points = np.asarray(points).reshape(-1, 3)
    n = len(points)
    det_a = np.zeros(n, dtype=bool)
    det_b = np.zeros(n, dtype=bool)
    q = params.detection_prob
    for i in range(n):
        while not (det_a[i] or det_b[i]):
            det_a[i], det_b[i] = rng.random(2) < q
    polarity = np.where(rng.random(n) < 0.5, -1.0, 1.0)

    tables = [rng.random((64, 64)) for _ in range(max(params.octaves, 1))]
    blob_r = params.blob_radius_px * z0 / f
    base_freq = f / (8.0 * z0)  # coarsest noise cell ~8 px

    def texture(x, y):
        val = 0.5 + 0.3 * (_value_noise(x, y, tables, base_freq) - 0.5)
        if n:
            d2 = (x[:, None] - points[None, :, 0]) ** 2 + (y[:, None] - points[None, :, 1]) ** 2
            val = val + 0.4 * (np.exp(-d2 / (2 * blob_r ** 2)) * polarity).sum(axis=1)
        return np.clip(val, 0.0, 1.0)

    image_a, depth_a = _render_view(cam_a, grid, surface, texture)
    image_b, depth_b = _render_view(cam_b, grid, surface, texture)
    return Scene(image_a, image_b, depth_a, depth_b, cam_a, cam_b,
                 TrackSet(points, det_a, det_b), int(seed), params)


def visible_in(points3d, cam: Camera, depth: DepthMap):
    """Projection into the view plus an in-frame, depth-consistent visibility mask."""
    uv, front, z = project_points(points3d, cam)
    grid = depth.grid
    inside = front & grid.contains(np.nan_to_num(uv, nan=-1.0))
    ci = np.where(inside, np.floor(np.nan_to_num(uv[:, 0])), 0).astype(np.int64)
    cj = np.where(inside, np.floor(np.nan_to_num(uv[:, 1])), 0).astype(np.int64)
    dref = depth.depth[cj, ci]
    ok = inside & depth.valid[cj, ci]
    with np.errstate(divide="ignore", invalid="ignore"):
        ok &= np.abs(z - dref) / np.where(dref > 0, dref, 1.0) < OCCLUSION_TOL
    return uv, ok


def track_keypoints(scene: Scene, view: str, return_index: bool = False):
    """Union of covisible detections projected into ``view``.

    A track is kept when the base detector fired in this view, or fired in the
    other view and the track is covisible per the other->this warp domain.
    """
    other = "B" if view == "A" else "A"
    _, depth_this, cam_this = scene.view(view)
    _, depth_other, cam_other = scene.view(other)
    tr = scene.tracks
    det_this = tr.detected_a if view == "A" else tr.detected_b
    det_other = tr.detected_b if view == "A" else tr.detected_a

    uv_this, vis_this = visible_in(tr.points3d, cam_this, depth_this)
    uv_other, vis_other = visible_in(tr.points3d, cam_other, depth_other)

    cand = np.flatnonzero(det_other & vis_other)
    covis = np.zeros(len(tr), dtype=bool)
    _, kept = warp_coords(uv_other[cand], scene.warp(other, view))
    covis[cand[kept]] = True

    keep = vis_this & (det_this | covis)
    idx = np.flatnonzero(keep)
    kps = KeypointSet(uv_this[idx], np.ones(len(idx)))
    return (kps, idx) if return_index else kps
