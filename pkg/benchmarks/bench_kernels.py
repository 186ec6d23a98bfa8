#!/usr/bin/env python3
"""Compiled vs pure-numpy kernel timings.

Both variants of every hot kernel are timed on the same inputs, and the
outputs are compared so a speedup never hides a divergence.

Usage:
    python benchmarks/bench_kernels.py [--size 64] [--channels 16] [--repeat 20]
"""
from __future__ import annotations

import argparse
import time
from dataclasses import dataclass

import numpy as np

from trackfeat import kernels
from trackfeat.geometry import OCCLUSION_TOL
from trackfeat.scenegen import SceneParams, make_scene
from trackfeat.targets import gaussian_kernel_1d


@dataclass
class BenchResult:
    name: str
    numba_ms: float
    numpy_ms: float
    max_abs_diff: float

    @property
    def speedup(self):
        return self.numpy_ms / self.numba_ms if self.numba_ms > 0 else float("inf")


def _time(fn, args, repeat):
    fn(*args)  # warm-up; triggers compilation for the numba variant
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return 1e3 * best


def _flat(out):
    if isinstance(out, tuple):
        return np.concatenate([np.nan_to_num(np.asarray(o, dtype=np.float64)).ravel() for o in out])
    return np.asarray(out, dtype=np.float64).ravel()


def make_cases(size, channels, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, channels, size, size))
    w = rng.standard_normal((channels, channels, 3, 3)) / (3 * np.sqrt(channels))
    dw = rng.standard_normal((channels, 3, 3)) / 3
    g = rng.standard_normal((2, channels, size, size))
    img = rng.random((size, size))
    k = gaussian_kernel_1d(2.0, 8)
    grid = rng.standard_normal((64, size, size))
    pts = rng.uniform(0, size, size=(1024, 2))
    scene = make_scene(SceneParams(width=size, height=size), seed)
    r_ab, t_ab = scene.cam_a.relative_to(scene.cam_b)
    warp_args = (scene.depth_a.depth, scene.depth_a.valid, np.linalg.inv(scene.cam_a.K), r_ab, t_ab,
                 scene.cam_b.K, scene.depth_b.depth, scene.depth_b.valid, OCCLUSION_TOL)
    return [
        ("conv3x3", kernels.conv3x3_numba, kernels.conv3x3_numpy, (x, w)),
        ("conv3x3_grad", kernels.conv3x3_grad_numba, kernels.conv3x3_grad_numpy, (x, w, g)),
        ("dwconv3x3", kernels.dwconv3x3_numba, kernels.dwconv3x3_numpy, (x, dw)),
        ("dwconv3x3_grad", kernels.dwconv3x3_grad_numba, kernels.dwconv3x3_grad_numpy, (x, dw, g)),
        ("separable_filter", kernels.separable_filter_numba, kernels.separable_filter_numpy, (img, k)),
        ("bilinear_sample", kernels.bilinear_sample_numba, kernels.bilinear_sample_numpy, (grid, pts)),
        ("build_warp", kernels.build_warp_numba, kernels.build_warp_numpy, warp_args),
    ]


def run(size=64, channels=16, repeat=20):
    results = []
    for name, f_nb, f_np, args in make_cases(size, channels):
        diff = float(np.max(np.abs(_flat(f_nb(*args)) - _flat(f_np(*args)))))
        results.append(BenchResult(name, _time(f_nb, args, repeat), _time(f_np, args, repeat), diff))
    return results


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--channels", type=int, default=16)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    print(f"size={args.size} channels={args.channels} repeat={args.repeat} (best of repeat, ms)")
    print(f"{'kernel':<18}{'numba':>10}{'numpy':>10}{'speedup':>9}{'max|diff|':>12}")
    for r in run(args.size, args.channels, args.repeat):
        print(f"{r.name:<18}{r.numba_ms:>10.3f}{r.numpy_ms:>10.3f}{r.speedup:>9.2f}{r.max_abs_diff:>12.2e}")


if __name__ == "__main__":
    main()
