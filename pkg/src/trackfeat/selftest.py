"""Runtime self-checks: gradient suite, compiled-vs-numpy kernels, matcher oracle."""
from __future__ import annotations

import numpy as np

from . import kernels
from .descobj import MatchParams
from .gradcheck import run_all
from .matcher import dual_softmax_confidence, dual_softmax_match
from .targets import PriorParams, smooth_log_prior


def brute_force_mutual_matches(conf, threshold):
    """O(K^2) mutual argmax with lowest-index ties, as a set of pairs."""
    ka, kb = conf.shape
    pairs = set()
    for i in range(ka):
        j = 0
        for jj in range(1, kb):
            if conf[i, jj] > conf[i, j]:
                j = jj
        i_best = 0
        for ii in range(1, ka):
            if conf[ii, j] > conf[i_best, j]:
                i_best = ii
        if i_best == i and conf[i, j] >= threshold:
            pairs.add((i, j))
    return pairs


def kernel_pairs(rng):
    """(name, numba result, numpy result) on random inputs for each twin kernel."""
    x = rng.standard_normal((2, 3, 9, 7))
    w = rng.standard_normal((4, 3, 3, 3))
    g = rng.standard_normal((2, 4, 9, 7))
    dw = rng.standard_normal((3, 3, 3))
    gd = rng.standard_normal((2, 3, 9, 7))
    img = rng.standard_normal((11, 13))
    k = rng.random(5)
    grid = rng.standard_normal((3, 8, 10))
    pts = rng.uniform(-1, 11, size=(40, 2))
    out = [
        ("conv3x3", kernels.conv3x3_numba(x, w), kernels.conv3x3_numpy(x, w)),
        ("conv3x3_grad", np.concatenate([a.ravel() for a in kernels.conv3x3_grad_numba(x, w, g)]),
         np.concatenate([a.ravel() for a in kernels.conv3x3_grad_numpy(x, w, g)])),
        ("dwconv3x3", kernels.dwconv3x3_numba(x, dw), kernels.dwconv3x3_numpy(x, dw)),
        ("dwconv3x3_grad", np.concatenate([a.ravel() for a in kernels.dwconv3x3_grad_numba(x, dw, gd)]),
         np.concatenate([a.ravel() for a in kernels.dwconv3x3_grad_numpy(x, dw, gd)])),
        ("separable_filter", kernels.separable_filter_numba(img, k), kernels.separable_filter_numpy(img, k)),
        ("bilinear_sample", kernels.bilinear_sample_numba(grid, pts), kernels.bilinear_sample_numpy(grid, pts)),
    ]
    return out


def run_selftest(log=print, quick=False):
    ok = True

    def report(name, passed, detail):
        nonlocal ok
        ok &= bool(passed)
        log(f"{'PASS' if passed else 'FAIL'} {name}: {detail}")

    for r in run_all(n_params=20 if quick else 50):
        report(f"gradient/{r.name}", r.ok, f"max rel err {r.max_rel_err:.3e} over {r.n_params} params")

    rng = np.random.default_rng(0)
    for name, a, b in kernel_pairs(rng):
        err = float(np.max(np.abs(a - b)))
        report(f"kernel/{name}", err <= 1e-10, f"max |numba - numpy| {err:.3e}")

    params = MatchParams()
    n = 100 if quick else 1000
    bad = 0
    for _ in range(n):
        ka, kb, d = rng.integers(1, 65), rng.integers(1, 65), rng.integers(2, 9)
        a = rng.standard_normal((ka, d))
        b = rng.standard_normal((kb, d))
        a /= np.linalg.norm(a, axis=1, keepdims=True)
        b /= np.linalg.norm(b, axis=1, keepdims=True)
        got = set(dual_softmax_match(a, b, params).pairs())
        bad += got != brute_force_mutual_matches(dual_softmax_confidence(a, b, params), params.confidence_threshold)
    report("matcher/brute-force", bad == 0, f"{n - bad}/{n} instances identical")

    delta = np.zeros((15, 15))
    delta[7, 7] = 1.0
    h = smooth_log_prior(delta, PriorParams())
    report("prior/peak", abs(h[7, 7] - 50.0) <= 1e-9, f"peak {h[7, 7]!r}")
    return ok
