"""Finite-difference checks of the network + loss gradients.

Shared by the test-suite and ``trackfeat selftest``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .descobj import MatchParams, descriptor_loss
from .matcher import sample_keypoints
from .targets import PriorParams, coverage_loss, cross_entropy, detector_loss, topk_target
from .tinynet import NetConfig, NetState, backward, descriptor_forward, detector_forward, init_net

SMALL_CONFIG = NetConfig(channels=(4, 4, 8, 8), decoder_dims=(4, 4, 8, 8), context_dims=(2, 2, 2),
                         detector_blocks=1, descriptor_blocks=1, descriptor_dim=8)


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    n_params: int
    n_below_floor: int = 0
    max_abs_err_below_floor: float = 0.0
    floor: float = 0.0
    tol: float = 1e-4

    @property
    def ok(self):
        return self.max_rel_err < self.tol and self.max_abs_err_below_floor <= self.floor * self.tol


def relative_error(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-12)


def check_gradients(state: NetState, loss_and_grads, n_params=50, rel_step=1e-3, seed=0, name="loss",
                    tol=1e-4, max_draws=None):
    """Compare analytic gradients on ``n_params`` random entries with central differences.

    ``loss_and_grads(state)`` returns ``(loss, {param name: gradient})``.

    A central difference of a loss L with step h carries rounding noise of
    about eps*|L|/h, so a relative error below ``tol`` can only be resolved
    for gradients larger than ``floor = eps*|L| / (h*tol)``. Entries whose
    gradients are both under that floor are checked in absolute terms
    (``|a - b| <= floor*tol``) and do not count towards ``n_params``.
    """
    rng = np.random.default_rng(seed)
    loss0, grads = loss_and_grads(state)
    names = list(state.params)
    sizes = np.array([state.params[k].size for k in names], dtype=np.float64)
    max_draws = max_draws or 20 * n_params
    worst, worst_small, checked, small, floor = 0.0, 0.0, 0, 0, 0.0
    for _ in range(max_draws):
        if checked >= n_params:
            break
        pname = names[rng.choice(len(names), p=sizes / sizes.sum())]
        idx = int(rng.integers(state.params[pname].size))
        arr = state.params[pname].reshape(-1)
        orig = arr[idx]
        h = rel_step * max(abs(orig), 0.1)
        arr[idx] = orig + h
        lp, _ = loss_and_grads(state)
        arr[idx] = orig - h
        lm, _ = loss_and_grads(state)
        arr[idx] = orig
        numeric = (lp - lm) / (2 * h)
        analytic = grads[pname].reshape(-1)[idx]
        entry_floor = np.finfo(np.float64).eps * max(abs(loss0), 1.0) / (h * tol)
        if max(abs(analytic), abs(numeric)) < entry_floor:
            small += 1
            floor = max(floor, entry_floor)
            worst_small = max(worst_small, abs(analytic - numeric))
            continue
        checked += 1
        worst = max(worst, relative_error(analytic, numeric))
    if checked < n_params:
        worst = np.inf
    return CheckResult(name, worst, checked, small, worst_small, floor, tol)


def _image(rng, size):
    return rng.random((size, size))


def detector_losses(size=32, seed=0, params=None):
    """Loss closures for the detection, coverage and combined objectives.

    Targets are built once from the initial scores and then held fixed.
    """
    rng = np.random.default_rng(seed)
    img = _image(rng, size)
    params = params or PriorParams(sigma_coverage=3.0, k_per_image=16)
    valid = np.ones((size, size), dtype=bool)
    valid[: size // 4] = False
    state = init_net("detector", SMALL_CONFIG, seed=seed, zero_heads=False)
    prior = np.zeros((size, size))
    prior.ravel()[rng.choice(size * size, 8, replace=False)] = params.vartheta
    target = topk_target([prior + detector_forward(state, img)], params.k_per_image)[0]

    def make(fn):
        def loss_and_grads(st):
            graph = detector_forward(st, img, return_graph=True)
            loss, g = fn(graph.output.data[0, 0])
            return loss, backward(graph, g[None, None])
        return loss_and_grads

    return state, {
        "detection_ce": make(lambda s: cross_entropy(s, target)),
        "coverage": make(lambda s: coverage_loss(s, valid, params)),
        "combined": make(lambda s: detector_loss(s, target, valid, params)),
    }


def descriptor_loss_closure(size=32, seed=0, k=24, match_params=MatchParams()):
    rng = np.random.default_rng(seed)
    imgs = np.stack([_image(rng, size), _image(rng, size)])
    state = init_net("descriptor", SMALL_CONFIG, seed=seed, zero_heads=False)
    kps_a = sample_keypoints(rng.random((size, size)), k)
    kps_b = sample_keypoints(rng.random((size, size)), k)
    gt = np.column_stack([rng.permutation(k)[: k // 2], rng.permutation(k)[: k // 2]])

    def loss_and_grads(st):
        graph = descriptor_forward(st, imgs, return_graph=True)
        da = ad.l2_normalize(ad.gather_points(graph.output, 0, kps_a.coords))
        db = ad.l2_normalize(ad.gather_points(graph.output, 1, kps_b.coords))
        loss, ga, gb = descriptor_loss(da.data, db.data, gt, match_params)
        return loss, backward(graph, extra_roots=[(da, ga), (db, gb)])

    return state, loss_and_grads


def run_all(n_params=50, seed=0):
    results = []
    state, fns = detector_losses(seed=seed)
    for name, fn in fns.items():
        results.append(check_gradients(state, fn, n_params=n_params, seed=seed, name=name))
    state, fn = descriptor_loss_closure(seed=seed)
    results.append(check_gradients(state, fn, n_params=n_params, seed=seed, name="descriptor"))
    return results
