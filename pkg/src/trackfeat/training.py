"""Training loops for the detector and descriptor networks.

Both loops are pure functions of (scenes, initial state, configs): every
random choice is drawn from a generator seeded by ``TrainConfig.seed``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .descobj import MatchParams, descriptor_loss, gt_correspondences
from .matcher import sample_keypoints
from .scenegen import Scene, track_keypoints
from .targets import PriorParams, detector_loss, log_posterior, rasterize_deltas, smooth_log_prior, topk_target, \
    two_view_log_prior
from .tinynet import NetState, backward, descriptor_forward, detector_forward, param_group


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 200
    batch_size: int = 4  # scene pairs per step
    lr_encoder: float = 2e-5
    lr_decoder: float = 1e-4
    schedule: str = "cosine"  # "cosine" | "constant"
    optimizer: str = "sgd"  # "sgd" | "adam"
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    keypoints_per_image: int = 64  # descriptor training only
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr_encoder < 0 or self.lr_decoder < 0:
            raise ValueError("learning rates must be non-negative")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.keypoints_per_image < 1:
            raise ValueError("keypoints_per_image must be >= 1")

    def as_dict(self):
        return asdict(self)

    def lr_scale(self, step):
        """Multiplier at 0-based ``step``; cosine decays from 1 to 0 over the run."""
        if self.schedule == "constant":
            return 1.0
        return 0.5 * (1.0 + math.cos(math.pi * step / self.steps))


class TrainingDiverged(FloatingPointError):
    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


@dataclass
class LossTrace:
    steps: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    lrs: list = field(default_factory=list)  # decoder learning rate at each step

    def append(self, step, loss, lr):
        self.steps.append(int(step))
        self.losses.append(float(loss))
        self.lrs.append(float(lr))

    def __len__(self):
        return len(self.steps)

    def head_tail_means(self, frac=0.1):
        n = max(1, int(round(len(self.losses) * frac)))
        return float(np.mean(self.losses[:n])), float(np.mean(self.losses[-n:]))


class _Optimizer:
    def __init__(self, state: NetState, cfg: TrainConfig):
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in state.params.items()} if cfg.optimizer == "adam" else None
        self.v = {k: np.zeros_like(v) for k, v in state.params.items()} if cfg.optimizer == "adam" else None

    def base_lr(self, name):
        return self.cfg.lr_encoder if param_group(name) == "encoder" else self.cfg.lr_decoder

    def step(self, state: NetState, grads, scale):
        self.t += 1
        b1, b2 = self.cfg.adam_betas
        for name, p in state.params.items():
            lr = self.base_lr(name) * scale
            g = grads[name]
            if self.m is None:
                p -= lr * g
                continue
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = self.m[name] / (1 - b1 ** self.t)
            v_hat = self.v[name] / (1 - b2 ** self.t)
            p -= lr * m_hat / (np.sqrt(v_hat) + self.cfg.adam_eps)


def _check_finite(loss, trace, step):
    if not np.isfinite(loss):
        raise TrainingDiverged(f"non-finite loss at step {step}", trace)


def _pick(rng, n_scenes, batch):
    return rng.choice(n_scenes, size=batch, replace=batch > n_scenes)


def scene_log_priors(scene: Scene, params: PriorParams = PriorParams()):
    """Two-view log-priors (A, B) from the detected covisible tracks."""
    grid = scene.grid
    h_a = smooth_log_prior(rasterize_deltas(track_keypoints(scene, "A"), grid), params)
    h_b = smooth_log_prior(rasterize_deltas(track_keypoints(scene, "B"), grid), params)
    return two_view_log_prior(h_a, h_b, scene.warp_ab, scene.warp_ba)


def train_detector(scenes, net: NetState, prior_params: PriorParams = PriorParams(),
                   cfg: TrainConfig = TrainConfig(), callback=None):
    """Fit the detector with the top-k detection loss plus coverage.

    Returns a trained copy of ``net`` and its :class:`LossTrace`.
    """
    scenes = list(scenes)
    if not scenes:
        raise ValueError("train_detector needs at least one scene")
    state = net.copy()
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 11]))
    priors = [scene_log_priors(s, prior_params) for s in scenes]
    opt = _Optimizer(state, cfg)
    trace = LossTrace()
    for step in range(cfg.steps):
        batch = _pick(rng, len(scenes), cfg.batch_size)
        images = np.concatenate([np.stack([scenes[i].image_a, scenes[i].image_b]) for i in batch])
        graph = detector_forward(state, images, return_graph=True)
        scores = graph.output.data[:, 0]
        logp = [priors[i][v] for i in batch for v in (0, 1)]
        valid = [scenes[i].view(v)[1].valid for i in batch for v in ("A", "B")]
        post = [log_posterior(lp, s) for lp, s in zip(logp, scores)]
        targets = topk_target(post, prior_params.k_per_image * len(post))
        n = len(post)
        loss, grad = 0.0, np.zeros_like(scores)
        for j in range(n):
            l_j, g_j = detector_loss(scores[j], targets[j], valid[j], prior_params)
            loss += l_j / n
            grad[j] = g_j / n
        _check_finite(loss, trace, step)
        grads = backward(graph, grad[:, None])
        scale = cfg.lr_scale(step)
        trace.append(step, loss, cfg.lr_decoder * scale)
        opt.step(state, grads, scale)
        if callback is not None:
            callback(step, loss)
    return state, trace


def train_descriptor(scenes, net: NetState, detector: NetState, match_params: MatchParams = MatchParams(),
                     cfg: TrainConfig = TrainConfig(), callback=None):
    """Fit the descriptor on keypoints sampled from a frozen detector.

    Returns a trained copy of ``net`` and its :class:`LossTrace`.
    """
    scenes = list(scenes)
    if not scenes:
        raise ValueError("train_descriptor needs at least one scene")
    state = net.copy()
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 12]))
    k = cfg.keypoints_per_image
    # the detector is frozen, so keypoints and correspondences are fixed per scene
    per_scene = []
    for s in scenes:
        sa, sb = detector_forward(detector, np.stack([s.image_a, s.image_b]))
        kps_a, kps_b = sample_keypoints(sa, k), sample_keypoints(sb, k)
        per_scene.append((kps_a, kps_b, gt_correspondences(kps_a, kps_b, s.warp_ab, match_params)))
    opt = _Optimizer(state, cfg)
    trace = LossTrace()
    for step in range(cfg.steps):
        batch = [i for i in _pick(rng, len(scenes), cfg.batch_size) if len(per_scene[i][2])]
        if not batch:
            raise ValueError("no scene in the batch has ground-truth correspondences")
        images = np.concatenate([np.stack([scenes[i].image_a, scenes[i].image_b]) for i in batch])
        graph = descriptor_forward(state, images, return_graph=True)
        roots, loss = [], 0.0
        for j, i in enumerate(batch):
            kps_a, kps_b, gt = per_scene[i]
            da = ad.l2_normalize(ad.gather_points(graph.output, 2 * j, kps_a.coords))
            db = ad.l2_normalize(ad.gather_points(graph.output, 2 * j + 1, kps_b.coords))
            l_j, ga, gb = descriptor_loss(da.data, db.data, gt, match_params)
            loss += l_j / len(batch)
            roots += [(da, ga / len(batch)), (db, gb / len(batch))]
        _check_finite(loss, trace, step)
        grads = backward(graph, extra_roots=roots)
        scale = cfg.lr_scale(step)
        trace.append(step, loss, cfg.lr_decoder * scale)
        opt.step(state, grads, scale)
        if callback is not None:
            callback(step, loss)
    return state, trace
