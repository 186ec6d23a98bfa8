"""Desk-scale detector and descriptor networks.

Both nets share one layout and never share weights: a four-scale
convolutional encoder (strides 1, 2, 4, 8) and a coarse-to-fine decoder. The
decoder at each scale sees the encoder features plus upsampled context from
the coarser scale, runs depthwise-separable residual blocks, and emits a
residual that is added to the upsampled running output. Detector logits are
upsampled bicubically, descriptor grids bilinearly and unit-normalized at the
end.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np

from . import autodiff as ad

STRIDES = (1, 2, 4, 8)


@dataclass(frozen=True)
class NetConfig:
    channels: tuple = (8, 16, 32, 64)
    decoder_dims: tuple = (8, 16, 32, 64)
    context_dims: tuple = (4, 8, 16)  # produced at strides 2, 4, 8
    detector_blocks: int = 2
    descriptor_blocks: int = 2
    descriptor_dim: int = 64
    detector_upsample: str = "bicubic"
    descriptor_upsample: str = "bilinear"

    def __post_init__(self):
        for name in ("channels", "decoder_dims"):
            vals = getattr(self, name)
            if len(vals) != 4 or min(vals) < 1:
                raise ValueError(f"{name} needs four positive entries")
        if len(self.context_dims) != 3 or min(self.context_dims) < 0:
            raise ValueError("context_dims needs three non-negative entries")
        if not 1 <= self.descriptor_dim <= 256:
            raise ValueError("descriptor_dim must lie in [1, 256]")
        for mode in (self.detector_upsample, self.descriptor_upsample):
            if mode not in ("bicubic", "bilinear"):
                raise ValueError(f"unknown upsampling mode {mode!r}")

    def as_dict(self):
        return asdict(self)


@dataclass
class NetState:
    kind: str  # "detector" | "descriptor"
    config: NetConfig
    params: dict = field(default_factory=dict)
    seed: int = 0

    def copy(self):
        return NetState(self.kind, self.config, {k: v.copy() for k, v in self.params.items()}, self.seed)

    @property
    def num_params(self):
        return int(sum(v.size for v in self.params.values()))

    def out_dim(self):
        return 1 if self.kind == "detector" else self.config.descriptor_dim

    def blocks(self):
        return self.config.detector_blocks if self.kind == "detector" else self.config.descriptor_blocks

    def upsample_mode(self):
        return self.config.detector_upsample if self.kind == "detector" else self.config.descriptor_upsample


def _param_shapes(kind, cfg: NetConfig):
    out_dim = 1 if kind == "detector" else cfg.descriptor_dim
    blocks = cfg.detector_blocks if kind == "detector" else cfg.descriptor_blocks
    c = cfg.channels
    shapes = {
        "enc.s1a.w": (c[0], 1, 3, 3), "enc.s1a.b": (c[0],),
        "enc.s1b.w": (c[0], c[0], 3, 3), "enc.s1b.b": (c[0],),
        "enc.s2.w": (c[1], c[0], 3, 3), "enc.s2.b": (c[1],),
        "enc.s4.w": (c[2], c[1], 3, 3), "enc.s4.b": (c[2],),
        "enc.s8.w": (c[3], c[2], 3, 3), "enc.s8.b": (c[3],),
    }
    ctx = {2: cfg.context_dims[0], 4: cfg.context_dims[1], 8: cfg.context_dims[2]}
    for level, s in reversed(list(enumerate(STRIDES))):
        d = cfg.decoder_dims[level]
        in_ch = c[level] + (ctx[s * 2] if s < 8 else 0)
        p = f"dec.s{s}"
        shapes[f"{p}.proj.w"] = (d, in_ch)
        shapes[f"{p}.proj.b"] = (d,)
        for k in range(blocks):
            shapes[f"{p}.blk{k}.dw.w"] = (d, 3, 3)
            shapes[f"{p}.blk{k}.dw.b"] = (d,)
            shapes[f"{p}.blk{k}.pw.w"] = (d, d)
            shapes[f"{p}.blk{k}.pw.b"] = (d,)
        shapes[f"{p}.head.w"] = (out_dim + ctx.get(s, 0), d)
        shapes[f"{p}.head.b"] = (out_dim + ctx.get(s, 0),)
    return shapes


def init_net(kind: str, config: NetConfig = NetConfig(), seed: int = 0, zero_heads: bool | None = None) -> NetState:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases.

    With ``zero_heads`` the residual output heads start at zero. The default
    does so for the detector only: an all-zero descriptor grid is a saddle
    of the matching loss (every gradient vanishes there).
    """
    if zero_heads is None:
        zero_heads = kind == "detector"
    if kind not in ("detector", "descriptor"):
        raise ValueError(f"unknown net kind {kind!r}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0 if kind == "detector" else 1]))
    params = {}
    for name, shape in _param_shapes(kind, config).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
            continue
        fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else 1
        if ".dw." in name:
            fan_in = 9
        s = 1.0 / np.sqrt(fan_in)
        params[name] = rng.uniform(-s, s, size=shape)
        if zero_heads and ".head." in name:
            params[name][:] = 0.0
    return NetState(kind, config, params, int(seed))


# ------------------------------------------------------------ resampling


def _cubic(x, a=-0.75):
    x = np.abs(x)
    return np.where(x <= 1, ((a + 2) * x - (a + 3)) * x * x + 1,
                    np.where(x < 2, ((a * x - 5 * a) * x + 8 * a) * x - 4 * a, 0.0))


@lru_cache(maxsize=64)
def resize_matrix(n_in, n_out, mode):
    """(n_out, n_in) 1-D resampling matrix, half-pixel aligned, edge-clamped."""
    m = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    i0 = np.floor(src).astype(np.int64)
    t = src - i0
    if mode == "bilinear":
        taps = [(0, 1 - t), (1, t)]
    elif mode == "bicubic":
        taps = [(-1, _cubic(t + 1)), (0, _cubic(t)), (1, _cubic(1 - t)), (2, _cubic(2 - t))]
    else:
        raise ValueError(f"unknown mode {mode!r}")
    rows = np.arange(n_out)
    for off, wt in taps:
        np.add.at(m, (rows, np.clip(i0 + off, 0, n_in - 1)), wt)
    m.setflags(write=False)
    return m


def upsample2(x, mode):
    h, w = x.data.shape[2:]
    return ad.resample(x, resize_matrix(h, 2 * h, mode), resize_matrix(w, 2 * w, mode))


# --------------------------------------------------------------- forward


@dataclass
class Graph:
    output: ad.Tensor
    leaves: dict


def _prepare(images):
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3:
        raise ValueError("images must be (H, W) or (N, H, W)")
    h, w = x.shape[1:]
    if h % 8 or w % 8:
        raise ValueError(f"image size {w}x{h} is not divisible by 8")
    return ((x - 0.5) / 0.25)[:, None]


def _run(state: NetState, images):
    p = {k: ad.leaf(v, k) for k, v in state.params.items()}
    x = ad.leaf(_prepare(images))
    act = ad.silu

    e1 = act(ad.conv3x3(act(ad.conv3x3(x, p["enc.s1a.w"], p["enc.s1a.b"])), p["enc.s1b.w"], p["enc.s1b.b"]))
    e2 = act(ad.conv3x3(ad.avgpool2(e1), p["enc.s2.w"], p["enc.s2.b"]))
    e4 = act(ad.conv3x3(ad.avgpool2(e2), p["enc.s4.w"], p["enc.s4.b"]))
    e8 = act(ad.conv3x3(ad.avgpool2(e4), p["enc.s8.w"], p["enc.s8.b"]))
    feats = {1: e1, 2: e2, 4: e4, 8: e8}

    out_dim = state.out_dim()
    mode = state.upsample_mode()
    running, ctx = None, None
    for s in (8, 4, 2, 1):
        pre = f"dec.s{s}"
        inp = feats[s] if ctx is None else ad.concat_channels([feats[s], upsample2(ctx, "bilinear")])
        h = ad.conv1x1(inp, p[f"{pre}.proj.w"], p[f"{pre}.proj.b"])
        for k in range(state.blocks()):
            blk = f"{pre}.blk{k}"
            r = ad.conv1x1(act(ad.dwconv3x3(h, p[f"{blk}.dw.w"], p[f"{blk}.dw.b"])), p[f"{blk}.pw.w"], p[f"{blk}.pw.b"])
            h = ad.add(h, r)
        out = ad.conv1x1(act(h), p[f"{pre}.head.w"], p[f"{pre}.head.b"])
        n_out = out.data.shape[1]
        resid = ad.channels(out, 0, out_dim) if n_out > out_dim else out
        ctx = ad.channels(out, out_dim, n_out) if n_out > out_dim else None
        running = resid if running is None else ad.add(upsample2(running, mode), resid)
    return running, p


def detector_forward(state: NetState, images, return_graph: bool = False):
    """Score maps (N, H, W), or (H, W) for a single image."""
    if state.kind != "detector":
        raise ValueError("detector_forward needs a detector state")
    out, leaves = _run(state, images)
    if return_graph:
        return Graph(out, leaves)
    scores = out.data[:, 0]
    return scores[0] if np.ndim(images) == 2 else scores


def descriptor_forward(state: NetState, images, return_graph: bool = False):
    """Unit-norm dense descriptors (N, D, H, W), or (D, H, W) for one image."""
    if state.kind != "descriptor":
        raise ValueError("descriptor_forward needs a descriptor state")
    out, leaves = _run(state, images)
    out = ad.l2_normalize(out, axis=1)
    if return_graph:
        return Graph(out, leaves)
    return out.data[0] if np.ndim(images) == 2 else out.data


def backward(graph: Graph, grad_output=None, extra_roots=()):
    """Parameter gradients of a scalar loss.

    ``grad_output`` is dloss/d(graph output); ``extra_roots`` holds further
    ``(tensor, grad)`` pairs for tensors derived from the output.
    """
    roots = list(extra_roots)
    if grad_output is not None:
        g = np.asarray(grad_output, dtype=np.float64)
        if g.shape != graph.output.data.shape:
            g = g.reshape(graph.output.data.shape)
        roots.append((graph.output, g))
    for _, g in roots:
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite loss gradient")
    ad.backward(roots)
    return {name: (t.grad if t.grad is not None else np.zeros_like(t.data)) for name, t in graph.leaves.items()}


def param_group(name):
    return "encoder" if name.startswith("enc.") else "decoder"
