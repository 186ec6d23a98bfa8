"""A minimal reverse-mode tape over numpy arrays.

Only the handful of ops the tiny networks need are provided. Each op returns
a :class:`Tensor` whose ``_backward`` maps the output gradient to one
gradient per parent (``None`` for parents that need none).
"""
from __future__ import annotations

import numpy as np
from scipy.special import expit

from . import kernels


class Tensor:
    __slots__ = ("data", "grad", "parents", "backward_fn", "name")

    def __init__(self, data, parents=(), backward_fn=None, name=None):
        self.data = data
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, name={self.name!r})"


def leaf(data, name=None):
    return Tensor(np.asarray(data, dtype=np.float64), name=name)


def backward(roots):
    """Propagate ``[(tensor, grad), ...]`` to every reachable tensor."""
    order, seen = [], set()
    for root, _ in roots:
        stack = [(root, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if id(p) not in seen:
                    stack.append((p, False))
    for node in order:
        node.grad = None
    for root, g in roots:
        root.grad = g if root.grad is None else root.grad + g
    for node in reversed(order):
        if node.backward_fn is None or node.grad is None:
            continue
        for p, g in zip(node.parents, node.backward_fn(node.grad)):
            if g is None:
                continue
            p.grad = g if p.grad is None else p.grad + g


# ------------------------------------------------------------------ ops


def conv3x3(x, w, b):
    out = kernels.conv3x3(x.data, w.data) + b.data[None, :, None, None]

    def bw(g):
        gx, gw = kernels.conv3x3_grad(x.data, w.data, g)
        return gx, gw, g.sum(axis=(0, 2, 3))

    return Tensor(out, (x, w, b), bw)


def conv1x1(x, w, b):
    out = np.tensordot(w.data, x.data, axes=([1], [1])).transpose(1, 0, 2, 3) + b.data[None, :, None, None]

    def bw(g):
        gx = np.tensordot(w.data, g, axes=([0], [1])).transpose(1, 0, 2, 3)
        gw = np.tensordot(g, x.data, axes=([0, 2, 3], [0, 2, 3]))
        return gx, gw, g.sum(axis=(0, 2, 3))

    return Tensor(np.ascontiguousarray(out), (x, w, b), bw)


def dwconv3x3(x, w, b):
    out = kernels.dwconv3x3(x.data, w.data) + b.data[None, :, None, None]

    def bw(g):
        gx, gw = kernels.dwconv3x3_grad(x.data, w.data, g)
        return gx, gw, g.sum(axis=(0, 2, 3))

    return Tensor(out, (x, w, b), bw)


def silu(x):
    sig = expit(x.data)
    out = x.data * sig

    def bw(g):
        return (g * (sig * (1.0 + x.data * (1.0 - sig))),)

    return Tensor(out, (x,), bw)


def add(a, b):
    return Tensor(a.data + b.data, (a, b), lambda g: (g, g))


def concat_channels(xs):
    sizes = [x.data.shape[1] for x in xs]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=1))

    return Tensor(np.concatenate([x.data for x in xs], axis=1), tuple(xs), bw)


def channels(x, start, stop):
    def bw(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    return Tensor(x.data[:, start:stop], (x,), bw)


def avgpool2(x):
    n, c, h, w = x.data.shape
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def bw(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) / 4.0,)

    return Tensor(out, (x,), bw)


def resample(x, mh, mw):
    """Separable linear resampling ``out = mh @ x @ mw.T`` per channel."""
    out = np.einsum("ih,nchw,jw->ncij", mh, x.data, mw, optimize=True)

    def bw(g):
        return (np.einsum("ih,ncij,jw->nchw", mh, g, mw, optimize=True),)

    return Tensor(out, (x,), bw)


def l2_normalize(x, axis=1, eps=1e-12):
    norm = np.sqrt(np.sum(x.data ** 2, axis=axis, keepdims=True))
    norm = np.maximum(norm, eps)
    y = x.data / norm

    def bw(g):
        return ((g - y * np.sum(y * g, axis=axis, keepdims=True)) / norm,)

    return Tensor(y, (x,), bw)


def gather_points(x, n, coords):
    """Clamped bilinear lookup of image ``n`` of a (N, D, H, W) tensor -> (K, D)."""
    _, d, h, w = x.data.shape
    idx, wts = kernels.bilinear_corners(coords, h, w)
    corners = [(idx[0], idx[1]), (idx[2], idx[3]), (idx[4], idx[5]), (idx[6], idx[7])]
    img = x.data[n]
    out = sum(wt[:, None] * img[:, jj, ii].T for (jj, ii), wt in zip(corners, wts))

    def bw(g):
        full = np.zeros_like(x.data)
        for (jj, ii), wt in zip(corners, wts):
            np.add.at(full[n], (slice(None), jj, ii), (wt[:, None] * g).T)
        return (full,)

    return Tensor(np.ascontiguousarray(out), (x,), bw)
