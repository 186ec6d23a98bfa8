"""Hot numeric kernels, each in a compiled-loop and a vectorized numpy form.

The public names (``conv3x3``, ``dwconv3x3``, ...) dispatch on
``_accel.ENABLE_NUMBA``; the ``*_numba`` / ``*_numpy`` variants are importable
directly for the equivalence tests and the benchmark.

Layouts: feature maps are ``(N, C, H, W)`` float64, 3x3 kernels use zero
"same" padding.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._accel import ENABLE_NUMBA, njit


# ---------------------------------------------------------------- conv 3x3


@njit
def _conv3x3_loop(x, w):
    n_img, cin, h, wd = x.shape
    cout = w.shape[0]
    out = np.zeros((n_img, cout, h, wd))
    # one output row at a time so it stays in cache across all taps
    for n in range(n_img):
        for co in range(cout):
            for y in range(h):
                row = out[n, co, y]
                for ci in range(cin):
                    for ky in range(3):
                        yy = y + ky - 1
                        if yy < 0 or yy >= h:
                            continue
                        src = x[n, ci, yy]
                        for kx in range(3):
                            wv = w[co, ci, ky, kx]
                            x_lo = max(0, 1 - kx)
                            x_hi = min(wd, wd + 1 - kx)
                            for xc in range(x_lo, x_hi):
                                row[xc] += wv * src[xc + kx - 1]
    return out


@njit
def _conv3x3_grad_w_loop(x, gout):
    n_img, cin, h, wd = x.shape
    cout = gout.shape[1]
    gw = np.zeros((cout, cin, 3, 3))
    acc = np.zeros(wd)
    for n in range(n_img):
        for co in range(cout):
            for ci in range(cin):
                for ky in range(3):
                    y_lo = max(0, 1 - ky)
                    y_hi = min(h, h + 1 - ky)
                    for kx in range(3):
                        x_lo = max(0, 1 - kx)
                        x_hi = min(wd, wd + 1 - kx)
                        # per-column partial sums keep the inner loop free of a
                        # serial reduction, so it vectorizes without fastmath
                        acc[:] = 0.0
                        for y in range(y_lo, y_hi):
                            yy = y + ky - 1
                            for xc in range(x_lo, x_hi):
                                acc[xc] += gout[n, co, y, xc] * x[n, ci, yy, xc + kx - 1]
                        gw[co, ci, ky, kx] += acc.sum()
    return gw


def _flip_transpose(w):
    return np.ascontiguousarray(w.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])


def conv3x3_numba(x, w):
    return _conv3x3_loop(np.ascontiguousarray(x), np.ascontiguousarray(w))


def conv3x3_grad_numba(x, w, gout):
    gout = np.ascontiguousarray(gout)
    gx = _conv3x3_loop(gout, _flip_transpose(w))
    gw = _conv3x3_grad_w_loop(np.ascontiguousarray(x), gout)
    return gx, gw


def _windows3x3(x):
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    return sliding_window_view(xp, (3, 3), axis=(2, 3))  # (N, C, H, W, 3, 3)


def conv3x3_numpy(x, w):
    cols = _windows3x3(x)
    out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3]))  # (N, H, W, Cout)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv3x3_grad_numpy(x, w, gout):
    gx = conv3x3_numpy(gout, _flip_transpose(w))
    gw = np.tensordot(gout, _windows3x3(x), axes=([0, 2, 3], [0, 2, 3]))
    return gx, gw


# ------------------------------------------------------- depthwise conv 3x3


@njit
def _dwconv3x3_loop(x, w):
    n_img, c, h, wd = x.shape
    out = np.zeros((n_img, c, h, wd))
    for n in range(n_img):
        for ch in range(c):
            for ky in range(3):
                y_lo = max(0, 1 - ky)
                y_hi = min(h, h + 1 - ky)
                for kx in range(3):
                    wv = w[ch, ky, kx]
                    x_lo = max(0, 1 - kx)
                    x_hi = min(wd, wd + 1 - kx)
                    for y in range(y_lo, y_hi):
                        yy = y + ky - 1
                        for xc in range(x_lo, x_hi):
                            out[n, ch, y, xc] += wv * x[n, ch, yy, xc + kx - 1]
    return out


@njit
def _dwconv3x3_grad_w_loop(x, gout):
    n_img, c, h, wd = x.shape
    gw = np.zeros((c, 3, 3))
    for n in range(n_img):
        for ch in range(c):
            for ky in range(3):
                y_lo = max(0, 1 - ky)
                y_hi = min(h, h + 1 - ky)
                for kx in range(3):
                    x_lo = max(0, 1 - kx)
                    x_hi = min(wd, wd + 1 - kx)
                    acc = 0.0
                    for y in range(y_lo, y_hi):
                        yy = y + ky - 1
                        for xc in range(x_lo, x_hi):
                            acc += gout[n, ch, y, xc] * x[n, ch, yy, xc + kx - 1]
                    gw[ch, ky, kx] += acc
    return gw


def dwconv3x3_numba(x, w):
    return _dwconv3x3_loop(np.ascontiguousarray(x), np.ascontiguousarray(w))


def dwconv3x3_grad_numba(x, w, gout):
    gout = np.ascontiguousarray(gout)
    gx = _dwconv3x3_loop(gout, np.ascontiguousarray(w[:, ::-1, ::-1]))
    gw = _dwconv3x3_grad_w_loop(np.ascontiguousarray(x), gout)
    return gx, gw


def dwconv3x3_numpy(x, w):
    h, wd = x.shape[2:]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros_like(x, dtype=np.float64)
    for ky in range(3):
        for kx in range(3):
            out += w[None, :, ky, kx, None, None] * xp[:, :, ky:ky + h, kx:kx + wd]
    return out


def dwconv3x3_grad_numpy(x, w, gout):
    gx = dwconv3x3_numpy(gout, w[:, ::-1, ::-1])
    cols = _windows3x3(x)
    gw = np.einsum("nchw,nchwij->cij", gout, cols)
    return gx, gw


# --------------------------------------------------- separable zero-pad filter


@njit
def _separable_loop(img, k):
    h, w = img.shape
    r = (k.shape[0] - 1) // 2
    tmp = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            acc = 0.0
            for i in range(-r, r + 1):
                xx = x + i
                if 0 <= xx < w:
                    acc += k[i + r] * img[y, xx]
            tmp[y, x] = acc
    out = np.zeros((h, w))
    for y in range(h):
        for i in range(-r, r + 1):
            yy = y + i
            if 0 <= yy < h:
                kv = k[i + r]
                for x in range(w):
                    out[y, x] += kv * tmp[yy, x]
    return out


def separable_filter_numba(img, k):
    return _separable_loop(np.ascontiguousarray(img, dtype=np.float64), np.ascontiguousarray(k, dtype=np.float64))


def separable_filter_numpy(img, k):
    img = np.asarray(img, dtype=np.float64)
    r = (len(k) - 1) // 2
    h, w = img.shape
    p = np.pad(img, r)
    tmp = np.zeros((h + 2 * r, w))
    for i in range(2 * r + 1):
        tmp += k[i] * p[:, i:i + w]
    out = np.zeros((h, w))
    for i in range(2 * r + 1):
        out += k[i] * tmp[i:i + h, :]
    return out


# ------------------------------------------------ bilinear sampling (clamped)


@njit
def _bilinear_loop(img, pts):
    c, h, w = img.shape
    m = pts.shape[0]
    out = np.empty((m, c))
    for p in range(m):
        u = min(max(pts[p, 0] - 0.5, 0.0), w - 1.0)
        v = min(max(pts[p, 1] - 0.5, 0.0), h - 1.0)
        i0 = min(int(np.floor(u)), max(w - 2, 0))
        j0 = min(int(np.floor(v)), max(h - 2, 0))
        i1 = min(i0 + 1, w - 1)
        j1 = min(j0 + 1, h - 1)
        fu = u - i0
        fv = v - j0
        for ch in range(c):
            out[p, ch] = ((1 - fv) * ((1 - fu) * img[ch, j0, i0] + fu * img[ch, j0, i1])
                          + fv * ((1 - fu) * img[ch, j1, i0] + fu * img[ch, j1, i1]))
    return out


def bilinear_corners(pts, h, w):
    """Clamped bilinear stencil: corner indices and weights for pixel-unit points."""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    u = np.clip(pts[:, 0] - 0.5, 0.0, w - 1.0)
    v = np.clip(pts[:, 1] - 0.5, 0.0, h - 1.0)
    i0 = np.minimum(np.floor(u).astype(np.int64), max(w - 2, 0))
    j0 = np.minimum(np.floor(v).astype(np.int64), max(h - 2, 0))
    i1 = np.minimum(i0 + 1, w - 1)
    j1 = np.minimum(j0 + 1, h - 1)
    fu = u - i0
    fv = v - j0
    idx = (j0, i0, j0, i1, j1, i0, j1, i1)
    wts = ((1 - fv) * (1 - fu), (1 - fv) * fu, fv * (1 - fu), fv * fu)
    return idx, wts


def bilinear_sample_numpy(img, pts):
    c, h, w = img.shape
    (j00, i00, j01, i01, j10, i10, j11, i11), (w00, w01, w10, w11) = bilinear_corners(pts, h, w)
    out = (w00 * img[:, j00, i00] + w01 * img[:, j01, i01]
           + w10 * img[:, j10, i10] + w11 * img[:, j11, i11])
    return np.ascontiguousarray(out.T)


def bilinear_sample_numba(img, pts):
    return _bilinear_loop(np.ascontiguousarray(img, dtype=np.float64),
                          np.ascontiguousarray(np.asarray(pts, dtype=np.float64).reshape(-1, 2)))


# ------------------------------------------------------------- warp builder


@njit
def _warp_loop(depth_a, valid_a, kinv_a, r_ab, t_ab, k_b, depth_b, valid_b, rel_tol):
    h, w = depth_a.shape
    hb, wb = depth_b.shape
    target = np.full((h, w, 2), np.nan)
    domain = np.zeros((h, w), dtype=np.bool_)
    for j in range(h):
        for i in range(w):
            if not valid_a[j, i]:
                continue
            d = depth_a[j, i]
            px = i + 0.5
            py = j + 0.5
            ra0 = kinv_a[0, 0] * px + kinv_a[0, 1] * py + kinv_a[0, 2]
            ra1 = kinv_a[1, 0] * px + kinv_a[1, 1] * py + kinv_a[1, 2]
            ra2 = kinv_a[2, 0] * px + kinv_a[2, 1] * py + kinv_a[2, 2]
            xa0 = ra0 * d
            xa1 = ra1 * d
            xa2 = ra2 * d
            xb0 = r_ab[0, 0] * xa0 + r_ab[0, 1] * xa1 + r_ab[0, 2] * xa2 + t_ab[0]
            xb1 = r_ab[1, 0] * xa0 + r_ab[1, 1] * xa1 + r_ab[1, 2] * xa2 + t_ab[1]
            xb2 = r_ab[2, 0] * xa0 + r_ab[2, 1] * xa1 + r_ab[2, 2] * xa2 + t_ab[2]
            if xb2 <= 1e-9:
                continue
            hu = k_b[0, 0] * xb0 + k_b[0, 1] * xb1 + k_b[0, 2] * xb2
            hv = k_b[1, 1] * xb1 + k_b[1, 2] * xb2
            u = hu / xb2
            v = hv / xb2
            if not (u >= 0.0 and u < wb and v >= 0.0 and v < hb):
                continue
            ci = int(np.floor(u))
            cj = int(np.floor(v))
            if not valid_b[cj, ci]:
                continue
            db = depth_b[cj, ci]
            if abs(xb2 - db) / db >= rel_tol:
                continue
            target[j, i, 0] = u
            target[j, i, 1] = v
            domain[j, i] = True
    return target, domain


def build_warp_numba(depth_a, valid_a, kinv_a, r_ab, t_ab, k_b, depth_b, valid_b, rel_tol):
    f = np.ascontiguousarray
    return _warp_loop(f(depth_a, dtype=np.float64), f(valid_a, dtype=np.bool_), f(kinv_a), f(r_ab), f(t_ab),
                      f(k_b), f(depth_b, dtype=np.float64), f(valid_b, dtype=np.bool_), float(rel_tol))


def build_warp_numpy(depth_a, valid_a, kinv_a, r_ab, t_ab, k_b, depth_b, valid_b, rel_tol):
    h, w = depth_a.shape
    hb, wb = depth_b.shape
    jj, ii = np.mgrid[0:h, 0:w]
    pix = np.stack([ii + 0.5, jj + 0.5, np.ones((h, w))], axis=-1)
    xa = (pix @ kinv_a.T) * depth_a[..., None]
    xb = xa @ r_ab.T + t_ab
    z = xb[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uvw = xb @ k_b.T
        u = uvw[..., 0] / z
        v = uvw[..., 1] / z
    ok = valid_a & (z > 1e-9)
    ok &= (u >= 0) & (u < wb) & (v >= 0) & (v < hb)
    ci = np.where(ok, np.floor(np.where(ok, u, 0)), 0).astype(np.int64)
    cj = np.where(ok, np.floor(np.where(ok, v, 0)), 0).astype(np.int64)
    ok &= valid_b[cj, ci]
    db = depth_b[cj, ci]
    with np.errstate(divide="ignore", invalid="ignore"):
        ok &= np.abs(z - db) / db < rel_tol
    target = np.full((h, w, 2), np.nan)
    target[ok, 0] = u[ok]
    target[ok, 1] = v[ok]
    return target, ok


# --------------------------------------------------------------- dispatch

if ENABLE_NUMBA:
    conv3x3, conv3x3_grad = conv3x3_numba, conv3x3_grad_numba
    dwconv3x3, dwconv3x3_grad = dwconv3x3_numba, dwconv3x3_grad_numba
    separable_filter = separable_filter_numba
    bilinear_sample = bilinear_sample_numba
    build_warp_field = build_warp_numba
else:
    conv3x3, conv3x3_grad = conv3x3_numpy, conv3x3_grad_numpy
    dwconv3x3, dwconv3x3_grad = dwconv3x3_numpy, dwconv3x3_grad_numpy
    separable_filter = separable_filter_numpy
    bilinear_sample = bilinear_sample_numpy
    build_warp_field = build_warp_numpy
