"""Readers and writers for every on-disk artifact.

Binary formats are little-endian with a 4-byte magic. Text formats are
whitespace separated; lines starting with ``#`` are comments and are skipped
by every reader. Floats in text files use the shortest round-trip repr.
"""
from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .geometry import Camera, DepthMap
from .scenegen import Scene, SceneParams, TrackSet
from .targets import TargetDistribution
from .tinynet import NetConfig, NetState, _param_shapes
from .training import LossTrace
from .types import KeypointSet, MatchSet, PixelGrid


class FormatError(ValueError):
    """A file exists but does not parse as the expected format."""


def _f(x):
    return repr(float(x))


def _write_bytes(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)


def _write_text(path, lines, header=()):
    body = "".join(f"# {h}\n" for h in header) + "".join(line + "\n" for line in lines)
    _write_bytes(path, body.encode("utf-8"))


def _data_lines(path):
    text = Path(path).read_text(encoding="utf-8")
    return [ln.split() for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]


def _check_magic(buf, magic, path):
    if buf[:4] != magic:
        raise FormatError(f"{path}: expected magic {magic.decode()!r}, found {buf[:4]!r}")


def _read_f32(buf, offset, count, path):
    end = offset + 4 * count
    if len(buf) < end:
        raise FormatError(f"{path}: truncated payload")
    return np.frombuffer(buf, dtype="<f4", count=count, offset=offset).astype(np.float64), end


def _parse_rows(rows, ncols, types, path):
    out = []
    for n, row in enumerate(rows):
        if len(row) != ncols:
            raise FormatError(f"{path}: line {n + 1} has {len(row)} fields, expected {ncols}")
        try:
            out.append([t(v) for t, v in zip(types, row)])
        except ValueError as exc:
            raise FormatError(f"{path}: line {n + 1}: {exc}") from None
    return out


# ----------------------------------------------------------- depth maps


def write_depth(path, depth: DepthMap):
    h, w = depth.depth.shape
    d = np.where(depth.valid, depth.depth, 0.0).astype("<f4")
    _write_bytes(path, b"DDDM" + struct.pack("<II", h, w) + d.tobytes() + depth.valid.astype(np.uint8).tobytes())


def read_depth(path) -> DepthMap:
    buf = Path(path).read_bytes()
    _check_magic(buf, b"DDDM", path)
    if len(buf) < 12:
        raise FormatError(f"{path}: truncated header")
    h, w = struct.unpack_from("<II", buf, 4)
    d, off = _read_f32(buf, 12, h * w, path)
    if len(buf) != off + h * w:
        raise FormatError(f"{path}: expected {off + h * w} bytes, found {len(buf)}")
    valid = np.frombuffer(buf, dtype=np.uint8, count=h * w, offset=off).reshape(h, w)
    if np.any(valid > 1):
        raise FormatError(f"{path}: validity bytes must be 0 or 1")
    return DepthMap(d.reshape(h, w), valid.astype(bool))


# -------------------------------------------------------------- cameras


def write_camera(path, cam: Camera):
    rows = [" ".join(_f(v) for v in r) for r in cam.K] + [" ".join(_f(v) for v in r) for r in cam.R]
    rows.append(" ".join(_f(v) for v in cam.t))
    _write_text(path, rows)


def read_camera(path) -> Camera:
    rows = _data_lines(path)
    if len(rows) != 7 or any(len(r) != 3 for r in rows):
        raise FormatError(f"{path}: camera file needs 7 lines of 3 numbers")
    try:
        m = np.array(rows, dtype=np.float64)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
    try:
        return Camera(m[0:3], m[3:6], m[6])
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None


# --------------------------------------------------------------- images


def write_pgm(path, image):
    """16-bit binary PGM of an image in [0, 1]; samples are big-endian as Netpbm requires."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    q = np.round(np.clip(img, 0.0, 1.0) * 65535.0).astype(">u2")
    _write_bytes(path, f"P5\n{w} {h}\n65535\n".encode("ascii") + q.tobytes())


def read_pgm(path):
    buf = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PGM header")
        tokens.append(buf[start:pos])
    pos += 1
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError(f"{path}: bad PGM header") from None
    dtype = ">u2" if maxval > 255 else "u1"
    n = w * h * np.dtype(dtype).itemsize
    if len(buf) - pos != n:
        raise FormatError(f"{path}: expected {n} sample bytes, found {len(buf) - pos}")
    return np.frombuffer(buf, dtype=dtype, offset=pos).reshape(h, w).astype(np.float64) / maxval


# ------------------------------------------------------------- tracks


def write_tracks(path, tracks: TrackSet):
    rows = [f"{_f(x)} {_f(y)} {_f(z)} {int(a)} {int(b)}"
            for (x, y, z), a, b in zip(tracks.points3d, tracks.detected_a, tracks.detected_b)]
    _write_text(path, rows)


def read_tracks(path) -> TrackSet:
    rows = _parse_rows(_data_lines(path), 5, (float, float, float, int, int), path)
    arr = np.array(rows, dtype=np.float64).reshape(-1, 5)
    if not np.all(np.isin(arr[:, 3:], (0, 1))):
        raise FormatError(f"{path}: detection flags must be 0 or 1")
    try:
        return TrackSet(arr[:, :3], arr[:, 3] > 0, arr[:, 4] > 0)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None


# --------------------------------------------------------------- scenes


def _kv_lines(d):
    return [f"{k}={v}" for k, v in d.items()]


def _read_kv(path):
    out = {}
    for ln in Path(path).read_text(encoding="utf-8").splitlines():
        if not ln.strip() or ln.lstrip().startswith("#"):
            continue
        if "=" not in ln:
            raise FormatError(f"{path}: expected key=value, got {ln!r}")
        k, v = ln.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _coerce_fields(cls, raw, path):
    defaults = cls()
    kwargs = {}
    for k, v in raw.items():
        if not hasattr(defaults, k):
            raise FormatError(f"{path}: unknown key {k!r}")
        kind = type(getattr(defaults, k))
        try:
            kwargs[k] = kind(v)
        except ValueError:
            raise FormatError(f"{path}: bad value for {k}: {v!r}") from None
    return cls(**kwargs)


def write_scene(directory, scene: Scene):
    d = Path(directory)
    write_pgm(d / "imageA.pgm", scene.image_a)
    write_pgm(d / "imageB.pgm", scene.image_b)
    write_depth(d / "depthA.dddm", scene.depth_a)
    write_depth(d / "depthB.dddm", scene.depth_b)
    write_camera(d / "camA.txt", scene.cam_a)
    write_camera(d / "camB.txt", scene.cam_b)
    write_tracks(d / "tracks.txt", scene.tracks)
    meta = {"seed": scene.seed}
    meta.update({k: (_f(v) if isinstance(v, float) else v) for k, v in scene.params.as_dict().items()})
    _write_text(d / "meta.txt", _kv_lines(meta))


def read_scene(directory) -> Scene:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"scene directory {d} does not exist")
    meta = _read_kv(d / "meta.txt")
    if "seed" not in meta:
        raise FormatError(f"{d / 'meta.txt'}: missing seed")
    try:
        seed = int(meta.pop("seed"))
    except ValueError:
        raise FormatError(f"{d / 'meta.txt'}: bad seed") from None
    params = _coerce_fields(SceneParams, meta, d / "meta.txt")
    return Scene(read_pgm(d / "imageA.pgm"), read_pgm(d / "imageB.pgm"),
                 read_depth(d / "depthA.dddm"), read_depth(d / "depthB.dddm"),
                 read_camera(d / "camA.txt"), read_camera(d / "camB.txt"),
                 read_tracks(d / "tracks.txt"), seed, params)


def scene_dirs(root):
    """Scene subdirectories of ``root`` (those holding a meta.txt), sorted by name."""
    root = Path(root)
    if (root / "meta.txt").is_file():
        return [root]
    if not root.is_dir():
        raise FileNotFoundError(f"{root} does not exist")
    return sorted(p for p in root.iterdir() if (p / "meta.txt").is_file())


# ---------------------------------------------------------- score maps


def write_score_map(path, values):
    v = np.asarray(values, dtype=np.float64)
    h, w = v.shape
    _write_bytes(path, b"DDSM" + struct.pack("<II", h, w) + v.astype("<f4").tobytes())


def read_score_map(path):
    buf = Path(path).read_bytes()
    _check_magic(buf, b"DDSM", path)
    if len(buf) < 12:
        raise FormatError(f"{path}: truncated header")
    h, w = struct.unpack_from("<II", buf, 4)
    v, off = _read_f32(buf, 12, h * w, path)
    if off != len(buf):
        raise FormatError(f"{path}: trailing bytes")
    return v.reshape(h, w)


def write_targets(path, targets, header=()):
    rows = []
    for i, t in enumerate(targets):
        for cell in t.support:
            r, c = divmod(int(cell), t.grid.width)
            rows.append(f"{i} {r} {c}")
    _write_text(path, rows, header)


def read_targets(path, grids):
    """Support cells per image; ``grids`` gives the PixelGrid of each image."""
    rows = _parse_rows(_data_lines(path), 3, (int, int, int), path)
    cells = [[] for _ in grids]
    for i, r, c in rows:
        if not 0 <= i < len(grids):
            raise FormatError(f"{path}: image index {i} out of range")
        g = grids[i]
        if not (0 <= r < g.height and 0 <= c < g.width):
            raise FormatError(f"{path}: cell ({r}, {c}) outside {g.width}x{g.height}")
        cells[i].append(r * g.width + c)
    return [TargetDistribution(g, np.array(sorted(c), dtype=np.int64)) for g, c in zip(grids, cells)]


# --------------------------------------------------- keypoints / descriptors


def write_keypoints(path, kps: KeypointSet, grid: PixelGrid, header=()):
    lines = [f"DDK1 {grid.width} {grid.height}"] + [f"# {h}" for h in header]
    lines += [f"{_f(x)} {_f(y)} {_f(s)}" for (x, y), s in zip(kps.coords, kps.scores)]
    _write_text(path, lines)


def read_keypoints(path):
    """Returns (KeypointSet, PixelGrid)."""
    rows = _data_lines(path)
    if not rows or rows[0][0] != "DDK1" or len(rows[0]) != 3:
        raise FormatError(f"{path}: missing 'DDK1 width height' header")
    try:
        grid = PixelGrid(int(rows[0][1]), int(rows[0][2]))
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
    vals = np.array(_parse_rows(rows[1:], 3, (float, float, float), path), dtype=np.float64).reshape(-1, 3)
    return KeypointSet(vals[:, :2], vals[:, 2]), grid


def write_descriptors(path, vectors):
    v = np.asarray(vectors, dtype=np.float64)
    k, d = v.shape
    _write_bytes(path, b"DDDE" + struct.pack("<II", k, d) + v.astype("<f4").tobytes())


def read_descriptors(path):
    buf = Path(path).read_bytes()
    _check_magic(buf, b"DDDE", path)
    if len(buf) < 12:
        raise FormatError(f"{path}: truncated header")
    k, d = struct.unpack_from("<II", buf, 4)
    v, off = _read_f32(buf, 12, k * d, path)
    if off != len(buf):
        raise FormatError(f"{path}: trailing bytes")
    return v.reshape(k, d)


def write_correspondences(path, gt, header=()):
    _write_text(path, [f"{int(a)} {int(b)}" for a, b in np.asarray(gt).reshape(-1, 2)], header)


def read_correspondences(path):
    rows = _parse_rows(_data_lines(path), 2, (int, int), path)
    return np.array(rows, dtype=np.int64).reshape(-1, 2)


def write_matches(path, matches: MatchSet, header=()):
    rows = [f"{int(a)} {int(b)} {_f(c)}" for a, b, c in zip(matches.idx_a, matches.idx_b, matches.confidence)]
    _write_text(path, rows, header)


def read_matches(path) -> MatchSet:
    rows = _parse_rows(_data_lines(path), 3, (int, int, float), path)
    arr = np.array(rows, dtype=np.float64).reshape(-1, 3)
    return MatchSet(arr[:, 0].astype(np.int64), arr[:, 1].astype(np.int64), arr[:, 2])


# ---------------------------------------------------------- checkpoints


def _config_text(state: NetState):
    lines = [f"kind={state.kind}", f"seed={state.seed}"]
    for k, v in state.config.as_dict().items():
        lines.append(f"{k}={','.join(str(x) for x in v) if isinstance(v, tuple) else v}")
    return "\n".join(lines) + "\n"


def write_checkpoint(path, state: NetState):
    """Parameters are stored as float32."""
    cfg = _config_text(state).encode("utf-8")
    parts = [b"DDNT", struct.pack("<I", len(cfg)), cfg, struct.pack("<I", len(state.params))]
    for name, arr in state.params.items():
        nb = name.encode("utf-8")
        parts += [struct.pack("<I", len(nb)), nb, struct.pack("<I", arr.ndim), struct.pack(f"<{arr.ndim}I", *arr.shape),
                  np.asarray(arr, dtype="<f4").tobytes()]
    _write_bytes(path, b"".join(parts))


def read_checkpoint(path) -> NetState:
    buf = Path(path).read_bytes()
    _check_magic(buf, b"DDNT", path)
    try:
        (n_cfg,) = struct.unpack_from("<I", buf, 4)
        cfg_text = buf[8:8 + n_cfg].decode("utf-8")
        off = 8 + n_cfg
        (n_t,) = struct.unpack_from("<I", buf, off)
        off += 4
        params = {}
        for _ in range(n_t):
            (nl,) = struct.unpack_from("<I", buf, off)
            name = buf[off + 4:off + 4 + nl].decode("utf-8")
            off += 4 + nl
            (nd,) = struct.unpack_from("<I", buf, off)
            shape = struct.unpack_from(f"<{nd}I", buf, off + 4)
            off += 4 + 4 * nd
            data, off = _read_f32(buf, off, int(np.prod(shape)), path)
            params[name] = data.reshape(shape)
    except (struct.error, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: corrupt checkpoint ({exc})") from None
    if off != len(buf):
        raise FormatError(f"{path}: trailing bytes")
    raw = dict(ln.split("=", 1) for ln in cfg_text.splitlines() if "=" in ln)
    try:
        kind, seed = raw.pop("kind"), int(raw.pop("seed"))
        cfg_kwargs = {}
        for k, default in NetConfig().as_dict().items():
            v = raw.pop(k)
            cfg_kwargs[k] = tuple(int(x) for x in v.split(",")) if isinstance(default, tuple) else type(default)(v)
        if raw:
            raise KeyError(sorted(raw)[0])
        config = NetConfig(**cfg_kwargs)
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: bad config block ({exc})") from None
    expected = _param_shapes(kind, config)
    if {k: tuple(v) for k, v in expected.items()} != {k: v.shape for k, v in params.items()}:
        raise FormatError(f"{path}: tensors do not match the stored config")
    return NetState(kind, config, params, seed)


# --------------------------------------------------------------- traces


def write_loss_trace(path, trace, header=()):
    rows = [f"{s} {_f(l)} {_f(lr)}" for s, l, lr in zip(trace.steps, trace.losses, trace.lrs)]
    _write_text(path, rows, header)


def read_loss_trace(path):
    tr = LossTrace()
    for s, l, lr in _parse_rows(_data_lines(path), 3, (int, float, float), path):
        tr.append(s, l, lr)
    return tr


def write_report(path, blocks, aggregate, header=()):
    """``blocks`` is a list of (pair id, {key: value}); ``aggregate`` a {key: value} dict."""
    lines = []
    for pair_id, kv in blocks:
        lines.append(f"[pair {pair_id}]")
        lines += [f"{k}={_fmt(v)}" for k, v in kv.items()]
        lines.append("")
    lines.append("[aggregate]")
    lines += [f"{k}={_fmt(v)}" for k, v in aggregate.items()]
    _write_text(path, lines, header)


def read_report(path):
    """Returns {section name: {key: value string}}."""
    out, cur = {}, None
    for ln in Path(path).read_text(encoding="utf-8").splitlines():
        ln = ln.strip()
        if not ln or ln.startswith("#"):
            continue
        if ln.startswith("[") and ln.endswith("]"):
            cur = out.setdefault(ln[1:-1], {})
        elif "=" in ln and cur is not None:
            k, v = ln.split("=", 1)
            cur[k] = v
        else:
            raise FormatError(f"{path}: unexpected line {ln!r}")
    return out


def write_pose_csv(path, rows):
    """``rows``: (pair_id, rot_err, trans_err_deg, trans_err_m, n_matches, n_inliers)."""
    lines = ["pair_id rot_err trans_err_deg trans_err_m n_matches n_inliers"]
    lines += [" ".join(_fmt(v) for v in r) for r in rows]
    _write_text(path, lines)


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return _f(v)
    if isinstance(v, (list, tuple, np.ndarray)):
        return ",".join(_fmt(x) for x in v)
    return str(v)


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return Path(path)
