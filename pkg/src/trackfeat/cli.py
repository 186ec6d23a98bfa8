"""``trackfeat`` command-line driver.

Exit codes: 1 usage or config error, 2 missing/unreadable files, 3 malformed
file contents, 4 numerical failure (divergence, failed self-test).
"""
from __future__ import annotations

import argparse
import hashlib
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import formats as fm
from .evaluation import FAILED_POSE_DEG, auc, estimate_relative_pose, maa, pose_errors, repeatability, PoseError
from .matcher import dual_softmax_match, sample_descriptors, sample_keypoints, warp_quantized_match
from .scenegen import make_scene, track_keypoints
from .targets import log_posterior, topk_target
from .tinynet import descriptor_forward, detector_forward, init_net
from .training import TrainingDiverged, scene_log_priors, train_descriptor, train_detector

EXIT_USAGE, EXIT_IO, EXIT_FORMAT, EXIT_NUMERIC = 1, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


# --------------------------------------------------------------- helpers


class Context:
    """Resolved config plus the output conventions shared by all commands."""

    def __init__(self, cfg: cfgmod.PipelineConfig, jobs: int = 1, quiet: bool = False):
        self.cfg = cfg
        self.jobs = max(1, int(jobs))
        self.text = cfgmod.dumps(cfg)
        self.digest = hashlib.sha256(self.text.encode("utf-8")).hexdigest()[:16]
        self.quiet = quiet

    @property
    def out(self):
        return Path(self.cfg.run.out)

    @property
    def header(self):
        return (f"trackfeat config sha256:{self.digest} seed={self.cfg.run.seed}",)

    def announce(self, command):
        if not self.quiet:
            print(f"# trackfeat {command}")
            for line in self.text.splitlines():
                print(f"# {line}" if line else "#")

    def save_config(self, directory=None):
        d = Path(directory) if directory else self.out
        d.mkdir(parents=True, exist_ok=True)
        (d / "config.ini").write_bytes(self.text.encode("utf-8"))

    def log(self, msg):
        if not self.quiet:
            print(msg)

    def map(self, fn, items):
        """Ordered map, optionally over worker processes."""
        items = list(items)
        if self.jobs == 1 or len(items) < 2:
            return [fn(x) for x in items]
        with ProcessPoolExecutor(max_workers=self.jobs) as ex:
            return list(ex.map(fn, items))


def _scene_list(ctx):
    dirs = fm.scene_dirs(ctx.cfg.run.scenes)
    if not dirs:
        raise FileNotFoundError(f"no scene directories under {ctx.cfg.run.scenes}")
    return dirs


def _feature_dir(ctx, scene_dir):
    return ctx.out / Path(scene_dir).name


# -------------------------------------------------------------- commands


def cmd_scene_gen(ctx: Context, args):
    cfg = ctx.cfg
    count = cfg.run.scene_count
    for i in range(count):
        scene = make_scene(cfg.scene, cfg.stage_seed("scene", i))
        fm.write_scene(ctx.out / f"scene_{i:04d}", scene)
    ctx.save_config()
    ctx.log(f"wrote {count} scenes to {ctx.out}")


def cmd_scene_inspect(ctx: Context, args):
    for d in _scene_list(ctx):
        s = fm.read_scene(d)
        ka, kb = track_keypoints(s, "A"), track_keypoints(s, "B")
        base = float(np.linalg.norm(s.cam_a.center - s.cam_b.center))
        print(f"{d.name}: seed={s.seed} size={s.grid.width}x{s.grid.height} tracks={len(s.tracks)} "
              f"detA={int(s.tracks.detected_a.sum())} detB={int(s.tracks.detected_b.sum())} "
              f"priorA={len(ka)} priorB={len(kb)} validA={s.depth_a.valid.mean():.4f} "
              f"validB={s.depth_b.valid.mean():.4f} covisAB={s.warp_ab.domain.mean():.4f} baseline={base:.4f}")


def cmd_targets_build(ctx: Context, args):
    cfg = ctx.cfg
    det = fm.read_checkpoint(args.checkpoint) if args.checkpoint else None
    for d in _scene_list(ctx):
        s = fm.read_scene(d)
        out = _feature_dir(ctx, d)
        prior_a, prior_b = scene_log_priors(s, cfg.prior)
        if det is not None:
            scores = detector_forward(det, np.stack([s.image_a, s.image_b]))
        else:
            scores = np.zeros((2,) + s.grid.shape)
        post = [log_posterior(prior_a, scores[0]), log_posterior(prior_b, scores[1])]
        targets = topk_target(post, cfg.prior.k_per_image * 2)
        for tag, prior, sc, po in (("A", prior_a, scores[0], post[0]), ("B", prior_b, scores[1], post[1])):
            fm.write_score_map(out / f"prior{tag}.ddsm", prior)
            fm.write_score_map(out / f"scores{tag}.ddsm", sc)
            fm.write_score_map(out / f"posterior{tag}.ddsm", po)
        fm.write_targets(out / "targets.txt", targets, ctx.header)
    ctx.save_config()


def _load_scenes(ctx):
    return [fm.read_scene(d) for d in _scene_list(ctx)]


def cmd_train(ctx: Context, args):
    cfg = ctx.cfg
    scenes = _load_scenes(ctx)
    which = args.which
    tcfg = cfg.train_config(which)
    net = init_net(which, cfg.net, seed=cfg.stage_seed(f"init_{which}"))
    every = max(1, tcfg.steps // 10)

    def progress(step, loss):
        if step % every == 0 or step == tcfg.steps - 1:
            ctx.log(f"step {step} loss {loss:.6f}")

    try:
        if which == "detector":
            state, trace = train_detector(scenes, net, cfg.prior, tcfg, callback=progress)
        else:
            if not args.detector:
                raise UsageError("train descriptor needs --detector CHECKPOINT")
            det = fm.read_checkpoint(args.detector)
            state, trace = train_descriptor(scenes, net, det, cfg.match, tcfg, callback=progress)
    except TrainingDiverged as exc:
        fm.write_loss_trace(ctx.out / f"{which}_loss.txt", exc.trace, ctx.header)
        raise
    fm.write_checkpoint(ctx.out / f"{which}.ddnt", state)
    fm.write_loss_trace(ctx.out / f"{which}_loss.txt", trace, ctx.header)
    ctx.save_config()


def _detect_one(job):
    ckpt, scene_dir, out, k, header = job
    det = fm.read_checkpoint(ckpt)
    s = fm.read_scene(scene_dir)
    scores = detector_forward(det, np.stack([s.image_a, s.image_b]))
    for tag, sc in zip("AB", scores):
        fm.write_score_map(out / f"scores{tag}.ddsm", sc)
        fm.write_keypoints(out / f"keypoints{tag}.txt", sample_keypoints(sc, k), s.grid, header)
    return scene_dir.name


def cmd_detect(ctx: Context, args):
    jobs = [(args.checkpoint, d, _feature_dir(ctx, d), ctx.cfg.eval.keypoints, ctx.header) for d in _scene_list(ctx)]
    ctx.map(_detect_one, jobs)
    ctx.save_config()


def _describe_one(job):
    ckpt, scene_dir, out = job
    net = fm.read_checkpoint(ckpt)
    s = fm.read_scene(scene_dir)
    grids = descriptor_forward(net, np.stack([s.image_a, s.image_b]))
    for tag, grid in zip("AB", grids):
        kps, _ = fm.read_keypoints(out / f"keypoints{tag}.txt")
        fm.write_descriptors(out / f"descriptors{tag}.ddde", sample_descriptors(grid, kps).vectors)
    return scene_dir.name


def cmd_describe(ctx: Context, args):
    ctx.map(_describe_one, [(args.checkpoint, d, _feature_dir(ctx, d)) for d in _scene_list(ctx)])
    ctx.save_config()


def _match_one(job):
    method, scene_dir, out, cfg, header = job
    kps_a, _ = fm.read_keypoints(out / "keypointsA.txt")
    kps_b, _ = fm.read_keypoints(out / "keypointsB.txt")
    if method == "dual-softmax":
        m = dual_softmax_match(fm.read_descriptors(out / "descriptorsA.ddde"),
                               fm.read_descriptors(out / "descriptorsB.ddde"), cfg.match)
    else:
        s = fm.read_scene(scene_dir)
        m = warp_quantized_match(s.warp_ab, kps_a, kps_b, cfg.eval.warp_radius_frac * s.grid.diagonal)
    fm.write_matches(out / "matches.txt", m, header)
    return len(m)


def cmd_match(ctx: Context, args):
    jobs = [(args.method, d, _feature_dir(ctx, d), ctx.cfg, ctx.header) for d in _scene_list(ctx)]
    counts = ctx.map(_match_one, jobs)
    ctx.save_config()
    ctx.log(f"matched {len(counts)} pairs, {sum(counts)} matches")


def _repeat_one(job):
    scene_dir, out, thresholds = job
    s = fm.read_scene(scene_dir)
    kps_a, _ = fm.read_keypoints(out / "keypointsA.txt")
    kps_b, _ = fm.read_keypoints(out / "keypointsB.txt")
    r = repeatability(kps_a, kps_b, s.warp_ab, thresholds)
    return scene_dir.name, r


def _pose_one(job):
    scene_dir, out, ev, seed = job
    s = fm.read_scene(scene_dir)
    kps_a, _ = fm.read_keypoints(out / "keypointsA.txt")
    kps_b, _ = fm.read_keypoints(out / "keypointsB.txt")
    m = fm.read_matches(out / "matches.txt")
    gt_R, gt_t = s.cam_a.relative_to(s.cam_b)
    if len(m) < 8:
        return scene_dir.name, PoseError(FAILED_POSE_DEG, FAILED_POSE_DEG, float("inf")), len(m), 0
    est = estimate_relative_pose(kps_a.coords[m.idx_a], kps_b.coords[m.idx_b], s.cam_a, s.cam_b,
                                 iterations=ev.ransac_iterations, inlier_threshold=ev.inlier_threshold_px,
                                 seed=seed, confidence=ev.ransac_confidence)
    # the essential matrix fixes direction only; metric error uses the true baseline length
    err = pose_errors(est.R, est.t * np.linalg.norm(gt_t), gt_R, gt_t)
    return scene_dir.name, err, len(m), int(est.inliers.sum())


def cmd_eval(ctx: Context, args):
    cfg = ctx.cfg
    ev = cfg.eval
    dirs = _scene_list(ctx)
    report = Path(args.report) if args.report else ctx.out / f"eval_{args.metric}.txt"
    if args.metric == "repeatability":
        results = ctx.map(_repeat_one, [(d, _feature_dir(ctx, d), ev.repeatability_thresholds) for d in dirs])
        blocks = [(name, {"count": r.count, "thresholds_px": r.thresholds_px, "repeatability": r.fractions})
                  for name, r in results]
        fr = np.array([r.fractions for _, r in results])
        agg = {"pairs": len(results), "thresholds_frac": ev.repeatability_thresholds,
               "mean_repeatability": fr.mean(axis=0)}
        fm.write_report(report, blocks, agg, ctx.header)
        ctx.log(f"mean repeatability {fm._fmt(fr.mean(axis=0))}")
    else:
        jobs = [(d, _feature_dir(ctx, d), ev, cfg.stage_seed("ransac", i)) for i, d in enumerate(dirs)]
        results = ctx.map(_pose_one, jobs)
        errs = [e for _, e, _, _ in results]
        blocks = [(name, {"rot_err_deg": e.rot_deg, "trans_err_deg": e.trans_deg, "trans_err_m": e.trans_m,
                          "n_matches": nm, "n_inliers": ni}) for name, e, nm, ni in results]
        max_deg = [FAILED_POSE_DEG if not np.isfinite(e.max_deg) else e.max_deg for e in errs]
        agg = {"pairs": len(results), "failed": sum(1 for _, _, nm, _ in results if nm < 8),
               "auc_thresholds_deg": ev.auc_thresholds, "auc": auc(max_deg, ev.auc_thresholds),
               "maa": maa(errs, scenes=[name for name, *_ in results])}
        if args.metric == "maa":
            agg = {k: agg[k] for k in ("pairs", "failed", "maa")}
        fm.write_report(report, blocks, agg, ctx.header)
        if args.csv or args.metric == "pose":
            csv = Path(args.csv) if args.csv else report.with_suffix(".csv")
            fm.write_pose_csv(csv, [(name, e.rot_deg, e.trans_deg, e.trans_m, nm, ni) for name, e, nm, ni in results])
        ctx.log(" ".join(f"{k}={fm._fmt(v)}" for k, v in agg.items()))
    ctx.save_config(report.parent)


def cmd_selftest(ctx: Context, args):
    from .selftest import run_selftest
    ok = run_selftest(log=print, quick=args.quick)
    if not ok:
        raise FloatingPointError("self-test failed")


# ---------------------------------------------------------------- parser


def _override_parent():
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", metavar="PATH", help="INI config file; flags override its values")
    p.add_argument("--seed", type=int, help="global seed (run.seed)")
    p.add_argument("--out", metavar="DIR", help="output directory (run.out)")
    p.add_argument("--scenes", metavar="DIR", help="scene root or single scene directory (run.scenes)")
    p.add_argument("--jobs", type=int, default=1, metavar="N", help="worker processes for per-scene work")
    p.add_argument("--quiet", action="store_true", help="suppress the config header and progress output")
    g = p.add_argument_group("config overrides", "any config key as --section.key VALUE")
    for section, keys in cfgmod.field_names().items():
        for key in keys:
            g.add_argument(f"--{section}.{key}", dest=f"ov:{section}.{key}", metavar="V", help=argparse.SUPPRESS)
    return p


def build_parser():
    parent = _override_parent()
    ap = _Parser(prog="trackfeat", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sc = sub.add_parser("scene", help="generate or inspect synthetic scenes")
    scs = sc.add_subparsers(dest="action", required=True, parser_class=_Parser)
    scs.add_parser("gen", parents=[parent], help="write run.scene_count scenes to --out").set_defaults(fn=cmd_scene_gen)
    scs.add_parser("inspect", parents=[parent], help="print per-scene statistics").set_defaults(fn=cmd_scene_inspect)

    tg = sub.add_parser("targets", help="detection targets")
    tgs = tg.add_subparsers(dest="action", required=True, parser_class=_Parser)
    tb = tgs.add_parser("build", parents=[parent], help="write prior, posterior and top-k target files")
    tb.add_argument("--checkpoint", help="detector checkpoint for the posterior (default: prior only)")
    tb.set_defaults(fn=cmd_targets_build)

    tr = sub.add_parser("train", help="train a network")
    trs = tr.add_subparsers(dest="which", required=True, parser_class=_Parser)
    trs.add_parser("detector", parents=[parent]).set_defaults(fn=cmd_train)
    td = trs.add_parser("descriptor", parents=[parent])
    td.add_argument("--detector", help="frozen detector checkpoint")
    td.set_defaults(fn=cmd_train)

    de = sub.add_parser("detect", parents=[parent], help="top-K keypoints per scene view")
    de.add_argument("--checkpoint", required=True)
    de.set_defaults(fn=cmd_detect)
    ds = sub.add_parser("describe", parents=[parent], help="descriptors at detected keypoints")
    ds.add_argument("--checkpoint", required=True)
    ds.set_defaults(fn=cmd_describe)

    ma = sub.add_parser("match", help="match keypoints between views")
    mas = ma.add_subparsers(dest="method", required=True, parser_class=_Parser)
    for method in ("dual-softmax", "warp-quantized"):
        mas.add_parser(method, parents=[parent]).set_defaults(fn=cmd_match)

    ev = sub.add_parser("eval", help="evaluation reports")
    evs = ev.add_subparsers(dest="metric", required=True, parser_class=_Parser)
    for metric in ("repeatability", "pose", "maa"):
        p = evs.add_parser(metric, parents=[parent])
        p.add_argument("--report", help="report path (default: OUT/eval_<metric>.txt)")
        p.add_argument("--csv", help="per-pair CSV path")
        p.set_defaults(fn=cmd_eval)

    st = sub.add_parser("selftest", parents=[parent], help="gradient checks and oracle comparisons")
    st.add_argument("--quick", action="store_true", help="fewer random instances")
    st.set_defaults(fn=cmd_selftest)
    return ap


def resolve_config(args) -> cfgmod.PipelineConfig:
    cfg = cfgmod.load(args.config) if args.config else cfgmod.PipelineConfig()
    ov = {}
    for dest, val in vars(args).items():
        if dest.startswith("ov:") and val is not None:
            section, key = dest[3:].split(".", 1)
            ov.setdefault(section, {})[key] = val
    run = ov.setdefault("run", {})
    for key in ("seed", "out", "scenes"):
        if getattr(args, key) is not None:
            run[key] = str(getattr(args, key))
    return cfgmod.apply_overrides(cfg, ov)


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        cfg = resolve_config(args)
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        ctx = Context(cfg, args.jobs, args.quiet)
        sub = next((getattr(args, k) for k in ("action", "which", "method", "metric") if getattr(args, k, None)), "")
        ctx.announce(f"{args.command} {sub}".strip())
        args.fn(ctx, args)
    except (UsageError, cfgmod.ConfigError) as exc:
        print(f"trackfeat: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except fm.FormatError as exc:
        print(f"trackfeat: format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except OSError as exc:
        print(f"trackfeat: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"trackfeat: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"trackfeat: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())
