import shutil

import numpy as np
import pytest

from trackfeat import formats
from trackfeat.cli import EXIT_FORMAT, EXIT_IO, EXIT_NUMERIC, EXIT_USAGE, build_parser, main
from trackfeat.types import KeypointSet

SMALL = ["--run.scene_count", "3", "--scene.width", "32", "--scene.height", "32"]


def _run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def scene_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("scenes")
    assert _run("scene", "gen", "--quiet", "--seed", 3, "--out", root, *SMALL) == 0
    return root


class TestSceneGen:
    def test_byte_identical_rerun(self, scene_root, tmp_path):
        assert _run("scene", "gen", "--quiet", "--seed", 3, "--out", tmp_path, *SMALL) == 0
        a = sorted(p.relative_to(scene_root) for p in scene_root.rglob("*") if p.is_file())
        b = sorted(p.relative_to(tmp_path) for p in tmp_path.rglob("*") if p.is_file())
        assert a == b and len(a) == 3 * 8 + 1
        for rel in a:
            if rel.name != "config.ini":
                assert (scene_root / rel).read_bytes() == (tmp_path / rel).read_bytes()
        # the saved config differs only in the output path it records
        cfg_a, cfg_b = ((r / "config.ini").read_text().splitlines() for r in (scene_root, tmp_path))
        assert [x for x in cfg_a if not x.startswith("out =")] == [x for x in cfg_b if not x.startswith("out =")]

    def test_seed_changes_output(self, scene_root, tmp_path):
        _run("scene", "gen", "--quiet", "--seed", 4, "--out", tmp_path, *SMALL)
        assert (scene_root / "scene_0000" / "imageA.pgm").read_bytes() != \
            (tmp_path / "scene_0000" / "imageA.pgm").read_bytes()

    def test_config_header_printed(self, tmp_path, capsys):
        _run("scene", "gen", "--seed", 5, "--out", tmp_path, "--run.scene_count", "1")
        out = capsys.readouterr().out
        assert out.startswith("# trackfeat scene gen\n# [run]\n# seed = 5\n")
        assert (tmp_path / "config.ini").read_text().startswith("[run]\nseed = 5\n")

    def test_inspect(self, scene_root, capsys):
        assert _run("scene", "inspect", "--quiet", "--scenes", scene_root) == 0
        lines = capsys.readouterr().out.splitlines()
        assert len(lines) == 3 and lines[0].startswith("scene_0000: seed=")


class TestEvalIdentity:
    def test_repeatability_one(self, scene_root, tmp_path):
        scene = tmp_path / "scenes" / "s"
        shutil.copytree(scene_root / "scene_0000", scene)
        # view B becomes an exact copy of view A, so the warp is the identity on valid depth
        for a, b in (("camA.txt", "camB.txt"), ("depthA.dddm", "depthB.dddm"), ("imageA.pgm", "imageB.pgm")):
            shutil.copy(scene / a, scene / b)
        feats = tmp_path / "out" / "s"
        feats.mkdir(parents=True)
        kps = KeypointSet(np.random.default_rng(0).uniform(0, 32, (20, 2)))
        grid = formats.read_scene(scene).grid
        for tag in "AB":
            formats.write_keypoints(feats / f"keypoints{tag}.txt", kps, grid)
        assert _run("eval", "repeatability", "--quiet", "--scenes", scene, "--out", tmp_path / "out") == 0
        rep = formats.read_report(tmp_path / "out" / "eval_repeatability.txt")
        assert [float(x) for x in rep["aggregate"]["mean_repeatability"].split(",")] == [1.0, 1.0, 1.0]


class TestExitCodes:
    def test_usage(self, capsys):
        with pytest.raises(SystemExit) as exc:
            _run("scene", "explode")
        assert exc.value.code == EXIT_USAGE

    def test_bad_config_value(self, tmp_path):
        assert _run("scene", "gen", "--quiet", "--out", tmp_path, "--scene.width", "wide") == EXIT_USAGE

    def test_unknown_config_key(self, tmp_path):
        (tmp_path / "c.ini").write_text("[scene]\ncolour = red\n")
        assert _run("scene", "gen", "--quiet", "--config", tmp_path / "c.ini") == EXIT_USAGE

    def test_missing_scenes(self, tmp_path):
        assert _run("scene", "inspect", "--quiet", "--scenes", tmp_path / "absent") == EXIT_IO

    def test_missing_config_file(self, tmp_path):
        assert _run("scene", "gen", "--quiet", "--config", tmp_path / "absent.ini") == EXIT_IO

    def test_malformed_checkpoint(self, scene_root, tmp_path):
        (tmp_path / "bad.ddnt").write_bytes(b"garbage")
        assert _run("detect", "--quiet", "--scenes", scene_root, "--out", tmp_path,
                    "--checkpoint", tmp_path / "bad.ddnt") == EXIT_FORMAT

    def test_descriptor_needs_detector(self, scene_root, tmp_path):
        assert _run("train", "descriptor", "--quiet", "--scenes", scene_root, "--out", tmp_path) == EXIT_USAGE

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_diverged_training(self, scene_root, tmp_path):
        code = _run("train", "detector", "--quiet", "--scenes", scene_root, "--out", tmp_path,
                    "--train_detector.steps", "20", "--train_detector.lr_encoder", "1e6",
                    "--train_detector.lr_decoder", "1e6")
        assert code == EXIT_NUMERIC
        assert (tmp_path / "detector_loss.txt").exists()

    def test_distinct_codes(self):
        assert len({EXIT_USAGE, EXIT_IO, EXIT_FORMAT, EXIT_NUMERIC}) == 4

    def test_every_command_parses(self):
        ap = build_parser()
        for argv in (["scene", "gen"], ["targets", "build"], ["train", "detector"], ["detect", "--checkpoint", "c"],
                     ["describe", "--checkpoint", "c"], ["match", "warp-quantized"], ["eval", "maa"], ["selftest"]):
            assert callable(ap.parse_args(argv).fn)


class TestPipeline:
    def test_smoke(self, scene_root, tmp_path):
        common = ["--quiet", "--scenes", scene_root, "--out", tmp_path, "--eval.keypoints", "30",
                  "--train_detector.steps", "3", "--train_descriptor.steps", "3"]
        assert _run("targets", "build", *common) == 0
        assert _run("train", "detector", *common) == 0
        assert _run("train", "descriptor", *common, "--detector", tmp_path / "detector.ddnt") == 0
        assert _run("detect", *common, "--checkpoint", tmp_path / "detector.ddnt") == 0
        assert _run("describe", *common, "--checkpoint", tmp_path / "descriptor.ddnt") == 0
        assert _run("match", "dual-softmax", *common) == 0
        assert _run("eval", "pose", *common) == 0
        rep = formats.read_report(tmp_path / "eval_pose.txt")
        assert set(rep) == {"pair scene_0000", "pair scene_0001", "pair scene_0002", "aggregate"}
        assert int(rep["aggregate"]["pairs"]) == 3
        assert len((tmp_path / "eval_pose.csv").read_text().splitlines()) == 4
        kps, _ = formats.read_keypoints(tmp_path / "scene_0000" / "keypointsA.txt")
        assert len(kps) == 30

    def test_idempotent(self, scene_root, tmp_path):
        common = ["--quiet", "--scenes", scene_root, "--out", tmp_path, "--train_detector.steps", "2"]
        _run("train", "detector", *common)
        first = (tmp_path / "detector.ddnt").read_bytes()
        _run("detect", *common, "--checkpoint", tmp_path / "detector.ddnt")
        kp = (tmp_path / "scene_0001" / "keypointsB.txt").read_bytes()
        _run("train", "detector", *common)
        _run("detect", *common, "--checkpoint", tmp_path / "detector.ddnt")
        assert (tmp_path / "detector.ddnt").read_bytes() == first
        assert (tmp_path / "scene_0001" / "keypointsB.txt").read_bytes() == kp
