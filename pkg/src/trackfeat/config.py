"""Pipeline configuration: one INI file with a section per component.

Every key must belong to its section's dataclass; unknown sections or keys
are rejected. Tuples are written comma-separated and floats with their
shortest round-trip repr, so ``loads(dumps(cfg)) == cfg`` holds exactly.
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, fields, replace

import numpy as np

from .descobj import MatchParams
from .evaluation import AUC_THRESHOLDS, REPEATABILITY_THRESHOLDS
from .scenegen import SceneParams
from .targets import PriorParams
from .tinynet import NetConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    keypoints: int = 100
    matcher: str = "dual-softmax"  # "dual-softmax" | "warp-quantized"
    repeatability_thresholds: tuple = REPEATABILITY_THRESHOLDS
    auc_thresholds: tuple = AUC_THRESHOLDS
    precision_px: float = 2.0
    warp_radius_frac: float = 0.01
    inlier_threshold_px: float = 1.0
    ransac_iterations: int = 1000
    ransac_confidence: float = 0.9999

    def __post_init__(self):
        if self.keypoints < 1:
            raise ValueError("keypoints must be >= 1")
        if self.matcher not in ("dual-softmax", "warp-quantized"):
            raise ValueError(f"unknown matcher {self.matcher!r}")
        if self.ransac_iterations < 1:
            raise ValueError("ransac_iterations must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    scene_count: int = 64
    scenes: str = "scenes"  # input scene root, relative to the working directory
    out: str = "out"


# desk-scale training defaults used by the shipped toy pipeline
TOY_DETECTOR_TRAIN = TrainConfig(steps=600, batch_size=4, lr_encoder=0.05, lr_decoder=0.25)
TOY_DESCRIPTOR_TRAIN = TrainConfig(steps=600, batch_size=4, lr_encoder=0.05, lr_decoder=0.25,
                                   keypoints_per_image=64)


@dataclass(frozen=True)
class PipelineConfig:
    run: RunConfig = RunConfig()
    scene: SceneParams = SceneParams()
    prior: PriorParams = PriorParams(k_per_image=64)
    match: MatchParams = MatchParams()
    net: NetConfig = NetConfig()
    train_detector: TrainConfig = TOY_DETECTOR_TRAIN
    train_descriptor: TrainConfig = TOY_DESCRIPTOR_TRAIN
    eval: EvalConfig = EvalConfig()

    def sections(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def stage_seed(self, stage: str, index: int = 0) -> int:
        """Independent 32-bit seed for a pipeline stage, derived from ``run.seed``."""
        # the whole name goes in: a truncated tag would collide on shared prefixes
        tag = int.from_bytes(stage.encode("utf-8"), "little")
        return int(np.random.SeedSequence([self.run.seed, tag, index]).generate_state(1)[0])

    def train_config(self, which: str) -> TrainConfig:
        """The training section with its seed taken from the global seed."""
        base = self.train_detector if which == "detector" else self.train_descriptor
        return replace(base, seed=self.stage_seed(f"train_{which}"))


# TrainConfig.seed is derived from run.seed, so it never appears in a file
_SKIP = {"train_detector": {"seed"}, "train_descriptor": {"seed"}}


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ", ".join(_fmt(x) for x in v)
    return str(v)


def _parse(text, default, where):
    try:
        if isinstance(default, bool):
            low = text.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(f"not a boolean: {text!r}")
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            kind = type(default[0]) if default else float
            return tuple(kind(x.strip()) for x in text.split(",") if x.strip())
        return text.strip()
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def dumps(cfg: PipelineConfig) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    for name, obj in cfg.sections().items():
        cp[name] = {f.name: _fmt(getattr(obj, f.name)) for f in fields(obj) if f.name not in _SKIP.get(name, ())}
    lines = []
    for name in cp.sections():
        lines.append(f"[{name}]")
        lines += [f"{k} = {v}" for k, v in cp[name].items()]
        lines.append("")
    return "\n".join(lines)


def apply_overrides(cfg: PipelineConfig, values: dict) -> PipelineConfig:
    """``values`` maps section -> {key: string}; returns an updated config."""
    updates = {}
    for section, kv in values.items():
        if section not in cfg.sections():
            raise ConfigError(f"unknown section [{section}]")
        obj = getattr(cfg, section)
        names = {f.name for f in fields(obj)} - _SKIP.get(section, set())
        changes = {}
        for key, text in kv.items():
            if key not in names:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            changes[key] = _parse(text, getattr(obj, key), f"[{section}] {key}")
        try:
            updates[section] = replace(obj, **changes)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"[{section}]: {exc}") from None
    out = replace(cfg, **updates)
    try:
        out.scene.validate()
    except ValueError as exc:
        raise ConfigError(f"[scene]: {exc}") from None
    return out


def loads(text: str, base: PipelineConfig | None = None) -> PipelineConfig:
    cp = configparser.ConfigParser(interpolation=None, strict=True)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    return apply_overrides(base or PipelineConfig(), {s: dict(cp[s]) for s in cp.sections()})


def load(path) -> PipelineConfig:
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read())


def save(path, cfg: PipelineConfig):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps(cfg))


def field_names():
    """``{section: [keys]}`` for every configurable key."""
    cfg = PipelineConfig()
    return {name: [f.name for f in dataclasses.fields(obj) if f.name not in _SKIP.get(name, ())]
            for name, obj in cfg.sections().items()}
