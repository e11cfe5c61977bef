"""Declarative run configuration.

A run config is a nested YAML document with `model`, `weights`, `training`,
`data`, and `eval` sections plus a top-level seed.  Dataclasses mirror the
document; `load_config` / `dump_config` round-trip it.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

VALID_ALIGNMENTS = ("biec", "mse", "kl_channel", "kl_spatial", "none")
VALID_FUSION_MODES = ("gated", "concat", "add", "semantic_only")
VALID_DIRECTIONS = ("mvs_given_vb", "vb_given_mvs")
VALID_BIEC_SCALES = (4, 8, 16)


@dataclass
class ModelConfig:
    """Channel widths and structural switches for the codec networks."""

    ch_full: int = 48
    ch_half: int = 64
    ch_quarter: int = 96
    ch_latent: int = 96
    ch_motion_latent: int = 64
    sem_base: int = 48          # U-Net base width in the semantic decoder
    flow_levels: int = 3
    flow_hidden: int = 32
    num_qualities: int = 4
    backbone: str = "toy"
    backbone_pretrained: bool = False
    alignment: str = "biec"
    biec_directions: tuple[str, ...] = ("mvs_given_vb", "vb_given_mvs")
    biec_scales: tuple[int, ...] = (4, 8, 16)   # scale denominators
    fusion_mode: str = "gated"
    de_hidden: int = 48         # width of the density-estimation heads

    def validate(self) -> None:
        if self.alignment not in VALID_ALIGNMENTS:
            raise ValueError(f"unknown alignment variant: {self.alignment!r}")
        if self.fusion_mode not in VALID_FUSION_MODES:
            raise ValueError(f"unknown fusion mode: {self.fusion_mode!r}")
        for d in self.biec_directions:
            if d not in VALID_DIRECTIONS:
                raise ValueError(f"unknown BiEC direction: {d!r}")
        for s in self.biec_scales:
            if s not in VALID_BIEC_SCALES:
                raise ValueError(f"unknown BiEC scale denominator: {s!r}")
        if not self.biec_directions or not self.biec_scales:
            if self.alignment == "biec":
                raise ValueError("biec alignment requires at least one direction and scale")
        for name in ("ch_full", "ch_half", "ch_quarter", "ch_latent",
                     "ch_motion_latent", "sem_base", "num_qualities"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")


@dataclass
class ConsistencyEntryConfig:
    """One guidance model contributing feature-consistency terms."""

    model: str = "toy"
    layers: tuple[str, ...] = ("stem", "s4")
    weight: float = 1.0


@dataclass
class WeightsConfig:
    """Loss weighting: rate terms carry unit weight; distortion weights are
    sampled per step from [lambda_mse_min, lambda_mse_max]; the perceptual
    and consistency weights follow the sampled value unless overridden."""

    lambda_mse_min: float = 64.0
    lambda_mse_max: float = 512.0
    lambda_e: float = 1.0
    lambda_lpips_tied: bool = True
    lambda_cons_tied: bool = True
    lambda_lpips: float = 256.0   # used only when the tie is broken
    lambda_cons: float = 256.0
    consistency: tuple[ConsistencyEntryConfig, ...] = (ConsistencyEntryConfig(),)
    flow_model: str | None = "toy_flow"
    flow_downsample: int = 2
    temporal_weight: float = 0.0

    def validate(self) -> None:
        if self.lambda_mse_min <= 0 or self.lambda_mse_max < self.lambda_mse_min:
            raise ValueError("lambda_mse range must satisfy 0 < min <= max")
        if self.lambda_e < 0:
            raise ValueError("lambda_e must be non-negative")


@dataclass
class TrainingConfig:
    steps_per_epoch: int = 200
    stage_scale: float = 1.0
    batch_clips: int = 1
    crop: tuple[int, int] = (64, 64)
    lr_drop_fraction: float = 0.8
    grad_clip: float = 1.0
    checkpoint_every: int = 200
    out_dir: str = "runs/default"

    def validate(self) -> None:
        if self.steps_per_epoch < 1:
            raise ValueError("steps_per_epoch must be >= 1")
        if not (0.0 < self.lr_drop_fraction <= 1.0):
            raise ValueError("lr_drop_fraction must lie in (0, 1]")
        if self.stage_scale <= 0:
            raise ValueError("stage_scale must be positive")


@dataclass
class DataConfig:
    kind: str = "synthetic"       # synthetic | folders
    root: str | None = None       # folder of frame directories when kind=folders
    num_clips: int = 32
    frames_per_clip: int = 8
    height: int = 64
    width: int = 64
    max_shapes: int = 3

    def validate(self) -> None:
        if self.kind not in ("synthetic", "folders"):
            raise ValueError(f"unknown data kind: {self.kind!r}")
        if self.kind == "folders" and not self.root:
            raise ValueError("data.root is required when kind=folders")


@dataclass
class EvalConfig:
    qualities: tuple[int, ...] = (0, 1, 2, 3)
    gop_size: int = 6
    num_clips: int = 4
    checkpoint: str | None = None

    def validate(self) -> None:
        if len(self.qualities) < 1:
            raise ValueError("at least one quality index required")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    weights: WeightsConfig = field(default_factory=WeightsConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0

    def validate(self) -> "RunConfig":
        self.model.validate()
        self.weights.validate()
        self.training.validate()
        self.data.validate()
        self.eval.validate()
        return self


def _build(cls: type, value: Any) -> Any:
    if value is None:
        return cls()
    if not isinstance(value, dict):
        raise TypeError(f"expected mapping for {cls.__name__}, got {type(value).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs: dict[str, Any] = {}
    for key, raw in value.items():
        if key not in fields:
            raise ValueError(f"unknown config key {key!r} in {cls.__name__}")
        ftype = fields[key].type
        sub = {
            "model": ModelConfig, "weights": WeightsConfig,
            "training": TrainingConfig, "data": DataConfig, "eval": EvalConfig,
        }.get(key) if cls is RunConfig else None
        if key == "consistency":
            kwargs[key] = tuple(_build(ConsistencyEntryConfig, e) for e in raw)
        elif sub is not None:
            kwargs[key] = _build(sub, raw)
        elif isinstance(raw, list) and "tuple" in str(ftype):
            kwargs[key] = tuple(raw)
        else:
            kwargs[key] = raw
    return cls(**kwargs)


def config_from_dict(doc: dict[str, Any]) -> RunConfig:
    cfg = _build(RunConfig, doc)
    return cfg.validate()


def config_to_dict(cfg: RunConfig) -> dict[str, Any]:
    def strip(obj: Any) -> Any:
        if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
            return {f.name: strip(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
        if isinstance(obj, tuple):
            return [strip(v) for v in obj]
        return obj

    return strip(cfg)


def load_config(path: str | Path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        doc = yaml.safe_load(fh) or {}
    return config_from_dict(doc)


def dump_config(cfg: RunConfig, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(config_to_dict(cfg), fh, sort_keys=False)
