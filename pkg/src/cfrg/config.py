"""Typed configuration tree.

Every section is a frozen dataclass; ``load_config`` builds the tree from a
TOML or JSON document and rejects unknown keys by their dotted name.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import ConfigError


@dataclass(frozen=True)
class TileSpec:
    max_side: int = 1024
    overlap_fraction: float = 0.20
    min_keep_fraction: float = 0.20

    def __post_init__(self):
        if self.max_side < 1:
            raise ConfigError(f"tile.max_side must be >= 1, got {self.max_side}")
        if not 0.0 <= self.overlap_fraction < 1.0:
            raise ConfigError(f"tile.overlap_fraction must be in [0, 1), got {self.overlap_fraction}")
        if not 0.0 < self.min_keep_fraction <= 1.0:
            raise ConfigError(f"tile.min_keep_fraction must be in (0, 1], got {self.min_keep_fraction}")


@dataclass(frozen=True)
class SynthConfig:
    # Perlin lattice periods are powers of two drawn from this closed range.
    perlin_scale_range: tuple[int, int] = (1, 64)
    threshold: float = 0.5
    blend_beta_range: tuple[float, float] = (0.2, 1.0)
    texture_root: str | None = None
    rotation_range: tuple[float, float] = (-90.0, 90.0)
    synth_probability: float = 0.5
    foreground_mask: bool = False
    foreground_threshold: float = 0.1

    def __post_init__(self):
        lo, hi = self.perlin_scale_range
        if lo < 1 or hi < lo:
            raise ConfigError(f"synth.perlin_scale_range invalid: {self.perlin_scale_range}")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"synth.threshold must be in (0, 1), got {self.threshold}")
        b0, b1 = self.blend_beta_range
        if not (0.0 < b0 <= b1 <= 1.0):
            raise ConfigError(f"synth.blend_beta_range must lie in (0, 1], got {self.blend_beta_range}")
        if not 0.0 <= self.synth_probability <= 1.0:
            raise ConfigError(f"synth.synth_probability must be in [0, 1], got {self.synth_probability}")
        if self.rotation_range[0] > self.rotation_range[1]:
            raise ConfigError(f"synth.rotation_range invalid: {self.rotation_range}")


@dataclass(frozen=True)
class BackboneSpec:
    teacher_arch: str = "wide_resnet50_2"
    student_arch: str = "efficientnet_b0"
    teacher_frozen: bool = True
    homogeneous_mode: bool = False
    student_pretrained: bool = True
    weights_dir: str | None = None

    def __post_init__(self):
        if not self.teacher_frozen:
            raise ConfigError("backbone.teacher_frozen cannot be disabled")


@dataclass(frozen=True)
class ModelConfig:
    seg_width: int = 128
    # Tiny stand-in backbone widths, used only when train.desk_scale is on.
    desk_teacher_channels: tuple[int, int, int] = (32, 64, 128)
    desk_student_channels: tuple[int, int, int] = (16, 24, 48)


@dataclass(frozen=True)
class DistillConfig:
    push_enabled: bool = True
    clamp_push: bool = True


@dataclass(frozen=True)
class LossConfig:
    lambda_dis: float = 1.0
    lambda_rec: float = 1.0
    lambda_bce: float = 1.0
    detach_hints: bool = False

    def __post_init__(self):
        for name in ("lambda_dis", "lambda_rec", "lambda_bce"):
            if getattr(self, name) < 0:
                raise ConfigError(f"loss.{name} must be non-negative")


@dataclass(frozen=True)
class AblationFlags:
    """Table-style ablation switches; each one removes a component."""

    wrc: bool = False  # without recovery branch
    ws: bool = False  # without segmentation branch
    wp: bool = False  # without push term in the distillation loss
    wc: bool = False  # without recovery hint weighting of in_t
    wh: bool = False  # homogeneous student

    def __post_init__(self):
        if self.wrc and self.ws:
            raise ConfigError("ablation.wrc and ablation.ws cannot both be set: no scoring branch remains")

    @classmethod
    def named(cls, name: str) -> AblationFlags:
        name = name.lower()
        if name == "full":
            return cls()
        if name not in {f.name for f in dataclasses.fields(cls)}:
            raise ConfigError(f"unknown ablation variant {name!r}")
        return cls(**{name: True})


ABLATION_VARIANTS = ("wrc", "ws", "wp", "wc", "wh", "full")


@dataclass(frozen=True)
class InferConfig:
    sigma: float = 4.0
    image_score: str = "max"
    top_k: int = 100

    def __post_init__(self):
        if self.image_score not in ("max", "topk_mean"):
            raise ConfigError(f"infer.image_score must be 'max' or 'topk_mean', got {self.image_score!r}")
        if self.sigma < 0:
            raise ConfigError("infer.sigma must be >= 0")


@dataclass(frozen=True)
class MetricsConfig:
    pro_fpr_limit: float = 0.3
    pool_pixels: bool = True
    pro_max_thresholds: int = 5000

    def __post_init__(self):
        if not 0.0 < self.pro_fpr_limit <= 1.0:
            raise ConfigError("metrics.pro_fpr_limit must be in (0, 1]")


@dataclass(frozen=True)
class TrainConfig:
    resolution: int = 256
    lr: float = 5e-4
    weight_decay: float = 1e-5
    milestones: tuple[int, ...] = (40, 45)
    gamma: float = 0.2
    epochs: int = 50
    batch_size: int = 32
    seed: int = 0
    teacher_seed: int = 0
    categories: tuple[str, ...] = ()
    data_root: str = ""
    output_dir: str = "runs"
    desk_scale: bool = False
    num_workers: int = 0
    training_mode: str = "joint"
    stage1_epochs: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if self.milestones and self.epochs < max(self.milestones):
            raise ConfigError(f"train.epochs ({self.epochs}) must be >= max milestone {max(self.milestones)}")
        if self.resolution % 32:
            raise ConfigError(f"train.resolution must be divisible by 32, got {self.resolution}")
        if self.training_mode not in ("joint", "two_stage"):
            raise ConfigError(f"train.training_mode must be 'joint' or 'two_stage', got {self.training_mode!r}")
        if self.training_mode == "two_stage" and not 0 < self.stage1_epochs < self.epochs:
            raise ConfigError("train.stage1_epochs must be in (0, epochs) for two_stage training")


@dataclass(frozen=True)
class Config:
    train: TrainConfig = field(default_factory=TrainConfig)
    tile: TileSpec = field(default_factory=TileSpec)
    synth: SynthConfig = field(default_factory=SynthConfig)
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    ablation: AblationFlags = field(default_factory=AblationFlags)
    infer: InferConfig = field(default_factory=InferConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)

    @property
    def push_enabled(self) -> bool:
        return self.distill.push_enabled and not self.ablation.wp

    @property
    def homogeneous(self) -> bool:
        return self.backbone.homogeneous_mode or self.ablation.wh

    @property
    def use_recovery(self) -> bool:
        return not self.ablation.wrc

    @property
    def use_segmentation(self) -> bool:
        return not self.ablation.ws

    @property
    def use_hint(self) -> bool:
        return self.use_recovery and not self.ablation.wc

    def to_dict(self) -> dict[str, Any]:
        return _to_plain(dataclasses.asdict(self))

    def replace(self, **dotted: Any) -> Config:
        """Return a copy with ``section__key=value`` or ``{"section.key": value}`` overrides."""
        return apply_overrides(self, {k.replace("__", "."): v for k, v in dotted.items()})

    def hash(self) -> str:
        """Hash of the fields that shape model weights; checkpoints carry it."""
        shaping = {
            "resolution": self.train.resolution,
            "desk_scale": self.train.desk_scale,
            "backbone": {k: v for k, v in dataclasses.asdict(self.backbone).items() if k != "weights_dir"},
            "model": dataclasses.asdict(self.model),
            "ablation": dataclasses.asdict(self.ablation),
        }
        blob = json.dumps(_to_plain(shaping), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


DESK_PRESET: dict[str, Any] = {
    "train.desk_scale": True,
    "train.resolution": 128,
    "train.batch_size": 8,
    "train.epochs": 10,
    "train.milestones": (8, 9),
    "train.lr": 2e-3,
    "model.seg_width": 32,
    # Perlin periods capped at a quarter of the 128 px canvas
    "synth.perlin_scale_range": (1, 32),
}


def desk_config(base: Config | None = None, **dotted: Any) -> Config:
    """Preset that runs the full pipeline on CPU with tiny stand-in backbones."""
    overrides = dict(DESK_PRESET)
    overrides.update({k.replace("__", "."): v for k, v in dotted.items()})
    return apply_overrides(base or Config(), overrides)


def _to_plain(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {k: _to_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    return obj


def _coerce(tp: Any, value: Any, key: str) -> Any:
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{key} must be a table, got {type(value).__name__}")
        return _build(tp, value, key)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _coerce(args[0], value, key)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key} must be a list, got {value!r}")
        args = typing.get_args(tp)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v, key) for v in value)
        if len(args) != len(value):
            raise ConfigError(f"{key} must have {len(args)} entries, got {len(value)}")
        return tuple(_coerce(a, v, key) for a, v in zip(args, value))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be a boolean, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key} must be a string, got {value!r}")
        return value
    return value


def _build(cls: type, data: dict[str, Any], prefix: str = "") -> Any:
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        dotted = f"{prefix}.{key}" if prefix else key
        if key not in names:
            raise ConfigError(f"unknown config key: {dotted}")
        kwargs[key] = _coerce(hints[key], value, dotted)
    return cls(**kwargs)


def config_from_dict(data: dict[str, Any]) -> Config:
    return _build(Config, data)


def apply_overrides(cfg: Config, overrides: dict[str, Any]) -> Config:
    data = cfg.to_dict()
    for dotted, value in overrides.items():
        parts = dotted.split(".")
        node = data
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ConfigError(f"unknown config key: {dotted}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key: {dotted}")
        node[parts[-1]] = _to_plain(value)
    return config_from_dict(data)


def load_config(path: str | Path) -> Config:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if path.suffix == ".toml":
        try:
            data = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    else:
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(data)


def save_config(cfg: Config, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
