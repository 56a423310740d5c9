"""Validated configuration records for the model, training loop and generator."""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    """Raised when a configuration value is invalid. The message names the field."""


class ShapeError(ValueError):
    """Raised when a tensor does not have the shape an operation expects."""


class DataError(ValueError):
    """Raised for invalid or corrupt samples and records."""


class NumericError(RuntimeError):
    """Raised when a loss or gradient becomes non-finite."""


DET_STRIDES = (8, 16, 32)
PYRAMID_STRIDES = (4, 8, 16, 32)


def _as_pair(value, name):
    pair = tuple(int(v) for v in value)
    if len(pair) != 2:
        raise ConfigError(f"{name}: expected two values, got {value!r}")
    return pair


@dataclass
class ModelConfig:
    input_size: tuple = (128, 128)
    stage_channels: tuple = (32, 64, 160, 256)
    stage_depths: tuple = (2, 2, 2, 2)
    mura_convs: int = 3
    mura_enabled: bool = True
    mlp_ratio: float = 4.0
    num_seg_classes: int = 2
    num_det_classes: int = 2
    head_hidden: int = 256
    decoupled_head: bool = True
    spp_enabled: bool = False
    det_levels: tuple = DET_STRIDES
    decoder_channels: tuple = (128, 64, 48, 32)
    seed: int = 0

    def __post_init__(self):
        self.input_size = _as_pair(self.input_size, "input_size")
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.stage_depths = tuple(int(d) for d in self.stage_depths)
        self.det_levels = tuple(sorted(int(s) for s in self.det_levels))
        self.decoder_channels = tuple(int(c) for c in self.decoder_channels)
        self.validate()

    def validate(self):
        h, w = self.input_size
        if h <= 0 or w <= 0 or h % 32 or w % 32:
            raise ConfigError(f"input_size: input size not divisible by 32: {self.input_size}")
        if len(self.stage_channels) != 4 or min(self.stage_channels) <= 0:
            raise ConfigError("stage_channels: need 4 positive ints")
        if any(b < a for a, b in zip(self.stage_channels, self.stage_channels[1:])):
            raise ConfigError("stage_channels: must be non-decreasing")
        if len(self.stage_depths) != 4 or min(self.stage_depths) < 1:
            raise ConfigError("stage_depths: need 4 ints >= 1")
        if self.mura_convs < 1:
            raise ConfigError("mura_convs: must be >= 1")
        if not self.mlp_ratio > 0:
            raise ConfigError("mlp_ratio: must be positive")
        if self.num_seg_classes < 2:
            raise ConfigError("num_seg_classes: must be >= 2 (background included)")
        if self.num_det_classes < 1:
            raise ConfigError("num_det_classes: must be >= 1")
        if self.head_hidden < 1:
            raise ConfigError("head_hidden: must be positive")
        if not self.det_levels or not set(self.det_levels) <= set(DET_STRIDES):
            raise ConfigError(f"det_levels: must be a non-empty subset of {DET_STRIDES}")
        if len(self.decoder_channels) != 4 or min(self.decoder_channels) <= 0:
            raise ConfigError("decoder_channels: need 4 positive ints")


@dataclass
class TrainConfig:
    batch_size: int = 4
    max_lr: float = 0.01
    initial_lr: float = 0.0001
    min_lr: float = 0.000001
    weight_decay: float = 0.0005
    momentum: float = 0.937
    total_epochs: int = 200
    warmup_epochs: int = 10
    eval_every: int = 10
    checkpoint_dir: str = "checkpoints"
    seed: int = 0
    lr_per_step: bool = False
    obj_target: str = "iou"
    obj_balance: bool = True
    conf_threshold: float = 0.25
    nms_iou: float = 0.45
    level_thresholds: tuple = (64, 128)

    def __post_init__(self):
        self.level_thresholds = tuple(float(t) for t in self.level_thresholds)
        self.validate()

    def validate(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size: must be >= 1")
        if not 0 < self.initial_lr <= self.max_lr:
            raise ConfigError("initial_lr: need 0 < initial_lr <= max_lr")
        if not 0 <= self.min_lr <= self.max_lr:
            raise ConfigError("min_lr: need 0 <= min_lr <= max_lr")
        if self.total_epochs < 1:
            raise ConfigError("total_epochs: must be >= 1")
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ConfigError("warmup_epochs: need 0 <= warmup_epochs < total_epochs")
        if self.eval_every < 1:
            raise ConfigError("eval_every: must be >= 1")
        if self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ConfigError("momentum/weight_decay: out of range")
        if self.obj_target not in ("iou", "binary"):
            raise ConfigError("obj_target: must be 'iou' or 'binary'")
        for name in ("conf_threshold", "nms_iou"):
            if not 0 < getattr(self, name) < 1:
                raise ConfigError(f"{name}: must lie in (0, 1)")
        if len(self.level_thresholds) != 2 or self.level_thresholds[0] >= self.level_thresholds[1]:
            raise ConfigError("level_thresholds: need two increasing sizes")


@dataclass
class SynthSpec:
    canvas: tuple = (128, 128)
    rooms: tuple = (2, 4)
    wall_thickness: tuple = (3, 4)
    doors_per_plan: tuple = (1, 3)
    windows_per_plan: tuple = (1, 3)
    line_noise: float = 0.02
    seed: int = 0
    splits: dict = field(default_factory=lambda: {"train": 40, "val": 5, "test": 5})

    def __post_init__(self):
        self.canvas = _as_pair(self.canvas, "canvas")
        for name in ("rooms", "wall_thickness", "doors_per_plan", "windows_per_plan"):
            setattr(self, name, _as_pair(getattr(self, name), name))
        self.splits = {str(k): int(v) for k, v in self.splits.items()}
        self.validate()

    def validate(self):
        h, w = self.canvas
        if h <= 0 or w <= 0 or h % 32 or w % 32:
            raise ConfigError(f"canvas: size not divisible by 32: {self.canvas}")
        for name in ("rooms", "wall_thickness", "doors_per_plan", "windows_per_plan"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ConfigError(f"{name}: empty range {(lo, hi)}")
        if self.rooms[0] < 1 or self.wall_thickness[0] < 1:
            raise ConfigError("rooms/wall_thickness: lower bound must be >= 1")
        if self.line_noise < 0:
            raise ConfigError("line_noise: must be >= 0")
        if any(n < 0 for n in self.splits.values()):
            raise ConfigError("splits: counts must be >= 0")


def desk_train_config(**overrides) -> TrainConfig:
    """Schedule used for 128x128 runs on a CPU: same shape as the full schedule, larger peak rate.

    All losses are means over pixels or cells, so the full-scale peak rate of
    0.01 moves a 200-epoch run too slowly; 0.1 with 5 warm-up epochs converges.
    """
    values = dict(max_lr=0.1, warmup_epochs=5)
    values.update(overrides)
    return TrainConfig(**values)


def full_scale_train_config(**overrides) -> TrainConfig:
    """Training schedule at full scale (batch 10, 1000 epochs, 50 warm-up epochs)."""
    values = dict(batch_size=10, total_epochs=1000, warmup_epochs=50)
    values.update(overrides)
    return TrainConfig(**values)


def full_scale_model_config(**overrides) -> ModelConfig:
    values = dict(input_size=(1536, 1536))
    values.update(overrides)
    return ModelConfig(**values)


SECTIONS = {"model": ModelConfig, "train": TrainConfig, "synth": SynthSpec}


def to_dict(cfg) -> dict:
    out = dataclasses.asdict(cfg)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in out.items()}


def _coerce(value: str, target_type, current):
    """Parse an override string into the type of the field it replaces."""
    origin = target_type if isinstance(target_type, type) else type(current)
    if origin is bool:
        lowered = value.strip().lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {value!r}")
    if origin in (int, float, str):
        try:
            return origin(value)
        except ValueError:
            raise ConfigError(f"expected {origin.__name__}, got {value!r}") from None
    try:
        parsed = json.loads(value)
    except json.JSONDecodeError:
        raise ConfigError(f"expected a JSON value, got {value!r}") from None
    if isinstance(current, (tuple, list)) and not isinstance(parsed, list):
        raise ConfigError(f"expected a list, got {value!r}")
    if isinstance(current, dict) and not isinstance(parsed, dict):
        raise ConfigError(f"expected an object, got {value!r}")
    return parsed


def load_config(path=None, overrides=()) -> dict:
    """Read a JSON config with optional ``model``/``train``/``synth`` sections.

    ``overrides`` are ``section.key=value`` strings; unknown sections or keys
    are rejected, values are parsed against the type of the field they replace.
    """
    raw = {}
    if path is not None:
        raw = json.loads(Path(path).read_text())
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a JSON object")
    unknown = set(raw) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
    merged = {name: dict(raw.get(name, {})) for name in SECTIONS}
    for name, cls in SECTIONS.items():
        known = {f.name for f in dataclasses.fields(cls)}
        bad = set(merged[name]) - known
        if bad:
            raise ConfigError(f"{name}: unknown key(s) {sorted(bad)}")

    hints = {name: typing.get_type_hints(cls) for name, cls in SECTIONS.items()}
    defaults = {name: to_dict(cls()) for name, cls in SECTIONS.items()}
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, field_name = key.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override must look like section.key=value: {item!r}")
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section: {section!r}")
        if field_name not in hints[section]:
            raise ConfigError(f"{section}: unknown key {field_name!r}")
        current = merged[section].get(field_name, defaults[section][field_name])
        try:
            merged[section][field_name] = _coerce(value, hints[section][field_name], current)
        except ConfigError as exc:
            raise ConfigError(f"{section}.{field_name}: {exc}") from None
    train = merged["train"]
    if "warmup_epochs" not in train and "total_epochs" in train:
        # keep the default 1:20 warm-up ratio when only the run length is given
        train["warmup_epochs"] = int(train["total_epochs"]) // 20
    return {name: cls(**merged[name]) for name, cls in SECTIONS.items()}


def dump_config(configs: dict) -> dict:
    return {name: to_dict(cfg) for name, cfg in configs.items()}
