"""Experiment configuration blocks and YAML (de)serialization."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml


@dataclass
class SceneGenParams:
    plane_count: int = 4
    object_count: int = 3
    d_min: float = 0.3
    d_max: float = 8.0
    hole_prob: float = 0.3
    fov_deg: float = 65.0

    def __post_init__(self):
        if not 1 <= self.plane_count <= 5:
            raise ValueError("plane_count must be in [1, 5] (back wall is always present)")
        if self.object_count < 1:
            raise ValueError("object_count must be >= 1 so every scene has a depth discontinuity")
        if not 0 < self.d_min < self.d_max:
            raise ValueError("need 0 < d_min < d_max")
        if not 0.0 <= self.hole_prob <= 1.0:
            raise ValueError("hole_prob must be a probability")


@dataclass
class DataConfig:
    height: int = 64
    width: int = 64
    train_count: int = 32
    eval_count: int = 8
    spots: tuple[int, int] = (8, 8)
    jitter_px: float = 1.0
    noise_sigma_rel: float = 0.01
    seq_len: int = 3
    seed: int = 0
    scene: SceneGenParams = field(default_factory=SceneGenParams)


@dataclass
class GldpConfig:
    encoder_widths: list[int] = field(default_factory=lambda: [16, 24, 32, 64, 96])
    expand_ratio: int = 4
    local_width: int = 16
    local_layers: int = 4
    use_pixel_shuffle: bool = True
    use_batchnorm_local: bool = False
    exchange_points: list[int] = field(default_factory=lambda: [2, 0])

    def __post_init__(self):
        if len(self.encoder_widths) < 3:
            raise ValueError("encoder needs at least 3 stride levels")
        if min(self.encoder_widths) < 4 or self.local_width < 4:
            raise ValueError("all channel widths must be >= 4")
        if self.local_layers < 2:
            raise ValueError("local branch needs at least 2 conv layers")
        for lvl in self.exchange_points:
            if not 0 <= lvl <= len(self.encoder_widths):
                raise ValueError(f"exchange level {lvl} outside [0, {len(self.encoder_widths)}]")

    @property
    def levels(self) -> int:
        return len(self.encoder_widths)


@dataclass
class FusionConfig:
    relative: bool = True
    rezero: bool = True


@dataclass
class FcspnConfig:
    preset: str = "s9"
    # only read when preset == "custom": list of [[dilations...], iterations]
    schedule: list | None = None
    anchor: bool = True
    eps: float = 1e-2
    hidden: int = 16


@dataclass
class LossConfig:
    cgdl: bool = True
    cgdl_weight: float = 0.7
    se_radius: int = 1
    p_norm: float = 1.0
    valid_range: tuple[float, float] = (0.3, 8.0)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 1e-2
    warmup_epochs: int = 10
    total_epochs: int = 50
    batch_size: int = 8
    ema_decay: float = 0.99
    ema_warmup: bool = True
    flip: bool = True
    jitter: float = 0.2
    max_steps: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ValueError("warmup_epochs must be smaller than total_epochs")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must be in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class ModelConfig:
    gldp: GldpConfig = field(default_factory=GldpConfig)


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    fcspn: FcspnConfig = field(default_factory=FcspnConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)


def _build(cls, raw: dict | None):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise TypeError(f"expected a mapping for {cls.__name__}, got {type(raw).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(raw) - set(fields)
    if unknown:
        raise KeyError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    kwargs = {}
    for name, value in raw.items():
        default = getattr(cls(), name) if name in fields else None
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value)
        elif isinstance(default, tuple) and isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def config_from_dict(raw: dict | None) -> ExperimentConfig:
    return _build(ExperimentConfig, raw or {})


def config_to_dict(cfg) -> dict[str, Any]:
    def plain(v):
        if isinstance(v, tuple):
            return [plain(x) for x in v]
        if isinstance(v, list):
            return [plain(x) for x in v]
        if isinstance(v, dict):
            return {k: plain(x) for k, x in v.items()}
        return v

    return plain(dataclasses.asdict(cfg))


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    with open(path) as fh:
        return config_from_dict(yaml.safe_load(fh))


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(config_to_dict(cfg), fh, sort_keys=False)
