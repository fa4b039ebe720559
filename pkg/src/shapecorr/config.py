"""Run configuration: nested dataclasses loaded from YAML or JSON.

Defaults describe the full-size networks; :func:`desk_config` shrinks them
so a complete training run fits on a laptop CPU.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml


@dataclass
class BackboneConfig:
    widths: tuple = (64, 64, 128, 256)
    out_channels: int = 512
    k: int = 10
    concat: bool = True
    negative_slope: float = 0.2


@dataclass
class OemConfig:
    enabled: bool = True
    widths: tuple = (64, 128, 256)
    k: int = 24
    bins: int = 8
    centered_bins: bool = True
    gamma: float = 2.0
    grl_weight: float = 1.0
    use_fim: bool = True
    use_dam: bool = True
    head_widths: tuple = (256, 128, 128)
    disc_mlp1: tuple = (512, 256, 128)
    disc_mlp2: tuple = (256, 128, 256)
    norm: str = "batch"


@dataclass
class EnsembleConfig:
    ema_decay: float = 0.999
    ema_ramp_start: float = 0.99
    ema_ramp_fraction: float = 0.1
    beta: float = 1.0
    sigma: float = 0.1
    use_transform: bool = True
    use_rotation: bool = True
    use_noise: bool = True


@dataclass
class LossConfig:
    lambda_cc: float = 1.0
    lambda_sc: float = 10.0
    l1: float = 0.1
    l2: float = 0.1
    l3: float = 1.0
    l4: float = 0.8
    l5: float = 1.0
    alpha: float | None = None
    k: int = 10
    reg_sign: float = -1.0
    reg_reduction: str = "mean"
    use_ccs: bool = True
    use_css: bool = True


@dataclass
class TrainSettings:
    steps: int = 2000
    batch_size: int = 8
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    dtype: str = "float32"
    checkpoint_every: int = 0
    use_teacher_for_eval: bool = True


@dataclass
class DataConfig:
    manifest: str | None = None
    pairs: int = 200
    points: int = 256
    template_seed: int = 0
    seed: int = 0


@dataclass
class Config:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    oem: OemConfig = field(default_factory=OemConfig)
    se: EnsembleConfig = field(default_factory=EnsembleConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainSettings = field(default_factory=TrainSettings)
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self) -> "Config":
        if self.train.steps < 1:
            raise ValueError("train.steps must be >= 1")
        if self.train.learning_rate <= 0:
            raise ValueError("train.learning_rate must be positive")
        if self.train.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.train.optimizer!r}")
        if self.oem.gamma <= 1:
            raise ValueError("oem.gamma must exceed 1")
        if self.loss.alpha is not None and self.loss.alpha <= 0:
            raise ValueError("loss.alpha must be positive")
        if self.loss.k < 1:
            raise ValueError("loss.k must be >= 1")
        for name in ("lambda_cc", "lambda_sc", "l1", "l2", "l3", "l4", "l5"):
            if getattr(self.loss, name) < 0:
                raise ValueError(f"loss.{name} must be non-negative")
        if not 0 <= self.se.ema_decay <= 1:
            raise ValueError("se.ema_decay must lie in [0, 1]")
        if self.se.sigma < 0:
            raise ValueError("se.sigma must be non-negative")
        if self.train.batch_size < 1:
            raise ValueError("train.batch_size must be >= 1")
        if self.oem.enabled and self.oem.norm == "batch" and self.train.batch_size < 2:
            raise ValueError("oem.norm 'batch' needs train.batch_size >= 2; use norm 'layer' for single pairs")
        if self.train.dtype not in ("float32", "float64"):
            raise ValueError(f"unknown dtype {self.train.dtype!r}")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_SECTIONS = {
    "backbone": BackboneConfig,
    "oem": OemConfig,
    "se": EnsembleConfig,
    "loss": LossConfig,
    "train": TrainSettings,
    "data": DataConfig,
}


def config_from_dict(values: dict, base: Config | None = None) -> Config:
    """Build a config; sections/keys missing from ``values`` come from ``base``."""
    merged = (base or Config()).to_dict()
    for section, entries in (values or {}).items():
        if section not in _SECTIONS:
            raise ValueError(f"unknown config section {section!r}")
        unknown = set(entries or {}) - set(merged[section])
        if unknown:
            raise ValueError(f"unknown keys in section {section!r}: {sorted(unknown)}")
        merged[section].update(entries or {})
    sections = {}
    for name, cls in _SECTIONS.items():
        defaults = cls()
        sections[name] = cls(**{
            k: tuple(v) if isinstance(getattr(defaults, k), tuple) and v is not None else v
            for k, v in merged[name].items()
        })
    return Config(**sections).validate()


def load_config(path) -> Config:
    """Read a ``.yaml``/``.yml``/``.json`` config file.

    A top-level ``preset`` key picks the starting point: ``desk`` for
    :func:`desk_config`, ``full`` (the default) for the full-size networks.
    """
    text = Path(path).read_text()
    values = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    values = dict(values or {})
    preset = values.pop("preset", None)
    base = {"desk": desk_config(), "full": Config(), None: Config()}.get(preset)
    if base is None:
        raise ValueError(f"unknown preset {preset!r}")
    return config_from_dict(values, base)


def save_config(config: Config, path) -> None:
    Path(path).write_text(yaml.safe_dump(_plain(config.to_dict()), sort_keys=False))


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def desk_config(**overrides) -> Config:
    """Small widths for CPU-scale runs on ``n=256`` clouds."""
    cfg = Config(
        backbone=BackboneConfig(widths=(16, 16, 32, 64), out_channels=96),
        oem=OemConfig(widths=(32, 64, 64), head_widths=(64, 64, 64),
                      disc_mlp1=(64, 64, 32), disc_mlp2=(32, 32, 32), norm="layer"),
        train=TrainSettings(batch_size=1),
    )
    return config_from_dict(overrides, cfg)
