"""Run configuration: nested dataclasses loaded from YAML with strict key checking."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import List, Optional

import yaml

from .backbone import EncoderConfig
from .errors import ConfigError
from .losses import DiceConfig, FocalConfig

VARIANTS = ("base", "base+tff", "base+sff", "full")


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-5
    batch_size: int = 4
    epochs: int = 200
    lr_milestones: Optional[List[int]] = None  # None -> every 10 epochs
    lr_gamma: float = 0.9
    seed: int = 0
    variant: str = "full"
    max_steps: Optional[int] = None
    patience: Optional[int] = None  # early stopping on val F1; off by default

    def __post_init__(self):
        if self.lr <= 0 or self.lr_gamma <= 0:
            raise ConfigError("lr and lr_gamma must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        if self.lr_milestones is not None:
            ms = [int(m) for m in self.lr_milestones]
            if any(b <= a for a, b in zip(ms, ms[1:])):
                raise ConfigError(f"lr_milestones must be strictly increasing: {ms}")
            self.lr_milestones = ms

    @property
    def milestones(self) -> List[int]:
        if self.lr_milestones is None:
            return list(range(10, self.epochs + 1, 10))
        return self.lr_milestones


@dataclass
class ModelConfig:
    decoder_width: int = 64
    cam_reduction: int = 16
    key_downsample: int = 1
    max_tokens: int = 4096


@dataclass
class DataConfig:
    root: Optional[str] = None


@dataclass
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    focal: FocalConfig = field(default_factory=FocalConfig)
    dice: DiceConfig = field(default_factory=DiceConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["encoder"]["stage_channels"] = list(self.encoder.stage_channels)
        d["encoder"]["stage_blocks"] = list(self.encoder.stage_blocks)
        return d

    @classmethod
    def from_dict(cls, data: Optional[dict], base: Optional["RunConfig"] = None) -> "RunConfig":
        """Overlay ``data`` onto ``base`` (defaults if None); unknown keys are rejected."""
        base = base or cls()
        return _overlay(base, data or {}, "")

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)


def _overlay(obj, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or '<root>'}: expected a mapping, got {type(data).__name__}")
    names = {f.name: f for f in dataclasses.fields(obj)}
    updates = {}
    for key, value in data.items():
        key_path = f"{path}.{key}" if path else str(key)
        if key not in names:
            raise ConfigError(f"unknown config key {key_path}")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            updates[key] = _overlay(current, value, key_path)
        else:
            updates[key] = value
    try:
        return dataclasses.replace(obj, **updates)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or '<root>'}: {exc}") from exc


def load_config(path=None, overrides: Optional[dict] = None) -> RunConfig:
    """defaults < file < overrides."""
    cfg = RunConfig()
    if path is not None:
        try:
            with open(path) as fh:
                data = yaml.safe_load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc
        cfg = RunConfig.from_dict(data, cfg)
    if overrides:
        cfg = RunConfig.from_dict(overrides, cfg)
    return cfg
