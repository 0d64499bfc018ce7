"""Experiment configuration: one TOML file, overridable by ``--section.key value`` flags."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import tomli

from .errors import ConfigError


@dataclass
class DatasetSection:
    # empty manifest -> generate the synthetic chirp dataset in memory
    manifest: str = ""
    classes: str = ""
    synth_task_size: int = 12
    synth_per_class: int = 150
    synth_seed: int = 1


@dataclass
class NoiseSection:
    sources: list = field(default_factory=lambda: ["white", "pink", "hum", "machine"])
    target: str = "babble"
    snr_db: float = 0.0
    # directory holding <name>.wav recordings; empty -> synthetic noise of that kind
    noise_dir: str = ""
    noise_seconds: float = 8.0


@dataclass
class ModelSection:
    size_tag: str = "S"
    num_classes: int = 12


@dataclass
class TrainSection:
    learning_rate: float = 0.1
    batch_size: int = 32
    epochs: int = 15


@dataclass
class AdaptSection:
    learning_rate: float = 0.01
    batch_size: int = 2
    epochs: int = 21
    k: int = 1
    per_class: int = 10
    # > 0 switches subsampling to a per-class fraction of the training split
    fraction: float = 0.0
    # store utterances for the first N classes only (0 = every class)
    store_classes: int = 10
    calibration_clips: int = 200


@dataclass
class MfccSection:
    frame_len: int = 640
    frame_stride: int = 320
    fft_size: int = 1024
    mel_filters: int = 40
    num_coeffs: int = 10
    emulate_half_precision: bool = True


@dataclass
class PlatformSection:
    mode: str = "HPM"


@dataclass
class ExperimentConfig:
    seed: int = 0
    out: str = "runs/odda"
    dataset: DatasetSection = field(default_factory=DatasetSection)
    noise: NoiseSection = field(default_factory=NoiseSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    adapt: AdaptSection = field(default_factory=AdaptSection)
    mfcc: MfccSection = field(default_factory=MfccSection)
    platform: PlatformSection = field(default_factory=PlatformSection)

    def validate(self):
        if self.noise.target in self.noise.sources:
            raise ConfigError("TARGET_LEAK", f"target noise {self.noise.target!r} is listed as a source")
        if not self.noise.sources:
            raise ConfigError("NO_SOURCE_NOISE", "at least one source noise is required")
        if self.model.size_tag not in ("S", "M", "L"):
            raise ConfigError("BAD_SIZE", f"model.size_tag must be S, M or L, got {self.model.size_tag!r}")
        if self.platform.mode not in ("LPM", "HPM"):
            raise ConfigError("BAD_PROFILE", f"platform.mode must be LPM or HPM, got {self.platform.mode!r}")
        if self.adapt.k < 1:
            raise ConfigError("BAD_DEPTH", "adapt.k must be >= 1")
        if not 0 <= self.adapt.fraction <= 1:
            raise ConfigError("BAD_SUBSAMPLE", "adapt.fraction must lie in [0, 1]")
        for name in ("learning_rate",):
            if not getattr(self.train, name) > 0 or not getattr(self.adapt, name) > 0:
                raise ConfigError("BAD_TRAIN_CONFIG", "learning rates must be > 0")
        if self.train.batch_size < 1 or self.adapt.batch_size < 1:
            raise ConfigError("BAD_TRAIN_CONFIG", "batch sizes must be >= 1")
        if self.train.epochs < 0 or self.adapt.epochs < 0:
            raise ConfigError("BAD_TRAIN_CONFIG", "epoch counts must be >= 0")
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _coerce(value, current, key):
    if isinstance(current, bool):
        if isinstance(value, bool):
            return value
        if str(value).lower() in ("1", "true", "yes", "on"):
            return True
        if str(value).lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError("BAD_VALUE", f"{key}: expected a boolean, got {value!r}")
    try:
        if isinstance(current, int):
            return int(value)
        if isinstance(current, float):
            return float(value)
    except (TypeError, ValueError):
        raise ConfigError("BAD_VALUE", f"{key}: cannot interpret {value!r}") from None
    if isinstance(current, list):
        if isinstance(value, list):
            return list(value)
        return [v for v in str(value).split(",") if v]
    return str(value)


def apply(cfg, data, prefix=""):
    for key, value in data.items():
        dotted = f"{prefix}{key}"
        if not hasattr(cfg, key):
            raise ConfigError("UNKNOWN_KEY", f"unknown config key {dotted!r}")
        current = getattr(cfg, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError("BAD_VALUE", f"{dotted} must be a section")
            apply(current, value, dotted + ".")
        else:
            setattr(cfg, key, _coerce(value, current, dotted))
    return cfg


def set_dotted(cfg, dotted, value):
    *sections, key = dotted.split(".")
    target = cfg
    for s in sections:
        if not hasattr(target, s) or not dataclasses.is_dataclass(getattr(target, s)):
            raise ConfigError("UNKNOWN_KEY", f"unknown config section in {dotted!r}")
        target = getattr(target, s)
    apply(target, {key: value}, ".".join(sections) + "." if sections else "")


def load_config(path=None, overrides=()):
    """Defaults, then the TOML file, then ``(dotted_key, value)`` overrides."""
    cfg = ExperimentConfig()
    if path:
        path = Path(path)
        if not path.exists():
            raise ConfigError("MISSING_CONFIG", f"config file {path} does not exist")
        try:
            data = tomli.loads(path.read_text(encoding="utf-8"))
        except tomli.TOMLDecodeError as exc:
            raise ConfigError("BAD_CONFIG", f"{path}: {exc}") from exc
        apply(cfg, data)
    for key, value in overrides:
        set_dotted(cfg, key, value)
    return cfg.validate()
