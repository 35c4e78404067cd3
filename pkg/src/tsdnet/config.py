"""Experiment configuration: typed sections, INI round-trip, content hashing."""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass
from typing import Optional

from .features import MixtureFeatureConfig, ReferenceFeatureConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CorpusConfig:
    n_categories: int = 10
    clips_per_category: int = 24
    split_fractions: tuple = (0.6, 0.2, 0.2)
    sample_rate: int = 22050
    duration: float = 10.0
    min_events: int = 1
    max_events: int = 9
    snr_low: float = -5.0
    snr_high: float = 20.0
    background_rms: float = 0.05
    n_train: int = 300
    n_validation: int = 100
    n_test: int = 100


@dataclass(frozen=True)
class ModelConfig:
    n_mels: int = 64
    ref_features: int = 84
    ref_frames: int = 400
    cond_channels: tuple = (64, 128, 256, 512)
    embed_dim: int = 128
    n_classes: int = 10
    det_channels: tuple = (32, 64, 128, 128)
    time_pool: tuple = (1, 2, 2, 1)
    freq_pool: tuple = (2, 2, 2, 2)
    gru_hidden: int = 128
    fc_hidden: int = 256
    fusion: str = "multiply"
    fusion_dim: int = 128
    leaky_slope: float = 0.1
    bn_momentum: float = 0.1

    def __post_init__(self):
        if self.fusion not in ("concat", "multiply"):
            raise ConfigError(f"fusion must be concat or multiply, got {self.fusion!r}")
        if any(len(v) != 4 for v in (self.cond_channels, self.det_channels, self.time_pool, self.freq_pool)):
            raise ConfigError("conditional and detection stacks have exactly 4 stages")

    @property
    def total_time_pool(self) -> int:
        out = 1
        for p in self.time_pool:
            out *= p
        return out


@dataclass(frozen=True)
class MixupConfig:
    rate_start: float = 0.3
    rate_end: float = 0.0
    beta_a: float = 0.5
    beta_b: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.rate_end <= self.rate_start <= 1.0:
            raise ConfigError("need 0 <= rate_end <= rate_start <= 1")

    @classmethod
    def parse(cls, text: str) -> "MixupConfig":
        """``off`` | ``fixed:<r>`` | ``linear`` (0.3 -> 0)."""
        if text == "off":
            return cls(0.0, 0.0)
        if text == "linear":
            return cls()
        if text.startswith("fixed:"):
            r = float(text.split(":", 1)[1])
            return cls(r, r)
        raise ConfigError(f"bad mixup setting {text!r}")


STAGE_DEFAULTS = {
    "pretrain-conditional": (1e-3, 50),
    "train-detection": (1e-3, 100),
    "joint-finetune": (1e-4, 30),
}


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "train-detection"
    learning_rate: Optional[float] = None
    epochs: Optional[int] = None
    batch_size: int = 32
    seed: int = 0
    supervision: str = "strong"
    mixup: MixupConfig = MixupConfig()
    grad_clip: float = 5.0
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    selection_segment_length: float = 1.0

    def __post_init__(self):
        if self.stage not in STAGE_DEFAULTS:
            raise ConfigError(f"unknown stage {self.stage!r}")
        if self.supervision not in ("strong", "weak"):
            raise ConfigError(f"supervision must be strong or weak, got {self.supervision!r}")
        lr, ep = STAGE_DEFAULTS[self.stage]
        if self.learning_rate is None:
            object.__setattr__(self, "learning_rate", lr)
        if self.epochs is None:
            object.__setattr__(self, "epochs", ep)

    def for_stage(self, stage: str, **changes) -> "TrainConfig":
        """Same settings under another stage; lr and epochs revert to that stage's defaults
        unless given."""
        changes.setdefault("learning_rate", None)
        changes.setdefault("epochs", None)
        return dataclasses.replace(self, stage=stage, **changes)


STAGE_SECTIONS = {"pretrain": "pretrain-conditional", "training": "train-detection",
                  "finetune": "joint-finetune"}


@dataclass(frozen=True)
class EvalConfig:
    segment_length: float = 1.0
    threshold: float = 0.5
    median_window: int = 5


@dataclass(frozen=True)
class ExperimentConfig:
    mixture: MixtureFeatureConfig = MixtureFeatureConfig()
    reference: ReferenceFeatureConfig = ReferenceFeatureConfig()
    corpus: CorpusConfig = CorpusConfig()
    model: ModelConfig = ModelConfig()
    pretrain: TrainConfig = TrainConfig("pretrain-conditional")
    training: TrainConfig = TrainConfig("train-detection")
    finetune: TrainConfig = TrainConfig("joint-finetune")
    evaluation: EvalConfig = EvalConfig()

    def __post_init__(self):
        for section, stage in STAGE_SECTIONS.items():
            if getattr(self, section).stage != stage:
                raise ConfigError(f"[{section}] must have stage = {stage}")

    def hash(self) -> str:
        return config_hash(self)

    def replace(self, section: str, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **{section: dataclasses.replace(getattr(self, section), **changes)})


def as_dict(obj) -> dict:
    return json.loads(json.dumps(dataclasses.asdict(obj)))


def config_hash(obj) -> str:
    blob = json.dumps(as_dict(obj), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# ------------------------------------------------------------------------- INI

_SECTIONS = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}


def _coerce(value: str, default):
    value = value.strip()
    if isinstance(default, bool):
        return value.lower() in ("1", "true", "yes", "on")
    if isinstance(default, int) and not isinstance(default, bool):
        return int(value)
    if isinstance(default, float):
        return float(value)
    if isinstance(default, tuple):
        parts = [p for p in value.replace(",", " ").split() if p]
        kind = type(default[0]) if default else float
        return tuple(kind(p) for p in parts)
    if default is None:
        if value.lower() in ("", "none"):
            return None
        try:
            return int(value)
        except ValueError:
            return float(value)
    return value


def _format(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if isinstance(value, MixupConfig):
        return f"{value.rate_start}:{value.rate_end}:{value.beta_a}:{value.beta_b}"
    return str(value)


def _section_from_mapping(cls, current, items: dict, section: str):
    names = {f.name: f for f in dataclasses.fields(cls)}
    changes = {}
    for key, raw in items.items():
        if key not in names:
            raise ConfigError(f"unknown key {section}.{key}")
        default = getattr(current, key)
        try:
            if isinstance(default, MixupConfig):
                if ":" in raw and not raw.startswith("fixed:"):
                    a0, a1, ba, bb = (float(v) for v in raw.split(":"))
                    changes[key] = MixupConfig(a0, a1, ba, bb)
                else:
                    changes[key] = MixupConfig.parse(raw.strip())
            else:
                changes[key] = _coerce(raw, default)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"bad value for {section}.{key}: {raw!r} ({exc})") from exc
    try:
        if isinstance(current, TrainConfig) and changes.get("stage", current.stage) != current.stage:
            return current.for_stage(**changes)
        return dataclasses.replace(current, **changes)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


def load_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Parse flat-section INI text on top of ``base``. Unknown sections/keys are rejected."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    cfg = base or ExperimentConfig()
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        new = _section_from_mapping(type(getattr(cfg, section)), getattr(cfg, section),
                                    dict(parser[section]), section)
        cfg = dataclasses.replace(cfg, **{section: new})
    return cfg


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    for section in _SECTIONS:
        lines.append(f"[{section}]")
        obj = getattr(cfg, section)
        for f in dataclasses.fields(obj):
            lines.append(f"{f.name} = {_format(getattr(obj, f.name))}")
        lines.append("")
    return "\n".join(lines)
