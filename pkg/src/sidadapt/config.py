"""Training configuration and its JSON file format.

A config file is a JSON object whose keys mirror :class:`TrainConfig`;
nested sections (``backbone``, ``features``, ``mmd``, ``revgrad``, ``can``,
``paths``) may be partial.  Unknown keys anywhere are rejected.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from ._io import read_json, write_json
from .adversarial import GRLConfig
from .backbone import BackboneConfig
from .can import CanConfig
from .discrepancy import KernelConfig
from .features import FeatureConfig

VARIANTS = ("baseline", "mmd", "revgrad", "can")
TARGET_DOMAINS = ("test", "val+test")


class ConfigFileError(ValueError):
    pass


@dataclass(frozen=True)
class MMDConfig:
    weight: float = 0.5
    warmup_fraction: float = 0.1
    kernel: KernelConfig = field(default_factory=KernelConfig)

    def __post_init__(self):
        if self.weight < 0 or not 0 <= self.warmup_fraction <= 1:
            raise ConfigFileError("mmd.weight must be >= 0 and warmup_fraction in [0, 1]")

    def weight_at(self, step: int, total_steps: int) -> float:
        ramp = self.warmup_fraction * total_steps
        if ramp <= 0 or step >= ramp:
            return float(self.weight)
        return float(self.weight * step / ramp)


@dataclass(frozen=True)
class RevGradConfig:
    mode: str = "adda"               # "adda": separate target mapping; "grl": shared extractor
    update: str = "alternating"      # adda stage 2: "alternating" min-max or "grl"
    grl: GRLConfig = field(default_factory=GRLConfig)
    discriminator_hidden: int = 256
    discriminator_lr: float = 1e-4
    mapping_lr: float | None = None  # adda target-mapping lr; None means the run lr

    def __post_init__(self):
        if self.mode not in ("adda", "grl"):
            raise ConfigFileError(f"revgrad.mode must be 'adda' or 'grl', got {self.mode!r}")
        if self.update not in ("alternating", "grl"):
            raise ConfigFileError(f"revgrad.update must be 'alternating' or 'grl', got {self.update!r}")


@dataclass(frozen=True)
class PathsConfig:
    manifest: str | None = None
    split: str | None = None
    cache: str | None = None
    out_dir: str | None = None
    init_checkpoint: str | None = None


@dataclass(frozen=True)
class TrainConfig:
    variant: str = "baseline"
    seed: int = 0
    epochs: int = 20
    pretrain_epochs: int = 20
    steps_per_epoch: int | None = None
    batch_size: int = 16
    target_batch_size: int = 16
    lr: float = 1e-4
    patience: int = 5
    target_domain: str = "test"
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    kernel: KernelConfig = field(default_factory=KernelConfig)
    mmd: MMDConfig = field(default_factory=MMDConfig)
    revgrad: RevGradConfig = field(default_factory=RevGradConfig)
    can: CanConfig = field(default_factory=CanConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigFileError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.target_domain not in TARGET_DOMAINS:
            raise ConfigFileError(f"target_domain must be one of {TARGET_DOMAINS}")
        if self.epochs < 1 or self.batch_size < 1 or self.target_batch_size < 1 or self.lr <= 0:
            raise ConfigFileError("epochs, batch sizes and lr must be positive")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ConfigFileError("steps_per_epoch must be positive")

    def to_dict(self) -> dict:
        return _to_plain(self)

    def digest(self) -> str:
        return hashlib.sha1(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:12]

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        if hasattr(obj, "to_dict") and not isinstance(obj, TrainConfig):
            return obj.to_dict()
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, tuple):
        return [_to_plain(v) for v in obj]
    return obj


def from_dict(cls, data: dict, where: str = ""):
    """Build dataclass ``cls`` from ``data``, recursing into nested sections."""
    if not isinstance(data, dict):
        raise ConfigFileError(f"{where or 'config'}: expected an object, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigFileError(f"{where or 'config'}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        f = fields[name]
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default) and not isinstance(default, type):
            kwargs[name] = from_dict(type(default), value, f"{where}{name}.")
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigFileError(f"{where or 'config'}: {exc}") from exc


def load_config(path) -> TrainConfig:
    try:
        data = read_json(path)
    except json.JSONDecodeError as exc:
        raise ConfigFileError(f"{path}: invalid JSON ({exc})") from exc
    return from_dict(TrainConfig, data)


def save_config(path, cfg: TrainConfig) -> None:
    write_json(path, cfg.to_dict())
