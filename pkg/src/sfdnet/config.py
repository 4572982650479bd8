"""Training configuration and its canonical JSON form."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Any

from .data import SynthConfig
from .extractor import ConfigError, ExtractorConfig
from .sfd import SfdConfig

__all__ = [
    "ABLATIONS",
    "CenterConfig",
    "DataConfig",
    "TrainConfig",
    "ConfigError",
    "config_from_dict",
    "config_to_dict",
    "canonical_json",
    "config_hash",
    "load_config",
    "effective_config",
    "published_config",
]

ABLATIONS = ("V1", "V2", "V3", "FULL")


@dataclass
class CenterConfig:
    centers_per_class: int = 4
    scale: float = 16.0
    delta: float = 0.1
    global_orthogonal: bool = False


@dataclass
class DataConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    train_per_class: int = 40
    augment_per_class: int = 200


@dataclass
class TrainConfig:
    lambda1: float = 1.0
    lambda2: float = 0.5
    batch_size: int = 32
    epochs: int = 30
    lr0: float = 0.05
    decay_factor: float = 0.5
    decay_every_epochs: int = 25
    warmup_epochs: int = 5
    seed: int = 0
    ablation: str = "FULL"
    eval_every: int = 0
    ablation_seeds: list = field(default_factory=lambda: [0, 1, 2])
    extractor: ExtractorConfig = field(default_factory=ExtractorConfig)
    sfd: SfdConfig = field(default_factory=SfdConfig)
    centers: CenterConfig = field(default_factory=CenterConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self, num_classes: int | None = None) -> None:
        import math

        for name in ("lambda1", "lambda2", "lr0", "decay_factor"):
            if not math.isfinite(getattr(self, name)):
                raise ConfigError(f"{name} must be finite")
        if self.lr0 <= 0:
            raise ConfigError(f"lr0 must be positive, got {self.lr0}")
        if self.decay_every_epochs < 1 or self.warmup_epochs < 0 or self.epochs < 1:
            raise ConfigError("epochs and decay_every_epochs must be >= 1, warmup_epochs >= 0")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        n = self.data.synth.num_classes if num_classes is None else num_classes
        if self.batch_size // n < 2:
            raise ConfigError(f"batch_size {self.batch_size} gives fewer than 2 samples per class for {n} classes")
        c = self.centers
        if c.centers_per_class < 1 or c.scale <= 0 or c.delta < 0:
            raise ConfigError("centers_per_class >= 1, scale > 0 and delta >= 0 required")
        if self.extractor.embed_dim < c.centers_per_class:
            raise ConfigError(
                f"embed_dim {self.extractor.embed_dim} < centers_per_class {c.centers_per_class}"
            )
        if c.global_orthogonal and self.extractor.embed_dim < n * c.centers_per_class:
            raise ConfigError(
                f"global orthogonality needs embed_dim >= num_classes*centers_per_class = {n * c.centers_per_class}"
            )
        self.extractor.validate()
        try:
            self.sfd.validate()
            self.data.synth.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.data.train_per_class < 2:
            raise ConfigError("train_per_class must be >= 2")


def _from_dict(cls, raw: Any, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object, got {type(raw).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for name, value in raw.items():
        default = getattr(cls(), name)
        path = f"{where}.{name}" if where else name
        if dataclasses.is_dataclass(default):
            kwargs[name] = _from_dict(type(default), value, path)
        else:
            kwargs[name] = _coerce(default, value, path)
    return cls(**kwargs)


def _coerce(default, value, path):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string")
        return value
    if isinstance(default, list):
        if not isinstance(value, list) or any(isinstance(v, bool) or not isinstance(v, int) for v in value):
            raise ConfigError(f"{path}: expected a list of integers")
        return list(value)
    return value


def config_from_dict(raw: dict) -> TrainConfig:
    cfg = _from_dict(TrainConfig, raw, "")
    cfg.validate()
    return cfg


def config_to_dict(cfg: TrainConfig) -> dict:
    return dataclasses.asdict(cfg)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_hash(cfg: TrainConfig) -> str:
    return hashlib.sha256(canonical_json(config_to_dict(cfg)).encode()).hexdigest()[:16]


def load_config(path) -> TrainConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(raw)


def effective_config(cfg: TrainConfig) -> TrainConfig:
    """Apply the ablation as parameter degeneration.

    V1 drops both mechanisms (one center, no margin, no discrimination loss),
    V2 keeps only the discrimination loss, V3 keeps only the multi-center
    classifier.
    """
    single = dataclasses.replace(cfg.centers, centers_per_class=1, delta=0.0)
    if cfg.ablation == "V1":
        return dataclasses.replace(cfg, centers=single, lambda2=0.0)
    if cfg.ablation == "V2":
        return dataclasses.replace(cfg, centers=single)
    if cfg.ablation == "V3":
        return dataclasses.replace(cfg, lambda2=0.0)
    return cfg


def published_config() -> TrainConfig:
    """Published full-scale hyperparameters (224 px input, 2/2/8/2 blocks, K=10).

    The epoch count is not published; 100 covers four decay steps.
    """
    return TrainConfig(
        lambda1=1.0,
        lambda2=0.5,
        batch_size=32,
        epochs=100,
        lr0=0.01,
        decay_factor=0.5,
        decay_every_epochs=25,
        warmup_epochs=5,
        extractor=ExtractorConfig(input_size=224, block_counts=[2, 2, 8, 2], base_channels=64,
                                  embed_dim=512, dropout_keep=0.5),
        sfd=SfdConfig(psi=0.1),
        centers=CenterConfig(centers_per_class=10, scale=16.0, delta=0.1),
        data=DataConfig(synth=SynthConfig(image_size=224)),
    )
