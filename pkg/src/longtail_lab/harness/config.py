"""Run configuration and its JSON round trip."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from ..contrastive import ContrastiveConfig, JointConfig
from ..datagen import AugmentPolicy, DatasetConfig
from ..training import LossSpec

TRAINERS = ("supervised", "moco_then_finetune", "simclr_joint")


class ConfigError(ValueError):
    pass


@dataclass
class TTAConfig:
    enabled: bool = False
    num_views: int = 5
    policy: AugmentPolicy = field(default_factory=lambda: AugmentPolicy(jitter_sigma=0.15, scale_range=(0.95, 1.05)))
    recenter: bool = False  # realign augmented views to the source row mean


@dataclass
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    loss: LossSpec = field(default_factory=LossSpec)
    trainer: str = "supervised"
    epochs: int = 30
    pretrain_epochs: int = 10
    pseudo_epochs: int = 10
    batch_size: int = 28
    accumulate_steps: int = 1
    base_lr: float = 3e-3
    weight_decay: float = 1e-4
    hidden: tuple[int, ...] = (64, 64)
    embed_dim: int = 32
    use_meta: bool = True
    freeze_encoder_finetune: bool = False
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    ssl_augment: AugmentPolicy = field(default_factory=lambda: AugmentPolicy(jitter_sigma=0.3, mask_prob=0.1, scale_range=(0.8, 1.2)))
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    joint: JointConfig = field(default_factory=JointConfig)
    pseudo_label_fraction: float = 0.0
    tta: TTAConfig = field(default_factory=TTAConfig)
    seed: int = 0
    output_dir: str | None = None

    def validate(self) -> None:
        if self.trainer not in TRAINERS:
            raise ConfigError(f"unknown trainer {self.trainer!r}; choose from {TRAINERS}")
        for name in ("epochs", "pretrain_epochs", "pseudo_epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.batch_size < 1 or self.accumulate_steps < 1:
            raise ConfigError("batch_size and accumulate_steps must be >= 1")
        if not 0.0 <= self.pseudo_label_fraction <= 1.0:
            raise ConfigError("pseudo_label_fraction must lie in [0, 1]")
        if self.tta.num_views < 1:
            raise ConfigError("tta.num_views must be >= 1")
        self.dataset.validate()
        self.contrastive.validate()
        self.joint.validate()
        self.loss.arcface.validate()
        self.loss.seesaw.validate()

    def to_dict(self) -> dict:
        d = asdict(self)
        return json.loads(json.dumps(d))  # tuples -> lists

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _build(cls, d)


def _build(tp, value):
    if dataclasses.is_dataclass(tp) and isinstance(value, dict):
        hints = {f.name: f for f in dataclasses.fields(tp)}
        unknown = set(value) - set(hints)
        if unknown:
            raise ConfigError(f"unknown {tp.__name__} keys: {sorted(unknown)}")
        kwargs = {}
        for name, v in value.items():
            sub = _NESTED.get((tp, name))
            kwargs[name] = _build(sub, v) if sub else _coerce(tp, name, v)
        return tp(**kwargs)
    return value


def _coerce(tp, name, v):
    if isinstance(v, list) and name in ("hidden", "scale_range"):
        return tuple(v)
    return v


_NESTED = {
    (RunConfig, "dataset"): DatasetConfig,
    (RunConfig, "loss"): LossSpec,
    (RunConfig, "augment"): AugmentPolicy,
    (RunConfig, "ssl_augment"): AugmentPolicy,
    (RunConfig, "contrastive"): ContrastiveConfig,
    (RunConfig, "joint"): JointConfig,
    (RunConfig, "tta"): TTAConfig,
    (TTAConfig, "policy"): AugmentPolicy,
}


def load_config(path) -> RunConfig:
    cfg = RunConfig.from_dict(json.loads(Path(path).read_text()))
    cfg.validate()
    return cfg


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
