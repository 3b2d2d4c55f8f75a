"""Supervised loss evaluation against a ``Model`` and the plain training epoch."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import losses as L
from .datagen import AugmentPolicy, augment, mixup
from .model import Model, OptimizerState, accumulate_and_step
from .numerics import SeededRng

LOSS_NAMES = ("ce", "soft_target_ce", "label_smoothing", "arcface", "seesaw")


@dataclass
class LossSpec:
    name: str = "ce"
    mixup_alpha: float = 0.2
    smoothing: float = 0.1
    ohem_keep: float | None = None
    arcface: L.ArcfaceConfig = field(default_factory=L.ArcfaceConfig)
    seesaw: L.SeesawConfig = field(default_factory=L.SeesawConfig)

    def __post_init__(self) -> None:
        if self.name not in LOSS_NAMES:
            raise ValueError(f"unknown loss {self.name!r}; choose from {LOSS_NAMES}")
        if isinstance(self.arcface, dict):
            self.arcface = L.ArcfaceConfig(**self.arcface)
        if isinstance(self.seesaw, dict):
            self.seesaw = L.SeesawConfig(**self.seesaw)

    @property
    def head(self) -> str:
        return "arcface" if self.name == "arcface" else "linear"


@dataclass
class Batch:
    features: np.ndarray
    meta: np.ndarray
    labels: np.ndarray | None = None


def make_batches(features, meta, labels, batch_size: int, rng: SeededRng | None, drop_last: bool = False) -> list[Batch]:
    """Shuffle with ``rng`` (no shuffle when None) and cut into consecutive batches.

    ``drop_last`` discards a trailing partial batch, which contrastive loaders
    want because in-batch negatives make the loss depend on batch size.
    """
    n = len(features)
    order = np.arange(n) if rng is None else rng.permutation(n)
    stop = n - n % batch_size if drop_last and n >= batch_size else n
    out = []
    for start in range(0, stop, batch_size):
        idx = order[start : start + batch_size]
        out.append(Batch(features[idx], meta[idx], None if labels is None else labels[idx]))
    return out


def _evaluate(model: Model, x, meta, targets, spec: LossSpec, state: L.SeesawState | None):
    """Forward + loss on one batch; ``targets`` are labels or soft targets (mixup)."""
    fwd = model.forward(x, meta)
    if spec.name == "arcface":
        res = L.arcface(fwd.embedding, model.params["cls.W"], targets, spec.arcface)
    elif spec.name == "seesaw":
        res = L.seesaw(fwd.logits, targets, state, spec.seesaw)
    elif spec.name == "label_smoothing":
        res = L.label_smoothing_ce(fwd.logits, targets, spec.smoothing)
    elif targets.ndim == 2:
        res = L.soft_target_ce(fwd.logits, targets)
    else:
        res = L.cross_entropy(fwd.logits, targets)
    return fwd, res


def supervised_loss(
    model: Model,
    batch: Batch,
    spec: LossSpec,
    seesaw_state: L.SeesawState | None = None,
    rng: SeededRng | None = None,
    policy: AugmentPolicy | None = None,
) -> L.LossResult:
    """Loss on one labeled batch with parameter gradients in ``result.grads``."""
    x, meta, y = batch.features, batch.meta, batch.labels
    if policy is not None and not policy.is_identity:
        x = augment(x, policy, rng)
    targets = y
    if spec.name == "soft_target_ce":
        perm = rng.permutation(len(y))
        x, targets, lam = mixup(x, y, x[perm], y[perm], model.cfg.num_classes, spec.mixup_alpha, rng)
        meta = lam * meta + (1.0 - lam) * meta[perm]

    if spec.ohem_keep is not None and spec.ohem_keep < 1.0:
        probe_state = copy.deepcopy(seesaw_state)
        _, probe = _evaluate(model, x, meta, targets, spec, probe_state)
        idx, _, _ = L.ohem_filter(probe.per_sample, spec.ohem_keep)
        x, meta, targets = x[idx], meta[idx], targets[idx]

    fwd, res = _evaluate(model, x, meta, targets, spec, seesaw_state)
    grads: dict[str, np.ndarray] = {}
    if spec.name == "arcface":
        model.backward(fwd.cache, grad_embedding=res.grad_embeddings, grads=grads)
        grads["cls.W"] = res.grad_weights
    else:
        model.backward(fwd.cache, grad_logits=res.grad_logits, grads=grads)
    res.grads = grads
    return res


def freeze(grads: dict[str, np.ndarray], trainable_prefixes: tuple[str, ...] | None) -> dict[str, np.ndarray]:
    if trainable_prefixes is None:
        return grads
    return {k: v for k, v in grads.items() if k.startswith(trainable_prefixes)}


def supervised_epoch(
    model: Model,
    batches: list[Batch],
    spec: LossSpec,
    opt: OptimizerState,
    rng: SeededRng,
    seesaw_state: L.SeesawState | None = None,
    policy: AugmentPolicy | None = None,
    trainable_prefixes: tuple[str, ...] | None = None,
) -> float:
    """One pass over ``batches``; returns the mean batch loss."""
    if not batches:
        raise ValueError("supervised_epoch: empty loader")
    total = 0.0
    for batch in batches:
        res = supervised_loss(model, batch, spec, seesaw_state, rng, policy)
        accumulate_and_step(model, freeze(res.grads, trainable_prefixes), opt)
        total += res.loss
    return total / len(batches)

