"""Contrastive objectives and the two self-supervised trainers.

Momentum (MoCo-style) pretraining: queries come from backbone + projection +
prediction heads, keys from a momentum copy of backbone + projection that
never receives gradients.  Negatives are the other samples of the batch.

Joint (SimCLR-style) training: a supervised loss on a labeled batch plus a
2N-view InfoNCE on two augmentations of an unlabeled batch, weighted
``lambda1 * sup + lambda2 * self``, one optimizer step per paired batch.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .datagen import AugmentPolicy, augment
from .losses import LossError, LossResult, SeesawState
from .model import Model, OptimizerState, accumulate_and_step
from .numerics import SeededRng, as_matrix, l2_normalize_backward, l2_normalize_rows, log_softmax_rows, softmax_rows
from .training import Batch, LossSpec, supervised_loss

KEY_PREFIXES = ("enc", "embed.", "proj")


@dataclass
class ContrastiveConfig:
    tau: float = 0.25
    momentum_m: float = 0.99

    def validate(self) -> None:
        if not (self.tau > 0 and math.isfinite(self.tau)):
            raise LossError("temperature must be positive and finite")
        if not 0.0 <= self.momentum_m <= 1.0:
            raise LossError("momentum must lie in [0, 1]")


@dataclass
class JointConfig:
    lambda1: float = 0.9
    lambda2: float = 0.1

    def validate(self) -> None:
        if self.lambda1 < 0 or self.lambda2 < 0 or self.lambda1 + self.lambda2 <= 0:
            raise LossError("joint weights must be >= 0 with a positive sum")


def _check_unit_rows(m: np.ndarray, what: str) -> None:
    norms = np.sqrt((m * m).sum(axis=1))
    bad = np.flatnonzero(np.abs(norms - 1.0) > 1e-6)
    if bad.size:
        raise LossError(f"{what} row {int(bad[0])} is not l2-normalized (norm {norms[bad[0]]:.6g})")


def info_nce(q, keys, positives, tau: float = 0.25) -> LossResult:
    """Mean InfoNCE of each query against all keys; ``positives[i]`` indexes the positive key.

    ``grads`` holds ``"q"`` and ``"keys"``.
    """
    q = as_matrix(q)
    keys = as_matrix(keys)
    _check_unit_rows(q, "query")
    _check_unit_rows(keys, "key")
    pos = np.asarray(positives, dtype=np.int64)
    if pos.shape != (q.shape[0],) or pos.min() < 0 or pos.max() >= keys.shape[0]:
        raise LossError("positives must give one valid key index per query")
    n = q.shape[0]
    logits = q @ keys.T / tau
    rows = np.arange(n)
    per_sample = -log_softmax_rows(logits)[rows, pos]
    g = softmax_rows(logits)
    g[rows, pos] -= 1.0
    g /= n
    return LossResult(
        float(per_sample.mean()),
        grad_logits=g,
        per_sample=per_sample,
        grads={"q": g @ keys / tau, "keys": g.T @ q / tau},
    )


def ctr(q, k, tau: float) -> LossResult:
    """``2 * tau * CE(q k^T / tau, diagonal)``; gradient w.r.t. ``q`` only."""
    q = as_matrix(q)
    k = as_matrix(k)
    if q.shape != k.shape:
        raise LossError(f"query {q.shape} and key {k.shape} shapes differ")
    res = info_nce(q, k, np.arange(q.shape[0]), tau)
    scale = 2.0 * tau
    return LossResult(scale * res.loss, per_sample=scale * res.per_sample, grads={"q": scale * res.grads["q"]})


def symmetrized_ctr(q1, q2, k1, k2, tau: float = 0.25) -> LossResult:
    shapes = {np.shape(a) for a in (q1, q2, k1, k2)}
    if len(shapes) != 1:
        raise LossError(f"symmetrized_ctr needs equal shapes, got {sorted(shapes)}")
    a = ctr(q1, k2, tau)
    b = ctr(q2, k1, tau)
    return LossResult(a.loss + b.loss, grads={"q1": a.grads["q"], "q2": b.grads["q"]}, extras={"parts": (a.loss, b.loss)})


def momentum_update(key_params: dict[str, np.ndarray], query_params: dict[str, np.ndarray], m: float) -> dict[str, np.ndarray]:
    """In place ``key = m * key + (1 - m) * query`` over every key parameter."""
    if not 0.0 <= m <= 1.0:
        raise LossError("momentum must lie in [0, 1]")
    for name, k in key_params.items():
        q = query_params.get(name)
        if q is None or q.shape != k.shape:
            raise LossError(f"key/query parameter structure mismatch at {name!r}")
    for name, k in key_params.items():
        k[...] = m * k + (1.0 - m) * query_params[name]
    return key_params


def cosine_sim(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < 1e-12 or nb < 1e-12:
        raise LossError("cosine similarity of a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def nt_xent(z, tau: float = 0.25) -> LossResult:
    """2N-view InfoNCE over cosine similarities.

    Rows ``i`` and ``i + N`` of ``z`` are the two views of one sample; every
    other row is a negative.  ``grads["z"]`` is w.r.t. the unnormalized rows.
    """
    z = as_matrix(z)
    two_n = z.shape[0]
    if two_n < 2 or two_n % 2:
        raise LossError("nt_xent needs an even number (>= 2) of rows")
    n = two_n // 2
    z_hat, degenerate = l2_normalize_rows(z)
    if degenerate.any():
        raise LossError(f"degenerate projection row {int(np.flatnonzero(degenerate)[0])}")
    sim = z_hat @ z_hat.T / tau
    np.fill_diagonal(sim, -np.inf)
    pos = np.concatenate([np.arange(n, two_n), np.arange(n)])
    rows = np.arange(two_n)
    top = sim.max(axis=1, keepdims=True)
    e = np.exp(sim - top)
    lse = np.log(e.sum(axis=1)) + top[:, 0]
    per_sample = lse - sim[rows, pos]
    g = e / e.sum(axis=1, keepdims=True)
    g[rows, pos] -= 1.0
    g /= two_n
    g_hat = (g + g.T) @ z_hat / tau
    return LossResult(float(per_sample.mean()), per_sample=per_sample, grads={"z": l2_normalize_backward(z, g_hat)})


def joint_loss(sup: LossResult, self_sup: LossResult, cfg: JointConfig) -> LossResult:
    """``lambda1 * sup + lambda2 * self`` with gradients combined the same way.

    A zero weight drops that term, so its parameters receive no gradient at all.
    """
    cfg.validate()
    loss = 0.0
    grads: dict[str, np.ndarray] = {}
    for weight, part in ((cfg.lambda1, sup), (cfg.lambda2, self_sup)):
        if weight == 0.0 or part is None:
            continue
        loss += weight * part.loss
        for name, g in part.grads.items():
            grads[name] = grads[name] + weight * g if name in grads else weight * g
    return LossResult(loss, grads=grads, extras={"sup": None if sup is None else sup.loss, "self": None if self_sup is None else self_sup.loss})


# trainers -------------------------------------------------------------------------

def make_key_model(model: Model) -> Model:
    """Momentum encoder: a copy of the backbone + projection head parameters."""
    key = model.copy()
    key.params = {k: v.copy() for k, v in model.params.items() if k.startswith(KEY_PREFIXES)}
    key.grad_buffer = {k: np.zeros_like(v) for k, v in key.params.items()}
    return key


def _query_path(model: Model, x, meta):
    emb, enc_cache = model.encode(x, meta)
    p, proj_cache = model.project(emb)
    h, pred_cache = model.predict_head(p)
    q, _ = l2_normalize_rows(h)
    return q, (h, enc_cache, proj_cache, pred_cache)


def _query_backward(model: Model, caches, grad_q, grads) -> None:
    h, enc_cache, proj_cache, pred_cache = caches
    g = l2_normalize_backward(h, grad_q)
    g = model.head_backward(pred_cache, g, grads)
    g = model.head_backward(proj_cache, g, grads)
    model.encoder_backward(enc_cache, g, grads)


def _key_path(key: Model, x, meta) -> np.ndarray:
    emb, _ = key.encode(x, meta)
    p, _ = key.project(emb)
    k, _ = l2_normalize_rows(p)
    return k


def moco_pretrain_epoch(
    model: Model,
    key: Model,
    batches: list[Batch],
    cfg: ContrastiveConfig,
    opt: OptimizerState,
    rng: SeededRng,
    policy: AugmentPolicy,
) -> float:
    """One epoch of symmetrized momentum-contrast training; returns the mean loss."""
    cfg.validate()
    if not batches:
        raise ValueError("moco_pretrain_epoch: empty loader")
    total = 0.0
    for batch in batches:
        x1 = augment(batch.features, policy, rng)
        x2 = augment(batch.features, policy, rng)
        q1, c1 = _query_path(model, x1, batch.meta)
        q2, c2 = _query_path(model, x2, batch.meta)
        k1 = _key_path(key, x1, batch.meta)
        k2 = _key_path(key, x2, batch.meta)
        res = symmetrized_ctr(q1, q2, k1, k2, cfg.tau)
        grads: dict[str, np.ndarray] = {}
        _query_backward(model, c1, res.grads["q1"], grads)
        _query_backward(model, c2, res.grads["q2"], grads)
        if accumulate_and_step(model, grads, opt):
            momentum_update(key.params, model.params, cfg.momentum_m)
            key.touch()
        total += res.loss
    return total / len(batches)


def self_supervised_loss(model: Model, batch: Batch, cfg: ContrastiveConfig, rng: SeededRng, policy: AugmentPolicy) -> LossResult:
    """2N-view InfoNCE on two independent augmentations of ``batch``."""
    x1 = augment(batch.features, policy, rng)
    x2 = augment(batch.features, policy, rng)
    x = np.concatenate([x1, x2])
    meta = np.concatenate([batch.meta, batch.meta])
    emb, enc_cache = model.encode(x, meta)
    z, proj_cache = model.project(emb)
    res = nt_xent(z, cfg.tau)
    grads: dict[str, np.ndarray] = {}
    g = model.head_backward(proj_cache, res.grads["z"], grads)
    model.encoder_backward(enc_cache, g, grads)
    res.grads = grads
    return res


def simclr_joint_epoch(
    model: Model,
    labeled: list[Batch],
    unlabeled: list[Batch],
    cfg: ContrastiveConfig,
    joint_cfg: JointConfig,
    spec: LossSpec,
    opt: OptimizerState,
    sup_rng: SeededRng,
    ssl_rng: SeededRng,
    policy: AugmentPolicy,
    sup_policy: AugmentPolicy | None = None,
    seesaw_state: SeesawState | None = None,
) -> dict:
    """One joint epoch; labeled batches drive the step count, unlabeled batches cycle.

    The two branches draw from separate streams so that ``lambda2 = 0``
    reproduces plain supervised training exactly.
    """
    cfg.validate()
    joint_cfg.validate()
    if not labeled or not unlabeled:
        raise ValueError("simclr_joint_epoch: both loaders must be non-empty")
    sup_total = self_total = joint_total = 0.0
    for i, batch in enumerate(labeled):
        sup = supervised_loss(model, batch, spec, seesaw_state, sup_rng, sup_policy) if joint_cfg.lambda1 > 0 else None
        ssl = self_supervised_loss(model, unlabeled[i % len(unlabeled)], cfg, ssl_rng, policy) if joint_cfg.lambda2 > 0 else None
        res = joint_loss(sup, ssl, joint_cfg)
        accumulate_and_step(model, res.grads, opt)
        sup_total += 0.0 if sup is None else sup.loss
        self_total += 0.0 if ssl is None else ssl.loss
        joint_total += res.loss
    n = len(labeled)
    return {"sup": sup_total / n, "self": self_total / n, "joint": joint_total / n}
