"""Classification losses with analytic gradients.

Every loss uses mean reduction over the batch and returns a ``LossResult``.
The L2 terms that appear next to the Arcface and Seesaw data terms are left to
the optimizer's decoupled weight decay, so reported values are data terms only.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import as_matrix, check_finite, log_softmax_rows, one_hot, softmax_rows


class LossError(ValueError):
    pass


@dataclass
class LossResult:
    loss: float
    grad_logits: np.ndarray | None = None
    per_sample: np.ndarray | None = None
    grad_embeddings: np.ndarray | None = None
    grad_weights: np.ndarray | None = None
    grads: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)


@dataclass
class ArcfaceConfig:
    scale_s: float = 30.0
    margin_m: float = 0.1
    weight_decay_l2: float = 0.0
    cos_clamp_eps: float = 1e-7

    def validate(self) -> None:
        if not (self.scale_s > 0 and math.isfinite(self.scale_s)):
            raise LossError("arcface scale must be positive and finite")
        if not 0.0 <= self.margin_m < math.pi / 2:
            raise LossError("arcface margin must lie in [0, pi/2)")
        if not 0.0 < self.cos_clamp_eps <= 1e-3:
            raise LossError("cos_clamp_eps must lie in (0, 1e-3]")


@dataclass
class SeesawConfig:
    p: float = 0.8
    q: float = 2.0
    gamma: float = 0.95
    weight_decay_l2: float = 0.0

    def validate(self) -> None:
        if self.p < 0 or self.q < 0:
            raise LossError("seesaw exponents must be >= 0")
        if not 0.0 < self.gamma <= 1.0:
            raise LossError("seesaw gamma must lie in (0, 1]")


@dataclass
class SeesawState:
    counts: np.ndarray

    @classmethod
    def zeros(cls, num_classes: int) -> "SeesawState":
        return cls(np.zeros(num_classes, dtype=np.int64))

    def update(self, labels) -> None:
        self.counts += np.bincount(np.asarray(labels, dtype=np.int64), minlength=len(self.counts))


def _check_labels(labels, n: int, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if labels.size != n:
        raise LossError(f"got {labels.size} labels for a batch of {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise LossError("label outside the class space")
    return labels


def soft_target_ce(logits, soft_targets) -> LossResult:
    z = as_matrix(logits)
    t = as_matrix(soft_targets)
    if z.shape != t.shape:
        raise LossError(f"logits {z.shape} and targets {t.shape} differ in shape")
    if np.any(t < 0) or np.any(np.abs(t.sum(axis=1) - 1.0) > 1e-9):
        raise LossError("soft targets must be probability distributions")
    n = z.shape[0]
    per_sample = -(t * log_softmax_rows(z)).sum(axis=1)
    grad = (softmax_rows(z) - t) / n
    return LossResult(float(per_sample.mean()), grad, per_sample)


def cross_entropy(logits, labels) -> LossResult:
    z = as_matrix(logits)
    labels = _check_labels(labels, z.shape[0], z.shape[1])
    return soft_target_ce(z, one_hot(labels, z.shape[1]))


def label_smoothing_ce(logits, labels, epsilon: float = 0.1) -> LossResult:
    if not 0.0 <= epsilon < 1.0:
        raise LossError(f"label smoothing epsilon must lie in [0, 1), got {epsilon}")
    z = as_matrix(logits)
    labels = _check_labels(labels, z.shape[0], z.shape[1])
    c = z.shape[1]
    if epsilon == 0.0:
        target = one_hot(labels, c)
    else:
        target = (1.0 - epsilon) * one_hot(labels, c) + epsilon / c
    return soft_target_ce(z, target)


def cosine_logits(embeddings, class_weights, eps: float = 1e-7):
    """Clamped cosine between embedding rows and weight columns (``W`` is d x C)."""
    x = as_matrix(embeddings)
    w = as_matrix(class_weights)
    xn = np.sqrt((x * x).sum(axis=1))
    wn = np.sqrt((w * w).sum(axis=0))
    bad = np.flatnonzero(xn < 1e-12)
    if bad.size:
        raise LossError(f"degenerate embedding row {int(bad[0])} (norm {xn[bad[0]]:.3g})")
    bad = np.flatnonzero(wn < 1e-12)
    if bad.size:
        raise LossError(f"degenerate class weight column {int(bad[0])}")
    x_hat = x / xn[:, None]
    w_hat = w / wn[None, :]
    raw = x_hat @ w_hat
    cos = np.clip(raw, -1.0 + eps, 1.0 - eps)
    return cos, raw, x_hat, w_hat, xn, wn


def arcface(embeddings, class_weights, labels, cfg: ArcfaceConfig | None = None) -> LossResult:
    """Additive angular margin softmax.

    The target logit is ``s * cos(theta_y + m)`` and every other logit is
    ``s * cos(theta_j)``.  Gradients are returned w.r.t. the raw (unnormalized)
    embeddings and class weights; clamped cosines pass no gradient.
    """
    cfg = cfg or ArcfaceConfig()
    cfg.validate()
    x = as_matrix(embeddings)
    w = as_matrix(class_weights)
    check_finite(x, "embeddings")
    check_finite(w, "class weights")
    if x.shape[1] != w.shape[0]:
        raise LossError(f"embedding dim {x.shape[1]} does not match weight rows {w.shape[0]}")
    n, c = x.shape[0], w.shape[1]
    labels = _check_labels(labels, n, c)
    cos, raw, x_hat, w_hat, xn, wn = cosine_logits(x, w, cfg.cos_clamp_eps)

    rows = np.arange(n)
    cos_y = cos[rows, labels]
    sin_y = np.sqrt(1.0 - cos_y * cos_y)
    cm, sm = math.cos(cfg.margin_m), math.sin(cfg.margin_m)
    logits = cfg.scale_s * cos
    logits[rows, labels] = cfg.scale_s * (cos_y * cm - sin_y * sm)

    per_sample = -log_softmax_rows(logits)[rows, labels]
    g_logits = (softmax_rows(logits) - one_hot(labels, c)) / n

    # d logit / d cos: s everywhere, target gets the margin derivative
    g_cos = cfg.scale_s * g_logits
    g_cos[rows, labels] *= cm + cos_y * sm / sin_y
    g_cos = np.where(raw == cos, g_cos, 0.0)

    g_xhat = g_cos @ w_hat.T
    g_what = x_hat.T @ g_cos
    g_x = (g_xhat - x_hat * (x_hat * g_xhat).sum(axis=1, keepdims=True)) / xn[:, None]
    g_w = (g_what - w_hat * (w_hat * g_what).sum(axis=0, keepdims=True)) / wn[None, :]
    return LossResult(
        float(per_sample.mean()),
        grad_logits=g_logits,
        per_sample=per_sample,
        grad_embeddings=g_x,
        grad_weights=g_w,
        extras={"logits": logits},
    )


def mitigation_factors(counts, p: float) -> np.ndarray:
    """``M[i, j] = (D_j / D_i) ** p`` when ``D_i > D_j`` else 1."""
    d = np.asarray(counts, dtype=np.float64)
    di, dj = d[:, None], d[None, :]
    out = np.ones((d.size, d.size))
    mask = di > dj
    out[mask] = (np.broadcast_to(dj, out.shape)[mask] / np.broadcast_to(di, out.shape)[mask]) ** p
    return out


def compensation_factors(probs, labels, q: float) -> np.ndarray:
    """Per-sample ``C[n, j] = (sigma_j / sigma_y) ** q`` when ``sigma_j > sigma_y`` else 1."""
    probs = as_matrix(probs)
    labels = np.asarray(labels, dtype=np.int64)
    sy = probs[np.arange(len(labels)), labels][:, None]
    ratio = probs / sy
    return np.where(probs > sy, ratio**q, 1.0)


_LOG_MAX = math.log(np.finfo(np.float64).max)


def seesaw(logits, labels, state: SeesawState, cfg: SeesawConfig | None = None) -> LossResult:
    """Seesaw loss; updates ``state`` with this batch's labels before computing factors.

    The rescaling factors ``S = gamma * M * C`` are treated as constants in the
    gradient (``C`` reads the plain softmax of the current logits).
    """
    cfg = cfg or SeesawConfig()
    cfg.validate()
    z = as_matrix(logits)
    check_finite(z, "logits")
    n, c = z.shape
    if len(state.counts) != c:
        raise LossError(f"seesaw state has {len(state.counts)} classes, logits have {c}")
    labels = _check_labels(labels, n, c)
    state.update(labels)

    rows = np.arange(n)
    z_y = z[rows, labels][:, None]
    m = mitigation_factors(state.counts, cfg.p)[labels]
    # sigma_j / sigma_y == exp(z_j - z_y); kept in log space so large gaps cannot overflow
    with np.errstate(divide="ignore"):
        # classes never seen yet have M = 0 and drop out of the denominator
        log_m = np.log(m)
    log_s = math.log(cfg.gamma) + log_m + cfg.q * np.maximum(z - z_y, 0.0)
    log_s[rows, labels] = 0.0
    log_w = log_s + z
    top = log_w.max(axis=1, keepdims=True)
    w = np.exp(log_w - top)
    denom = w.sum(axis=1)
    per_sample = np.log(denom) + top[:, 0] - z_y[:, 0]
    grad = w / denom[:, None]
    grad[rows, labels] -= 1.0
    grad /= n
    # reported factors saturate at the largest double instead of overflowing
    s = np.exp(np.minimum(log_s, _LOG_MAX))
    return LossResult(float(per_sample.mean()), grad, per_sample, extras={"factors": s})


def ohem_filter(per_sample_losses, keep_fraction: float = 0.7) -> tuple[np.ndarray, float, np.ndarray]:
    """Keep the ``ceil(keep_fraction * N)`` largest losses (ties to lower index).

    Returns ``(indices, mean_of_kept, mask)``; ``mask`` is 1 for kept samples.
    """
    losses = np.asarray(per_sample_losses, dtype=np.float64).ravel()
    if losses.size == 0:
        raise LossError("ohem_filter on an empty batch")
    if not 0.0 < keep_fraction <= 1.0:
        raise LossError("keep_fraction must lie in (0, 1]")
    k = math.ceil(keep_fraction * losses.size - 1e-12)
    order = np.lexsort((np.arange(losses.size), -losses))
    idx = np.sort(order[:k])
    mask = np.zeros(losses.size)
    mask[idx] = 1.0
    return idx, float(losses[idx].mean()), mask

