"""Inference-side stages: prediction sets, TTA, pseudo-labels, logit fusion."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..datagen import AugmentPolicy, augment, recenter
from ..model import Model, predict_logits
from ..numerics import SeededRng, as_matrix, log_softmax_rows, softmax_rows


@dataclass
class PredictionSet:
    logits: np.ndarray
    model_id: str = "model"
    sample_ids: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.logits = as_matrix(self.logits)
        if self.sample_ids is None:
            self.sample_ids = np.arange(self.logits.shape[0])
        self.sample_ids = np.asarray(self.sample_ids, dtype=np.int64)

    @property
    def pred(self) -> np.ndarray:
        # first maximal index: ties go to the lower class
        return np.argmax(self.logits, axis=1)

    @property
    def num_classes(self) -> int:
        return self.logits.shape[1]

    def __len__(self) -> int:
        return self.logits.shape[0]


def write_predictions(ps: PredictionSet, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", *[f"logit_{c}" for c in range(ps.num_classes)], "pred"])
        for sid, row, pred in zip(ps.sample_ids, ps.logits, ps.pred):
            w.writerow([int(sid), *[repr(float(v)) for v in row], int(pred)])


def read_predictions(path, model_id: str | None = None) -> PredictionSet:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if header[0] != "sample_id" or header[-1] != "pred":
        raise ValueError(f"{path}: not a prediction CSV")
    ids = np.array([int(r[0]) for r in body], dtype=np.int64)
    logits = np.array([[float(v) for v in r[1:-1]] for r in body]).reshape(len(body), len(header) - 2)
    return PredictionSet(logits, model_id or Path(path).stem, ids)


def plain_predict(model: Model, features, meta, model_id: str = "model") -> PredictionSet:
    return PredictionSet(predict_logits(model, features, meta), model_id)


def tta_predict(
    model: Model,
    features,
    meta,
    policy: AugmentPolicy,
    num_views: int = 5,
    seed: int = 0,
    recenter_views: bool = False,
) -> np.ndarray:
    """Mean softmax over the identity view plus ``num_views - 1`` seeded augmentations.

    With ``recenter_views`` every augmented view is shifted back so its row mean
    matches the source sample's, undoing common-mode crop shift.
    """
    if num_views < 1:
        raise ValueError("num_views must be >= 1")
    base = softmax_rows(predict_logits(model, features, meta))
    if num_views == 1 or policy.is_identity:
        return base
    total = base.copy()
    root = SeededRng(seed).child("tta")
    for v in range(1, num_views):
        view = augment(features, policy, root.child(f"view/{v}"))
        if recenter_views:
            view = recenter(view) + np.asarray(features, dtype=np.float64).mean(axis=1, keepdims=True)
        total += softmax_rows(predict_logits(model, view, meta))
    return total / num_views


def tta_prediction_set(
    model: Model, features, meta, policy: AugmentPolicy, num_views: int = 5, seed: int = 0, model_id: str = "model", recenter_views: bool = False
) -> PredictionSet:
    probs = tta_predict(model, features, meta, policy, num_views, seed, recenter_views)
    with np.errstate(divide="ignore"):
        return PredictionSet(np.maximum(np.log(probs), -1e300), model_id)


def pseudo_count(fraction: float, n: int) -> int:
    # the epsilon absorbs binary noise such as 0.3 * 10 = 3.0000000000000004 or 0.7 * 10 = 6.999...
    return min(n, math.floor(fraction * n + 1e-9))


def pseudo_label_select(preds: PredictionSet, fraction: float) -> tuple[np.ndarray, np.ndarray]:
    """Top ``floor(fraction * N)`` samples by raw max logit (ties to lower index).

    Returns ``(row_indices, pseudo_labels)`` in rank order.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("pseudo-label fraction must lie in [0, 1]")
    n = len(preds)
    k = pseudo_count(fraction, n)
    if k == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    score = preds.logits.max(axis=1)
    order = np.lexsort((np.arange(n), -score))[:k]
    return order, preds.pred[order]


def ensemble_max_logit(pred_sets: list[PredictionSet], normalize: bool = False, method: str = "max_logit") -> PredictionSet:
    """Fuse models per sample.

    ``max_logit`` picks the (model, class) pair holding the highest logit, ties
    to the earlier model and then the lower class; the fused row is that
    model's logit row.  ``normalize`` first maps every row to log-softmax.
    ``mean_prob`` averages softmax probabilities instead.
    """
    if not pred_sets:
        raise ValueError("ensemble of zero prediction sets")
    first = pred_sets[0]
    for ps in pred_sets[1:]:
        if ps.logits.shape != first.logits.shape or not np.array_equal(ps.sample_ids, first.sample_ids):
            raise ValueError(f"prediction set {ps.model_id!r} covers different samples or classes")
    stack = np.stack([log_softmax_rows(ps.logits) if normalize else ps.logits for ps in pred_sets])
    ident = "+".join(ps.model_id for ps in pred_sets)
    if method == "mean_prob":
        probs = np.mean([softmax_rows(s) for s in stack], axis=0)
        return PredictionSet(np.log(np.maximum(probs, 1e-300)), f"mean_prob({ident})", first.sample_ids)
    if method != "max_logit":
        raise ValueError(f"unknown fusion method {method!r}")
    m, n, c = stack.shape
    flat = stack.transpose(1, 0, 2).reshape(n, m * c)  # model-major within each sample
    winner = np.argmax(flat, axis=1) // c
    fused = stack[winner, np.arange(n)]
    return PredictionSet(fused, f"max_logit({ident})", first.sample_ids)
