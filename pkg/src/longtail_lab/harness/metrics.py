from __future__ import annotations

from fractions import Fraction

import numpy as np


def confusion_matrix(true_labels, predictions, num_classes: int) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(true_labels, dtype=np.int64), np.asarray(predictions, dtype=np.int64)), 1)
    return cm


def head_tail_split(train_counts) -> tuple[np.ndarray, np.ndarray]:
    """Head classes have a train count at or above the median, tail classes below it."""
    counts = np.asarray(train_counts, dtype=np.float64)
    med = np.median(counts)
    return np.flatnonzero(counts >= med), np.flatnonzero(counts < med)


def macro_f1(predictions, true_labels, num_classes: int, train_counts=None) -> dict:
    """Macro-F1 over the classes present in ``true_labels``.

    Returns ``{"macro", "per_class", "present", "head", "tail"}``; per-class F1
    is 0 when precision + recall is 0.  Averages are computed exactly and
    rounded once.  ``head``/``tail`` are None without
    ``train_counts`` or when a side has no present class.
    """
    y = np.asarray(true_labels, dtype=np.int64)
    p = np.asarray(predictions, dtype=np.int64)
    if y.size == 0:
        raise ValueError("macro_f1 on an empty evaluation set")
    if y.shape != p.shape:
        raise ValueError("predictions and labels differ in length")
    if y.min() < 0 or y.max() >= num_classes or p.min() < 0 or p.max() >= num_classes:
        raise ValueError("label outside the class space")
    cm = confusion_matrix(y, p, num_classes)
    tp = np.diag(cm)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    # F1 = 2tp / (2tp + fp + fn) kept as exact rationals, so every reported value
    # is the correctly rounded float of the true score
    exact = [Fraction(2 * int(t), int(2 * t + a + b)) if t else Fraction(0) for t, a, b in zip(tp, fp, fn)]
    f1 = np.array([float(v) for v in exact])
    present = (tp + fn) > 0

    def mean(cls) -> float:
        return float(sum((exact[k] for k in cls), Fraction(0)) / len(cls))

    report = {
        "macro": mean(np.flatnonzero(present)),
        "per_class": f1.tolist(),
        "present": np.flatnonzero(present).tolist(),
        "head": None,
        "tail": None,
    }
    if train_counts is not None:
        head, tail = head_tail_split(train_counts)
        for key, cls in (("head", head), ("tail", tail)):
            cls = cls[present[cls]]
            report[key] = mean(cls) if cls.size else None
    return report
