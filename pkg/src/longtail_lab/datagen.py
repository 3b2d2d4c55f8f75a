"""Synthetic fine-grained, long-tailed, meta-annotated datasets.

Geometry: meta-category centers and subclass offsets are drawn as mutually
orthogonal directions (QR of a seeded Gaussian matrix) whenever
``feature_dim >= num_meta + num_classes``.  Meta centers then sit exactly
``meta_separation`` apart and siblings exactly ``inter_subclass_gap * sqrt(2)``
apart, so subclasses of one meta-category are always closer to each other
than to any other meta-category.  With fewer dimensions the offsets fall back
to random unit directions.

Splits: ``train`` follows the geometric long-tail schedule, ``val`` holds
``val_per_class`` samples per class, and the ``test`` split (unlabeled during
training, labels kept for scoring) is balanced with its size fixed by
``unlabeled_fraction`` of the whole dataset.
"""
from __future__ import annotations

import base64
import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .numerics import SeededRng, one_hot

SPLITS = ("train", "val", "test")
DATASET_FORMAT = "longtail-lab-dataset/1"


class DatasetError(ValueError):
    pass


@dataclass
class DatasetConfig:
    num_meta_categories: int = 4
    subclasses_per_meta: int = 3
    feature_dim: int = 16
    head_count: int = 100
    imbalance_ratio: float = 0.02
    intra_class_noise: float = 0.6
    inter_subclass_gap: float = 1.0
    meta_separation: float = 2.0
    meta_fidelity: float = 0.9
    unlabeled_fraction: float = 0.4
    val_per_class: int = 10
    seed: int = 0

    @property
    def num_classes(self) -> int:
        return self.num_meta_categories * self.subclasses_per_meta

    def validate(self) -> None:
        if self.num_classes < 2:
            raise DatasetError("need at least 2 classes")
        if self.num_meta_categories < 1 or self.subclasses_per_meta < 1:
            raise DatasetError("meta categories and subclasses must be positive")
        if self.head_count < 1:
            raise DatasetError("head_count must be >= 1")
        if not 0.0 < self.imbalance_ratio <= 1.0:
            raise DatasetError("imbalance_ratio must lie in (0, 1]")
        if self.intra_class_noise < 0:
            raise DatasetError("intra_class_noise must be >= 0")
        if self.inter_subclass_gap <= 0:
            raise DatasetError("inter_subclass_gap must be > 0")
        if self.feature_dim < self.num_meta_categories:
            raise DatasetError(
                f"feature_dim {self.feature_dim} < {self.num_meta_categories} meta-categories; "
                "meta centers need orthogonal directions"
            )
        if self.inter_subclass_gap >= self.meta_separation:
            raise DatasetError(
                f"infeasible geometry: inter_subclass_gap {self.inter_subclass_gap} "
                f">= meta_separation {self.meta_separation}"
            )
        if not 0.0 <= self.meta_fidelity <= 1.0:
            raise DatasetError("meta_fidelity must lie in [0, 1]")
        if not 0.0 <= self.unlabeled_fraction < 1.0:
            raise DatasetError("unlabeled_fraction must lie in [0, 1)")
        if self.val_per_class < 0:
            raise DatasetError("val_per_class must be >= 0")


@dataclass
class AugmentPolicy:
    """Per-sample perturbation; applied as scale, jitter, mask, crop-shift."""

    jitter_sigma: float = 0.0
    mask_prob: float = 0.0
    scale_range: tuple[float, float] = (1.0, 1.0)
    crop_shift_sigma: float = 0.0

    def __post_init__(self) -> None:
        lo, hi = self.scale_range
        self.scale_range = (float(lo), float(hi))
        if self.jitter_sigma < 0 or self.crop_shift_sigma < 0:
            raise DatasetError("augmentation sigmas must be >= 0")
        if not 0.0 <= self.mask_prob <= 1.0:
            raise DatasetError("mask_prob must lie in [0, 1]")
        if not 0.0 < lo <= hi:
            raise DatasetError("scale_range must satisfy 0 < lo <= hi")

    @property
    def is_identity(self) -> bool:
        return (
            self.jitter_sigma == 0.0
            and self.mask_prob == 0.0
            and self.scale_range == (1.0, 1.0)
            and self.crop_shift_sigma == 0.0
        )


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    meta: np.ndarray
    split: np.ndarray
    class_counts: np.ndarray
    config: DatasetConfig = field(default_factory=DatasetConfig)
    centers: np.ndarray | None = None

    @property
    def num_classes(self) -> int:
        return len(self.class_counts)

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, split: str) -> "Dataset":
        idx = np.flatnonzero(self.split == split)
        return self.take(idx)

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(
            features=self.features[idx],
            labels=self.labels[idx],
            meta=self.meta[idx],
            split=self.split[idx],
            class_counts=self.class_counts,
            config=self.config,
            centers=self.centers,
        )

    def fingerprint(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for arr in (self.features, self.labels.astype(np.int64), self.meta, self.class_counts.astype(np.int64)):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update("|".join(self.split.tolist()).encode())
        return h.hexdigest()[:16]


def class_count_schedule(num_classes: int, head: int, ratio: float) -> np.ndarray:
    if num_classes < 2:
        raise DatasetError("need at least 2 classes")
    if head < 1:
        raise DatasetError("head count must be >= 1")
    if not 0.0 < ratio <= 1.0:
        raise DatasetError(f"imbalance ratio must lie in (0, 1], got {ratio}")
    c = np.arange(num_classes)
    counts = np.maximum(1, np.round(head * ratio ** (c / (num_classes - 1))))
    return counts.astype(np.int64)


def _orthonormal_directions(rng: SeededRng, dim: int, k: int) -> np.ndarray:
    g = rng.normal(dim * k).reshape(dim, k)
    q, r = np.linalg.qr(g)
    q = q * np.sign(np.diag(r))[None, :]
    return q.T


def _random_directions(rng: SeededRng, dim: int, k: int) -> np.ndarray:
    g = rng.normal(dim * k).reshape(k, dim)
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def make_centers(cfg: DatasetConfig) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(meta_centers, class_centers)``; class ``c`` belongs to meta ``c % num_meta_categories``."""
    rng = SeededRng(cfg.seed).child("centers")
    n_meta, n_cls, dim = cfg.num_meta_categories, cfg.num_classes, cfg.feature_dim
    if dim >= n_meta + n_cls:
        dirs = _orthonormal_directions(rng, dim, n_meta + n_cls)
        meta_dirs, sub_dirs = dirs[:n_meta], dirs[n_meta:]
    else:
        meta_dirs = _orthonormal_directions(rng, dim, n_meta)
        sub_dirs = _random_directions(rng, dim, n_cls)
    meta_centers = meta_dirs * (cfg.meta_separation / math.sqrt(2.0))
    owner = meta_category_of(np.arange(n_cls), n_meta)
    class_centers = meta_centers[owner] + cfg.inter_subclass_gap * sub_dirs
    return meta_centers, class_centers


def meta_category_of(labels, num_meta_categories: int) -> np.ndarray:
    """Classes are dealt round-robin, so every meta-category mixes head and tail classes."""
    return np.asarray(labels, dtype=np.int64) % num_meta_categories


def unlabeled_count_per_class(cfg: DatasetConfig, train_total: int) -> int:
    f = cfg.unlabeled_fraction
    if f == 0.0:
        return 0
    labeled = train_total + cfg.val_per_class * cfg.num_classes
    return max(1, round(f * labeled / ((1.0 - f) * cfg.num_classes)))


def generate(cfg: DatasetConfig) -> Dataset:
    cfg.validate()
    counts = class_count_schedule(cfg.num_classes, cfg.head_count, cfg.imbalance_ratio)
    _, centers = make_centers(cfg)
    n_test = unlabeled_count_per_class(cfg, int(counts.sum()))

    labels, split = [], []
    for name, per_class in (("train", counts), ("val", [cfg.val_per_class] * cfg.num_classes), ("test", [n_test] * cfg.num_classes)):
        for c, n in enumerate(per_class):
            labels.extend([c] * int(n))
            split.extend([name] * int(n))
    labels = np.asarray(labels, dtype=np.int64)
    split = np.asarray(split)
    n = labels.size

    noise_rng = SeededRng(cfg.seed).child("noise")
    noise = noise_rng.normal(n * cfg.feature_dim).reshape(n, cfg.feature_dim)
    features = centers[labels] + cfg.intra_class_noise * noise

    meta_rng = SeededRng(cfg.seed).child("meta")
    true_meta = meta_category_of(labels, cfg.num_meta_categories)
    observed = true_meta.copy()
    flips = meta_rng.uniform(n)
    picks = meta_rng.uniform(n)
    if cfg.num_meta_categories > 1:
        wrong = flips >= cfg.meta_fidelity
        # uniform over the other meta-categories
        offset = 1 + np.minimum((picks * (cfg.num_meta_categories - 1)).astype(np.int64), cfg.num_meta_categories - 2)
        observed[wrong] = (true_meta[wrong] + offset[wrong]) % cfg.num_meta_categories
    meta = one_hot(observed, cfg.num_meta_categories)
    return Dataset(features, labels, meta, split, counts, cfg, centers)


def augment(x, policy: AugmentPolicy, rng: SeededRng) -> np.ndarray:
    """Augment one sample (1-D) or a batch (rows).  Identity policy returns a bit-exact copy."""
    x = np.array(x, dtype=np.float64, copy=True)
    if policy.is_identity:
        return x
    batch = x if x.ndim == 2 else x[None, :]
    n, d = batch.shape
    lo, hi = policy.scale_range
    if lo != hi:
        batch = batch * (lo + (hi - lo) * rng.uniform(n))[:, None]
    elif lo != 1.0:
        batch = batch * lo
    if policy.jitter_sigma > 0:
        batch = batch + policy.jitter_sigma * rng.normal(n * d).reshape(n, d)
    if policy.mask_prob > 0:
        keep = rng.uniform(n * d).reshape(n, d) >= policy.mask_prob
        batch = np.where(keep, batch, 0.0)
    if policy.crop_shift_sigma > 0:
        batch = batch + policy.crop_shift_sigma * rng.normal(n)[:, None]
    return batch if x.ndim == 2 else batch[0]


def recenter(x, reference_level: float = 0.0) -> np.ndarray:
    """Undo a common-mode crop shift by moving each row's mean to ``reference_level``."""
    x = np.asarray(x, dtype=np.float64)
    batch = x if x.ndim == 2 else x[None, :]
    out = batch - batch.mean(axis=1, keepdims=True) + reference_level
    return out if x.ndim == 2 else out[0]


def mixup(x_a, y_a, x_b, y_b, num_classes: int, alpha: float = 0.2, rng: SeededRng | None = None, lam: float | None = None):
    """Mix two batches; returns ``(x, soft_targets, lam)``.  Pass ``lam`` to force the coefficient."""
    x_a = np.asarray(x_a, dtype=np.float64)
    x_b = np.asarray(x_b, dtype=np.float64)
    if x_a.shape != x_b.shape:
        raise DatasetError(f"mixup batches differ in shape: {x_a.shape} vs {x_b.shape}")
    if lam is None:
        if not alpha > 0:
            raise DatasetError("mixup alpha must be > 0")
        if rng is None:
            raise DatasetError("mixup needs an rng when lam is not forced")
        lam = rng.beta(alpha, alpha)
    x = lam * x_a + (1.0 - lam) * x_b
    t = lam * one_hot(y_a, num_classes) + (1.0 - lam) * one_hot(y_b, num_classes)
    return x, t, float(lam)


# persistence -------------------------------------------------------------------

def _encode(arr: np.ndarray, dtype) -> dict:
    arr = np.ascontiguousarray(arr, dtype=dtype)
    return {"dtype": np.dtype(dtype).str, "shape": list(arr.shape), "b64": base64.b64encode(arr.tobytes()).decode()}


def _decode(blob: dict) -> np.ndarray:
    raw = base64.b64decode(blob["b64"])
    return np.frombuffer(raw, dtype=np.dtype(blob["dtype"])).reshape(blob["shape"]).copy()


def save_dataset(ds: Dataset, path) -> None:
    """JSON file: format tag, config echo, base64 little-endian arrays."""
    doc = {
        "format": DATASET_FORMAT,
        "config": asdict(ds.config),
        "fingerprint": ds.fingerprint(),
        "features": _encode(ds.features, "<f8"),
        "labels": _encode(ds.labels, "<i8"),
        "meta": _encode(ds.meta, "<f8"),
        "class_counts": _encode(ds.class_counts, "<i8"),
        "split": ds.split.tolist(),
    }
    if ds.centers is not None:
        doc["centers"] = _encode(ds.centers, "<f8")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(doc, indent=1))
    tmp.replace(path)


def load_dataset(path) -> Dataset:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != DATASET_FORMAT:
        raise DatasetError(f"unsupported dataset format {doc.get('format')!r}")
    ds = Dataset(
        features=_decode(doc["features"]).astype(np.float64),
        labels=_decode(doc["labels"]).astype(np.int64),
        meta=_decode(doc["meta"]).astype(np.float64),
        split=np.asarray(doc["split"]),
        class_counts=_decode(doc["class_counts"]).astype(np.int64),
        config=DatasetConfig(**doc["config"]),
        centers=_decode(doc["centers"]) if "centers" in doc else None,
    )
    if ds.fingerprint() != doc["fingerprint"]:
        raise DatasetError("dataset fingerprint mismatch; file is corrupted")
    return ds


def write_class_histogram(class_counts, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "count"])
        for c, n in enumerate(class_counts):
            w.writerow([c, int(n)])
