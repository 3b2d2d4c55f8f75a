"""Multi-seed desk-scale comparisons shared by the acceptance suite and scripts/.

Every run uses ``cfg.seed = cfg.dataset.seed = seed`` unless a member config
pins its own model seed, so comparisons across arms are paired per seed.
"""
from __future__ import annotations

import copy
import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..training import LossSpec
from .config import RunConfig
from .metrics import macro_f1
from .pipeline import Pipeline
from .postprocess import ensemble_max_logit

SEEDS = (0, 1, 2, 3, 4)


def seeded_config(seed: int, model_seed: int | None = None, **overrides) -> RunConfig:
    loss = overrides.pop("loss", None)
    dataset = overrides.pop("dataset", {})
    cfg = RunConfig(seed=seed if model_seed is None else model_seed, **overrides)
    cfg.dataset.seed = seed
    for k, v in dataset.items():
        setattr(cfg.dataset, k, v)
    if loss is not None:
        cfg.loss = LossSpec(name=loss) if isinstance(loss, str) else copy.deepcopy(loss)
    cfg.validate()
    return cfg


@dataclass
class RunResult:
    seed: int
    test: dict
    val: dict
    seconds: float
    history: list = field(default_factory=list)
    pipeline: Pipeline | None = None


def run_one(seed: int, model_seed: int | None = None, keep: bool = False, **overrides) -> RunResult:
    cfg = seeded_config(seed, model_seed, **overrides)
    t0 = time.perf_counter()
    pipe = Pipeline(cfg)
    pipe.advance()
    final = pipe.evaluate()
    return RunResult(seed, final["test"], final["val"], time.perf_counter() - t0, pipe.history, pipe if keep else None)


def run_arm(seeds=SEEDS, **overrides) -> list[RunResult]:
    return [run_one(s, **overrides) for s in seeds]


def mean_of(results: list[RunResult], key: str = "macro") -> float:
    return float(np.mean([r.test[key] for r in results]))


# -- comparisons -----------------------------------------------------------------------------------


def loss_ablation(seeds=SEEDS, losses=("soft_target_ce", "arcface", "seesaw")) -> dict[str, list[RunResult]]:
    return {name: run_arm(seeds, loss=name) for name in losses}


def meta_ablation(seeds=SEEDS, fidelity: float = 0.9) -> dict[str, list[RunResult]]:
    ds = {"meta_fidelity": fidelity}
    return {"meta": run_arm(seeds, use_meta=True, dataset=ds), "no_meta": run_arm(seeds, use_meta=False, dataset=ds)}


# the joint arm sees labeled batches in all 20 + 10 epochs, matching 30 supervised epochs
SSL_SUPERVISED = dict(trainer="supervised", epochs=30)
SSL_SIMCLR = dict(trainer="simclr_joint", pretrain_epochs=20, epochs=10)
SSL_MOCO = dict(trainer="moco_then_finetune", pretrain_epochs=10, epochs=20)


def ssl_comparison(seeds=SEEDS) -> dict[str, list[RunResult]]:
    return {"supervised": run_arm(seeds, **SSL_SUPERVISED), "simclr_joint": run_arm(seeds, **SSL_SIMCLR)}


def moco_loss_curves(seeds=SEEDS) -> dict[int, list[float]]:
    out = {}
    for r in run_arm(seeds, **SSL_MOCO):
        out[r.seed] = [h["train_loss"] for h in r.history if h["stage"] == "pretrain"]
    return out


PSEUDO_FRACTIONS = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)


def pseudo_sweep(seeds=SEEDS, fractions=PSEUDO_FRACTIONS) -> dict[float, list[RunResult]]:
    return {f: run_arm(seeds, pseudo_label_fraction=f) for f in fractions}


def write_pseudo_table(sweep: dict[float, list[RunResult]], path) -> Path:
    """One row per fraction: ``+N%`` label, per-seed macro-F1, mean and delta to the no-pseudo row."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    base = mean_of(sweep[0.0]) if 0.0 in sweep else None
    seeds = [r.seed for r in next(iter(sweep.values()))]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pseudo_labels", "fraction", *[f"seed{s}" for s in seeds], "mean_macro_f1", "delta_vs_none"])
        for frac, results in sweep.items():
            label = "none" if frac == 0 else f"+{round(frac * 100)}%"
            mean = mean_of(results)
            delta = "" if base is None else f"{mean - base:+.4f}"
            w.writerow([label, frac, *[f"{r.test['macro']:.4f}" for r in results], f"{mean:.4f}", delta])
    return path


# ensemble members: same loss, different model seeds and training recipes
ENSEMBLE_MEMBERS = (
    dict(loss="seesaw", hidden=(128,)),
    dict(loss="seesaw", hidden=(128,), trainer="simclr_joint", pretrain_epochs=20, epochs=10),
    dict(loss="seesaw", hidden=(128,), pseudo_label_fraction=0.2),
)


@dataclass
class EnsembleTrial:
    seed: int
    singles: list[float]
    fused: float

    @property
    def best_single(self) -> float:
        return max(self.singles)


def ensemble_trial(seed: int, members=ENSEMBLE_MEMBERS, normalize: bool = False, method: str = "max_logit") -> EnsembleTrial:
    pipes = [run_one(seed, model_seed=seed * 10 + i + 1, keep=True, **copy.deepcopy(m)).pipeline for i, m in enumerate(members)]
    data = pipes[0].data
    sets = [p.test_predictions() for p in pipes]
    labels = data.labels[sets[0].sample_ids]

    def score(ps):
        return macro_f1(ps.pred, labels, data.num_classes, data.class_counts)["macro"]

    fused = ensemble_max_logit(sets, normalize=normalize, method=method)
    return EnsembleTrial(seed, [score(s) for s in sets], score(fused))


def tta_comparison(seeds=SEEDS, num_views: int = 5, **overrides) -> list[tuple[float, float]]:
    """``(plain, tta)`` test macro-F1 per seed for the same trained model."""
    out = []
    for s in seeds:
        cfg = seeded_config(s, **overrides)
        cfg.tta.enabled = True
        cfg.tta.num_views = num_views
        pipe = Pipeline(cfg)
        pipe.advance()
        out.append((pipe.score(pipe.test)["macro"], pipe.score(pipe.test, tta=True)["macro"]))
    return out
