"""End-to-end run: data, optional SSL stage, supervised stage, pseudo-labels, evaluation.

Stage order is ``pretrain`` (MoCo pretraining or SimCLR joint training),
``train`` (supervised training or fine-tuning) and ``pseudo`` (fine-tuning on
train + pseudo-labeled test samples).  Every epoch draws its randomness from
``SeededRng(seed).child("<stage>/<epoch>")``, so a run restored from an
epoch-boundary checkpoint continues bit-identically.
"""
from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import __version__
from ..contrastive import make_key_model, moco_pretrain_epoch, simclr_joint_epoch
from ..datagen import Dataset, generate
from ..losses import SeesawState
from ..model import Checkpoint, Model, ModelConfig, OptimizerState, load_checkpoint, save_checkpoint
from ..numerics import SeededRng
from ..training import Batch, make_batches, supervised_epoch
from .config import RunConfig
from .metrics import macro_f1
from .postprocess import PredictionSet, plain_predict, pseudo_label_select, tta_prediction_set, write_predictions

log = logging.getLogger(__name__)

MANIFEST_FORMAT = "longtail-lab-manifest/1"


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def model_config_for(cfg: RunConfig) -> ModelConfig:
    ds = cfg.dataset
    return ModelConfig(
        feature_dim=ds.feature_dim,
        meta_dim=ds.num_meta_categories,
        hidden=cfg.hidden,
        embed_dim=cfg.embed_dim,
        num_classes=ds.num_classes,
        head=cfg.loss.head,
        arcface_scale=cfg.loss.arcface.scale_s,
        use_meta=cfg.use_meta,
    )


@dataclass
class Stage:
    name: str
    epochs: int


class Pipeline:
    def __init__(self, cfg: RunConfig, dataset: Dataset | None = None):
        cfg.validate()
        self.cfg = cfg
        self.data = dataset if dataset is not None else generate(cfg.dataset)
        self.train = self.data.subset("train")
        self.val = self.data.subset("val")
        self.test = self.data.subset("test")
        self.root = SeededRng(cfg.seed)
        self.model = Model(model_config_for(cfg), seed=self.root.child("init").next_u64())
        self.key: Model | None = make_key_model(self.model) if cfg.trainer == "moco_then_finetune" else None
        self.seesaw = SeesawState.zeros(self.data.num_classes) if cfg.loss.name == "seesaw" else None
        self.stages = self._plan()
        self.position = (0, 0)  # (stage index, next epoch)
        self.opt: OptimizerState | None = None
        self.pseudo_index: np.ndarray | None = None
        self.pseudo_labels: np.ndarray | None = None
        self.history: list[dict] = []
        self.initial_metrics = self.evaluate()

    def _plan(self) -> list[Stage]:
        cfg = self.cfg
        stages = []
        if cfg.trainer != "supervised" and cfg.pretrain_epochs > 0:
            stages.append(Stage("pretrain", cfg.pretrain_epochs))
        stages.append(Stage("train", cfg.epochs))
        if cfg.pseudo_label_fraction > 0 and cfg.pseudo_epochs > 0:
            stages.append(Stage("pseudo", cfg.pseudo_epochs))
        return stages

    # data for a stage ----------------------------------------------------------------
    def _labeled(self, stage: str):
        x, m, y = self.train.features, self.train.meta, self.train.labels
        if stage == "pseudo" and self.pseudo_index is not None and self.pseudo_index.size:
            t = self.test
            x = np.concatenate([x, t.features[self.pseudo_index]])
            m = np.concatenate([m, t.meta[self.pseudo_index]])
            y = np.concatenate([y, self.pseudo_labels])
        return x, m, y

    def _unlabeled(self):
        if self.cfg.trainer == "moco_then_finetune":
            return np.concatenate([self.train.features, self.test.features]), np.concatenate([self.train.meta, self.test.meta])
        return self.test.features, self.test.meta

    def _steps_per_epoch(self, stage: str) -> int:
        n = len(self._labeled(stage)[0])
        if stage == "pretrain" and self.cfg.trainer == "moco_then_finetune":
            n = len(self._unlabeled()[0])
            return max(1, n // self.cfg.batch_size)
        return math.ceil(n / self.cfg.batch_size)

    def _new_optimizer(self, stage: Stage) -> OptimizerState:
        cfg = self.cfg
        micro = self._steps_per_epoch(stage.name) * stage.epochs
        return OptimizerState(
            base_lr=cfg.base_lr,
            weight_decay=cfg.weight_decay,
            total_steps=max(1, math.ceil(micro / cfg.accumulate_steps)),
            batch_size=cfg.batch_size * cfg.accumulate_steps,
            accumulate_steps=cfg.accumulate_steps,
        )

    def _start_stage(self, stage: Stage) -> None:
        self.opt = self._new_optimizer(stage)
        if stage.name == "pseudo":
            preds = plain_predict(self.model, self.test.features, self.test.meta)
            self.pseudo_index, self.pseudo_labels = pseudo_label_select(preds, self.cfg.pseudo_label_fraction)

    # epochs ----------------------------------------------------------------------------
    def _run_epoch(self, stage: Stage, epoch: int) -> dict:
        cfg = self.cfg
        rng = self.root.child(f"{stage.name}/{epoch}")
        x, m, y = self._labeled(stage.name)
        record = {"stage": stage.name, "epoch": epoch}
        if stage.name == "pretrain" and cfg.trainer == "moco_then_finetune":
            ux, um = self._unlabeled()
            batches = make_batches(ux, um, None, cfg.batch_size, rng.child("shuffle"), drop_last=True)
            record["train_loss"] = moco_pretrain_epoch(self.model, self.key, batches, cfg.contrastive, self.opt, rng.child("ssl"), cfg.ssl_augment)
        elif stage.name == "pretrain":
            ux, um = self._unlabeled()
            labeled = make_batches(x, m, y, cfg.batch_size, rng.child("shuffle"))
            unlabeled = make_batches(ux, um, None, cfg.batch_size, rng.child("shuffle-unlabeled"), drop_last=True)
            parts = simclr_joint_epoch(
                self.model, labeled, unlabeled, cfg.contrastive, cfg.joint, cfg.loss, self.opt,
                rng.child("train"), rng.child("ssl"), cfg.ssl_augment, cfg.augment, self.seesaw,
            )
            record.update(train_loss=parts["joint"], sup_loss=parts["sup"], self_loss=parts["self"])
        else:
            batches = make_batches(x, m, y, cfg.batch_size, rng.child("shuffle"))
            trainable = ("cls.",) if cfg.freeze_encoder_finetune and cfg.trainer != "supervised" else None
            record["train_loss"] = supervised_epoch(self.model, batches, cfg.loss, self.opt, rng.child("train"), self.seesaw, cfg.augment, trainable)
        record["val_macro_f1"] = self.score(self.val)["macro"]
        return record

    def advance(self, max_epochs: int | None = None) -> bool:
        """Run epochs until done or ``max_epochs`` have run; True when the plan is complete."""
        done = 0
        while self.position[0] < len(self.stages):
            s_idx, epoch = self.position
            stage = self.stages[s_idx]
            if epoch >= stage.epochs:
                self.position = (s_idx + 1, 0)
                self.opt = None
                continue
            if max_epochs is not None and done >= max_epochs:
                return False
            try:
                if epoch == 0 and self.opt is None:
                    self._start_stage(stage)
                record = self._run_epoch(stage, epoch)
            except Exception as exc:  # noqa: BLE001 - re-raised with the stage name
                raise StageError(stage.name, exc) from exc
            self.history.append(record)
            log.info("%s epoch %d: loss %.4f val macro-F1 %.4f", stage.name, epoch, record["train_loss"], record["val_macro_f1"])
            self.position = (s_idx, epoch + 1)
            done += 1
        return True

    # evaluation --------------------------------------------------------------------------
    def predictions(self, split: Dataset, tta: bool = False) -> PredictionSet:
        if tta:
            t = self.cfg.tta
            return tta_prediction_set(self.model, split.features, split.meta, t.policy, t.num_views, self.cfg.seed, recenter_views=t.recenter)
        return plain_predict(self.model, split.features, split.meta)

    def test_predictions(self, tta: bool = False) -> PredictionSet:
        """Test-split predictions keyed by row index in the full dataset."""
        ps = self.predictions(self.test, tta)
        ps.sample_ids = np.flatnonzero(self.data.split == "test")
        return ps

    def score(self, split: Dataset, tta: bool = False) -> dict:
        return macro_f1(self.predictions(split, tta).pred, split.labels, self.data.num_classes, self.data.class_counts)

    def evaluate(self) -> dict:
        out = {"val": self.score(self.val), "test": self.score(self.test)}
        if self.cfg.tta.enabled:
            out["test_tta"] = self.score(self.test, tta=True)
        return out

    # persistence ---------------------------------------------------------------------------
    def save_state(self, path) -> None:
        extra = {}
        if self.key is not None:
            extra.update({f"key/{k}": v for k, v in self.key.params.items()})
        if self.seesaw is not None:
            extra["seesaw_counts"] = self.seesaw.counts.astype(np.float64)
        if self.pseudo_index is not None:
            extra["pseudo_index"] = self.pseudo_index.astype(np.float64)
            extra["pseudo_labels"] = self.pseudo_labels.astype(np.float64)
        header = {
            "run_config": self.cfg.to_dict(),
            "position": list(self.position),
            "history": self.history,
            "dataset_fingerprint": self.data.fingerprint(),
        }
        save_checkpoint(path, Checkpoint(self.model.params, self.opt, self.root.get_state(), header, extra))

    @classmethod
    def resume(cls, path, cfg: RunConfig | None = None, dataset: Dataset | None = None) -> "Pipeline":
        ck = load_checkpoint(path)
        cfg = cfg or RunConfig.from_dict(ck.config["run_config"])
        pipe = cls(cfg, dataset)
        if ck.config.get("dataset_fingerprint") not in (None, pipe.data.fingerprint()):
            raise ValueError("checkpoint was written for a different dataset")
        pipe.model.params = ck.params
        pipe.model.touch()
        pipe.opt = ck.optimizer
        pipe.position = tuple(ck.config["position"])
        pipe.history = list(ck.config["history"])
        extra = ck.extra_arrays
        if pipe.key is not None:
            pipe.key.params = {k[4:]: v for k, v in extra.items() if k.startswith("key/")}
            pipe.key.touch()
        if pipe.seesaw is not None and "seesaw_counts" in extra:
            pipe.seesaw.counts = extra["seesaw_counts"].astype(np.int64)
        if "pseudo_index" in extra:
            pipe.pseudo_index = extra["pseudo_index"].astype(np.int64)
            pipe.pseudo_labels = extra["pseudo_labels"].astype(np.int64)
        return pipe

    def manifest(self, wall_clock: float, status: str = "complete", error: str | None = None) -> dict:
        final = self.evaluate()
        doc = {
            "format": MANIFEST_FORMAT,
            "code_version": __version__,
            "status": status,
            "config": self.cfg.to_dict(),
            "dataset": {
                "fingerprint": self.data.fingerprint(),
                "class_counts": self.data.class_counts.tolist(),
            },
            "metrics": {
                "untrained": self.initial_metrics,
                "history": self.history,
                "final": final,
                "test_macro_f1": final.get("test_tta", final["test"])["macro"],
            },
            "wall_clock_seconds": wall_clock,
        }
        if error:
            doc["error"] = error
        return doc


def write_json_atomic(doc: dict, path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(doc, indent=2, sort_keys=True))
    os.replace(tmp, path)


def execute(cfg: RunConfig, dataset: Dataset | None = None, resume: str | Path | None = None) -> tuple[Pipeline, dict]:
    """Run the configured pipeline; persists outputs when ``cfg.output_dir`` is set."""
    t0 = time.perf_counter()
    pipe = Pipeline.resume(resume, cfg, dataset) if resume else Pipeline(cfg, dataset)
    out = Path(cfg.output_dir) if cfg.output_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    try:
        pipe.advance()
    except StageError as exc:
        if out:
            write_json_atomic(pipe.manifest(time.perf_counter() - t0, "incomplete", str(exc)), out / "manifest.json")
        raise
    doc = pipe.manifest(time.perf_counter() - t0)
    if out:
        pipe.save_state(out / "checkpoint.ckpt")
        write_predictions(pipe.test_predictions(cfg.tta.enabled), out / "predictions.csv")
        write_json_atomic(doc, out / "manifest.json")
    return pipe, doc


def run(cfg: RunConfig, dataset: Dataset | None = None, resume: str | Path | None = None) -> dict:
    return execute(cfg, dataset, resume)[1]
