"""Command-line front end: ``longtail-lab <command> ...``.

Verbosity is read from ``LONGTAIL_LAB_VERBOSITY`` (``quiet``, ``info`` or
``debug``; default ``quiet``).  Every command exits 0 on success and nonzero
with a one-line ``error [<stage>]: ...`` diagnostic on failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from ..datagen import Dataset, DatasetConfig, generate, load_dataset, save_dataset, write_class_histogram
from ..gradcheck import TOLERANCE, TRIALS, run_suite
from ..model import Model, load_checkpoint
from .config import RunConfig, load_config
from .metrics import macro_f1
from .pipeline import StageError, execute, model_config_for, write_json_atomic
from .postprocess import (
    PredictionSet,
    ensemble_max_logit,
    plain_predict,
    pseudo_label_select,
    read_predictions,
    tta_prediction_set,
    write_predictions,
)
from .reports import emit_reports

VERBOSITY_ENV = "LONGTAIL_LAB_VERBOSITY"
_LEVELS = {"quiet": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}

EXIT_OK = 0
EXIT_FAILED = 1  # a check ran and failed (e.g. gradcheck over tolerance)
EXIT_ERROR = 2  # a stage raised

log = logging.getLogger("longtail_lab")


class CliError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(message)
        self.stage = stage


def configure_logging() -> None:
    raw = os.environ.get(VERBOSITY_ENV, "quiet").strip().lower()
    level = _LEVELS.get(raw)
    if level is None:
        raise CliError("setup", f"{VERBOSITY_ENV}={raw!r}; expected one of {sorted(_LEVELS)}")
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)


# ---------------------------------------------------------------------------------------
# helpers


def _apply_overrides(doc: dict, overrides: list[str]) -> dict:
    """``key.sub=value`` assignments; values parse as JSON, else stay strings."""
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise CliError("config", f"override {item!r} is not key=value")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = doc
        parts = key.split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise CliError("config", f"override {key!r}: {p!r} is not a section")
            node = node[p]
        if parts[-1] not in node:
            raise CliError("config", f"override {key!r}: unknown key {parts[-1]!r}")
        node[parts[-1]] = value
    return doc


def _run_config(path: str | None, overrides: list[str]) -> RunConfig:
    try:
        cfg = load_config(path) if path else RunConfig()
        if overrides:
            cfg = RunConfig.from_dict(_apply_overrides(cfg.to_dict(), overrides))
        cfg.validate()
    except CliError:
        raise
    except (OSError, ValueError, TypeError) as exc:
        raise CliError("config", str(exc)) from exc
    return cfg


def _load_dataset(path: str | None, cfg: DatasetConfig) -> Dataset:
    if path is None:
        return generate(cfg)
    try:
        return load_dataset(path)
    except (OSError, ValueError, KeyError) as exc:
        raise CliError("dataset", f"{path}: {exc}") from exc


def _load_model(path: str) -> tuple[Model, RunConfig]:
    try:
        ck = load_checkpoint(path)
        cfg = RunConfig.from_dict(ck.config["run_config"])
    except (OSError, ValueError, KeyError) as exc:
        raise CliError("checkpoint", f"{path}: {exc}") from exc
    model = Model(model_config_for(cfg), seed=0)
    model.params = ck.params
    model.touch()
    return model, cfg


def _split(ds: Dataset, name: str) -> tuple[Dataset, np.ndarray]:
    rows = np.flatnonzero(ds.split == name)
    if rows.size == 0:
        raise CliError("dataset", f"split {name!r} is empty")
    return ds.take(rows), rows


def _score_line(label: str, report: dict) -> str:
    head = "nan" if report["head"] is None else f"{report['head']:.4f}"
    tail = "nan" if report["tail"] is None else f"{report['tail']:.4f}"
    return f"{label}: macro-F1 {report['macro']:.4f} (head {head}, tail {tail})"


def _labels_for(ds: Dataset, ps: PredictionSet) -> np.ndarray:
    if ps.sample_ids.min(initial=0) < 0 or ps.sample_ids.max(initial=-1) >= len(ds):
        raise CliError("predictions", "sample ids fall outside the dataset")
    return ds.labels[ps.sample_ids]


# ---------------------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    cfg = _run_config(args.config, args.set).dataset
    if args.seed is not None:
        cfg.seed = args.seed
    ds = generate(cfg)
    save_dataset(ds, args.out)
    if args.histogram:
        write_class_histogram(ds.class_counts, args.histogram)
    counts = {s: int((ds.split == s).sum()) for s in ("train", "val", "test")}
    print(f"wrote {args.out}: {len(ds)} samples {counts}, fingerprint {ds.fingerprint()}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _run_config(args.config, args.set)
    if args.out:
        cfg.output_dir = args.out
    ds = _load_dataset(args.dataset, cfg.dataset) if args.dataset else None
    _, manifest = execute(cfg, ds, resume=args.resume)
    final = manifest["metrics"]["final"]
    print(_score_line("val", final["val"]))
    print(_score_line("test", final.get("test_tta", final["test"])))
    if cfg.output_dir:
        print(f"outputs in {cfg.output_dir}")
    return EXIT_OK


def _predict(args, tta: bool) -> int:
    model, cfg = _load_model(args.checkpoint)
    ds = _load_dataset(args.dataset, cfg.dataset)
    part, rows = _split(ds, args.split)
    if tta:
        policy = cfg.tta.policy
        ps = tta_prediction_set(model, part.features, part.meta, policy, args.views, args.seed if args.seed is not None else cfg.seed, recenter_views=cfg.tta.recenter)
    else:
        ps = plain_predict(model, part.features, part.meta)
    ps.sample_ids = rows
    report = macro_f1(ps.pred, part.labels, ds.num_classes, ds.class_counts)
    if args.out:
        write_predictions(ps, args.out)
    print(_score_line(f"{args.split}{' (tta x%d)' % args.views if tta else ''}", report))
    if args.json:
        write_json_atomic({"split": args.split, "tta_views": args.views if tta else 1, "metrics": report}, args.json)
    return EXIT_OK


def cmd_eval(args) -> int:
    return _predict(args, tta=False)


def cmd_tta(args) -> int:
    if args.views < 1:
        raise CliError("tta", "--views must be >= 1")
    return _predict(args, tta=True)


def cmd_pseudo(args) -> int:
    ds = load_dataset(args.dataset)
    try:
        ps = read_predictions(args.predictions)
    except (OSError, ValueError) as exc:
        raise CliError("predictions", f"{args.predictions}: {exc}") from exc
    _labels_for(ds, ps)
    try:
        picked, labels = pseudo_label_select(ps, args.fraction)
    except ValueError as exc:
        raise CliError("pseudo", str(exc)) from exc
    rows = ps.sample_ids[picked]
    extra = ds.take(rows)
    # appended copies join the training split under their pseudo labels; the
    # original rows stay where they were so evaluation is unaffected
    out = Dataset(
        features=np.concatenate([ds.features, extra.features]),
        labels=np.concatenate([ds.labels, labels]),
        meta=np.concatenate([ds.meta, extra.meta]),
        split=np.concatenate([ds.split, np.full(len(rows), "train", dtype=ds.split.dtype)]),
        class_counts=ds.class_counts,
        config=ds.config,
        centers=ds.centers,
    )
    save_dataset(out, args.out)
    agree = float(np.mean(ds.labels[rows] == labels)) if len(rows) else float("nan")
    print(f"wrote {args.out}: +{len(rows)} pseudo-labeled samples (label agreement {agree:.3f})")
    return EXIT_OK


def cmd_ensemble(args) -> int:
    try:
        # run directories all hold a predictions.csv; name those by their directory
        sets = [read_predictions(p, Path(p).parent.name if Path(p).stem == "predictions" else None) for p in args.predictions]
        fused = ensemble_max_logit(sets, normalize=args.normalize, method=args.method)
    except (OSError, ValueError) as exc:
        raise CliError("ensemble", str(exc)) from exc
    if args.out:
        write_predictions(fused, args.out)
    if args.dataset:
        ds = load_dataset(args.dataset)
        labels = _labels_for(ds, fused)
        for ps in sets:
            print(_score_line(ps.model_id, macro_f1(ps.pred, labels, ds.num_classes, ds.class_counts)))
        print(_score_line(fused.model_id, macro_f1(fused.pred, labels, ds.num_classes, ds.class_counts)))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    unknown = set(args.only or ()) - set(TRIALS)
    if unknown:
        raise CliError("gradcheck", f"unknown checks {sorted(unknown)}; choose from {sorted(TRIALS)}")
    reports = run_suite(args.trials, args.seed, args.only)
    for r in reports:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name:<20} worst rel err {r.worst:.3e} over {r.trials} trials ({r.seconds:.1f}s)")
    ok = all(r.passed for r in reports)
    print(f"gradcheck: {'all pass' if ok else 'FAILED'} (tolerance {TOLERANCE:g})")
    return EXIT_OK if ok else EXIT_FAILED


def cmd_report(args) -> int:
    paths = [Path(p) for p in args.manifests]
    manifests = []
    for p in paths:
        if p.is_dir():
            p = p / "manifest.json"
        try:
            manifests.append(json.loads(p.read_text()))
        except (OSError, ValueError) as exc:
            raise CliError("report", f"{p}: {exc}") from exc
    names = [p.parent.name if p.name == "manifest.json" else p.stem for p in paths]
    out = emit_reports(manifests, args.out, names)
    print(f"wrote {out['ablation']} and {out['class_counts']}")
    return EXIT_OK


# ---------------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="longtail-lab", description="Long-tailed fine-grained classification lab.")
    sub = parser.add_subparsers(dest="command", required=True)

    def config_args(p):
        p.add_argument("--config", help="RunConfig JSON file (defaults when omitted)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config entry, e.g. loss.name=seesaw")

    p = sub.add_parser("generate", help="write a synthetic dataset file")
    config_args(p)
    p.add_argument("--seed", type=int, help="dataset seed (overrides the config)")
    p.add_argument("--out", required=True)
    p.add_argument("--histogram", help="also write a class-count CSV")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="run a pipeline; writes manifest, checkpoint and predictions")
    config_args(p)
    p.add_argument("--dataset", help="dataset file (generated from the config when omitted)")
    p.add_argument("--out", help="output directory (overrides output_dir)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    for name, func, help_ in (("eval", cmd_eval, "predict a split with a checkpoint"), ("tta", cmd_tta, "eval with test-time augmentation")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--dataset", help="dataset file (regenerated from the checkpoint config when omitted)")
        p.add_argument("--split", default="test", choices=("train", "val", "test"))
        p.add_argument("--out", help="prediction CSV to write")
        p.add_argument("--json", help="also write the metrics as JSON")
        if name == "tta":
            p.add_argument("--views", type=int, default=5)
            p.add_argument("--seed", type=int)
        p.set_defaults(func=func)

    p = sub.add_parser("pseudo", help="add top-confidence pseudo-labels to the training split")
    p.add_argument("--dataset", required=True)
    p.add_argument("--predictions", required=True)
    p.add_argument("--fraction", type=float, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pseudo)

    p = sub.add_parser("ensemble", help="max-logit fusion of prediction CSVs")
    p.add_argument("predictions", nargs="+")
    p.add_argument("--dataset", help="score the fused predictions against this dataset")
    p.add_argument("--normalize", action="store_true", help="log-softmax each model before fusing")
    p.add_argument("--method", default="max_logit", choices=("max_logit", "mean_prob"))
    p.add_argument("--out")
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--only", nargs="+", metavar="CHECK")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("report", help="ablation and class-count CSVs from manifests")
    p.add_argument("manifests", nargs="+", help="manifest files or run directories")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        configure_logging()
        return args.func(args)
    except CliError as exc:
        print(f"error [{exc.stage}]: {exc}", file=sys.stderr)
    except StageError as exc:
        print(f"error [{exc.stage}]: {exc.cause}", file=sys.stderr)
    except (OSError, ValueError) as exc:
        print(f"error [{args.command}]: {exc}", file=sys.stderr)
    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
