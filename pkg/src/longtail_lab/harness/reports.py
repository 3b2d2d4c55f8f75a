"""Ablation-table and class-histogram CSVs from run manifests."""
from __future__ import annotations

import csv
from pathlib import Path

ABLATION_COLUMNS = [
    "run",
    "dataset",
    "loss",
    "batch_size",
    "accumulate_steps",
    "epochs",
    "pretrain_epochs",
    "trainer",
    "pseudo_fraction",
    "tta_views",
    "use_meta",
    "seed",
    "macro_f1",
    "head_f1",
    "tail_f1",
    "val_macro_f1",
    "dataset_conflict",
]


def manifest_row(manifest: dict, name: str) -> dict:
    cfg = manifest["config"]
    final = manifest["metrics"]["final"]
    test = final.get("test_tta", final["test"])
    return {
        "run": name,
        "dataset": manifest["dataset"]["fingerprint"],
        "loss": cfg["loss"]["name"],
        "batch_size": cfg["batch_size"],
        "accumulate_steps": cfg["accumulate_steps"],
        "epochs": cfg["epochs"],
        "pretrain_epochs": cfg["pretrain_epochs"] if cfg["trainer"] != "supervised" else 0,
        "trainer": cfg["trainer"],
        "pseudo_fraction": cfg["pseudo_label_fraction"],
        "tta_views": cfg["tta"]["num_views"] if cfg["tta"]["enabled"] else 1,
        "use_meta": cfg["use_meta"],
        "seed": cfg["seed"],
        "macro_f1": test["macro"],
        "head_f1": test["head"],
        "tail_f1": test["tail"],
        "val_macro_f1": final["val"]["macro"],
        "dataset_conflict": False,
    }


def emit_reports(manifests: list[dict], out_dir, names: list[str] | None = None) -> dict[str, Path]:
    """Write ``ablation.csv`` and ``class_counts.csv``; returns their paths.

    Rows whose dataset fingerprint differs from the first manifest are
    marked in the ``dataset_conflict`` column.
    """
    if not manifests:
        raise ValueError("emit_reports needs at least one manifest")
    names = names or [f"run{i}" for i in range(len(manifests))]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = [manifest_row(m, n) for m, n in zip(manifests, names)]
    ref = rows[0]["dataset"]
    for r in rows:
        r["dataset_conflict"] = r["dataset"] != ref
    ablation = out / "ablation.csv"
    with open(ablation, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: "" if v is None else (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    hist = out / "class_counts.csv"
    with open(hist, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "count"])
        for c, n in enumerate(manifests[0]["dataset"]["class_counts"]):
            w.writerow([c, n])
    return {"ablation": ablation, "class_counts": hist}


def read_ablation(path) -> list[dict]:
    """Parse ``ablation.csv`` back into typed rows."""
    ints = {"batch_size", "accumulate_steps", "epochs", "pretrain_epochs", "tta_views", "seed"}
    floats = {"pseudo_fraction", "macro_f1", "head_f1", "tail_f1", "val_macro_f1"}
    bools = {"use_meta", "dataset_conflict"}
    out = []
    with open(path, newline="") as fh:
        for raw in csv.DictReader(fh):
            row = {}
            for k, v in raw.items():
                if k in ints:
                    row[k] = int(v)
                elif k in floats:
                    row[k] = None if v == "" else float(v)
                elif k in bools:
                    row[k] = v == "True"
                else:
                    row[k] = v
            out.append(row)
    return out
