"""CSV and JSON emission for attack reports, curves, and experiment bundles."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .attacks import AttackReport


def write_csv(path, header, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(header)
        for row in rows:
            w.writerow(["" if v is None else v for v in row])
    return path


def attack_report_basename(report: AttackReport) -> str:
    return f"attack_{report.scheme}_{report.attack}_seed{report.seed}"


def write_attack_report(report: AttackReport, out_dir) -> dict:
    """CSV of per-checkpoint rows, JSON summary with threshold crossings,
    and the feature snapshots the rows were computed from."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    base = attack_report_basename(report)
    csv_path = write_csv(out_dir / f"{base}.csv",
                         ["step", "lr", "accuracy", "ber", "embedding_loss"],
                         [(r["step"], r["lr"], r["accuracy"], r["ber"],
                           r["embedding_loss"]) for r in report.rows])
    json_path = out_dir / f"{base}.json"
    json_path.write_text(json.dumps(report.summary(), indent=2, sort_keys=True) + "\n")
    npz_path = out_dir / f"{base}_checkpoints.npz"
    np.savez_compressed(npz_path,
                        steps=np.array([r["step"] for r in report.rows]),
                        features=np.stack(report.snapshots))
    return {"csv": str(csv_path), "json": str(json_path), "checkpoints": str(npz_path)}


def write_embed_curves(result, out_dir, name="embed_curves") -> Path:
    rows = [(r["epoch"], r["task_loss"], r["wm_loss"], r["det_loss"],
             r["test_accuracy"], r["ber"]) for r in result.curves]
    return write_csv(Path(out_dir) / f"{name}.csv",
                     ["epoch", "task_loss", "wm_loss", "det_loss",
                      "test_accuracy", "ber"], rows)


def write_detection_curve(curve, out_dir, name) -> Path:
    return write_csv(Path(out_dir) / f"{name}.csv",
                     ["epoch", "heldout_accuracy"],
                     [(i + 1, a) for i, a in enumerate(curve)])


def write_prune_curve(entries, out_dir, name="prune_curve") -> Path:
    """entries: (ratio, order, accuracy, ber, embedding_loss) per ratio."""
    return write_csv(Path(out_dir) / f"{name}.csv",
                     ["ratio", "order", "accuracy", "ber", "embedding_loss"],
                     entries)


def write_failure_record(out_dir, stage: str, error: Exception) -> Path:
    import traceback
    path = Path(out_dir) / "failure.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({
        "stage": stage,
        "error": f"{type(error).__name__}: {error}",
        "traceback": traceback.format_exc(),
    }, indent=2) + "\n")
    return path
