"""Evaluation metrics, report files, and report figures.

Reports are written in three forms next to the checkpoint they describe:
a flat ``key = value`` text file, a JSON document with the same keys, and
a ``k,cs_percent`` CSV of the cumulative-score curve with a rendered PNG
alongside it.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import DomainError
from .model import GlcnnModel, forward
from .ordinal import RankSpec, decode_batch, monotonicity_violation_rate


def mae(pred_ages: np.ndarray, true_ages: np.ndarray) -> float:
    """Mean absolute error in years."""
    pred = np.asarray(pred_ages, dtype=np.float64)
    true = np.asarray(true_ages, dtype=np.float64)
    if pred.shape != true.shape:
        raise DomainError(f"mae: shape mismatch {pred.shape} vs {true.shape}")
    if pred.size == 0:
        raise DomainError("mae: empty input")
    return float(np.abs(pred - true).mean())


def cs(pred_ages: np.ndarray, true_ages: np.ndarray, k: float) -> float:
    """Percentage of samples with absolute error at most k years."""
    if k < 0:
        raise DomainError(f"cs: k must be >= 0, got {k}")
    pred = np.asarray(pred_ages, dtype=np.float64)
    true = np.asarray(true_ages, dtype=np.float64)
    if pred.shape != true.shape:
        raise DomainError(f"cs: shape mismatch {pred.shape} vs {true.shape}")
    if pred.size == 0:
        raise DomainError("cs: empty input")
    return float((np.abs(pred - true) <= k).mean() * 100.0)


def gender_accuracy(pred_probs: np.ndarray, truths: np.ndarray) -> float:
    """Percentage of correct gender calls; 0.5 counts as class 1."""
    probs = np.asarray(pred_probs, dtype=np.float64)
    truth = np.asarray(truths, dtype=np.float64)
    if probs.shape != truth.shape:
        raise DomainError(
            f"gender_accuracy: shape mismatch {probs.shape} vs {truth.shape}")
    if probs.size == 0:
        raise DomainError("gender_accuracy: empty input")
    if (probs < 0).any() or (probs > 1).any():
        raise DomainError("gender_accuracy: probabilities must lie in [0, 1]")
    return float(((probs >= 0.5) == (truth > 0.5)).mean() * 100.0)


@dataclass(frozen=True)
class EvalReport:
    mae: float
    cs_curve: dict[int, float]
    monotonicity_violation_rate: float | None
    gender_accuracy: float | None
    n: int


def evaluate_model(model: GlcnnModel, images: np.ndarray, ages: np.ndarray,
                   rank_spec: RankSpec, genders: np.ndarray | None = None,
                   cs_max: int = 15, batch_size: int = 256) -> EvalReport:
    """Score a model on a labelled image set (eval mode, no dropout)."""
    preds = []
    probs = []
    gender_probs = []
    for start in range(0, images.shape[0], batch_size):
        fwd = forward(model, images[start:start + batch_size], mode="eval")
        if model.config.head_mode == "ordinal":
            probs.append(fwd.outputs)
            preds.append(decode_batch(fwd.outputs, rank_spec))
        else:
            preds.append(fwd.outputs[:, 0])
        if fwd.gender is not None:
            gender_probs.append(fwd.gender[:, 0])
    pred_ages = np.concatenate(preds)
    curve = {k: cs(pred_ages, ages, k) for k in range(cs_max + 1)}
    violation = None
    if probs:
        violation = monotonicity_violation_rate(np.concatenate(probs))
    acc = None
    if gender_probs and genders is not None:
        acc = gender_accuracy(np.concatenate(gender_probs), genders)
    return EvalReport(mae=mae(pred_ages, ages), cs_curve=curve,
                      monotonicity_violation_rate=violation,
                      gender_accuracy=acc, n=int(images.shape[0]))


def report_lines(report: EvalReport) -> list[str]:
    """Flat ``key = value`` rendering with stable key names."""
    lines = [f"n = {report.n}", f"mae_years = {report.mae!r}"]
    for k in sorted(report.cs_curve):
        lines.append(f"cs_k{k} = {report.cs_curve[k]!r}")
    if report.monotonicity_violation_rate is not None:
        lines.append(
            f"monotonicity_violation_rate = {report.monotonicity_violation_rate!r}")
    if report.gender_accuracy is not None:
        lines.append(f"gender_accuracy = {report.gender_accuracy!r}")
    return lines


def write_report(report: EvalReport, out_dir: str,
                 stem: str = "eval_report") -> dict[str, str]:
    """Write text, JSON, CS-curve CSV, and CS-curve PNG; returns the paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "txt": os.path.join(out_dir, f"{stem}.txt"),
        "json": os.path.join(out_dir, f"{stem}.json"),
        "csv": os.path.join(out_dir, "cs_curve.csv"),
        "png": os.path.join(out_dir, "cs_curve.png"),
    }
    with open(paths["txt"], "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(report_lines(report)) + "\n")
    doc = {
        "n": report.n,
        "mae_years": report.mae,
        "cs_curve": {str(k): v for k, v in sorted(report.cs_curve.items())},
        "monotonicity_violation_rate": report.monotonicity_violation_rate,
        "gender_accuracy": report.gender_accuracy,
    }
    with open(paths["json"], "w", encoding="utf-8", newline="\n") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")
    ks = sorted(report.cs_curve)
    with open(paths["csv"], "w", encoding="utf-8", newline="\n") as f:
        f.write("k,cs_percent\n")
        for k in ks:
            f.write(f"{k},{report.cs_curve[k]!r}\n")
    _plot_cs_curve(report, paths["png"])
    return paths


def _plot_cs_curve(report: EvalReport, png_path: str) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ks = sorted(report.cs_curve)
    values = [report.cs_curve[k] for k in ks]
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    ax.plot(ks, values, marker="o", markersize=3.5)
    ax.set_xlabel("error tolerance k (years)")
    ax.set_ylabel("cumulative score (%)")
    ax.set_ylim(0, 102)
    ax.grid(True, alpha=0.3)
    ax.set_title(f"CS curve (MAE {report.mae:.2f} y, n={report.n})")
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
