"""Result files: per-fold CSV, confusion matrices, JSON and text summaries, hypnogram plots."""
from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .signal_io.types import StageLabel

# reference values from the full-scale Sleep-EDF experiments; annotations only
REFERENCE_RESULTS = {
    "kd_acc": {
        "output+filterbank+lstm": 0.8652,
        "output": 0.8644,
        "filterbank": 0.8631,
        "lstm": 0.8626,
        "none": 0.8577,
    },
    "scenario_student_acc": {
        "Baseline-1C": 0.8457,
        "CDSC": 0.8561,
        "CDSC+CDCC": 0.8577,
        "CDSC+CDCC+SDSC+SDCC": 0.8652,
    },
    "scenario_teacher_acc": {"Baseline": 0.8627, "CDSC+CDCC": 0.8691},
    "single_channel": {"acc": 0.865, "mf1": 0.809, "kappa": 0.82, "acc_std": 0.0561},
}


@dataclass
class FoldMetrics:
    fold: int
    acc: float
    mf1: float
    kappa: float
    confusion: np.ndarray
    subjects: tuple[str, ...] = ()


def summarize(values: Sequence[float]) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else 0.0


def parse_summary_cell(cell: str) -> tuple[float, float]:
    mean, std = cell.split("±")
    return float(mean), float(std)


def emit_report(folds: Sequence[FoldMetrics], path, hypnograms: dict | None = None,
                per_subject: Sequence[FoldMetrics] | None = None) -> dict:
    """Write results.csv, confusion_fold_<i>.csv, summary.json, summary.txt (and plots).

    The CSV has one row per fold; with more than one fold a final ``summary``
    row holds ``mean±std`` cells (sample standard deviation, full precision).
    ``hypnograms`` maps a record name to (true stages, predicted stages).
    """
    if not folds:
        raise ValueError("no results")
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc}") from exc
    if not os.access(path, os.W_OK):
        raise OSError(f"cannot write report to {path}: not writable")

    stats = {k: summarize([getattr(f, k) for f in folds]) for k in ("acc", "mf1", "kappa")}
    with open(os.path.join(path, "results.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["fold", "acc", "mf1", "kappa"])
        for fm in folds:
            w.writerow([fm.fold, repr(float(fm.acc)), repr(float(fm.mf1)), repr(float(fm.kappa))])
        if len(folds) > 1:
            w.writerow(["summary"] + [f"{stats[k][0]!r}±{stats[k][1]!r}" for k in ("acc", "mf1", "kappa")])

    for fm in folds:
        np.savetxt(os.path.join(path, f"confusion_fold_{fm.fold}.csv"), np.asarray(fm.confusion, dtype=np.int64),
                   fmt="%d", delimiter=",")

    summary = {
        "n_folds": len(folds),
        "per_fold": {k: {"mean": stats[k][0], "std": stats[k][1]} for k in stats},
        "folds": [{"fold": fm.fold, "acc": fm.acc, "mf1": fm.mf1, "kappa": fm.kappa,
                   "subjects": list(fm.subjects)} for fm in folds],
        "reference": REFERENCE_RESULTS["single_channel"],
    }
    if per_subject:
        summary["per_subject"] = {
            k: dict(zip(("mean", "std"), summarize([getattr(s, k) for s in per_subject]))) for k in stats
        }
    with open(os.path.join(path, "summary.json"), "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)

    lines = [f"{'fold':>8}  {'ACC':>8}  {'MF1':>8}  {'kappa':>8}"]
    for fm in folds:
        lines.append(f"{fm.fold:>8}  {fm.acc:8.4f}  {fm.mf1:8.4f}  {fm.kappa:8.4f}")
    lines.append("{:>8}  {}".format("mean±sd", "  ".join(f"{m:.4f}±{s:.4f}" for m, s in stats.values())))
    if per_subject:
        ps = summary["per_subject"]
        lines.append("per-subject sd: " + ", ".join(f"{k} {ps[k]['std']:.4f}" for k in ps))
    ref = REFERENCE_RESULTS["single_channel"]
    lines.append(f"reference (full-scale Sleep-EDF, 20-fold): ACC {ref['acc']:.3f}, MF1 {ref['mf1']:.3f}, "
                 f"kappa {ref['kappa']:.2f}")
    with open(os.path.join(path, "summary.txt"), "w") as f:
        f.write("\n".join(lines) + "\n")

    if hypnograms:
        plot_hypnograms(hypnograms, path)
    return summary


def plot_hypnograms(hypnograms: dict, path) -> list[str]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    # display order top to bottom: W, REM, N1, N2, N3
    level = {0: 4, 4: 3, 1: 2, 2: 1, 3: 0}
    written = []
    for name, (truth, pred) in hypnograms.items():
        fig, ax = plt.subplots(figsize=(10, 3))
        t = np.arange(len(truth)) * 0.5  # minutes
        ax.step(t, [level[int(s)] for s in truth], where="post", label="scored", lw=1.2)
        ax.step(t, [level[int(s)] + 0.1 for s in pred], where="post", label="predicted", lw=0.9, alpha=0.8)
        ax.set_yticks([4, 3, 2, 1, 0])
        ax.set_yticklabels([StageLabel(k).short for k in (0, 4, 1, 2, 3)])
        ax.set_xlabel("minutes")
        ax.set_title(str(name))
        ax.legend(loc="upper right", fontsize=8)
        fig.tight_layout()
        out = os.path.join(path, f"hypnogram_{name}.png")
        fig.savefig(out, dpi=100)
        plt.close(fig)
        written.append(out)
    return written
