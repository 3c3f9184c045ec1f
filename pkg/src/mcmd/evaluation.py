"""Sleep-staging metrics and per-epoch aggregation of overlapping sequence outputs."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch

from .model import N_CLASSES, SeqSleepNet


@dataclass
class MetricsReport:
    accuracy: float
    macro_f1: float
    kappa: float
    confusion: np.ndarray  # rows truth, columns prediction
    n_epochs_scored: int
    per_class_f1: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "acc": self.accuracy,
            "mf1": self.macro_f1,
            "kappa": self.kappa,
            "n_epochs_scored": self.n_epochs_scored,
            "per_class_f1": self.per_class_f1,
            "confusion": self.confusion.tolist(),
        }


def confusion_matrix(pred: Sequence[int], truth: Sequence[int], n_classes: int = N_CLASSES) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(truth, dtype=np.int64), np.asarray(pred, dtype=np.int64)), 1)
    return cm


def metrics_from_confusion(cm: np.ndarray) -> MetricsReport:
    cm = np.asarray(cm, dtype=np.int64)
    n = int(cm.sum())
    if n == 0:
        raise ValueError("cannot score an empty confusion matrix")
    tp = np.diag(cm).astype(float)
    pred_tot = cm.sum(axis=0).astype(float)
    true_tot = cm.sum(axis=1).astype(float)
    f1s = []
    present = []
    for k in range(cm.shape[0]):
        denom = pred_tot[k] + true_tot[k]
        f1s.append(2 * tp[k] / denom if denom > 0 else 0.0)
        present.append(denom > 0)
    present_f1 = [f for f, p in zip(f1s, present) if p]
    p_o = tp.sum() / n
    p_e = float(np.dot(pred_tot / n, true_tot / n))
    if p_e == 1.0:
        kappa = 1.0 if p_o == 1.0 else 0.0
    else:
        kappa = (p_o - p_e) / (1 - p_e)
    return MetricsReport(
        accuracy=float(p_o),
        macro_f1=float(np.mean(present_f1)),
        kappa=float(kappa),
        confusion=cm,
        n_epochs_scored=n,
        per_class_f1=[float(f) for f in f1s],
    )


def compute_metrics(pred: Sequence[int], truth: Sequence[int]) -> MetricsReport:
    """Accuracy, macro-F1 over classes seen in pred or truth, and Cohen's kappa."""
    pred, truth = list(pred), list(truth)
    if len(pred) != len(truth):
        raise ValueError(f"length mismatch: {len(pred)} predictions vs {len(truth)} labels")
    if not pred:
        raise ValueError("cannot score empty predictions")
    return metrics_from_confusion(confusion_matrix([int(p) for p in pred], [int(t) for t in truth]))


def aggregate_predictions(
    sequences: Iterable[tuple[Sequence[int], np.ndarray]],
    epochs: Sequence[int] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Average class probabilities of every epoch over all sequences covering it.

    ``sequences`` yields (epoch ids, probs of shape (len, 5)). Returns sorted
    epoch ids and their renormalized mean probabilities. Raises if any id in
    ``epochs`` is not covered.
    """
    acc: dict[int, list[np.ndarray]] = defaultdict(list)
    for ids, probs in sequences:
        probs = np.asarray(probs, dtype=np.float64)
        for e, p in zip(ids, probs):
            acc[int(e)].append(p)
    if epochs is not None:
        missing = sorted(set(int(e) for e in epochs) - set(acc))
        if missing:
            raise ValueError(f"epochs not covered by any sequence: {missing[:10]}")
    ids = np.array(sorted(acc), dtype=np.int64)
    out = np.empty((len(ids), N_CLASSES))
    for i, e in enumerate(ids):
        m = np.mean(np.stack(acc[int(e)]), axis=0)
        out[i] = m / m.sum()
    return ids, out


def predict_labels(probs: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. the lowest class index on ties
    return np.argmax(probs, axis=-1)


@torch.no_grad()
def predict_set(model: SeqSleepNet, seqset, view: str, batch_size: int = 64) -> dict[int, tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Per-part (epoch ids, aggregated probs, labels) for every part of ``seqset``."""
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    by_len: dict[int, list[int]] = defaultdict(list)
    for w, (_, _, n) in enumerate(seqset.windows):
        by_len[n].append(w)
    per_part: dict[int, list] = defaultdict(list)
    for n, ws in sorted(by_len.items()):
        for b in range(0, len(ws), batch_size):
            chunk = ws[b:b + batch_size]
            x, _ = seqset.batch(chunk, view)
            probs, _ = model(torch.as_tensor(x, dtype=dtype))
            probs = probs.double().numpy()
            for w, p in zip(chunk, probs):
                i, pos, n_ = seqset.windows[w]
                per_part[i].append((seqset.epoch_index[i][pos:pos + n_], p))
    model.train(was_training)
    out = {}
    for i in range(len(seqset.parts)):
        if not per_part.get(i):
            continue
        ids, probs = aggregate_predictions(per_part[i], seqset.epoch_index[i])
        out[i] = (ids, probs, _labels_for(ids, seqset, i))
    return out


def _labels_for(ids: np.ndarray, seqset, i: int) -> np.ndarray:
    lookup = dict(zip(seqset.epoch_index[i].tolist(), seqset.y[i].tolist()))
    return np.array([lookup[int(e)] for e in ids], dtype=np.int64)


def evaluate_model(model: SeqSleepNet, seqset, view: str, batch_size: int = 64) -> MetricsReport:
    preds, truth = [], []
    for ids, probs, labels in predict_set(model, seqset, view, batch_size).values():
        preds.append(predict_labels(probs))
        truth.append(labels)
    if not preds:
        raise ValueError("nothing to evaluate")
    return compute_metrics(np.concatenate(preds), np.concatenate(truth))
