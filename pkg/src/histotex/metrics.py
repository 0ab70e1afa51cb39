"""Accuracy, confusion matrices, one-vs-rest ROC curves and macro summaries."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .network import TextureNet
from .tensor import Tensor


@dataclass
class RocCurve:
    """Step curve from a descending-threshold sweep; ties share one point."""

    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float


@dataclass
class MacroRocSummary:
    macro_auc: float
    mean_sensitivity: float
    mean_specificity: float
    youden_thresholds: np.ndarray


@dataclass
class EvalResult:
    accuracy: float
    confusion: np.ndarray
    probs: np.ndarray        # (N, K) softmax outputs
    labels: np.ndarray       # (N,)
    predictions: np.ndarray  # (N,)


def confusion_matrix(y_true: Sequence[int], y_pred: Sequence[int],
                     num_classes: int) -> np.ndarray:
    """K x K counts, rows true class, columns predicted class."""
    t = np.asarray(y_true, dtype=np.int64)
    p = np.asarray(y_pred, dtype=np.int64)
    if t.shape != p.shape:
        raise ValueError(f"label/prediction length mismatch: {t.shape} vs {p.shape}")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    return cm


def accuracy_from_confusion(cm: np.ndarray) -> float:
    total = cm.sum()
    if total == 0:
        raise ValueError("empty confusion matrix")
    return float(np.trace(cm) / total)


def roc_curve(scores: Sequence[float], labels: Sequence[int]) -> RocCurve:
    """Threshold sweep over descending scores; AUC by the trapezoid rule."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError(f"scores/labels must be matching 1-D arrays, got "
                         f"{s.shape} and {y.shape}")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be binary (0/1)")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs both classes present")

    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    y_sorted = y[order]
    # one point per distinct score: indices where the threshold drops
    distinct = np.nonzero(np.diff(s_sorted))[0]
    cut = np.concatenate([distinct, [len(s_sorted) - 1]])
    tps = np.cumsum(y_sorted)[cut]
    fps = 1 + cut - tps
    tpr = np.concatenate([[0.0], tps / n_pos])
    fpr = np.concatenate([[0.0], fps / n_neg])
    thresholds = np.concatenate([[np.inf], s_sorted[cut]])
    auc = float(np.trapezoid(tpr, fpr))
    return RocCurve(fpr=fpr, tpr=tpr, thresholds=thresholds, auc=auc)


def one_vs_rest_curves(probs: np.ndarray, labels: Sequence[int]) -> list[RocCurve]:
    probs = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    return [roc_curve(probs[:, k], (y == k).astype(np.int64))
            for k in range(probs.shape[1])]


def macro_roc(curves: Sequence[RocCurve]) -> MacroRocSummary:
    """Unweighted mean AUC; operating points maximize Youden's J = TPR - FPR."""
    if len(curves) < 2:
        raise ValueError("macro averaging needs at least two curves")
    sens, spec, thr = [], [], []
    for c in curves:
        j = c.tpr - c.fpr
        best = int(j.argmax())
        sens.append(float(c.tpr[best]))
        spec.append(float(1.0 - c.fpr[best]))
        thr.append(float(c.thresholds[best]))
    return MacroRocSummary(
        macro_auc=float(np.mean([c.auc for c in curves])),
        mean_sensitivity=float(np.mean(sens)),
        mean_specificity=float(np.mean(spec)),
        youden_thresholds=np.asarray(thr))


def evaluate(model: TextureNet, batches: Iterable) -> EvalResult:
    """Argmax evaluation of a stream of (x, labels) batches."""
    all_probs, all_labels = [], []
    for x, y in batches:
        res = model.forward(Tensor(x), mode="eval")
        all_probs.append(res.probs)
        all_labels.append(np.asarray(y, dtype=np.int64))
    if not all_probs:
        raise ValueError("evaluation stream is empty")
    probs = np.concatenate(all_probs)
    labels = np.concatenate(all_labels)
    preds = probs.argmax(axis=1)
    cm = confusion_matrix(labels, preds, probs.shape[1])
    return EvalResult(accuracy=accuracy_from_confusion(cm), confusion=cm,
                      probs=probs, labels=labels, predictions=preds)


# ---------------------------------------------------------------------------
# CSV emission
# ---------------------------------------------------------------------------

def write_confusion_csv(cm: np.ndarray, class_names: Sequence[str],
                        path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["true\\pred", *class_names])
        for name, row in zip(class_names, cm):
            writer.writerow([name, *row.tolist()])


def write_roc_csv(curves: Sequence[RocCurve], class_names: Sequence[str],
                  path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "fpr", "tpr", "threshold"])
        for name, c in zip(class_names, curves):
            for f, t, th in zip(c.fpr, c.tpr, c.thresholds):
                writer.writerow([name, f"{f:.9g}", f"{t:.9g}", f"{th:.9g}"])


def write_summary_csv(accuracy: float, summary: MacroRocSummary,
                      path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["accuracy", "macro_auc", "mean_sensitivity",
                         "mean_specificity"])
        writer.writerow([f"{accuracy:.9g}", f"{summary.macro_auc:.9g}",
                         f"{summary.mean_sensitivity:.9g}",
                         f"{summary.mean_specificity:.9g}"])
