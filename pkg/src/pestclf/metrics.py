"""Macro-averaged evaluation suite for imbalanced multi-class problems.

Per-class precision and recall are macro-averaged with equal class weight;
MF1 is the harmonic mean of the two macro averages; accuracy is total true
positives over N; GM is the geometric mean of per-class sensitivities with
any zero sensitivity replaced by 0.001 so one dead class does not zero the
whole score. GM is computed in the log domain: the plain product of a
hundred small fractions underflows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyClass, LabelOutOfRange, LengthMismatch

GM_ZERO_SUBSTITUTE = 1e-3


@dataclass
class ConfusionCounts:
    """Per-class TP/FP/FN counts plus totals."""

    tp: np.ndarray  # shape (C,)
    fp: np.ndarray
    fn: np.ndarray
    n: int

    @property
    def num_classes(self) -> int:
        return len(self.tp)

    @property
    def tp_total(self) -> int:
        return int(self.tp.sum())


@dataclass
class MetricsReport:
    """Per-class and macro metrics of one evaluation."""

    precision: np.ndarray  # Pre_c
    recall: np.ndarray     # Rec_c, also the per-class sensitivity S_c
    mpre: float
    mrec: float
    mf1: float
    acc: float
    gm: float

    @property
    def sensitivity(self) -> np.ndarray:
        return self.recall

    @property
    def num_classes(self) -> int:
        return len(self.recall)

    def worst(self, k: int) -> list[tuple[int, float]]:
        return worst_classes(self, k)


def confusion(y_true, y_pred, num_classes: int) -> ConfusionCounts:
    """Count per-class TP/FP/FN from paired label sequences."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape or y_true.ndim != 1:
        raise LengthMismatch(
            f"confusion: y_true {y_true.shape} vs y_pred {y_pred.shape}")
    for name, arr in (("y_true", y_true), ("y_pred", y_pred)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise LabelOutOfRange(
                f"confusion: {name} holds labels outside [0, {num_classes})")
    tp = np.zeros(num_classes, dtype=np.int64)
    fp = np.zeros(num_classes, dtype=np.int64)
    fn = np.zeros(num_classes, dtype=np.int64)
    hits = y_true == y_pred
    tp += np.bincount(y_true[hits], minlength=num_classes)
    fn += np.bincount(y_true[~hits], minlength=num_classes)
    fp += np.bincount(y_pred[~hits], minlength=num_classes)
    return ConfusionCounts(tp, fp, fn, n=len(y_true))


def macro_report(counts: ConfusionCounts) -> MetricsReport:
    """Compute the macro metric suite from confusion counts.

    Precision of a class never predicted is defined as 0. Requires every
    class to appear in the ground truth at least once.
    """
    tp = counts.tp.astype(np.float64)
    fp = counts.fp.astype(np.float64)
    fn = counts.fn.astype(np.float64)
    support = tp + fn
    if (support == 0).any():
        absent = int(np.flatnonzero(support == 0)[0])
        raise EmptyClass(
            f"macro_report: class {absent} never appears in the ground truth")
    recall = tp / support
    predicted = tp + fp
    precision = np.divide(tp, predicted, out=np.zeros_like(tp),
                          where=predicted > 0)
    mpre = float(precision.mean())
    mrec = float(recall.mean())
    mf1 = 2.0 * mpre * mrec / (mpre + mrec) if mpre + mrec > 0 else 0.0
    acc = counts.tp_total / counts.n
    substituted = np.where(recall == 0.0, GM_ZERO_SUBSTITUTE, recall)
    gm = float(np.exp(np.log(substituted).mean()))
    return MetricsReport(precision, recall, mpre, mrec, mf1, acc, gm)


def worst_classes(report: MetricsReport, k: int) -> list[tuple[int, float]]:
    """k classes with the lowest per-class accuracy, ascending, ties by index."""
    if k > report.num_classes:
        raise ValueError(f"worst_classes: k={k} exceeds C={report.num_classes}")
    order = sorted(range(report.num_classes),
                   key=lambda c: (report.recall[c], c))
    return [(c, float(report.recall[c])) for c in order[:k]]


def format_report(report: MetricsReport, class_names=None) -> str:
    """Human-readable key-value block for one evaluation."""
    lines = [
        f"acc  {report.acc:.6f}",
        f"mpre {report.mpre:.6f}",
        f"mrec {report.mrec:.6f}",
        f"mf1  {report.mf1:.6f}",
        f"gm   {report.gm:.6f}",
    ]
    for c in range(report.num_classes):
        name = class_names[c] if class_names else str(c)
        lines.append(f"class {name}: precision {report.precision[c]:.6f} "
                     f"recall {report.recall[c]:.6f}")
    return "\n".join(lines) + "\n"


def ledger_row(dataset: str, model: str, report: MetricsReport) -> str:
    """Machine-readable metrics row: dataset,model,Acc,MPre,MRec,MF1,GM."""
    return (f"{dataset},{model},{report.acc:.6f},{report.mpre:.6f},"
            f"{report.mrec:.6f},{report.mf1:.6f},{report.gm:.6f}")
