"""Classification metrics: AUC, ACC, SEN, SPE, F1, confusion matrices."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

METRIC_NAMES = ("auc", "acc", "sen", "spe", "f1")


@dataclass
class MetricsReport:
    auc: float | None
    acc: float
    sen: float | None
    spe: float | None
    f1: float | None
    confusion: np.ndarray
    per_class: dict[int, dict[str, float | None]] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return int(self.confusion.sum())

    def as_dict(self) -> dict[str, float | None]:
        return {name: getattr(self, name) for name in METRIC_NAMES}


def auc_score(scores, labels) -> float | None:
    """Mann-Whitney AUC: P(score_pos > score_neg) with ties worth 1/2.

    Returns None when only one class is present.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def confusion_matrix(true, pred, k: int) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    m = np.zeros((k, k), dtype=np.int64)
    np.add.at(m, (np.asarray(true, dtype=int), np.asarray(pred, dtype=int)), 1)
    return m


def _ratio(num, den) -> float | None:
    return float(num / den) if den else None


def binary_counts(true, pred) -> tuple[int, int, int, int]:
    true = np.asarray(true)
    pred = np.asarray(pred)
    tp = int(((true == 1) & (pred == 1)).sum())
    tn = int(((true == 0) & (pred == 0)).sum())
    fp = int(((true == 0) & (pred == 1)).sum())
    fn = int(((true == 1) & (pred == 0)).sum())
    return tp, tn, fp, fn


def compute_metrics(scores, labels, threshold: float = 0.5) -> MetricsReport:
    """Binary metrics from positive-class scores.

    A subject is predicted positive iff its score exceeds ``threshold``, which
    matches the argmax rule (ties to class 0) at 0.5.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    pred = (scores > threshold).astype(int)
    tp, tn, fp, fn = binary_counts(labels, pred)
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    if precision is None or recall is None:
        f1 = None if recall is None else 0.0
    else:
        f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return MetricsReport(
        auc=auc_score(scores, labels),
        acc=(tp + tn) / len(labels),
        sen=recall,
        spe=_ratio(tn, tn + fp),
        f1=f1,
        confusion=confusion_matrix(labels, pred, 2),
    )


def argmax_lowest(probs: np.ndarray) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest class index."""
    return np.asarray(probs).argmax(axis=1)


def multiclass_metrics(probs, labels) -> MetricsReport:
    """One-vs-rest ACC/SEN/SPE/AUC per class plus overall ACC and confusion matrix.

    Top-level auc/sen/spe/f1 are macro averages of the defined per-class values.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    k = probs.shape[1]
    pred = argmax_lowest(probs)
    cm = confusion_matrix(labels, pred, k)
    total = cm.sum()
    per_class: dict[int, dict[str, float | None]] = {}
    for c in range(k):
        tp = cm[c, c]
        fn = cm[c].sum() - tp
        fp = cm[:, c].sum() - tp
        tn = total - tp - fn - fp
        prec, rec = _ratio(tp, tp + fp), _ratio(tp, tp + fn)
        f1 = None if prec is None or rec is None else (0.0 if prec + rec == 0 else 2 * prec * rec / (prec + rec))
        per_class[c] = {
            "acc": float((tp + tn) / total),
            "sen": rec,
            "spe": _ratio(tn, tn + fp),
            "f1": f1,
            "auc": auc_score(probs[:, c], (labels == c).astype(int)),
        }

    def macro(key):
        vals = [v[key] for v in per_class.values() if v[key] is not None]
        return float(np.mean(vals)) if vals else None

    return MetricsReport(
        auc=macro("auc"),
        acc=float(np.trace(cm) / total),
        sen=macro("sen"),
        spe=macro("spe"),
        f1=macro("f1"),
        confusion=cm,
        per_class=per_class,
    )


def report_from_probs(probs, labels) -> MetricsReport:
    probs = np.asarray(probs)
    if probs.shape[1] == 2:
        return compute_metrics(probs[:, 1], labels)
    return multiclass_metrics(probs, labels)


def aggregate(reports: list[MetricsReport]) -> dict[str, tuple[float | None, float | None]]:
    """Mean and population standard deviation of each metric across reports."""
    out: dict[str, tuple[float | None, float | None]] = {}
    for name in METRIC_NAMES:
        vals = [getattr(r, name) for r in reports if getattr(r, name) is not None]
        out[name] = (float(np.mean(vals)), float(np.std(vals))) if vals else (None, None)
    return out
