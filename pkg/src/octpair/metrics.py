"""Support-weighted average precision and F1 for the four tissue classes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .phantom import TISSUE_CLASSES


def average_precision(y_true: np.ndarray, scores: np.ndarray) -> float:
    """Step-wise area under the precision-recall curve (no interpolation).

    AP = sum_k (R_k - R_{k-1}) P_k over the distinct score thresholds in
    decreasing order; tied scores enter together.
    """
    y_true = np.asarray(y_true, dtype=bool)
    n_pos = int(y_true.sum())
    if n_pos == 0:
        return float("nan")
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="mergesort")
    s = np.asarray(scores, dtype=np.float64)[order]
    y = y_true[order]
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    # keep the last index of every run of tied scores
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tp, fp = tp[last], fp[last]
    precision = tp / (tp + fp)
    recall = tp / n_pos
    prev = np.r_[0.0, recall[:-1]]
    return float(np.sum((recall - prev) * precision))


def _prf(y_true, y_pred, c):
    tp = int(np.sum((y_pred == c) & (y_true == c)))
    pred = int(np.sum(y_pred == c))
    support = int(np.sum(y_true == c))
    precision = tp / pred if pred else 0.0
    recall = tp / support if support else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f1, support


@dataclass
class MetricsReport:
    weighted_ap: float
    weighted_f1: float
    per_class: dict  # class name -> precision, recall, f1, ap, support
    missing_classes: list = field(default_factory=list)
    n_samples: int = 0

    def to_dict(self) -> dict:
        return {
            "weighted_ap": self.weighted_ap,
            "weighted_f1": self.weighted_f1,
            "per_class": self.per_class,
            "missing_classes": self.missing_classes,
            "n_samples": self.n_samples,
            "class_index": {name: i for i, name in enumerate(TISSUE_CLASSES)},
        }


def compute_metrics(y_true, probs, n_classes: int = len(TISSUE_CLASSES)) -> MetricsReport:
    """Weighted AP (one-vs-rest on class scores) and weighted F1 (argmax).

    Weights are test-set class supports; classes absent from ``y_true``
    get weight zero and are listed in ``missing_classes``.
    """
    y_true = np.asarray(y_true, dtype=np.int64)
    probs = np.asarray(probs, dtype=np.float64)
    if y_true.size == 0:
        raise ValueError("no samples to evaluate")
    if probs.shape != (y_true.size, n_classes):
        raise ValueError(f"scores must be N x {n_classes}, got {probs.shape}")
    y_pred = probs.argmax(axis=1)
    total = y_true.size
    per_class = {}
    missing = []
    w_ap = 0.0
    w_f1 = 0.0
    for c in range(n_classes):
        name = TISSUE_CLASSES[c] if n_classes == len(TISSUE_CLASSES) else str(c)
        precision, recall, f1, support = _prf(y_true, y_pred, c)
        ap = average_precision(y_true == c, probs[:, c]) if support else float("nan")
        per_class[name] = {
            "precision": precision,
            "recall": recall,
            "f1": f1,
            "ap": ap,
            "support": support,
        }
        if support == 0:
            missing.append(name)
            continue
        w_ap += support / total * ap
        w_f1 += support / total * f1
    return MetricsReport(w_ap, w_f1, per_class, missing, total)
