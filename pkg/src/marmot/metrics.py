"""Binary classification metrics: confusion counts, F1 variants, ROC and AUC.

Ratios whose denominator is zero are reported as ``None`` (undefined) rather
than silently coerced to 0, and are left out of the macro/micro averages.
"""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    @property
    def n_pos(self) -> int:
        return self.tp + self.fn

    @property
    def n_neg(self) -> int:
        return self.tn + self.fp


@dataclass
class MetricsReport:
    counts: ConfusionCounts
    accuracy: Optional[float]
    precision_0: Optional[float]
    precision_1: Optional[float]
    recall_0: Optional[float]
    recall_1: Optional[float]
    f1_0: Optional[float]
    f1_1: Optional[float]
    macro_f1: Optional[float]
    micro_f1: Optional[float]
    roc: list = field(default_factory=list)
    auc: Optional[float] = None

    def to_dict(self) -> dict:
        out = asdict(self)
        out["roc"] = [[float(x), float(y)] for x, y in self.roc]
        return out


def _binary(values, name: str) -> np.ndarray:
    arr = np.asarray(values)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be a flat sequence")
    if not np.isin(arr, (0, 1)).all():
        raise ValueError(f"{name} must contain only 0 and 1")
    return arr.astype(np.int64)


def confusion(preds: Sequence[int], labels: Sequence[int]) -> ConfusionCounts:
    preds, labels = _binary(preds, "preds"), _binary(labels, "labels")
    if len(preds) != len(labels):
        raise ValueError(f"length mismatch: {len(preds)} predictions, {len(labels)} labels")
    if len(preds) == 0:
        raise ValueError("cannot score an empty set")
    return ConfusionCounts(
        tp=int(np.sum((preds == 1) & (labels == 1))),
        tn=int(np.sum((preds == 0) & (labels == 0))),
        fp=int(np.sum((preds == 1) & (labels == 0))),
        fn=int(np.sum((preds == 0) & (labels == 1))),
    )


def _ratio(num: float, den: float, what: str) -> Optional[float]:
    if den == 0:
        warnings.warn(f"{what} is undefined (0/0)", RuntimeWarning, stacklevel=3)
        return None
    return num / den


def _f1(p: Optional[float], r: Optional[float]) -> Optional[float]:
    if p is None or r is None:
        return None
    if p + r == 0:
        return 0.0
    return 2 * p * r / (p + r)


def scores(counts: ConfusionCounts, n_neg: Optional[int] = None, n_pos: Optional[int] = None) -> MetricsReport:
    """Threshold metrics from confusion counts (no ROC/AUC)."""
    n_neg = counts.n_neg if n_neg is None else n_neg
    n_pos = counts.n_pos if n_pos is None else n_pos
    if n_neg != counts.n_neg or n_pos != counts.n_pos:
        raise ValueError("class sizes are inconsistent with the confusion counts")
    tp, tn, fp, fn = counts.tp, counts.tn, counts.fp, counts.fn
    precision_0 = _ratio(tn, tn + fn, "precision_0")
    precision_1 = _ratio(tp, tp + fp, "precision_1")
    recall_0 = _ratio(tn, tn + fp, "recall_0")
    recall_1 = _ratio(tp, tp + fn, "recall_1")
    f1_0, f1_1 = _f1(precision_0, recall_0), _f1(precision_1, recall_1)

    defined = [(f, w) for f, w in ((f1_0, n_neg), (f1_1, n_pos)) if f is not None]
    if len(defined) < 2:
        warnings.warn("macro/micro F1 computed over the defined per-class F1 only", RuntimeWarning, stacklevel=2)
    macro = sum(f for f, _ in defined) / len(defined) if defined else None
    weight = sum(w for _, w in defined)
    micro = sum(f * w for f, w in defined) / weight if defined and weight else None
    return MetricsReport(
        counts=counts,
        accuracy=(tp + tn) / counts.total,
        precision_0=precision_0,
        precision_1=precision_1,
        recall_0=recall_0,
        recall_1=recall_1,
        f1_0=f1_0,
        f1_1=f1_1,
        macro_f1=macro,
        micro_f1=micro,
    )


def _check_scores(p_positive, labels) -> tuple:
    s = np.asarray(p_positive, dtype=np.float64)
    y = _binary(labels, "labels")
    if s.shape != y.shape:
        raise ValueError(f"length mismatch: {s.size} scores, {y.size} labels")
    if not np.isfinite(s).all():
        raise ValueError("scores must be finite")
    return s, y


def roc_curve(p_positive, labels) -> list:
    """(FPR, TPR) points from threshold +inf down to the lowest score.

    A threshold t predicts positive for scores >= t, so tied scores cross
    together. Raises ValueError when only one class is present.
    """
    s, y = _check_scores(p_positive, labels)
    n_pos, n_neg = int(y.sum()), int(len(y) - y.sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC curve needs both classes present")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    tps = np.cumsum(y)
    fps = np.cumsum(1 - y)
    # last index of every group of tied scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    points = [(0.0, 0.0)]
    points += [(fps[i] / n_neg, tps[i] / n_pos) for i in ends]
    return [(float(x), float(t)) for x, t in points]


def trapezoid_area(points) -> float:
    xs = np.array([p[0] for p in points])
    ys = np.array([p[1] for p in points])
    return float(np.sum(np.diff(xs) * (ys[1:] + ys[:-1]) / 2.0))


def _midranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(len(x))
    i = 0
    while i < len(xs):
        j = i
        while j + 1 < len(xs) and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def auc(p_positive, labels) -> Optional[float]:
    """Mann-Whitney estimate of P(score_pos > score_neg), ties counting one half.

    Returns None when only one class is present.
    """
    s, y = _check_scores(p_positive, labels)
    n_pos, n_neg = int(y.sum()), int(len(y) - y.sum())
    if n_pos == 0 or n_neg == 0:
        warnings.warn("AUC is undefined with a single class", RuntimeWarning, stacklevel=2)
        return None
    rank_sum = _midranks(s)[y == 1].sum()
    u = rank_sum - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def evaluate(preds, labels, p_positive=None) -> MetricsReport:
    """Full report; ROC and AUC are filled in when scores are given and both classes occur."""
    report = scores(confusion(preds, labels))
    if p_positive is not None:
        report.auc = auc(p_positive, labels)
        if report.auc is not None:
            report.roc = roc_curve(p_positive, labels)
    return report
