"""Binary classification metrics and mean/std aggregation across subjects."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .errors import RejectedInputError, UndefinedMetricError


@dataclass(frozen=True)
class PredictionSet:
    scores: np.ndarray
    labels: np.ndarray
    threshold: float = 0.5

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=float).ravel()
        labels = np.asarray(self.labels).ravel().astype(np.int64)
        if scores.size == 0:
            raise RejectedInputError("empty prediction set")
        if scores.size != labels.size:
            raise RejectedInputError(f"{scores.size} scores for {labels.size} labels")
        if np.any((labels != 0) & (labels != 1)):
            raise RejectedInputError("labels must be 0/1")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "labels", labels)

    @property
    def predicted(self) -> np.ndarray:
        return (self.scores >= self.threshold).astype(np.int64)


def confusion(preds: PredictionSet) -> tuple[int, int, int, int]:
    """``(tp, fp, fn, tn)`` at the set's threshold."""
    p, y = preds.predicted, preds.labels
    tp = int(np.sum((p == 1) & (y == 1)))
    fp = int(np.sum((p == 1) & (y == 0)))
    fn = int(np.sum((p == 0) & (y == 1)))
    return tp, fp, fn, int(y.size - tp - fp - fn)


def accuracy(preds: PredictionSet) -> float:
    return float(np.mean(preds.predicted == preds.labels))


def f1(preds: PredictionSet) -> float:
    """F1 at the threshold; 0 whenever precision + recall is 0 or undefined."""
    tp, fp, fn, _ = confusion(preds)
    if tp == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 2 * precision * recall / (precision + recall)


def pr_auc(preds: PredictionSet) -> float:
    """Average precision: sum of ``(R_i - R_{i-1}) * P_i`` over descending unique scores."""
    y = preds.labels
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("PR-AUC undefined without positive labels")
    order = np.argsort(-preds.scores, kind="stable")
    s, y = preds.scores[order], y[order]
    tp = np.cumsum(y)
    # last index of each run of tied scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp_at = tp[ends]
    precision = tp_at / (ends + 1)
    recall = tp_at / n_pos
    gains = np.diff(np.r_[0.0, recall])
    return float(math.fsum(gains * precision))


def aggregate(values) -> tuple[float, float]:
    """Mean and population std; NaN entries are dropped."""
    vals = [float(v) for v in values if not math.isnan(v)]
    if not vals:
        raise RejectedInputError("aggregate needs at least one value")
    # exactly rounded sums keep the result independent of value order
    mean = math.fsum(vals) / len(vals)
    return mean, math.sqrt(math.fsum((v - mean) ** 2 for v in vals) / len(vals))


def aggregate_by_subject(rows) -> tuple[float, float, int]:
    """Average each subject's values first, then mean/std across subjects.

    ``rows`` is an iterable of ``(subject, value)``. Returns
    ``(mean, std, n_excluded)`` where excluded counts NaN values.
    """
    per_subject = defaultdict(list)
    excluded = 0
    for subject, value in rows:
        if value is None or math.isnan(value):
            excluded += 1
            continue
        per_subject[subject].append(value)
    means = [aggregate(v)[0] for v in per_subject.values()]
    mean, std = aggregate(means)
    return mean, std, excluded


def evaluate(scores, labels, threshold: float = 0.5) -> dict:
    preds = PredictionSet(scores, labels, threshold)
    try:
        ap = pr_auc(preds)
    except UndefinedMetricError:
        ap = float("nan")
    return {"acc": accuracy(preds), "f1": f1(preds), "pr_auc": ap}
