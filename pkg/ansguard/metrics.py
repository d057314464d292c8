"""Ranking and threshold metrics for binary detector scores (1 = adversarial)."""

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from ansguard.errors import ConfigError, ShapeError, UndefinedMetricError

DEFAULT_THRESHOLD = 0.5


@dataclass
class ScoredLabels:
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        self.labels = np.asarray(self.labels).reshape(-1)
        if self.scores.shape != self.labels.shape:
            raise ShapeError(f"{self.scores.size} scores for {self.labels.size} labels")
        if not np.isin(self.labels, (0, 1)).all():
            raise ConfigError("labels must be 0 (clean) or 1 (adversarial)")
        self.labels = self.labels.astype(np.int64)

    @property
    def positives(self) -> int:
        return int(self.labels.sum())

    @property
    def negatives(self) -> int:
        return int(self.labels.size - self.labels.sum())


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def fpr(self) -> float:
        return self.fp / (self.fp + self.tn) if self.fp + self.tn else 0.0

    @property
    def fnr(self) -> float:
        return self.fn / (self.fn + self.tp) if self.fn + self.tp else 0.0


def _require_both_classes(scored: ScoredLabels) -> None:
    if scored.positives == 0 or scored.negatives == 0:
        raise UndefinedMetricError("AUC/ROC need at least one positive and one negative label")


def auc(scored: ScoredLabels) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) with ties counted as 1/2."""
    _require_both_classes(scored)
    ranks = rankdata(scored.scores)
    p, n = scored.positives, scored.negatives
    u = ranks[scored.labels == 1].sum() - p * (p + 1) / 2
    return float(u / (p * n))


def confusion(scored: ScoredLabels, threshold: float = DEFAULT_THRESHOLD) -> Confusion:
    """Counts with "adversarial" predicted when score > threshold."""
    predicted = scored.scores > threshold
    actual = scored.labels == 1
    return Confusion(
        tp=int(np.sum(predicted & actual)),
        fp=int(np.sum(predicted & ~actual)),
        tn=int(np.sum(~predicted & ~actual)),
        fn=int(np.sum(~predicted & actual)),
    )


def accuracy(scored: ScoredLabels, threshold: float = DEFAULT_THRESHOLD) -> float:
    c = confusion(scored, threshold)
    return (c.tp + c.tn) / scored.labels.size


def roc_points(scored: ScoredLabels) -> list[tuple[float, float]]:
    """ROC staircase from (0, 0) to (1, 1), one vertex per distinct score."""
    _require_both_classes(scored)
    order = np.argsort(-scored.scores, kind="stable")
    scores = scored.scores[order]
    labels = scored.labels[order]
    # last index of every run of equal scores
    ends = np.flatnonzero(np.r_[scores[1:] != scores[:-1], True])
    tps = np.cumsum(labels)[ends]
    fps = (ends + 1) - tps
    points = [(0.0, 0.0)]
    points += [(fp / scored.negatives, tp / scored.positives) for tp, fp in zip(tps, fps)]
    return points


def trapezoid_area(points: list[tuple[float, float]]) -> float:
    area = 0.0
    for (x0, y0), (x1, y1) in zip(points, points[1:]):
        area += (x1 - x0) * (y0 + y1) / 2
    return area


def best_threshold(scored: ScoredLabels) -> tuple[float, float]:
    """Threshold maximizing accuracy, returned with that accuracy.

    Candidates sit halfway between consecutive distinct scores, plus one
    below the minimum and one at the maximum; the first best candidate wins.
    """
    if len(scored.scores) == 0:
        raise UndefinedMetricError("no scores to place a threshold between")
    distinct = np.unique(scored.scores)
    candidates = np.r_[distinct[0] - 1.0, (distinct[:-1] + distinct[1:]) / 2, distinct[-1]]
    best = (float(candidates[0]), accuracy(scored, candidates[0]))
    for tau in candidates[1:]:
        acc = accuracy(scored, tau)
        if acc > best[1]:
            best = (float(tau), acc)
    return best
