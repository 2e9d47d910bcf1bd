"""Detection-quality metrics.

A trial is accepted when ``score >= threshold`` everywhere in this module.
"""
import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, NamedTuple, Sequence, Tuple, Union

import numpy as np
from sklearn.metrics import roc_auc_score, roc_curve

from kwscascade.exceptions import FormatError, MetricError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

DEFAULT_FAR_TARGETS = (0.05, 0.5, 1.0)


@dataclass(frozen=True)
class Trial:
    label: int
    score: float

    def __post_init__(self) -> None:
        if self.label not in (0, 1):
            raise ValueError(f"Trial label must be 0 or 1, got {self.label!r}")
        if not math.isfinite(self.score):
            raise ValueError(f"Trial score must be finite, got {self.score!r}")


class DetPoint(NamedTuple):
    threshold: float
    far_per_hour: float
    recall: float
    fpr: float
    fnr: float


class RecallAtFar(NamedTuple):
    far_target: float
    recall: float


def _split(trials: Sequence[Trial]) -> Tuple[np.ndarray, np.ndarray]:
    labels = np.array([t.label for t in trials], dtype=np.int64)
    scores = np.array([t.score for t in trials], dtype=np.float64)
    if not labels.any() or labels.all():
        raise MetricError("Metrics need at least one positive and one negative trial")
    return labels, scores


def auroc(trials: Sequence[Trial]) -> float:
    """Probability that a random positive outscores a random negative, ties counted one half."""
    labels, scores = _split(trials)
    return float(roc_auc_score(labels, scores))


def eer(trials: Sequence[Trial]) -> float:
    labels, scores = _split(trials)
    far, tpr, _ = roc_curve(labels, scores, drop_intermediate=False)
    frr = 1.0 - tpr
    # far falls and frr rises as the threshold climbs; roc_curve lists thresholds high to low
    far, frr = far[::-1], frr[::-1]
    gap = far - frr
    i = int(np.argmax(gap <= 0.0))
    if gap[i] == 0.0 or i == 0:
        return float(far[i])
    w = gap[i - 1] / (gap[i - 1] - gap[i])
    return float(far[i - 1] + w * (far[i] - far[i - 1]))


def _check_hours(negative_hours: float) -> None:
    if not math.isfinite(negative_hours) or negative_hours <= 0.0:
        raise MetricError(f"negative_hours must be positive, got {negative_hours}")


def recall_at_far(
    pos_scores: Sequence[float],
    neg_scores: Sequence[float],
    negative_hours: float,
    far_targets: Sequence[float] = DEFAULT_FAR_TARGETS,
) -> List[RecallAtFar]:
    """Recall at each false-alarm budget (alarms per hour of negative audio).

    A budget allows ``floor(target * hours)`` false alarms; the threshold sits just
    above the next-highest negative score so that no more than that many pass.
    """
    _check_hours(negative_hours)
    if len(pos_scores) == 0:
        raise MetricError("Recall@FAR needs at least one positive score")
    pos = np.asarray(pos_scores, dtype=np.float64)
    neg = np.sort(np.asarray(neg_scores, dtype=np.float64))[::-1]
    out = []
    for target in far_targets:
        if target < 0.0:
            raise MetricError(f"FAR target must be non-negative, got {target}")
        allowed = math.floor(target * negative_hours + 1e-9)
        if allowed >= neg.size:
            threshold = -np.inf
        else:
            threshold = np.nextafter(neg[allowed], np.inf)
        out.append(RecallAtFar(float(target), float(np.mean(pos >= threshold))))
    return out


def det_curve(pos_scores: Sequence[float], neg_scores: Sequence[float], negative_hours: float) -> List[DetPoint]:
    _check_hours(negative_hours)
    if len(pos_scores) == 0 or len(neg_scores) == 0:
        raise MetricError("DET curve needs positive and negative scores")
    pos = np.sort(np.asarray(pos_scores, dtype=np.float64))
    neg = np.sort(np.asarray(neg_scores, dtype=np.float64))
    thresholds = np.unique(np.concatenate([pos, neg]))[::-1]
    # counts of scores >= each threshold
    n_pos = pos.size - np.searchsorted(pos, thresholds, side="left")
    n_neg = neg.size - np.searchsorted(neg, thresholds, side="left")
    points = []
    for threshold, hits, alarms in zip(thresholds, n_pos, n_neg):
        recall = hits / pos.size
        points.append(DetPoint(float(threshold), alarms / negative_hours, recall, alarms / neg.size, 1.0 - recall))
    return points


def pairwise_det(trials: Sequence[Trial], negative_hours: float = 1.0) -> List[DetPoint]:
    labels, scores = _split(trials)
    return det_curve(scores[labels == 1], scores[labels == 0], negative_hours)


def load_trials(path: PathLike) -> List[Trial]:
    trials = []
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or not "".join(row).strip():
                continue
            if lineno == 1 and [c.strip().lower() for c in row] == ["label", "score"]:
                continue
            try:
                label, score = row
                trials.append(Trial(int(label), float(score)))
            except ValueError as e:
                raise FormatError(f"{path}: line {lineno}: expected 'label,score', got {row!r} ({e})") from None
    logger.debug("Loaded %d trials from %s", len(trials), path)
    return trials


def write_trials(path: PathLike, trials: Sequence[Trial]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label", "score"])
        for trial in trials:
            writer.writerow([trial.label, repr(trial.score)])


def write_det_csv(path: PathLike, points: Sequence[DetPoint]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "far_per_hour", "recall"])
        for point in points:
            writer.writerow([repr(point.threshold), repr(point.far_per_hour), repr(point.recall)])
    logger.debug("Wrote %d DET points to %s", len(points), path)
