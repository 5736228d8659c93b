"""Dataset-level segmentation metrics: mIoU and the F-measure.

Counts are accumulated over an entire split before any division, and
accumulators merge associatively so shards can be scored independently.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .tensor import ShapeError

F_BETA_SQ = 0.3  # AVS-benchmark convention


@dataclass
class MetricReport:
    miou: float
    fscore: float
    per_class_iou: list[Optional[float]] = field(default_factory=list)


class SegScore:
    """Mergeable intersection/union and foreground-pixel counters.

    ``n_class`` counts the label values 0..n_class-1. For binary tasks
    (n_class == 2) the background class is excluded from mIoU; semantic
    tasks average over every class with a nonzero union.
    """

    def __init__(self, n_class: int, include_background: bool):
        if n_class < 2:
            raise ShapeError(f"SegScore: need at least 2 label values, got {n_class}")
        self.n_class = n_class
        self.include_background = include_background
        self.inter = np.zeros(n_class, dtype=np.int64)
        self.union = np.zeros(n_class, dtype=np.int64)
        self.tp = 0
        self.fp = 0
        self.fn = 0

    def update(self, pred: np.ndarray, gt: np.ndarray) -> None:
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ShapeError(f"metrics: pred {pred.shape} vs gt {gt.shape}")
        for c in range(self.n_class):
            p = pred == c
            g = gt == c
            self.inter[c] += int(np.logical_and(p, g).sum())
            self.union[c] += int(np.logical_or(p, g).sum())
        pf = pred != 0
        gf = gt != 0
        self.tp += int(np.logical_and(pf, gf).sum())
        self.fp += int(np.logical_and(pf, ~gf).sum())
        self.fn += int(np.logical_and(~pf, gf).sum())

    def merge(self, other: "SegScore") -> None:
        if (self.n_class, self.include_background) != (
            other.n_class,
            other.include_background,
        ):
            raise ShapeError("metrics: cannot merge accumulators with different setups")
        self.inter += other.inter
        self.union += other.union
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn

    def per_class_iou(self) -> list[Optional[float]]:
        out: list[Optional[float]] = []
        for c in range(self.n_class):
            out.append(float(self.inter[c] / self.union[c]) if self.union[c] else None)
        return out

    def miou(self) -> float:
        start = 0 if self.include_background else 1
        ious = [v for v in self.per_class_iou()[start:] if v is not None]
        return float(np.mean(ious)) if ious else 1.0

    def fscore(self) -> float:
        if self.tp + self.fp == 0 or self.tp + self.fn == 0:
            return 0.0
        precision = self.tp / (self.tp + self.fp)
        recall = self.tp / (self.tp + self.fn)
        denom = F_BETA_SQ * precision + recall
        if denom == 0.0:
            return 0.0
        return (1.0 + F_BETA_SQ) * precision * recall / denom

    def report(self) -> MetricReport:
        return MetricReport(
            miou=self.miou(), fscore=self.fscore(), per_class_iou=self.per_class_iou()
        )


def miou(pred: np.ndarray, gt: np.ndarray, n_class: int = 2) -> float:
    """mIoU of a single prediction/label pair (binary excludes background)."""
    score = SegScore(n_class, include_background=n_class > 2)
    score.update(pred, gt)
    return score.miou()


def f_score(pred: np.ndarray, gt: np.ndarray) -> float:
    """Foreground F-measure with beta^2 = 0.3 for a single pair."""
    score = SegScore(2, include_background=False)
    score.update(np.asarray(pred) != 0, np.asarray(gt) != 0)
    return score.fscore()
