"""Evaluation metrics: confusion-matrix mIoU, mAP, selection quality, rank correlation."""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
from scipy import stats

from rankseg.errors import MetricError, ShapeError
from rankseg.head import SelectionResult


@dataclass
class ConfusionMatrix:
    """K x K counts; rows are ground truth, columns are predictions."""

    counts: np.ndarray

    @classmethod
    def empty(cls, K: int) -> ConfusionMatrix:  # noqa: N803
        return cls(np.zeros((K, K), dtype=np.int64))

    @classmethod
    def from_maps(
        cls, pred_map: np.ndarray, gt_map: np.ndarray, K: int, ignore_index: int  # noqa: N803
    ) -> ConfusionMatrix:
        pred = np.asarray(pred_map, dtype=np.int64).reshape(-1)
        gt = np.asarray(gt_map, dtype=np.int64).reshape(-1)
        if pred.shape != gt.shape:
            raise ShapeError(f"prediction has {pred.size} pixels, ground truth {gt.size}")
        keep = gt != ignore_index
        pred, gt = pred[keep], gt[keep]
        if pred.size and (min(pred.min(), gt.min()) < 0 or max(pred.max(), gt.max()) >= K):
            raise ShapeError(f"class ids must lie in [0, {K}) or equal the ignore index")
        counts = np.bincount(gt * K + pred, minlength=K * K).reshape(K, K)
        return cls(counts.astype(np.int64))

    @property
    def K(self) -> int:  # noqa: N802
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: ConfusionMatrix) -> ConfusionMatrix:
        if self.counts.shape != other.counts.shape:
            raise ShapeError("cannot merge confusion matrices of different sizes")
        return ConfusionMatrix(self.counts + other.counts)

    def iou(self) -> np.ndarray:
        """Per-class IoU; NaN where a class never appears in prediction or truth."""

        hits = np.diag(self.counts).astype(np.float64)
        union = self.counts.sum(axis=0) + self.counts.sum(axis=1) - hits
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(union > 0, hits / np.maximum(union, 1), np.nan)

    def miou(self) -> float:
        per_class = self.iou()
        if np.all(np.isnan(per_class)):
            raise MetricError("mIoU undefined: no class has a nonzero union")
        return float(np.nanmean(per_class))


def miou(
    pred_map: np.ndarray, gt_map: np.ndarray, K: int, ignore_index: int  # noqa: N803
) -> tuple[float, np.ndarray, ConfusionMatrix]:
    cm = ConfusionMatrix.from_maps(pred_map, gt_map, K, ignore_index)
    return cm.miou(), cm.iou(), cm


def average_precision(scores: np.ndarray, targets: np.ndarray) -> float:
    """Mean precision at each positive, ranking by descending score then sample index."""

    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    hits = np.asarray(targets)[order] > 0
    if not hits.any():
        return math.nan
    ranks = np.flatnonzero(hits) + 1
    return float(np.mean(np.arange(1, ranks.size + 1) / ranks))


def mean_average_precision(scores: np.ndarray, targets: np.ndarray) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    targets = np.asarray(targets)
    if scores.shape != targets.shape or scores.ndim != 2:
        raise ShapeError(f"mAP needs matching [N, K] arrays, got {scores.shape} / {targets.shape}")
    per_class = [
        average_precision(scores[:, k], targets[:, k])
        for k in range(scores.shape[1])
        if np.any(targets[:, k] > 0)
    ]
    if not per_class:
        raise MetricError("mAP undefined: no class has a positive sample")
    return float(np.mean(per_class))


@dataclass(frozen=True)
class SelectionStats:
    size: int
    precision: float
    recall: float


def selection_label_stats(sel: SelectionResult, target: np.ndarray) -> SelectionStats:
    """How many selected labels are present, and how many present labels were selected."""

    present = set(np.flatnonzero(np.asarray(target) > 0).tolist())
    hits = sum(1 for label in sel.indices if label in present)
    recall = hits / len(present) if present else 1.0
    return SelectionStats(size=sel.size, precision=hits / sel.size, recall=recall)


def mean_selection_stats(items: Sequence[SelectionStats]) -> dict[str, float]:
    if not items:
        return {"mean_kappa": 0.0, "label_precision": 0.0, "label_recall": 0.0}
    return {
        "mean_kappa": float(np.mean([item.size for item in items])),
        "label_precision": float(np.mean([item.precision for item in items])),
        "label_recall": float(np.mean([item.recall for item in items])),
    }


def spearman(x: Sequence[float], y: Sequence[float]) -> float | None:
    """Spearman rank correlation with average ranks for ties; None when undefined."""

    x_values = np.asarray(x, dtype=np.float64)
    y_values = np.asarray(y, dtype=np.float64)
    if x_values.size < 2 or np.ptp(x_values) == 0 or np.ptp(y_values) == 0:
        return None
    return float(stats.spearmanr(x_values, y_values)[0])


__all__ = [
    "ConfusionMatrix",
    "SelectionStats",
    "average_precision",
    "mean_average_precision",
    "mean_selection_stats",
    "miou",
    "selection_label_stats",
    "spearman",
]
