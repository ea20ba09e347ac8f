"""Training losses: asymmetric multi-label loss and selected-label cross-entropy."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from rankseg.errors import ConfigError, SelectionError, ShapeError
from rankseg.head import SelectionResult
from rankseg.tensor import (
    Tensor,
    add,
    clamp,
    gather_rows,
    log,
    mul,
    power,
    reduce_mean,
    reduce_sum,
    scalar_mul,
    sub,
)

PROB_EPS = 1e-8
LOG_FLOOR = 1e-30


@dataclass(frozen=True)
class LossWeights:
    seg_weight: float = 1.0
    ml_weight: float = 10.0

    def __post_init__(self) -> None:
        if self.seg_weight < 0 or self.ml_weight < 0:
            raise ConfigError("loss weights must be non-negative")


@dataclass(frozen=True)
class AsymmetricLossParams:
    gamma_pos: float = 0.0
    gamma_neg: float = 4.0
    clip_margin: float = 0.05

    def __post_init__(self) -> None:
        if self.gamma_pos < 0 or self.gamma_neg < 0:
            raise ConfigError("asymmetric loss focusing exponents must be non-negative")
        if not 0.0 <= self.clip_margin < 1.0:
            raise ConfigError(f"clip margin must be in [0, 1), got {self.clip_margin}")


def _focus(base: Tensor, gamma: float) -> Tensor | None:
    return None if gamma == 0 else power(base, gamma)


def asymmetric_loss(
    probs: Tensor, target: np.ndarray, params: AsymmetricLossParams | None = None
) -> Tensor:
    """Mean per-class asymmetric loss of presence probabilities against a binary target.

    Positives contribute ``-(1-p)^g+ log p``; negatives contribute
    ``-(p_m)^g- log(1-p_m)`` with the shifted probability ``p_m = max(p-m, 0)``.
    """

    params = params or AsymmetricLossParams()
    labels = np.asarray(target).reshape(-1)
    if probs.shape != labels.shape:
        raise ShapeError(
            f"asymmetric_loss: probs {list(probs.shape)} vs target {list(labels.shape)}"
        )
    if np.any(probs.data < 0.0) or np.any(probs.data > 1.0):
        raise ShapeError("asymmetric_loss: probabilities must lie in [0, 1]")

    one = Tensor(1.0, dtype=probs.dtype)
    eps = max(PROB_EPS, float(np.finfo(probs.dtype).eps))
    p = clamp(probs, eps, 1.0 - eps)
    positive = log(p)
    weight = _focus(sub(one, p), params.gamma_pos)
    if weight is not None:
        positive = mul(weight, positive)

    shifted = p
    if params.clip_margin > 0:
        shifted = clamp(sub(p, Tensor(params.clip_margin, dtype=probs.dtype)), low=0.0)
    negative = log(sub(one, shifted))
    weight = _focus(shifted, params.gamma_neg)
    if weight is not None:
        negative = mul(weight, negative)

    is_positive = Tensor(labels > 0, dtype=probs.dtype)
    is_negative = Tensor(labels <= 0, dtype=probs.dtype)
    per_class = add(mul(is_positive, positive), mul(is_negative, negative))
    return scalar_mul(reduce_mean(per_class), -1.0)


def _included(
    gt_ids: np.ndarray, sel: SelectionResult, ignore_index: int
) -> tuple[np.ndarray, np.ndarray]:
    flat = np.asarray(gt_ids, dtype=np.int64).reshape(-1)
    labelled = np.flatnonzero(flat != ignore_index)
    ids = flat[labelled]
    if ids.size and ids.min() < 0:
        raise SelectionError(f"ground-truth ids must be non-negative, got {int(ids.min())}")
    indices = sel.index_array()
    size = int(max(ids.max(initial=0), indices.max())) + 1
    lookup = np.full(size, -1, dtype=np.int64)
    lookup[indices] = np.arange(indices.size)
    ranks = lookup[ids]
    kept = ranks >= 0
    return labelled[kept], ranks[kept]


def count_included(gt_ids: np.ndarray, sel: SelectionResult, ignore_index: int) -> int:
    rows, _ = _included(gt_ids, sel, ignore_index)
    return int(rows.size)


def selected_ce(
    z: Tensor, gt_ids: np.ndarray, sel: SelectionResult, ignore_index: int
) -> Tensor:
    """Mean ``-log z`` at each kept pixel's selected rank.

    A pixel is kept when its ground-truth id is not ``ignore_index`` and appears in
    the selection. With nothing kept the result is an exact zero scalar.
    """

    flat = np.asarray(gt_ids).reshape(-1)
    if z.ndim != 2 or z.shape != (flat.shape[0], sel.size):
        raise ShapeError(
            f"selected_ce: z {list(z.shape)} does not match {flat.shape[0]} pixels "
            f"x {sel.size} labels"
        )
    rows, columns = _included(flat, sel, ignore_index)
    if rows.size == 0:
        return Tensor(0.0, dtype=z.dtype)
    one_hot = np.zeros((rows.size, sel.size), dtype=z.dtype)
    one_hot[np.arange(rows.size), columns] = 1.0
    picked = reduce_sum(mul(gather_rows(z, rows), Tensor(one_hot, dtype=z.dtype)), axis=-1)
    return scalar_mul(reduce_mean(log(clamp(picked, low=LOG_FLOOR))), -1.0)


@dataclass(frozen=True)
class LossTerms:
    total: Tensor
    seg: float
    ml: float


def combine_losses(seg: Tensor, ml: Tensor | None, weights: LossWeights) -> LossTerms:
    total = scalar_mul(seg, weights.seg_weight)
    ml_value = 0.0
    if ml is not None:
        total = add(total, scalar_mul(ml, weights.ml_weight))
        ml_value = ml.item()
    return LossTerms(total=total, seg=seg.item(), ml=ml_value)


__all__ = [
    "AsymmetricLossParams",
    "LOG_FLOOR",
    "LossTerms",
    "LossWeights",
    "PROB_EPS",
    "asymmetric_loss",
    "combine_losses",
    "count_included",
    "selected_ce",
]
