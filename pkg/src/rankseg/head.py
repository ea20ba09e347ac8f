"""Multi-label prediction, top-k label selection, and selected-label pixel classification."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from rankseg.blocks import (
    DecoderLayer,
    EncoderLayer,
    decoder_forward,
    downsample_tokens,
    encoder_forward,
    global_average_pool,
)
from rankseg.errors import SelectionError, ShapeError
from rankseg.tensor import (
    Tensor,
    add,
    concat,
    exp,
    gather_rows,
    l2_normalize,
    matmul,
    mul,
    mul_row,
    reduce_sum,
    reshape,
    sigmoid,
    softmax,
    transpose,
)

DEFAULT_INVERSE_TAU = 10.0


class SelectionMode(str, Enum):
    FIXED_K = "fixed"
    DYNAMIC_THRESHOLD = "dynamic"
    ORACLE_GT = "oracle"
    COMPLETE = "complete"


class MultiLabelHeadVariant(str, Enum):
    GAP_LINEAR = "gap_linear"
    TRANENC1 = "tranenc1"
    TRANDEC2 = "trandec2"


class CategorySource(str, Enum):
    ORIGINAL = "original"
    REFINED = "refined"


@dataclass
class CategoryTable:
    """Per-category pixel-classifier rows ``w`` and multi-label scoring rows ``h``.

    ``w`` doubles as the category embeddings fed to both transformation paths.
    ``h`` and ``bias`` are absent for models without a multi-label head.
    """

    w: Tensor
    h: Tensor | None = None
    bias: Tensor | None = None

    def __post_init__(self) -> None:
        if self.w.ndim != 2 or self.w.shape[0] < 2:
            raise ShapeError(f"category table needs at least 2 rows, got {list(self.w.shape)}")
        if (self.h is None) != (self.bias is None):
            raise ShapeError("multi-label weights and bias must be given together")
        if self.h is not None and (self.h.shape != self.w.shape or self.bias.shape != (self.K,)):
            raise ShapeError(
                f"multi-label table {list(self.h.shape)}/{list(self.bias.shape)} does not match "
                f"{list(self.w.shape)}"
            )

    @property
    def K(self) -> int:  # noqa: N802
        return self.w.shape[0]

    @property
    def dim(self) -> int:
        return self.w.shape[1]

    @property
    def has_multilabel(self) -> bool:
        return self.h is not None


@dataclass
class RankTemperatures:
    """Learnable ``log(1/tau)`` per selection rank; shared mode reads only rank 0."""

    log_inverse_tau: Tensor
    shared: bool = False

    @property
    def kappa_max(self) -> int:
        return self.log_inverse_tau.shape[0]

    def as_shared(self) -> RankTemperatures:
        return replace(self, shared=True)

    def inverse_tau(self) -> np.ndarray:
        return np.exp(self.log_inverse_tau.data)

    def rank_scales(self, count: int) -> Tensor:
        """``1/tau`` for ranks ``0..count-1`` as a differentiable row."""

        if count < 1 or count > self.kappa_max:
            raise SelectionError(f"{count} ranks requested but only {self.kappa_max} temperatures")
        ranks = np.zeros(count, dtype=np.int64) if self.shared else np.arange(count)
        return exp(gather_rows(self.log_inverse_tau, ranks))


def initial_log_inverse_tau(kappa_max: int, inverse_tau: float = DEFAULT_INVERSE_TAU) -> np.ndarray:
    return np.full(kappa_max, np.log(inverse_tau))


@dataclass(frozen=True)
class SelectionResult:
    indices: tuple[int, ...]
    scores: tuple[float, ...]
    mode: SelectionMode

    def __post_init__(self) -> None:
        if not self.indices:
            raise SelectionError("selection is empty")
        if len(self.indices) != len(self.scores):
            raise SelectionError("selection indices and scores differ in length")
        if len(set(self.indices)) != len(self.indices):
            raise SelectionError("selection indices are not distinct")
        if self.mode is not SelectionMode.COMPLETE and any(
            later > earlier for earlier, later in zip(self.scores, self.scores[1:])
        ):
            raise SelectionError("selection scores must be non-increasing")

    @property
    def size(self) -> int:
        return len(self.indices)

    def index_array(self) -> np.ndarray:
        return np.asarray(self.indices, dtype=np.int64)

    def reordered(self, order: Sequence[int]) -> SelectionResult:
        """Same labels in a different rank order (scores follow their labels)."""

        if sorted(order) != list(range(self.size)):
            raise SelectionError(f"{list(order)} is not a permutation of {self.size} ranks")
        return SelectionResult(
            indices=tuple(self.indices[i] for i in order),
            scores=tuple(self.scores[i] for i in order),
            mode=SelectionMode.COMPLETE,
        )


def build_multilabel_target(
    seg_map: np.ndarray, K: int, ignore_index: int  # noqa: N803
) -> np.ndarray:
    values = np.asarray(seg_map).reshape(-1)
    values = values[values != ignore_index]
    if values.size and (values.min() < 0 or values.max() >= K):
        raise SelectionError(f"segmentation map holds class ids outside [0, {K})")
    target = np.zeros(K, dtype=np.int64)
    target[np.unique(values)] = 1
    return target


def _as_probs(probs: Tensor | np.ndarray | None, K: int | None) -> np.ndarray:  # noqa: N803
    if probs is None:
        if K is None:
            raise SelectionError("selection needs probabilities or a category count")
        return np.zeros(K)
    array = probs.data if isinstance(probs, Tensor) else np.asarray(probs, dtype=np.float64)
    if array.ndim != 1 or array.size < 1:
        raise ShapeError(f"selection expects a [K] probability vector, got {list(array.shape)}")
    return array


def _descending(probs: np.ndarray, ids: np.ndarray) -> np.ndarray:
    return ids[np.lexsort((ids, -probs[ids]))]


def complete_selection(K: int) -> SelectionResult:  # noqa: N803
    return SelectionResult(tuple(range(K)), tuple(0.0 for _ in range(K)), SelectionMode.COMPLETE)


def top_k_select(
    probs: Tensor | np.ndarray | None,
    kappa: int | None = None,
    mode: SelectionMode | str = SelectionMode.FIXED_K,
    threshold: float | None = None,
    gt_target: np.ndarray | None = None,
    K: int | None = None,  # noqa: N803
) -> SelectionResult:
    """Choose the categories a pixel classifier will see, highest probability first.

    Ties are broken by the lower category id. ``probs`` may be omitted for the
    oracle and complete modes when ``K`` is given; labels then keep id order.
    """

    mode = SelectionMode(mode)
    values = _as_probs(probs, K if gt_target is None else len(gt_target))
    total = values.shape[0]
    ids = np.arange(total)

    if mode is SelectionMode.COMPLETE:
        return SelectionResult(tuple(range(total)), tuple(float(v) for v in values), mode)

    if mode is SelectionMode.FIXED_K:
        if kappa is None or not 1 <= kappa <= total:
            raise SelectionError(f"kappa must be in [1, {total}], got {kappa}")
        chosen = _descending(values, ids)[:kappa]
    elif mode is SelectionMode.DYNAMIC_THRESHOLD:
        if threshold is None or not 0.0 < threshold < 1.0:
            raise SelectionError(f"threshold must be in (0, 1), got {threshold}")
        passing = ids[values > threshold]
        if passing.size == 0:
            passing = _descending(values, ids)[:1]
        chosen = _descending(values, passing)
    else:
        if gt_target is None:
            raise SelectionError("oracle selection needs a ground-truth target")
        target = np.asarray(gt_target).reshape(-1)
        if target.shape[0] != total:
            raise ShapeError(f"target has {target.shape[0]} classes, probabilities {total}")
        present = ids[target > 0]
        if present.size == 0:
            raise SelectionError("oracle selection needs at least one present class")
        chosen = _descending(values, present)

    return SelectionResult(
        indices=tuple(int(i) for i in chosen),
        scores=tuple(float(values[i]) for i in chosen),
        mode=mode,
    )


@dataclass
class MultiLabelOutput:
    probs: Tensor
    logits: Tensor
    refined: Tensor | None = None


@dataclass
class MultiLabelHead:
    """Presence scoring head; ``calls`` counts forward evaluations."""

    variant: MultiLabelHeadVariant
    layers: list[EncoderLayer | DecoderLayer] = field(default_factory=list)
    downsample_factor: int = 2
    calls: int = 0

    def __post_init__(self) -> None:
        self.variant = MultiLabelHeadVariant(self.variant)
        expected = {
            MultiLabelHeadVariant.GAP_LINEAR: (0, None),
            MultiLabelHeadVariant.TRANENC1: (1, EncoderLayer),
            MultiLabelHeadVariant.TRANDEC2: (2, DecoderLayer),
        }[self.variant]
        count, layer_type = expected
        if len(self.layers) != count or not all(isinstance(x, layer_type) for x in self.layers):
            raise ShapeError(f"{self.variant.value} head needs {count} matching layers")

    def __call__(
        self, pixel_tokens: Tensor, grid: tuple[int, int], table: CategoryTable
    ) -> MultiLabelOutput:
        if not table.has_multilabel:
            raise ShapeError("category table has no multi-label weights")
        if pixel_tokens.ndim != 2 or pixel_tokens.shape[1] != table.dim:
            raise ShapeError(
                f"multi-label head: tokens {list(pixel_tokens.shape)} do not match dim {table.dim}"
            )
        self.calls += 1

        if self.variant is MultiLabelHeadVariant.GAP_LINEAR:
            pooled = reshape(global_average_pool(pixel_tokens), (table.dim, 1))
            logits = add(reshape(matmul(table.h, pooled), (table.K,)), table.bias)
            return MultiLabelOutput(sigmoid(logits), logits)

        context = downsample_tokens(pixel_tokens, grid, self.downsample_factor)
        if self.variant is MultiLabelHeadVariant.TRANENC1:
            joined = encoder_forward(concat([table.w, context], axis=0), self.layers[0])
            refined = gather_rows(joined, np.arange(table.K))
        else:
            refined = table.w
            for layer in self.layers:
                refined = decoder_forward(refined, context, layer)
        logits = add(reduce_sum(mul(refined, table.h), axis=-1), table.bias)
        return MultiLabelOutput(sigmoid(logits), logits, refined)


def multilabel_forward(
    pixel_tokens: Tensor, grid: tuple[int, int], table: CategoryTable, head: MultiLabelHead
) -> tuple[Tensor, Tensor]:
    output = head(pixel_tokens, grid, table)
    return output.probs, output.logits


def rank_adaptive_softmax(logits: Tensor, temps: RankTemperatures) -> Tensor:
    """Softmax over columns after scaling column ``k`` by the rank-``k`` ``1/tau``."""

    return softmax(mul_row(logits, temps.rank_scales(logits.shape[-1])))


def rank_adaptive_pixel_classify(
    pixel_tokens: Tensor,
    table: CategoryTable,
    sel: SelectionResult,
    temps: RankTemperatures,
    psi_layers: Sequence[EncoderLayer],
    category_tokens: Tensor | None = None,
) -> tuple[Tensor, Tensor]:
    """Classify every pixel token over the selected categories only.

    Returns ``(z, logits)``: per-token probabilities over the ``sel.size`` selected
    labels in rank order, and the raw cosine similarities before temperature.
    ``category_tokens`` replaces ``table.w`` as the source of category embeddings.
    """

    source = table.w if category_tokens is None else category_tokens
    indices = sel.index_array()
    if indices.max() >= table.K:
        raise SelectionError(f"selection holds ids outside [0, {table.K})")
    count = sel.size
    if count > temps.kappa_max:
        raise SelectionError(f"{count} selected labels exceed {temps.kappa_max} temperatures")

    tokens = concat([gather_rows(source, indices), pixel_tokens], axis=0)
    for layer in psi_layers:
        tokens = encoder_forward(tokens, layer)
    categories = l2_normalize(gather_rows(tokens, np.arange(count)))
    pixels = l2_normalize(gather_rows(tokens, np.arange(count, tokens.shape[0])))
    logits = matmul(pixels, transpose(categories))
    return rank_adaptive_softmax(logits, temps), logits


def complete_label_classify(
    pixel_tokens: Tensor,
    table: CategoryTable,
    temps: RankTemperatures,
    psi_layers: Sequence[EncoderLayer],
    category_tokens: Tensor | None = None,
) -> tuple[Tensor, Tensor]:
    return rank_adaptive_pixel_classify(
        pixel_tokens,
        table,
        complete_selection(table.K),
        temps.as_shared(),
        psi_layers,
        category_tokens,
    )


def pixel_index(grid: tuple[int, int], patch: int) -> np.ndarray:
    """Token row feeding each pixel of the full-resolution image, row-major."""

    gh, gw = grid
    ys = np.arange(gh * patch) // patch
    xs = np.arange(gw * patch) // patch
    return (ys[:, None] * gw + xs[None, :]).reshape(-1)


def upsample_tokens(z: Tensor, grid: tuple[int, int], patch: int) -> Tensor:
    if z.ndim != 2 or z.shape[0] != grid[0] * grid[1]:
        raise ShapeError(f"upsample_tokens: {list(z.shape)} does not match grid {grid}")
    return gather_rows(z, pixel_index(grid, patch))


def predicted_ids(z: Tensor | np.ndarray, sel: SelectionResult) -> np.ndarray:
    """Original category id of the most probable selected label for every row."""

    values = z.data if isinstance(z, Tensor) else np.asarray(z)
    return sel.index_array()[np.argmax(values, axis=-1)]


__all__ = [
    "CategorySource",
    "CategoryTable",
    "DEFAULT_INVERSE_TAU",
    "MultiLabelHead",
    "MultiLabelHeadVariant",
    "MultiLabelOutput",
    "RankTemperatures",
    "SelectionMode",
    "SelectionResult",
    "build_multilabel_target",
    "complete_label_classify",
    "complete_selection",
    "initial_log_inverse_tau",
    "multilabel_forward",
    "pixel_index",
    "predicted_ids",
    "rank_adaptive_pixel_classify",
    "rank_adaptive_softmax",
    "top_k_select",
    "upsample_tokens",
]
