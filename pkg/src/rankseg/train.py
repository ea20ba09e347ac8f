"""Training and evaluation for the joint and independent schemes.

A training step runs every sample of a mini-batch through one tape: backbone,
optional multi-label head, label selection, selected-label pixel classification
and the combined loss. The mean batch loss is back-propagated once and one Adam
step is applied with the multi-label head's learning-rate multiplier.
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from rankseg.config import ExperimentConfig, Oracle, Scheme
from rankseg.errors import ConfigError, DivergenceError, MetricError, NonFiniteError
from rankseg.head import (
    SelectionMode,
    SelectionResult,
    complete_selection,
    predicted_ids,
    top_k_select,
)
from rankseg.losses import (
    LossTerms,
    asymmetric_loss,
    combine_losses,
    count_included,
    selected_ce,
)
from rankseg.metrics import (
    ConfusionMatrix,
    SelectionStats,
    mean_average_precision,
    mean_selection_stats,
    selection_label_stats,
    spearman,
)
from rankseg.model import ModelBundle, RankSegModel, build_bundle
from rankseg.optim import ParameterGroup, adam_step
from rankseg.synth import Dataset, SyntheticSample
from rankseg.tensor import Tape, Tensor, add, backward, no_tape, precision, scalar_mul

logger = logging.getLogger(__name__)

SHUFFLE_STREAM = 3
LABELER_SHUFFLE_STREAM = 4


class EvalSelection(str, Enum):
    PREDICTED = "predicted"
    ORACLE = "oracle"
    COMPLETE = "complete"


@dataclass(frozen=True)
class StepRecord:
    step: int
    epoch: int
    total: float
    seg: float
    ml: float


@dataclass
class EpochRecord:
    epoch: int
    total: float
    seg: float
    ml: float
    miou: float | None = None
    map: float | None = None


@dataclass
class EvalResult:
    selection: EvalSelection
    confusion: ConfusionMatrix
    miou: float
    map: float | None
    selection_stats: dict[str, float]
    excluded_pixels: int
    kappa: int | None = None
    mode: str = SelectionMode.COMPLETE.value

    @property
    def per_class_iou(self) -> list[float | None]:
        return [None if np.isnan(value) else float(value) for value in self.confusion.iou()]


@dataclass
class TrainResult:
    bundle: ModelBundle
    steps: list[StepRecord] = field(default_factory=list)
    epochs: list[EpochRecord] = field(default_factory=list)
    labeler_steps: list[StepRecord] = field(default_factory=list)
    labeler_epochs: list[EpochRecord] = field(default_factory=list)
    trained_ranks: int = 0

    @property
    def multilabel_calls(self) -> int:
        return sum(model.ml_head.calls for model in self.bundle.models() if model.ml_head)

    def tau_spearman(self) -> float | None:
        """Rank correlation between rank index and learned ``1/tau`` over trained ranks."""

        temps = self.bundle.segmenter.temps
        if temps is None or temps.shared or self.trained_ranks < 2:
            return None
        values = temps.inverse_tau()[: self.trained_ranks]
        return spearman(np.arange(1, self.trained_ranks + 1), values)


def training_selection(
    config: ExperimentConfig, probs: Tensor | np.ndarray | None, target: np.ndarray
) -> SelectionResult:
    """Labels the pixel classifier sees during a training step."""

    K = config.num_classes  # noqa: N806
    if config.run.oracle is Oracle.GT_TRAIN_EVAL:
        return top_k_select(probs, mode=SelectionMode.ORACLE_GT, gt_target=target, K=K)
    if config.uses_selection:
        if probs is None:
            raise ConfigError(f"run.mode {config.run.mode.value} needs multi-label predictions")
        return top_k_select(probs, config.selection.kappa, SelectionMode.FIXED_K)
    return complete_selection(K)


def _mean(terms: Sequence[Tensor]) -> Tensor:
    total = terms[0]
    for term in terms[1:]:
        total = add(total, term)
    return scalar_mul(total, 1.0 / len(terms))


def _batches(count: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(count)
    return [order[start : start + batch_size] for start in range(0, count, batch_size)]


def _segmentation_loss(
    bundle: ModelBundle, sample: SyntheticSample
) -> tuple[Tensor, Tensor | None, SelectionResult]:
    config = bundle.config
    model = bundle.segmenter
    tokens = model.encode(sample.image)
    ml_loss = None
    refined = None
    probs = None
    if model.has_multilabel:
        output = model.multilabel(tokens)
        probs, refined = output.probs, output.refined
        ml_loss = asymmetric_loss(output.probs, sample.multilabel, config.loss.asymmetric())
    elif bundle.labeler is not None:
        frozen = bundle.multilabel_probs(sample.image)
        probs = frozen.probs if frozen is not None else None

    sel = training_selection(config, probs, sample.multilabel)
    z = model.classify(tokens, sel, refined, shared=sel.mode is SelectionMode.COMPLETE)
    seg_loss = selected_ce(z, sample.seg_map, sel, model.ignore_index)
    return seg_loss, ml_loss, sel


def _labeler_loss(bundle: ModelBundle, sample: SyntheticSample) -> Tensor:
    labeler = bundle.labeler
    output = labeler.multilabel(labeler.encode(sample.image))
    return asymmetric_loss(output.probs, sample.multilabel, bundle.config.loss.asymmetric())


def _apply_step(model: RankSegModel, tape: Tape, terms: LossTerms, step: int) -> None:
    config = model.config
    try:
        if tape.produced(terms.total):
            backward(terms.total, tape)
            adam_step(
                model.registry,
                config.train.base_lr,
                {ParameterGroup.ML_HEAD: config.train.ml_head_lr_multiplier},
                skip_missing=True,
            )
        else:
            model.registry.zero_grad()
    except NonFiniteError as exc:
        raise DivergenceError(step, str(exc)) from exc


def _epoch_record(epoch: int, steps: Sequence[StepRecord]) -> EpochRecord:
    return EpochRecord(
        epoch=epoch,
        total=float(np.mean([record.total for record in steps])) if steps else 0.0,
        seg=float(np.mean([record.seg for record in steps])) if steps else 0.0,
        ml=float(np.mean([record.ml for record in steps])) if steps else 0.0,
    )


def _train_labeler(bundle: ModelBundle, dataset: Dataset, result: TrainResult) -> None:
    config = bundle.config
    labeler = bundle.labeler
    stream = np.random.SeedSequence(config.run.seed, spawn_key=(LABELER_SHUFFLE_STREAM,))
    rng = np.random.default_rng(stream)
    step = 0
    for epoch in range(1, config.ml_epochs + 1):
        epoch_steps = []
        for batch in _batches(len(dataset), config.train.batch_size, rng):
            try:
                with Tape() as tape:
                    losses = [_labeler_loss(bundle, dataset.samples[i]) for i in batch]
                    ml = _mean(losses)
                    zero = Tensor(0.0, dtype=ml.dtype)
                    terms = combine_losses(zero, ml, config.loss.weights())
            except NonFiniteError as exc:
                raise DivergenceError(step, str(exc)) from exc
            _apply_step(labeler, tape, terms, step)
            record = StepRecord(step, epoch, terms.total.item(), terms.seg, terms.ml)
            epoch_steps.append(record)
            logger.debug("labeler step %d: ml=%.6f", step, record.ml)
            step += 1
        result.labeler_steps.extend(epoch_steps)
        summary = _epoch_record(epoch, epoch_steps)
        result.labeler_epochs.append(summary)
        logger.info("Labeler epoch %d/%d: ml=%.4f", epoch, config.ml_epochs, summary.ml)


def train(
    config: ExperimentConfig, dataset: Dataset, test_dataset: Dataset | None = None
) -> TrainResult:
    """Train a bundle for ``config`` on ``dataset``.

    ``test_dataset`` is only used for the periodic curves requested by
    ``train.eval_every``. Non-finite values abort with :class:`DivergenceError`.
    """

    if dataset.num_classes != config.num_classes:
        raise ConfigError(
            f"dataset has {dataset.num_classes} classes but synthetic.num_classes is "
            f"{config.num_classes}"
        )
    with precision(config.run.precision):
        bundle = build_bundle(config)
        result = TrainResult(bundle=bundle)
        if config.run.scheme is Scheme.INDEPENDENT:
            _train_labeler(bundle, dataset, result)

        model = bundle.segmenter
        stream = np.random.SeedSequence(config.run.seed, spawn_key=(SHUFFLE_STREAM,))
        rng = np.random.default_rng(stream)
        step = 0
        for epoch in range(1, config.train.epochs + 1):
            epoch_steps = []
            for batch in _batches(len(dataset), config.train.batch_size, rng):
                try:
                    with Tape() as tape:
                        seg_terms, ml_terms = [], []
                        for index in batch:
                            seg, ml, sel = _segmentation_loss(bundle, dataset.samples[index])
                            seg_terms.append(seg)
                            if ml is not None:
                                ml_terms.append(ml)
                            result.trained_ranks = max(result.trained_ranks, sel.size)
                        terms = combine_losses(
                            _mean(seg_terms),
                            _mean(ml_terms) if ml_terms else None,
                            config.loss.weights(),
                        )
                except NonFiniteError as exc:
                    raise DivergenceError(step, str(exc)) from exc
                _apply_step(model, tape, terms, step)
                record = StepRecord(step, epoch, terms.total.item(), terms.seg, terms.ml)
                epoch_steps.append(record)
                logger.debug(
                    "step %d: total=%.6f seg=%.6f ml=%.6f",
                    step,
                    record.total,
                    record.seg,
                    record.ml,
                )
                step += 1

            result.steps.extend(epoch_steps)
            summary = _epoch_record(epoch, epoch_steps)
            every = config.train.eval_every
            if every and test_dataset is not None and epoch % every == 0:
                curve = evaluate(bundle, test_dataset)
                summary.miou, summary.map = curve.miou, curve.map
            result.epochs.append(summary)
            logger.info(
                "Epoch %d/%d: total=%.4f seg=%.4f ml=%.4f%s",
                epoch,
                config.train.epochs,
                summary.total,
                summary.seg,
                summary.ml,
                "" if summary.miou is None else f" miou={summary.miou:.4f}",
            )
    return result


def default_eval_selection(config: ExperimentConfig) -> EvalSelection:
    if config.run.oracle is Oracle.NONE:
        return EvalSelection.PREDICTED
    return EvalSelection.ORACLE


def _eval_select(
    config: ExperimentConfig,
    selection: EvalSelection,
    probs: np.ndarray | None,
    target: np.ndarray,
    kappa: int,
    mode: SelectionMode,
    threshold: float,
) -> SelectionResult:
    K = config.num_classes  # noqa: N806
    if selection is EvalSelection.ORACLE:
        return top_k_select(probs, mode=SelectionMode.ORACLE_GT, gt_target=target, K=K)
    if selection is EvalSelection.COMPLETE or probs is None or not config.uses_selection:
        return complete_selection(K)
    sel = top_k_select(probs, kappa, mode, threshold)
    if sel.size > config.kappa_max:
        limit = config.kappa_max
        sel = SelectionResult(sel.indices[:limit], sel.scores[:limit], sel.mode)
    return sel


def evaluate(
    bundle: ModelBundle,
    dataset: Dataset,
    selection: EvalSelection | str | None = None,
    kappa: int | None = None,
    mode: SelectionMode | str | None = None,
    threshold: float | None = None,
) -> EvalResult:
    """Score ``bundle`` on ``dataset`` without recording a tape.

    Pixels whose ground-truth class was left out of the selection can never be
    predicted correctly and count against mIoU.
    """

    config = bundle.config
    K = config.num_classes  # noqa: N806
    if dataset.num_classes != K:
        raise ConfigError(f"dataset has {dataset.num_classes} classes but the model has {K}")
    selection = default_eval_selection(config) if selection is None else EvalSelection(selection)
    kappa = config.eval_kappa if kappa is None else kappa
    mode = config.selection.eval_mode if mode is None else SelectionMode(mode)
    threshold = config.selection.threshold if threshold is None else threshold
    if not 1 <= kappa <= config.kappa_max:
        raise ConfigError(f"evaluation kappa must be in [1, {config.kappa_max}], got {kappa}")

    model = bundle.segmenter
    confusion = ConfusionMatrix.empty(K)
    scores, targets = [], []
    stats: list[SelectionStats] = []
    excluded = 0
    used_mode = SelectionMode.COMPLETE
    with precision(config.run.precision), no_tape():
        for sample in dataset.samples:
            tokens = model.encode(sample.image)
            output = bundle.multilabel_probs(sample.image, tokens)
            probs = None if output is None else output.probs.data
            refined = None if output is None else output.refined
            if probs is not None:
                scores.append(probs)
                targets.append(sample.multilabel)
            sel = _eval_select(
                config, selection, probs, sample.multilabel, kappa, mode, threshold
            )
            used_mode = sel.mode
            z = model.classify(tokens, sel, refined, shared=sel.mode is SelectionMode.COMPLETE)
            pred_map = predicted_ids(z, sel).reshape(sample.seg_map.shape)
            confusion = confusion + ConfusionMatrix.from_maps(
                pred_map, sample.seg_map, K, model.ignore_index
            )
            labelled = int(np.count_nonzero(sample.seg_map != model.ignore_index))
            excluded += labelled - count_included(sample.seg_map, sel, model.ignore_index)
            stats.append(selection_label_stats(sel, sample.multilabel))

    map_value = None
    if scores:
        try:
            map_value = mean_average_precision(np.stack(scores), np.stack(targets))
        except MetricError:
            logger.warning("mAP undefined on this dataset; no class has a positive sample")
    return EvalResult(
        selection=selection,
        confusion=confusion,
        miou=confusion.miou(),
        map=map_value,
        selection_stats=mean_selection_stats(stats),
        excluded_pixels=excluded,
        kappa=kappa if used_mode is SelectionMode.FIXED_K else None,
        mode=used_mode.value,
    )


__all__ = [
    "EpochRecord",
    "EvalResult",
    "EvalSelection",
    "StepRecord",
    "TrainResult",
    "default_eval_selection",
    "evaluate",
    "train",
    "training_selection",
]
