"""Programmatic entrypoints shared by the CLI and sweep workers."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

from rankseg.config import DataSource, ExperimentConfig
from rankseg.errors import ConfigError
from rankseg.model import ModelBundle, load_bundle, model_stats, save_bundle
from rankseg.report import (
    REPORT_FILENAME,
    TAU_FILENAME,
    RunReport,
    build_report,
    dump_tau,
    write_tau_csv,
)
from rankseg.synth import (
    Dataset,
    Split,
    distribution_report,
    generate_dataset,
    read_dataset,
    write_distribution_csv,
)
from rankseg.train import EvalSelection, evaluate, train

logger = logging.getLogger(__name__)

MODEL_FILENAME = "model.npz"
TRAIN_DATA_FILENAME = "train.rseg"
TEST_DATA_FILENAME = "test.rseg"
DIST_FILENAME = "dist.csv"


@dataclass(slots=True)
class ExperimentRunResult:
    """Structured response returned by :func:`run_experiment` and :func:`run_evaluation`."""

    output_dir: Path
    report: RunReport
    report_path: Path
    model_path: Path | None = None
    tau_path: Path | None = None
    produced: list[Path] = field(default_factory=list)


@dataclass(slots=True)
class GeneratedData:
    train_path: Path
    test_path: Path
    dist_path: Path
    train: Dataset
    test: Dataset


def generate_data(config: ExperimentConfig, output_dir: Path) -> GeneratedData:
    """Write both synthetic splits and the class-count distribution of the train split."""

    output_dir = Path(output_dir)
    synthetic = config.synthetic
    train_path = output_dir / TRAIN_DATA_FILENAME
    test_path = output_dir / TEST_DATA_FILENAME
    train_data = generate_dataset(synthetic, synthetic.train_size, train_path, Split.TRAIN)
    test_data = generate_dataset(synthetic, synthetic.test_size, test_path, Split.TEST)
    dist_path = write_distribution_csv(
        output_dir / DIST_FILENAME, distribution_report(train_data.samples)
    )
    return GeneratedData(train_path, test_path, dist_path, train_data, test_data)


def _check_dataset(dataset: Dataset, config: ExperimentConfig, key: str) -> Dataset:
    synthetic = config.synthetic
    if dataset.num_classes != config.num_classes:
        raise ConfigError(
            f"{key}: dataset has {dataset.num_classes} classes, "
            f"synthetic.num_classes is {config.num_classes}"
        )
    expected = (synthetic.channels, synthetic.height, synthetic.width)
    if dataset.samples and dataset.samples[0].image.shape != expected:
        raise ConfigError(
            f"{key}: images are {dataset.samples[0].image.shape}, expected {expected} "
            "from synthetic.channels/height/width"
        )
    return dataset


def _read_split(config: ExperimentConfig, key: str, base_dir: Path | None) -> Dataset:
    value = getattr(config.data, key.split(".", 1)[1])
    if not value:
        raise ConfigError(f"Missing dataset path: set {key} (or data.source = synthetic)")
    path = Path(value)
    if not path.is_absolute() and base_dir is not None:
        path = base_dir / path
    if not path.is_file():
        raise ConfigError(f"{key}: dataset file not found: {path}")
    return _check_dataset(read_dataset(path), config, key)


def load_datasets(
    config: ExperimentConfig, base_dir: Path | None = None, *, need_train: bool = True
) -> tuple[Dataset | None, Dataset]:
    """Train and test splits from ``data.*_path`` files, or freshly generated."""

    if config.data.source is DataSource.SYNTHETIC:
        synthetic = config.synthetic
        train_data = None
        if need_train:
            train_data = generate_dataset(synthetic, synthetic.train_size, split=Split.TRAIN)
        return train_data, generate_dataset(synthetic, synthetic.test_size, split=Split.TEST)
    train_data = _read_split(config, "data.train_path", base_dir) if need_train else None
    return train_data, _read_split(config, "data.test_path", base_dir)


def run_experiment(
    config: ExperimentConfig,
    output_dir: Path,
    *,
    train_data: Dataset | None = None,
    test_data: Dataset | None = None,
    base_dir: Path | None = None,
    save_model: bool = True,
) -> ExperimentRunResult:
    """Train, evaluate, and write ``report.json``, ``tau.csv`` and ``model.npz``."""

    if train_data is None or test_data is None:
        loaded_train, loaded_test = load_datasets(config, base_dir)
        train_data = loaded_train if train_data is None else train_data
        test_data = loaded_test if test_data is None else test_data

    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()
    training = train(config, train_data, test_data)
    evaluation = evaluate(training.bundle, test_data)
    stats = model_stats(training.bundle)
    report = build_report(
        config,
        evaluation,
        training,
        model_stats=stats,
        wall_clock_seconds=time.perf_counter() - started,
    )

    report_path = report.write(output_dir / REPORT_FILENAME)
    tau_path = write_tau_csv(output_dir / TAU_FILENAME, dump_tau(training.bundle))
    produced = [report_path, tau_path]
    model_path = None
    if save_model:
        model_path = save_bundle(output_dir / MODEL_FILENAME, training.bundle)
        produced.append(model_path)
    logger.info("Run finished: miou=%.4f in %.1fs", evaluation.miou, report.wall_clock_seconds)
    return ExperimentRunResult(
        output_dir=output_dir,
        report=report,
        report_path=report_path,
        model_path=model_path,
        tau_path=tau_path,
        produced=produced,
    )


def run_evaluation(
    model_path: Path,
    output_dir: Path,
    *,
    selection: EvalSelection | str | None = None,
    kappa: int | None = None,
    test_data: Dataset | None = None,
    config: ExperimentConfig | None = None,
    base_dir: Path | None = None,
) -> ExperimentRunResult:
    """Evaluate a saved model; ``config`` may redirect data and evaluation settings."""

    bundle: ModelBundle = load_bundle(model_path)
    data_config = config or bundle.config
    if test_data is None:
        _, test_data = load_datasets(data_config, base_dir, need_train=False)
    settings = data_config.selection
    started = time.perf_counter()
    evaluation = evaluate(
        bundle,
        test_data,
        selection=selection,
        kappa=data_config.eval_kappa if kappa is None else kappa,
        mode=settings.eval_mode,
        threshold=settings.threshold,
    )
    report = build_report(
        bundle.config,
        evaluation,
        bundle=bundle,
        model_stats=model_stats(bundle),
        wall_clock_seconds=time.perf_counter() - started,
    )
    output_dir = Path(output_dir)
    report_path = report.write(output_dir / REPORT_FILENAME)
    return ExperimentRunResult(
        output_dir=output_dir, report=report, report_path=report_path, produced=[report_path]
    )


__all__ = [
    "DIST_FILENAME",
    "ExperimentRunResult",
    "GeneratedData",
    "MODEL_FILENAME",
    "TEST_DATA_FILENAME",
    "TRAIN_DATA_FILENAME",
    "generate_data",
    "load_datasets",
    "run_evaluation",
    "run_experiment",
]
