"""Run reports, temperature dumps, and their JSON / CSV encodings."""

from __future__ import annotations

import csv
import dataclasses
import json
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from rankseg import __version__
from rankseg.config import ExperimentConfig
from rankseg.errors import ConfigError
from rankseg.model import ModelBundle
from rankseg.train import EpochRecord, EvalResult, TrainResult

REPORT_FILENAME = "report.json"
TAU_FILENAME = "tau.csv"
TAU_COLUMNS = ["rank", "inverse_tau", "mode"]


def _finite_or_none(value: float | None) -> float | None:
    if value is None or math.isnan(value):
        return None
    return float(value)


@dataclass
class RunReport:
    """Everything one run reports; ``None`` stands for an undefined metric."""

    config: dict[str, dict[str, Any]]
    seed: int
    miou: float | None
    map: float | None
    per_class_iou: list[float | None] = field(default_factory=list)
    epochs: list[dict[str, Any]] = field(default_factory=list)
    labeler_epochs: list[dict[str, Any]] = field(default_factory=list)
    inverse_tau: list[float] = field(default_factory=list)
    tau_mode: str = "shared"
    trained_ranks: int = 0
    tau_spearman: float | None = None
    eval_selection: str = "predicted"
    eval_mode: str = "complete"
    eval_kappa: int | None = None
    selection_stats: dict[str, float] = field(default_factory=dict)
    excluded_pixels: int = 0
    model_stats: dict[str, int] = field(default_factory=dict)
    multilabel_calls: int = 0
    wall_clock_seconds: float = 0.0
    version: str = __version__

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def comparable(self) -> dict[str, Any]:
        """The report without timing, for determinism checks."""

        data = self.to_dict()
        data.pop("wall_clock_seconds")
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> RunReport:
        names = {item.name for item in dataclasses.fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise ConfigError(f"Unknown report fields: {', '.join(unknown)}")
        return cls(**dict(data))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=False)

    def write(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json() + "\n", encoding="utf-8")
        return path

    @classmethod
    def read(cls, path: Path) -> RunReport:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"Report not found: {path}")
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"Cannot parse {path}: {exc}") from exc
        return cls.from_dict(data)


def _epoch_dict(record: EpochRecord) -> dict[str, Any]:
    data = dataclasses.asdict(record)
    data["miou"] = _finite_or_none(record.miou)
    data["map"] = _finite_or_none(record.map)
    return data


def build_report(
    config: ExperimentConfig,
    evaluation: EvalResult,
    training: TrainResult | None = None,
    bundle: ModelBundle | None = None,
    model_stats: Mapping[str, int] | None = None,
    wall_clock_seconds: float = 0.0,
) -> RunReport:
    """Assemble a report from an evaluation and, when available, its training run."""

    bundle = bundle or (training.bundle if training is not None else None)
    if bundle is None:
        raise ConfigError("build_report needs a trained result or a model bundle")
    rows = dump_tau(bundle)
    return RunReport(
        config=config.to_dict(),
        seed=config.run.seed,
        miou=_finite_or_none(evaluation.miou),
        map=_finite_or_none(evaluation.map),
        per_class_iou=evaluation.per_class_iou,
        epochs=[_epoch_dict(record) for record in training.epochs] if training else [],
        labeler_epochs=(
            [_epoch_dict(record) for record in training.labeler_epochs] if training else []
        ),
        inverse_tau=[row.inverse_tau for row in rows],
        tau_mode=rows[0].mode,
        trained_ranks=training.trained_ranks if training else 0,
        tau_spearman=_finite_or_none(training.tau_spearman()) if training else None,
        eval_selection=evaluation.selection.value,
        eval_mode=evaluation.mode,
        eval_kappa=evaluation.kappa,
        selection_stats=dict(evaluation.selection_stats),
        excluded_pixels=evaluation.excluded_pixels,
        model_stats=dict(model_stats or {}),
        multilabel_calls=training.multilabel_calls if training else 0,
        wall_clock_seconds=wall_clock_seconds,
    )


@dataclass(frozen=True)
class TauRow:
    rank: int
    inverse_tau: float
    mode: str


def dump_tau(bundle: ModelBundle) -> list[TauRow]:
    """``1/tau`` per selection rank (1-based); a shared temperature is one row."""

    temps = bundle.segmenter.temps
    if temps is None:
        raise ConfigError("model has no pixel classifier temperatures")
    values = temps.inverse_tau()
    if temps.shared:
        return [TauRow(rank=1, inverse_tau=float(values[0]), mode="shared")]
    return [
        TauRow(rank=index + 1, inverse_tau=float(value), mode="rank_adaptive")
        for index, value in enumerate(values)
    ]


def write_tau_csv(path: Path, rows: Sequence[TauRow]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(TAU_COLUMNS)
        for row in rows:
            writer.writerow([row.rank, repr(row.inverse_tau), row.mode])
    return path


def read_tau_csv(path: Path) -> list[TauRow]:
    with Path(path).open("r", newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames != TAU_COLUMNS:
            raise ConfigError(f"{path}: expected columns {', '.join(TAU_COLUMNS)}")
        return [
            TauRow(int(row["rank"]), float(row["inverse_tau"]), row["mode"]) for row in reader
        ]


def summary_lines(report: RunReport) -> list[str]:
    def fmt(value: float | None) -> str:
        return "n/a" if value is None else f"{value:.4f}"

    run = report.config.get("run", {})
    lines = [
        f"Run | mode: {run.get('mode')} | scheme: {run.get('scheme')} | "
        f"oracle: {run.get('oracle')} | seed: {report.seed}",
        f"Eval | selection: {report.eval_selection} ({report.eval_mode}) | "
        f"miou: {fmt(report.miou)} | map: {fmt(report.map)}",
        f"Temperatures | {report.tau_mode} | trained ranks: {report.trained_ranks} | "
        f"spearman: {fmt(report.tau_spearman)}",
    ]
    if report.model_stats:
        lines.append(
            "Model | params: {total} | flops/image: {flops}".format(
                total=report.model_stats.get("total", 0),
                flops=report.model_stats.get("flops_per_image", 0),
            )
        )
    if report.epochs:
        last = report.epochs[-1]
        lines.append(
            f"Last epoch {last['epoch']} | total: {last['total']:.4f} | "
            f"seg: {last['seg']:.4f} | ml: {last['ml']:.4f}"
        )
    return lines


__all__ = [
    "REPORT_FILENAME",
    "RunReport",
    "TAU_COLUMNS",
    "TAU_FILENAME",
    "TauRow",
    "build_report",
    "dump_tau",
    "read_tau_csv",
    "summary_lines",
    "write_tau_csv",
]
