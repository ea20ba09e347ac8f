"""Ablation sweeps: the cross product of axis values and seeds, one run each."""

from __future__ import annotations

import csv
import itertools
import logging
import math
from collections.abc import Iterable, Mapping, Sequence
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from rankseg.config import ExperimentConfig, config_from_dict
from rankseg.errors import ConfigError, RankSegError
from rankseg.report import REPORT_FILENAME, RunReport

logger = logging.getLogger(__name__)

SWEEP_FILENAME = "sweep.csv"
MEAN_RUN_ID = "mean"

AXIS_ALIASES = {
    "kappa": "selection.kappa",
    "eval_kappa": "selection.eval_kappa",
    "ml_weight": "loss.ml_weight",
    "head_variant": "model.head_variant",
    "tau_mode": "model.tau_mode",
    "mode": "run.mode",
    "ml_head_lr_multiplier": "train.ml_head_lr_multiplier",
}


@dataclass(frozen=True)
class SweepAxis:
    key: str
    values: tuple[Any, ...]


def resolve_axis_key(name: str) -> str:
    key = AXIS_ALIASES.get(name.strip(), name.strip())
    if "." not in key:
        raise ConfigError(f"Unknown sweep axis: {name}")
    return key


def parse_axis(text: str) -> SweepAxis:
    """``kappa=8,16,32`` becomes ``SweepAxis("selection.kappa", (8, 16, 32))``."""

    name, sep, raw = text.partition("=")
    if not sep or not raw.strip():
        raise ConfigError(f"Expected AXIS=V1,V2,... for --axis, got {text!r}")
    values = []
    for item in raw.split(","):
        try:
            values.append(yaml.safe_load(item.strip()))
        except yaml.YAMLError as exc:
            raise ConfigError(f"Cannot parse sweep value {item!r}: {exc}") from exc
    return SweepAxis(resolve_axis_key(name), tuple(values))


def parse_seeds(text: str) -> list[int]:
    try:
        seeds = [int(item) for item in text.split(",") if item.strip()]
    except ValueError as exc:
        raise ConfigError(f"Seeds must be comma separated integers, got {text!r}") from exc
    if not seeds:
        raise ConfigError("At least one seed is required")
    return seeds


@dataclass(frozen=True)
class SweepRun:
    run_id: str
    values: Mapping[str, Any]
    seed: int

    def overrides(self) -> dict[str, Any]:
        return {**self.values, "run.seed": self.seed}


def plan_sweep(axes: Sequence[SweepAxis], seeds: Sequence[int]) -> list[SweepRun]:
    keys = [axis.key for axis in axes]
    if len(set(keys)) != len(keys):
        raise ConfigError("Each sweep axis may appear only once")
    combos = itertools.product(*(axis.values for axis in axes))
    runs = []
    for combo in combos:
        for seed in seeds:
            runs.append(SweepRun(f"r{len(runs):03d}", dict(zip(keys, combo, strict=True)), seed))
    return runs


@dataclass
class SweepRow:
    run_id: str
    values: dict[str, str]
    seed: int | None
    status: str
    miou: float | None = None
    map: float | None = None
    error: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "ok"


@dataclass
class SweepTable:
    axes: list[str]
    rows: list[SweepRow] = field(default_factory=list)
    means: list[SweepRow] = field(default_factory=list)
    reports: dict[str, RunReport] = field(default_factory=dict)


def _cell(value: Any) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _run_one(
    base: dict[str, Any], run: SweepRun, out_dir: str, data_dir: str | None
) -> SweepRow:
    from rankseg.entrypoints import run_experiment

    values = {key: _cell(value) for key, value in run.values.items()}
    try:
        config = config_from_dict(base).with_overrides(run.overrides())
        result = run_experiment(
            config,
            Path(out_dir) / run.run_id,
            base_dir=Path(data_dir) if data_dir else None,
            save_model=False,
        )
    except (RankSegError, OSError) as exc:
        logger.warning("Sweep run %s failed: %s", run.run_id, exc)
        return SweepRow(run.run_id, values, run.seed, "error", error=str(exc))
    report = result.report
    return SweepRow(run.run_id, values, run.seed, "ok", report.miou, report.map)


def _mean(values: Iterable[float | None]) -> float | None:
    present = [value for value in values if value is not None]
    return float(np.mean(present)) if present else None


def mean_rows(axes: Sequence[str], rows: Sequence[SweepRow]) -> list[SweepRow]:
    """One row per axis-value combination averaging its successful seeds."""

    groups: dict[tuple[str, ...], list[SweepRow]] = {}
    for row in rows:
        groups.setdefault(tuple(row.values[key] for key in axes), []).append(row)
    means = []
    for combo, members in groups.items():
        done = [row for row in members if row.ok]
        means.append(
            SweepRow(
                run_id=MEAN_RUN_ID,
                values=dict(zip(axes, combo, strict=True)),
                seed=None,
                status="ok" if done else "error",
                miou=_mean(row.miou for row in done),
                map=_mean(row.map for row in done),
                error="" if done else "no successful runs",
            )
        )
    return means


def run_sweep(
    base: ExperimentConfig,
    axes: Sequence[SweepAxis],
    seeds: Sequence[int],
    out_dir: Path,
    *,
    workers: int | None = None,
    data_dir: Path | None = None,
) -> SweepTable:
    """Run every (axis values, seed) combination and write ``sweep.csv``.

    A failing run is recorded with status ``error`` and does not stop the others.
    """

    runs = plan_sweep(axes, seeds)
    workers = workers or base.run.workers
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    base_dict = base.to_dict()
    data_text = str(data_dir) if data_dir else None
    logger.info("Sweep of %d runs on %d worker(s)", len(runs), workers)

    rows: list[SweepRow] = []
    if workers == 1:
        rows = [_run_one(base_dict, run, str(out_dir), data_text) for run in runs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            futures = {
                executor.submit(_run_one, base_dict, run, str(out_dir), data_text): run
                for run in runs
            }
            for future in as_completed(futures):
                run = futures[future]
                try:
                    rows.append(future.result())
                except Exception as exc:  # worker process died
                    values = {key: _cell(value) for key, value in run.values.items()}
                    rows.append(SweepRow(run.run_id, values, run.seed, "error", error=str(exc)))
        rows.sort(key=lambda row: row.run_id)

    keys = [axis.key for axis in axes]
    table = SweepTable(axes=keys, rows=rows, means=mean_rows(keys, rows))
    write_sweep_csv(out_dir / SWEEP_FILENAME, table)
    return table


def _number(value: float | None) -> str:
    return "" if value is None or math.isnan(value) else repr(float(value))


def write_sweep_csv(path: Path, table: SweepTable) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["run_id", *table.axes, "seed", "status", "miou", "map", "error"])
        for row in [*table.rows, *table.means]:
            writer.writerow(
                [
                    row.run_id,
                    *(row.values[key] for key in table.axes),
                    "" if row.seed is None else row.seed,
                    row.status,
                    _number(row.miou),
                    _number(row.map),
                    row.error,
                ]
            )
    return path


def _optional_float(text: str) -> float | None:
    return float(text) if text else None


def read_sweep_csv(path: Path) -> SweepTable:
    with Path(path).open("r", newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        fixed = ["seed", "status", "miou", "map", "error"]
        if not header or header[0] != "run_id" or header[-len(fixed) :] != fixed:
            raise ConfigError(f"{path} is not a sweep table")
        axes = header[1 : -len(fixed)]
        table = SweepTable(axes=axes)
        for cells in reader:
            run_id, *axis_values, seed, status, miou, map_value, error = cells
            row = SweepRow(
                run_id=run_id,
                values=dict(zip(axes, axis_values, strict=True)),
                seed=int(seed) if seed else None,
                status=status,
                miou=_optional_float(miou),
                map=_optional_float(map_value),
                error=error,
            )
            (table.means if run_id == MEAN_RUN_ID else table.rows).append(row)
    return table


def load_sweep(directory: Path) -> SweepTable:
    """Re-read ``sweep.csv`` and every run's ``report.json`` under ``directory``."""

    directory = Path(directory)
    path = directory / SWEEP_FILENAME if directory.is_dir() else directory
    if not path.is_file():
        raise ConfigError(f"Sweep table not found: {path}")
    table = read_sweep_csv(path)
    for row in table.rows:
        report_path = path.parent / row.run_id / REPORT_FILENAME
        if row.ok and report_path.is_file():
            table.reports[row.run_id] = RunReport.read(report_path)
    return table


__all__ = [
    "AXIS_ALIASES",
    "MEAN_RUN_ID",
    "SWEEP_FILENAME",
    "SweepAxis",
    "SweepRow",
    "SweepRun",
    "SweepTable",
    "load_sweep",
    "mean_rows",
    "parse_axis",
    "parse_seeds",
    "plan_sweep",
    "read_sweep_csv",
    "resolve_axis_key",
    "run_sweep",
    "write_sweep_csv",
]
