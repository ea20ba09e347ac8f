"""Utilities for rendering run reports and sweep tables as XLSX workbooks."""

from __future__ import annotations

from collections.abc import Iterable
from os import PathLike
from typing import Any, BinaryIO

from openpyxl import Workbook
from openpyxl.utils import get_column_letter

from rankseg.report import RunReport
from rankseg.sweep import SweepTable

MIN_COLUMN_WIDTH = 8
MAX_COLUMN_WIDTH = 60


def _append_rows(ws, rows: Iterable[tuple[Any, ...]]) -> None:  # type: ignore[no-untyped-def]
    for row in rows:
        ws.append(["" if value is None else value for value in row])


def _set_table_formatting(ws) -> None:  # type: ignore[no-untyped-def]
    ws.freeze_panes = "A2"
    last_column = get_column_letter(ws.max_column or 1)
    last_row = ws.max_row or 1
    ws.auto_filter.ref = f"A1:{last_column}{last_row}"
    for cells in ws.iter_cols(min_row=1, max_row=last_row):
        longest = max((len(str(cell.value)) for cell in cells if cell.value is not None), default=0)
        width = min(max(longest + 2, MIN_COLUMN_WIDTH), MAX_COLUMN_WIDTH)
        ws.column_dimensions[get_column_letter(cells[0].column)].width = width


def _format_summary_sheet(ws, report: RunReport) -> None:  # type: ignore[no-untyped-def]
    run = report.config.get("run", {})
    stats = report.selection_stats
    rows = [
        ("Metric", "Value"),
        ("Mode", run.get("mode", "")),
        ("Scheme", run.get("scheme", "")),
        ("Oracle", run.get("oracle", "")),
        ("Preset", run.get("preset") or ""),
        ("Seed", report.seed),
        ("Precision", run.get("precision", "")),
        ("mIoU", report.miou),
        ("mAP", report.map),
        ("Eval selection", report.eval_selection),
        ("Eval mode", report.eval_mode),
        ("Eval kappa", report.eval_kappa),
        ("Mean selected labels", stats.get("mean_kappa")),
        ("Label precision", stats.get("label_precision")),
        ("Label recall", stats.get("label_recall")),
        ("Excluded pixels", report.excluded_pixels),
        ("Temperature mode", report.tau_mode),
        ("Trained ranks", report.trained_ranks),
        ("Tau Spearman", report.tau_spearman),
        ("Multi-label head calls", report.multilabel_calls),
        ("Wall clock (s)", report.wall_clock_seconds),
        ("Version", report.version),
    ]
    rows.extend((f"Params: {name}", value) for name, value in report.model_stats.items())
    _append_rows(ws, rows)
    _set_table_formatting(ws)


def _write_epoch_sheet(ws, report: RunReport) -> None:  # type: ignore[no-untyped-def]
    headers = ("phase", "epoch", "total", "seg", "ml", "miou", "map")
    rows: list[tuple[Any, ...]] = [headers]
    for phase, records in (("labeler", report.labeler_epochs), ("segmentation", report.epochs)):
        for record in records:
            rows.append((phase, *(record.get(name) for name in headers[1:])))
    _append_rows(ws, rows)
    _set_table_formatting(ws)


def _write_iou_sheet(ws, report: RunReport) -> None:  # type: ignore[no-untyped-def]
    rows: list[tuple[Any, ...]] = [("class", "iou")]
    rows.extend(enumerate(report.per_class_iou))
    _append_rows(ws, rows)
    _set_table_formatting(ws)


def _write_tau_sheet(ws, report: RunReport) -> None:  # type: ignore[no-untyped-def]
    rows: list[tuple[Any, ...]] = [("rank", "inverse_tau", "mode")]
    rows.extend(
        (rank, value, report.tau_mode) for rank, value in enumerate(report.inverse_tau, 1)
    )
    _append_rows(ws, rows)
    _set_table_formatting(ws)


def _write_sweep_sheet(ws, table: SweepTable) -> None:  # type: ignore[no-untyped-def]
    rows: list[tuple[Any, ...]] = [
        ("run_id", *table.axes, "seed", "status", "miou", "map", "error")
    ]
    for row in [*table.rows, *table.means]:
        values = (row.values[key] for key in table.axes)
        rows.append((row.run_id, *values, row.seed, row.status, row.miou, row.map, row.error))
    _append_rows(ws, rows)
    _set_table_formatting(ws)


def render_run_workbook(report: RunReport) -> Workbook:
    """Create a workbook with Summary, Epochs, PerClassIoU and Tau sheets."""

    workbook = Workbook()
    summary_ws = workbook.active
    summary_ws.title = "Summary"
    _format_summary_sheet(summary_ws, report)
    _write_epoch_sheet(workbook.create_sheet("Epochs"), report)
    _write_iou_sheet(workbook.create_sheet("PerClassIoU"), report)
    _write_tau_sheet(workbook.create_sheet("Tau"), report)
    return workbook


def render_sweep_workbook(table: SweepTable) -> Workbook:
    workbook = Workbook()
    sweep_ws = workbook.active
    sweep_ws.title = "Sweep"
    _write_sweep_sheet(sweep_ws, table)
    return workbook


def write_xlsx_report(
    source: RunReport | SweepTable, destination: BinaryIO | PathLike[str] | str
) -> None:
    """Render the workbook for a run report or sweep table and save it."""

    if isinstance(source, SweepTable):
        workbook = render_sweep_workbook(source)
    else:
        workbook = render_run_workbook(source)
    workbook.save(destination)


__all__ = ["render_run_workbook", "render_sweep_workbook", "write_xlsx_report"]
