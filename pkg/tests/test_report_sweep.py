from __future__ import annotations

from pathlib import Path

import pytest
from openpyxl import load_workbook

from rankseg.entrypoints import MODEL_FILENAME, run_evaluation, run_experiment
from rankseg.errors import ConfigError
from rankseg.report import (
    REPORT_FILENAME,
    TAU_FILENAME,
    RunReport,
    dump_tau,
    read_tau_csv,
    summary_lines,
)
from rankseg.report_xlsx import write_xlsx_report
from rankseg.sweep import (
    SWEEP_FILENAME,
    SweepAxis,
    SweepRow,
    SweepTable,
    load_sweep,
    mean_rows,
    parse_axis,
    parse_seeds,
    plan_sweep,
    read_sweep_csv,
    run_sweep,
    write_sweep_csv,
)
from rankseg.train import train


def test_run_experiment_writes_report_tau_and_model(tiny_config, tmp_path: Path) -> None:
    result = run_experiment(tiny_config(), tmp_path / "run")
    assert result.report_path == tmp_path / "run" / REPORT_FILENAME
    assert result.model_path == tmp_path / "run" / MODEL_FILENAME
    assert result.model_path.is_file()

    report = RunReport.read(result.report_path)
    assert report.to_dict() == result.report.to_dict()
    assert 0.0 <= report.miou <= 1.0
    assert report.tau_mode == "rank_adaptive"
    assert len(report.inverse_tau) == 8
    assert report.trained_ranks == 3
    assert report.eval_selection == "predicted"
    assert report.eval_kappa == 3
    assert len(report.per_class_iou) == 8
    assert [epoch["epoch"] for epoch in report.epochs] == [1, 2]
    assert report.model_stats["flops_per_image"] > 0

    rows = read_tau_csv(tmp_path / "run" / TAU_FILENAME)
    assert [row.inverse_tau for row in rows] == report.inverse_tau
    assert [row.rank for row in rows] == list(range(1, 9))


def test_reports_are_deterministic_apart_from_timing(tiny_config, tmp_path: Path) -> None:
    first = run_experiment(tiny_config(), tmp_path / "a", save_model=False)
    second = run_experiment(tiny_config(), tmp_path / "b", save_model=False)
    assert first.model_path is None
    assert first.report.comparable() == second.report.comparable()


def test_shared_temperature_dumps_one_row(tiny_config, tiny_data) -> None:
    rows = dump_tau(train(tiny_config(run__mode="mt_ls"), tiny_data[0]).bundle)
    assert len(rows) == 1
    assert rows[0].rank == 1
    assert rows[0].mode == "shared"


def test_saved_model_evaluates_with_oracle_selection(tiny_config, tmp_path: Path) -> None:
    trained = run_experiment(tiny_config(), tmp_path / "run")
    evaluated = run_evaluation(trained.model_path, tmp_path / "eval", selection="oracle")
    report = RunReport.read(evaluated.report_path)
    assert report.eval_selection == "oracle"
    assert report.excluded_pixels == 0
    assert report.epochs == []
    assert report.inverse_tau == trained.report.inverse_tau


def test_report_validation_and_summary(tiny_config, tmp_path: Path) -> None:
    report = run_experiment(tiny_config(), tmp_path / "run", save_model=False).report
    with pytest.raises(ConfigError, match="Unknown report fields"):
        RunReport.from_dict({**report.to_dict(), "extra": 1})
    with pytest.raises(ConfigError, match="not found"):
        RunReport.read(tmp_path / "missing.json")
    lines = summary_lines(report)
    assert lines[0].startswith("Run | mode: mt_ls_ra")
    assert any(line.startswith("Eval | selection: predicted") for line in lines)


def test_run_report_workbook_has_expected_sheets(tiny_config, tmp_path: Path) -> None:
    report = run_experiment(tiny_config(), tmp_path / "run", save_model=False).report
    path = tmp_path / "report.xlsx"
    write_xlsx_report(report, path)
    workbook = load_workbook(path)
    assert workbook.sheetnames == ["Summary", "Epochs", "PerClassIoU", "Tau"]
    summary = {row[0]: row[1] for row in workbook["Summary"].iter_rows(values_only=True)}
    assert summary["Mode"] == "mt_ls_ra"
    assert summary["Trained ranks"] == 3
    assert workbook["Tau"].max_row == 9
    summary_ws = workbook["Summary"]
    assert summary_ws.freeze_panes == "A2"
    labels = [str(row[0]) for row in summary_ws.iter_rows(values_only=True) if row[0] is not None]
    expected = min(max(max(len(label) for label in labels) + 2, 8), 60)
    assert summary_ws.column_dimensions["A"].width == expected


def test_parse_axis_resolves_aliases() -> None:
    assert parse_axis("kappa=1,2,4") == SweepAxis("selection.kappa", (1, 2, 4))
    assert parse_axis("tau_mode=shared,rank_adaptive").key == "model.tau_mode"
    assert parse_axis("loss.gamma_neg=0,4").values == (0, 4)
    with pytest.raises(ConfigError, match="Unknown sweep axis"):
        parse_axis("speed=1,2")
    with pytest.raises(ConfigError):
        parse_axis("kappa")


def test_parse_seeds() -> None:
    assert parse_seeds("0, 1,2") == [0, 1, 2]
    with pytest.raises(ConfigError):
        parse_seeds("a,b")
    with pytest.raises(ConfigError):
        parse_seeds(" , ")


def test_plan_sweep_crosses_axes_and_seeds() -> None:
    runs = plan_sweep([parse_axis("kappa=1,2,4,8")], [0, 1, 2])
    assert len(runs) == 12
    assert runs[0].run_id == "r000" and runs[-1].run_id == "r011"
    assert runs[4].overrides() == {"selection.kappa": 2, "run.seed": 1}
    with pytest.raises(ConfigError, match="only once"):
        plan_sweep([parse_axis("kappa=1"), parse_axis("selection.kappa=2")], [0])


def test_mean_rows_average_successful_seeds() -> None:
    axes = ["selection.kappa"]
    rows = [
        SweepRow("r000", {"selection.kappa": "2"}, 0, "ok", 0.5, 0.9),
        SweepRow("r001", {"selection.kappa": "2"}, 1, "ok", 0.7, None),
        SweepRow("r002", {"selection.kappa": "4"}, 0, "error", error="boom"),
    ]
    means = mean_rows(axes, rows)
    assert means[0].miou == pytest.approx(0.6)
    assert means[0].map == pytest.approx(0.9)
    assert means[1].status == "error"
    assert means[1].miou is None


def test_sweep_csv_round_trip(tmp_path: Path) -> None:
    axes = ["selection.kappa", "loss.ml_weight"]
    rows = [
        SweepRow("r000", {"selection.kappa": "2", "loss.ml_weight": "1.0"}, 0, "ok", 0.25, 0.5),
        SweepRow("r001", {"selection.kappa": "2", "loss.ml_weight": "1.0"}, 1, "error", error="x"),
    ]
    table = SweepTable(axes=axes, rows=rows, means=mean_rows(axes, rows))
    loaded = read_sweep_csv(write_sweep_csv(tmp_path / SWEEP_FILENAME, table))
    assert loaded.axes == axes
    assert loaded.rows == rows
    assert loaded.means == table.means


def test_read_sweep_csv_rejects_other_tables(tmp_path: Path) -> None:
    path = tmp_path / "other.csv"
    path.write_text("a,b\n1,2\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="not a sweep table"):
        read_sweep_csv(path)


def test_run_sweep_records_failures_without_stopping(tiny_config, tmp_path: Path) -> None:
    base = tiny_config(train__epochs=1)
    table = run_sweep(base, [parse_axis("kappa=2,9")], [0, 1], tmp_path / "sweep", workers=1)
    assert [row.status for row in table.rows] == ["ok", "ok", "error", "error"]
    assert "selection.kappa" in table.rows[2].error
    assert [row.status for row in table.means] == ["ok", "error"]

    loaded = load_sweep(tmp_path / "sweep")
    assert [row.run_id for row in loaded.rows] == ["r000", "r001", "r002", "r003"]
    assert set(loaded.reports) == {"r000", "r001"}
    assert loaded.reports["r001"].seed == 1

    path = tmp_path / "sweep.xlsx"
    write_xlsx_report(loaded, path)
    workbook = load_workbook(path)
    assert workbook.sheetnames == ["Sweep"]
    assert workbook["Sweep"].max_row == 1 + 4 + 2
