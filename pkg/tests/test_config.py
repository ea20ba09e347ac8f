from __future__ import annotations

import re
from pathlib import Path

import pytest

try:
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - Python < 3.11
    import tomli as tomllib

from rankseg.cli import main
from rankseg.config import (
    ExperimentConfig,
    Mode,
    Scheme,
    TauMode,
    build_config,
    coerce_value,
    config_from_dict,
    load_config,
    parse_set_option,
)
from rankseg.errors import ConfigError
from rankseg.head import MultiLabelHeadVariant, SelectionMode
from rankseg.presets import PRESETS, get_preset


def test_defaults_describe_the_full_method() -> None:
    config = ExperimentConfig()
    assert config.num_classes == 64
    assert config.selection.kappa == 16
    assert config.run.mode is Mode.MT_LS_RA
    assert config.run.precision == "float32"
    assert config.kappa_max == 64
    assert config.rank_adaptive and config.uses_selection and config.uses_multilabel


def test_precedence_is_preset_then_file_then_set() -> None:
    file_data = {"selection": {"kappa": 4}, "run": {"mode": "mt"}}
    config = build_config(file_data, ["selection.kappa=5"], preset="baseline")
    assert config.selection.kappa == 5
    assert config.run.mode is Mode.MT
    assert config.run.preset == "baseline"
    assert config.run.oracle.value == "none"


def test_preset_named_in_the_file_is_applied() -> None:
    config = build_config({"run": {"preset": "independent"}})
    assert config.run.scheme is Scheme.INDEPENDENT
    assert config.run.preset == "independent"


@pytest.mark.parametrize(
    "option", ["selection.kapa=3", "selections.kappa=3", "model=3", "model.dim.extra=3"]
)
def test_unknown_keys_are_rejected_by_name(option: str) -> None:
    key = option.partition("=")[0]
    with pytest.raises(ConfigError, match=re.escape(key)):
        build_config({}, [option])


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_every_preset_builds_a_valid_config(name: str) -> None:
    config = build_config(preset=name)
    assert config.run.preset == name


def test_unknown_preset_lists_the_choices() -> None:
    with pytest.raises(ConfigError, match="mt_ls_ra"):
        get_preset("fancy")


def test_tau_mode_auto_follows_the_run_mode() -> None:
    assert not build_config({}, ["run.mode=mt_ls"]).rank_adaptive
    assert build_config({}, ["run.mode=mt_ls", "model.tau_mode=rank_adaptive"]).rank_adaptive
    assert not build_config({}, ["model.tau_mode=shared"]).rank_adaptive
    assert build_config({}, ["run.mode=baseline", "run.oracle=gt_train_eval"]).uses_selection


def test_coerce_value_converts_declared_types() -> None:
    assert coerce_value("selection.kappa", "8", int) == 8
    assert coerce_value("loss.ml_weight", 2, float) == 2.0
    mode = coerce_value("selection.eval_mode", "DYNAMIC", SelectionMode)
    assert mode is SelectionMode.DYNAMIC_THRESHOLD
    assert coerce_value("model.kappa_max", "none", int | None) is None
    assert coerce_value("synthetic.blobs_per_class", [2, 4], tuple[int, int]) == (2, 4)
    with pytest.raises(ConfigError, match="selection.kappa"):
        coerce_value("selection.kappa", 2.5, int)
    with pytest.raises(ConfigError):
        coerce_value("selection.kappa", None, int)
    with pytest.raises(ConfigError):
        coerce_value("model.head_variant", "mlp", MultiLabelHeadVariant)


def test_parse_set_option_reads_yaml_scalars() -> None:
    assert parse_set_option("selection.kappa=8") == ("selection.kappa", 8)
    assert parse_set_option("synthetic.blobs_per_class=[1, 2]") == (
        "synthetic.blobs_per_class",
        [1, 2],
    )
    assert parse_set_option("model.kappa_max=") == ("model.kappa_max", None)
    with pytest.raises(ConfigError, match="KEY=VALUE"):
        parse_set_option("selection.kappa")


@pytest.mark.parametrize(
    "options",
    [
        ["selection.kappa=65"],
        ["model.kappa_max=8", "selection.kappa=9"],
        ["selection.eval_mode=oracle"],
        ["selection.threshold=1.0"],
        ["model.dim=30", "model.heads=4"],
        ["model.patch=5"],
        ["run.scheme=independent", "run.mode=mt"],
        ["model.category_source=refined", "model.head_variant=gap_linear"],
        ["run.precision=float16"],
        ["train.batch_size=0"],
        ["loss.ml_weight=-1"],
    ],
)
def test_invalid_combinations_raise_config_error(options: list[str]) -> None:
    with pytest.raises(ConfigError):
        build_config({}, options)


def test_to_dict_round_trips() -> None:
    config = build_config(
        {"synthetic": {"blobs_per_class": [2, 3]}, "model": {"tau_mode": "shared"}},
        ["selection.eval_kappa=8"],
    )
    assert config_from_dict(config.to_dict()) == config


def test_load_config_prefers_toml(tmp_path: Path) -> None:
    (tmp_path / ".rankseg.yaml").write_text("selection:\n  kappa: 3\n", encoding="utf-8")
    (tmp_path / ".rankseg.toml").write_text("[selection]\nkappa = 7\n", encoding="utf-8")
    loaded = load_config(tmp_path)
    assert loaded.path.name == ".rankseg.toml"
    assert loaded.data == {"selection": {"kappa": 7}}
    assert not load_config(tmp_path / "missing").exists


def test_load_config_reports_unreadable_files(tmp_path: Path) -> None:
    broken = tmp_path / "broken.toml"
    broken.write_text("[selection\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="Cannot parse"):
        load_config(explicit=broken)
    with pytest.raises(ConfigError, match="not found"):
        load_config(explicit=tmp_path / "absent.yaml")


def test_init_template_parses_to_a_valid_config(tmp_path: Path, monkeypatch) -> None:
    monkeypatch.chdir(tmp_path)
    assert main(["init"]) == 0
    text = (tmp_path / ".rankseg.toml").read_text(encoding="utf-8")
    uncommented = re.sub(r"^# (\w+ = )", r"\1", text, flags=re.MULTILINE)
    data = tomllib.loads(uncommented)
    assert set(data) == {"data", "synthetic", "model", "selection", "loss", "train", "run"}
    config = build_config(data)
    assert config.selection.kappa == 16
    assert config.model.tau_mode is TauMode.AUTO
    assert config.synthetic.blobs_per_class == (1, 3)
