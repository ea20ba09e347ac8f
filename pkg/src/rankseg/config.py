"""Configuration loading and the typed experiment configuration.

Configuration files are mappings of sections (``data``, ``synthetic``, ``model``,
``selection``, ``loss``, ``train``, ``run``) to fields. Values are layered as
defaults, then a preset, then the file, then ``--set section.field=value``
overrides; every key is validated against the dataclass schema below.
"""

from __future__ import annotations

import dataclasses
import json
import types
import typing
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any

try:  # pragma: no cover - fallback for Python < 3.11
    import tomllib  # type: ignore[attr-defined]
except ModuleNotFoundError:  # pragma: no cover - fallback import
    import tomli as tomllib  # type: ignore[no-redef]

import yaml

from rankseg.errors import ConfigError
from rankseg.head import CategorySource, MultiLabelHeadVariant, SelectionMode
from rankseg.losses import AsymmetricLossParams, LossWeights
from rankseg.synth import SyntheticConfig
from rankseg.tensor import PRECISIONS

CONFIG_FILENAMES = [".rankseg.toml", ".rankseg.yaml", ".rankseg.yml", ".rankseg.json"]


class Mode(str, Enum):
    BASELINE = "baseline"
    MT = "mt"
    MT_LS = "mt_ls"
    MT_LS_RA = "mt_ls_ra"


class Scheme(str, Enum):
    JOINT = "joint"
    INDEPENDENT = "independent"


class Oracle(str, Enum):
    NONE = "none"
    GT_EVAL = "gt_eval"
    GT_TRAIN_EVAL = "gt_train_eval"


class TauMode(str, Enum):
    AUTO = "auto"
    SHARED = "shared"
    RANK_ADAPTIVE = "rank_adaptive"


class DataSource(str, Enum):
    FILE = "file"
    SYNTHETIC = "synthetic"


@dataclass(slots=True)
class LoadedConfig:
    """Container for a configuration file discovered on disk."""

    path: Path | None
    data: dict[str, Any]

    @property
    def exists(self) -> bool:
        return self.path is not None


def _load_toml(path: Path) -> dict[str, Any]:
    with path.open("rb") as handle:
        return tomllib.load(handle)


def _load_yaml(path: Path) -> dict[str, Any]:
    with path.open("r", encoding="utf-8") as handle:
        return yaml.safe_load(handle) or {}


def _load_json(path: Path) -> dict[str, Any]:
    with path.open("r", encoding="utf-8") as handle:
        return json.load(handle)


def read_config_file(path: Path) -> dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"Configuration file not found: {path}")
    try:
        if path.suffix == ".toml":
            data = _load_toml(path)
        elif path.suffix in {".yaml", ".yml"}:
            data = _load_yaml(path)
        else:
            data = _load_json(path)
    except (tomllib.TOMLDecodeError, yaml.YAMLError, json.JSONDecodeError) as exc:
        raise ConfigError(f"Cannot parse {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: configuration must be a mapping at the top level")
    return data


def load_config(base_dir: Path | None = None, explicit: Path | None = None) -> LoadedConfig:
    """Load configuration from disk using precedence TOML > YAML > JSON."""

    if explicit is not None:
        return LoadedConfig(path=Path(explicit), data=read_config_file(Path(explicit)))

    search_root = base_dir or Path.cwd()
    for name in CONFIG_FILENAMES:
        candidate = search_root / name
        if candidate.exists():
            return LoadedConfig(path=candidate, data=read_config_file(candidate))
    return LoadedConfig(path=None, data={})


@dataclass(frozen=True)
class DataConfig:
    source: DataSource = DataSource.FILE
    train_path: str | None = None
    test_path: str | None = None


@dataclass(frozen=True)
class ModelConfig:
    patch: int = 4
    dim: int = 64
    depth: int = 2
    heads: int = 4
    mlp_ratio: int = 2
    head_variant: MultiLabelHeadVariant = MultiLabelHeadVariant.TRANENC1
    downsample_factor: int = 2
    psi_depth: int = 2
    tau_mode: TauMode = TauMode.AUTO
    category_source: CategorySource = CategorySource.ORIGINAL
    kappa_max: int | None = None


@dataclass(frozen=True)
class SelectionConfig:
    kappa: int = 16
    eval_kappa: int | None = None
    eval_mode: SelectionMode = SelectionMode.FIXED_K
    threshold: float = 0.5


@dataclass(frozen=True)
class LossConfig:
    seg_weight: float = 1.0
    ml_weight: float = 10.0
    gamma_pos: float = 0.0
    gamma_neg: float = 4.0
    clip_margin: float = 0.05

    def weights(self) -> LossWeights:
        return LossWeights(seg_weight=self.seg_weight, ml_weight=self.ml_weight)

    def asymmetric(self) -> AsymmetricLossParams:
        return AsymmetricLossParams(self.gamma_pos, self.gamma_neg, self.clip_margin)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    ml_epochs: int | None = None
    batch_size: int = 16
    base_lr: float = 3e-4
    ml_head_lr_multiplier: float = 1.0
    eval_every: int = 0


@dataclass(frozen=True)
class RunConfig:
    mode: Mode = Mode.MT_LS_RA
    scheme: Scheme = Scheme.JOINT
    oracle: Oracle = Oracle.NONE
    precision: str = "float32"
    seed: int = 0
    preset: str | None = None
    workers: int = 1


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def __post_init__(self) -> None:
        validate(self)

    @property
    def num_classes(self) -> int:
        return self.synthetic.num_classes

    @property
    def kappa_max(self) -> int:
        return self.model.kappa_max or self.num_classes

    @property
    def uses_multilabel(self) -> bool:
        return self.run.mode is not Mode.BASELINE

    @property
    def uses_selection(self) -> bool:
        if self.run.oracle is Oracle.GT_TRAIN_EVAL:
            return True
        return self.run.mode in {Mode.MT_LS, Mode.MT_LS_RA}

    @property
    def rank_adaptive(self) -> bool:
        if self.model.tau_mode is TauMode.AUTO:
            return self.run.mode is Mode.MT_LS_RA
        return self.model.tau_mode is TauMode.RANK_ADAPTIVE

    @property
    def eval_kappa(self) -> int:
        return self.selection.eval_kappa or self.selection.kappa

    @property
    def ml_epochs(self) -> int:
        return self.train.epochs if self.train.ml_epochs is None else self.train.ml_epochs

    def with_overrides(self, overrides: Mapping[str, Any]) -> ExperimentConfig:
        return apply_overrides(self, overrides)

    def to_dict(self) -> dict[str, dict[str, Any]]:
        return {
            section.name: {
                item.name: _plain(getattr(getattr(self, section.name), item.name))
                for item in dataclasses.fields(getattr(self, section.name))
            }
            for section in dataclasses.fields(self)
        }


SECTIONS: dict[str, type] = {
    item.name: typing.get_type_hints(ExperimentConfig)[item.name]
    for item in dataclasses.fields(ExperimentConfig)
}


def _plain(value: Any) -> Any:
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, tuple):
        return [_plain(item) for item in value]
    return value


def validate(config: ExperimentConfig) -> None:
    K = config.num_classes  # noqa: N806
    model, selection, train, run = config.model, config.selection, config.train, config.run
    for name in ("patch", "dim", "heads", "mlp_ratio", "downsample_factor"):
        if getattr(model, name) < 1:
            raise ConfigError(f"model.{name} must be positive")
    if model.depth < 0 or model.psi_depth < 0:
        raise ConfigError("model.depth and model.psi_depth must be non-negative")
    if model.dim % model.heads:
        raise ConfigError(f"model.dim {model.dim} must be divisible by model.heads {model.heads}")
    for extent in ("height", "width"):
        if getattr(config.synthetic, extent) % model.patch:
            raise ConfigError(f"synthetic.{extent} must be divisible by model.patch")
    grid = (config.synthetic.height // model.patch, config.synthetic.width // model.patch)
    if grid[0] % model.downsample_factor or grid[1] % model.downsample_factor:
        raise ConfigError("model.downsample_factor must divide the patch grid")
    if not 1 <= config.kappa_max <= K:
        raise ConfigError(f"model.kappa_max must be in [1, {K}]")
    kappas = (("selection.kappa", selection.kappa), ("selection.eval_kappa", config.eval_kappa))
    for name, value in kappas:
        if not 1 <= value <= config.kappa_max:
            raise ConfigError(f"{name} must be in [1, {config.kappa_max}], got {value}")
    if not 0.0 < selection.threshold < 1.0:
        raise ConfigError("selection.threshold must be in (0, 1)")
    if selection.eval_mode not in {SelectionMode.FIXED_K, SelectionMode.DYNAMIC_THRESHOLD}:
        raise ConfigError("selection.eval_mode must be 'fixed' or 'dynamic'")
    if train.epochs < 0 or config.ml_epochs < 0 or train.eval_every < 0:
        raise ConfigError("train.epochs, ml_epochs and eval_every must be non-negative")
    if train.batch_size < 1:
        raise ConfigError("train.batch_size must be positive")
    if train.base_lr <= 0 or train.ml_head_lr_multiplier <= 0:
        raise ConfigError("train.base_lr and train.ml_head_lr_multiplier must be positive")
    if run.precision not in PRECISIONS:
        raise ConfigError(f"run.precision must be one of {', '.join(PRECISIONS)}")
    if run.workers < 1:
        raise ConfigError("run.workers must be positive")
    if run.scheme is Scheme.INDEPENDENT and run.mode not in {Mode.MT_LS, Mode.MT_LS_RA}:
        raise ConfigError("run.scheme = independent requires run.mode mt_ls or mt_ls_ra")
    if model.category_source is CategorySource.REFINED and (
        model.head_variant is MultiLabelHeadVariant.GAP_LINEAR
        or not config.uses_multilabel
        or run.scheme is Scheme.INDEPENDENT
    ):
        raise ConfigError(
            "model.category_source = refined needs a joint transformer multi-label head"
        )
    LossWeights(config.loss.seg_weight, config.loss.ml_weight)
    config.loss.asymmetric()


def _unwrap_optional(hint: Any) -> tuple[Any, bool]:
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        args = [arg for arg in typing.get_args(hint) if arg is not type(None)]
        if len(args) == 1:
            return args[0], True
    return hint, False


def coerce_value(key: str, value: Any, hint: Any) -> Any:
    """Convert a parsed config value to the field type declared for ``key``."""

    inner, optional = _unwrap_optional(hint)
    if value is None or (isinstance(value, str) and value.strip().lower() in {"none", "null"}):
        if optional:
            return None
        raise ConfigError(f"{key} may not be empty")
    try:
        if isinstance(inner, type) and issubclass(inner, Enum):
            return inner(str(value).strip().lower())
        if inner is bool:
            if isinstance(value, bool):
                return value
            text = str(value).strip().lower()
            if text in {"true", "1", "yes", "y"}:
                return True
            if text in {"false", "0", "no", "n"}:
                return False
            raise ValueError(value)
        if inner is int:
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError(value)
            return int(value)
        if inner is float:
            if isinstance(value, bool):
                raise ValueError(value)
            return float(value)
        if inner is str:
            return str(value)
        if typing.get_origin(inner) is tuple:
            items = list(value) if isinstance(value, list | tuple) else [value]
            args = typing.get_args(inner)
            if len(args) == 2 and args[1] is Ellipsis:
                return tuple(coerce_value(key, item, args[0]) for item in items)
            if len(items) != len(args):
                raise ValueError(value)
            pairs = zip(items, args, strict=True)
            return tuple(coerce_value(key, item, arg) for item, arg in pairs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"Invalid value for {key}: {value!r}") from exc
    raise ConfigError(f"Unsupported field type for {key}")  # pragma: no cover


def flatten(data: Mapping[str, Any], prefix: str = "") -> dict[str, Any]:
    """``{"train": {"epochs": 3}}`` becomes ``{"train.epochs": 3}``."""

    flat: dict[str, Any] = {}
    for key, value in data.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, Mapping) and not prefix:
            flat.update(flatten(value, f"{dotted}."))
        else:
            flat[dotted] = value
    return flat


def apply_overrides(config: ExperimentConfig, overrides: Mapping[str, Any]) -> ExperimentConfig:
    grouped: dict[str, dict[str, Any]] = {}
    for key, value in overrides.items():
        section_name, _, field_name = key.partition(".")
        if section_name not in SECTIONS or not field_name or "." in field_name:
            raise ConfigError(f"Unknown configuration key: {key}")
        hints = typing.get_type_hints(SECTIONS[section_name])
        if field_name not in hints:
            raise ConfigError(f"Unknown configuration key: {key}")
        value = coerce_value(key, value, hints[field_name])
        grouped.setdefault(section_name, {})[field_name] = value

    sections = {}
    for section_name, values in grouped.items():
        sections[section_name] = dataclasses.replace(getattr(config, section_name), **values)
    return dataclasses.replace(config, **sections)


def parse_set_option(option: str) -> tuple[str, Any]:
    """Split ``section.field=value``; the value is read as a YAML scalar or list."""

    key, sep, raw = option.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"Expected KEY=VALUE for --set, got {option!r}")
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as exc:
        raise ConfigError(f"Cannot parse value for {key.strip()}: {exc}") from exc
    return key.strip(), value


def build_config(
    file_data: Mapping[str, Any] | None = None,
    set_options: Iterable[str] = (),
    preset: str | None = None,
    base: ExperimentConfig | None = None,
) -> ExperimentConfig:
    from rankseg.presets import get_preset

    file_values = flatten(file_data or {})
    cli_values = dict(parse_set_option(option) for option in set_options)
    preset_name = preset or cli_values.get("run.preset") or file_values.get("run.preset")

    merged: dict[str, Any] = {}
    if preset_name:
        merged.update(get_preset(str(preset_name)).overrides)
        merged["run.preset"] = preset_name
    merged.update(file_values)
    merged.update(cli_values)
    if preset:
        merged["run.preset"] = preset
    return apply_overrides(base or ExperimentConfig(), merged)


def config_from_dict(data: Mapping[str, Any]) -> ExperimentConfig:
    """Rebuild a configuration from :meth:`ExperimentConfig.to_dict` output."""

    return apply_overrides(ExperimentConfig(), flatten(data))


__all__ = [
    "CONFIG_FILENAMES",
    "DataConfig",
    "DataSource",
    "ExperimentConfig",
    "LoadedConfig",
    "LossConfig",
    "Mode",
    "ModelConfig",
    "Oracle",
    "RunConfig",
    "SECTIONS",
    "Scheme",
    "SelectionConfig",
    "TauMode",
    "TrainConfig",
    "apply_overrides",
    "build_config",
    "coerce_value",
    "config_from_dict",
    "flatten",
    "load_config",
    "parse_set_option",
    "read_config_file",
    "validate",
]
