"""Command line interface for the rankseg experiment runner."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
import typing
from collections.abc import Callable, Sequence
from enum import Enum
from pathlib import Path
from typing import Any, NoReturn

from rankseg import __version__
from rankseg.config import (
    SECTIONS,
    ExperimentConfig,
    build_config,
    load_config,
)
from rankseg.errors import ConfigError, RankSegError
from rankseg.model import load_bundle
from rankseg.presets import list_presets
from rankseg.report import (
    REPORT_FILENAME,
    TAU_FILENAME,
    RunReport,
    dump_tau,
    summary_lines,
    write_tau_csv,
)
from rankseg.sweep import SWEEP_FILENAME, load_sweep, parse_axis, parse_seeds, run_sweep
from rankseg.train import EvalSelection

EXIT_SUCCESS = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2

CONFIG_TEMPLATE_NAME = ".rankseg.toml"

FIELD_HELP = {
    "data.source": "read train/test files, or generate the synthetic splits in memory",
    "data.train_path": "RSEG1 file written by `rankseg gen-data`",
    "data.test_path": "RSEG1 file used for evaluation",
    "synthetic.num_classes": "K, the number of categories",
    "synthetic.max_classes": "most classes painted into one image",
    "synthetic.class_count_distribution": "P(n classes) for n = 1..max_classes; unset = uniform",
    "synthetic.zipf_exponent": "class frequency skew; 0 = uniform",
    "synthetic.blobs_per_class": "[min, max] rectangles per foreground class",
    "synthetic.seed": "data seed; train and test splits share class signatures",
    "synthetic.rect_grid": "snap rectangle corners to this grid; 1 = unsnapped",
    "model.head_variant": "multi-label head architecture",
    "model.downsample_factor": "pixel-token downsampling before the multi-label head",
    "model.psi_depth": "encoder layers mixing selected categories with pixel tokens",
    "model.tau_mode": "auto follows run.mode",
    "model.category_source": "refined needs a joint transformer multi-label head",
    "model.kappa_max": "number of rank temperatures; unset = num_classes",
    "selection.kappa": "labels kept per image during training",
    "selection.eval_kappa": "labels kept at evaluation; unset = selection.kappa",
    "selection.eval_mode": "fixed keeps eval_kappa labels, dynamic keeps p > threshold",
    "loss.ml_weight": "weight of the multi-label loss in the total",
    "loss.gamma_neg": "focusing exponent for negatives",
    "loss.clip_margin": "probability shift applied to negatives",
    "train.ml_epochs": "independent scheme labeler epochs; unset = train.epochs",
    "train.ml_head_lr_multiplier": "learning-rate multiplier of the multi-label head",
    "train.eval_every": "record test mIoU/mAP every N epochs; 0 = only at the end",
    "run.oracle": "ground-truth label selection at evaluation, or at training and evaluation",
    "run.precision": "float32 or float64",
    "run.workers": "sweep worker processes",
}

TEMPLATE_EXAMPLES = {
    "data.train_path": '"data/train.rseg"',
    "data.test_path": '"data/test.rseg"',
    "synthetic.class_count_distribution": "[0.2, 0.2, 0.2, 0.2, 0.1, 0.1]",
    "model.kappa_max": "64",
    "selection.eval_kappa": "16",
    "train.ml_epochs": "30",
    "run.preset": '"mt_ls_ra"',
}

logger = logging.getLogger(__name__)


class _ArgumentParser(argparse.ArgumentParser):
    """Argument errors are configuration errors and exit with status 1."""

    def error(self, message: str) -> NoReturn:
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _add_common_options(parser: argparse.ArgumentParser, seed_help: str) -> None:
    parser.add_argument("--config", help="Configuration file (default: discover .rankseg.*)")
    parser.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="Override one configuration key, e.g. selection.kappa=8 (repeatable)",
    )
    parser.add_argument(
        "--preset",
        choices=[preset.name for preset in list_presets()],
        help="Apply a named experiment preset before the file and --set values",
    )
    parser.add_argument("--seed", type=int, help=seed_help)
    parser.add_argument("--out", help="Output directory")
    parser.add_argument("--verbose", action="store_true", help="Log progress at DEBUG level")


def _create_parser(prog: str, description: str) -> argparse.ArgumentParser:
    return _ArgumentParser(prog=f"rankseg {prog}", description=description)


def _parse_gen_data_args(argv: Sequence[str]) -> argparse.Namespace:
    parser = _create_parser("gen-data", "Write synthetic train/test datasets and dist.csv.")
    _add_common_options(parser, "Data seed (synthetic.seed)")
    return parser.parse_args(argv)


def _parse_train_args(argv: Sequence[str]) -> argparse.Namespace:
    parser = _create_parser(
        "train", "Train a model, evaluate it, and write report.json, tau.csv and model.npz."
    )
    _add_common_options(parser, "Run seed (run.seed)")
    return parser.parse_args(argv)


def _parse_eval_args(argv: Sequence[str]) -> argparse.Namespace:
    parser = _create_parser("eval", "Evaluate a saved model and write report.json.")
    parser.add_argument("--model", required=True, help="Path to a saved model.npz")
    parser.add_argument(
        "--selection",
        choices=[item.value for item in EvalSelection],
        help="Label selection at evaluation (default: oracle for oracle runs, else predicted)",
    )
    parser.add_argument(
        "--kappa", type=int, help="Evaluation kappa (default: selection.eval_kappa)"
    )
    _add_common_options(parser, "Run seed recorded in the report (run.seed)")
    return parser.parse_args(argv)


def _parse_sweep_args(argv: Sequence[str]) -> argparse.Namespace:
    parser = _create_parser("sweep", "Run an ablation sweep and write sweep.csv.")
    parser.add_argument(
        "--axis",
        action="append",
        required=True,
        metavar="KEY=V1,V2",
        help="Sweep axis: kappa, ml_weight, head_variant, tau_mode or any section.field",
    )
    parser.add_argument("--seeds", default="0", help="Comma separated run seeds (default: 0)")
    parser.add_argument("--workers", type=int, help="Worker processes (default: run.workers)")
    _add_common_options(parser, "Base run seed, replaced per run by --seeds")
    return parser.parse_args(argv)


def _parse_dump_tau_args(argv: Sequence[str]) -> argparse.Namespace:
    parser = _create_parser("dump-tau", "Write the learned 1/tau per rank as CSV.")
    parser.add_argument("--model", required=True, help="Path to a saved model.npz")
    parser.add_argument("--out", help="CSV path (default: tau.csv next to the model)")
    parser.add_argument("--verbose", action="store_true", help="Log progress at DEBUG level")
    return parser.parse_args(argv)


def _parse_report_args(argv: Sequence[str]) -> argparse.Namespace:
    parser = _create_parser("report", "Summarise a report.json or sweep.csv.")
    parser.add_argument("path", help="report.json, sweep.csv, or a directory holding either")
    parser.add_argument("--xlsx", help="Also write an XLSX workbook to this path")
    parser.add_argument("--verbose", action="store_true", help="Log progress at DEBUG level")
    return parser.parse_args(argv)


def _parse_init_args(argv: Sequence[str]) -> argparse.Namespace:
    parser = _create_parser(
        "init", "Create a .rankseg.toml configuration template in the current directory."
    )
    return parser.parse_args(argv)


def _configure_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )


def _resolve_config(
    args: argparse.Namespace, seed_key: str, base: ExperimentConfig | None = None
) -> ExperimentConfig:
    explicit = Path(args.config) if args.config else None
    loaded = load_config(Path.cwd(), explicit)
    if loaded.exists:
        logger.debug("Using configuration from %s", loaded.path)
    set_options = list(args.set)
    if args.seed is not None:
        set_options.append(f"{seed_key}={args.seed}")
    return build_config(loaded.data, set_options, args.preset, base)


def _run_gen_data(argv: Sequence[str]) -> int:
    from rankseg.entrypoints import generate_data

    args = _parse_gen_data_args(argv)
    _configure_logging(args.verbose)
    config = _resolve_config(args, "synthetic.seed")
    out_dir = Path(args.out or "data")
    generated = generate_data(config, out_dir)
    print(
        f"Generated data | train: {len(generated.train)} | test: {len(generated.test)} | "
        f"classes: {config.num_classes} | seed: {config.synthetic.seed}"
    )
    for path in (generated.train_path, generated.test_path, generated.dist_path):
        print(f"  - {path}")
    print(
        f"Train with: rankseg train --set data.train_path={generated.train_path} "
        f"--set data.test_path={generated.test_path}"
    )
    return EXIT_SUCCESS


def _default_run_dir(config: ExperimentConfig) -> Path:
    name = config.run.preset or config.run.mode.value
    return Path("runs") / f"{name}-seed{config.run.seed}"


def _print_run(report: RunReport, produced: Sequence[Path]) -> None:
    for line in summary_lines(report):
        print(line)
    print("Generated files:")
    for path in produced:
        print(f"  - {path}")


def _run_train(argv: Sequence[str]) -> int:
    from rankseg.entrypoints import run_experiment

    args = _parse_train_args(argv)
    _configure_logging(args.verbose)
    config = _resolve_config(args, "run.seed")
    out_dir = Path(args.out) if args.out else _default_run_dir(config)
    result = run_experiment(config, out_dir)
    _print_run(result.report, result.produced)
    return EXIT_SUCCESS


def _run_eval(argv: Sequence[str]) -> int:
    from rankseg.entrypoints import run_evaluation

    args = _parse_eval_args(argv)
    _configure_logging(args.verbose)
    model_path = Path(args.model)
    bundle = load_bundle(model_path)
    config = _resolve_config(args, "run.seed", base=bundle.config)
    label = args.selection or "default"
    out_dir = Path(args.out) if args.out else model_path.parent / f"eval-{label}"
    result = run_evaluation(
        model_path, out_dir, selection=args.selection, kappa=args.kappa, config=config
    )
    _print_run(result.report, result.produced)
    return EXIT_SUCCESS


def _run_sweep(argv: Sequence[str]) -> int:
    args = _parse_sweep_args(argv)
    _configure_logging(args.verbose)
    config = _resolve_config(args, "run.seed")
    axes = [parse_axis(text) for text in args.axis]
    seeds = parse_seeds(args.seeds)
    out_dir = Path(args.out or "runs/sweep")
    if args.workers is not None and args.workers < 1:
        raise ConfigError("--workers must be positive")
    table = run_sweep(config, axes, seeds, out_dir, workers=args.workers)
    failed = [row for row in table.rows if not row.ok]
    print(
        f"Sweep summary | runs: {len(table.rows)} | failed: {len(failed)} | "
        f"output: {out_dir / SWEEP_FILENAME}"
    )
    for row in table.means:
        values = ", ".join(f"{key}={value}" for key, value in row.values.items())
        miou = "n/a" if row.miou is None else f"{row.miou:.4f}"
        print(f"  {values or 'base'}: mean miou {miou}")
    for row in failed:
        print(f"Warning: run {row.run_id} failed: {row.error}", file=sys.stderr)
    return EXIT_SUCCESS


def _run_dump_tau(argv: Sequence[str]) -> int:
    args = _parse_dump_tau_args(argv)
    _configure_logging(args.verbose)
    model_path = Path(args.model)
    rows = dump_tau(load_bundle(model_path))
    out_path = Path(args.out) if args.out else model_path.parent / TAU_FILENAME
    write_tau_csv(out_path, rows)
    for row in rows:
        print(f"{row.rank:>4}  {row.inverse_tau:.6f}  {row.mode}")
    print(f"Wrote {out_path}")
    return EXIT_SUCCESS


def _run_report(argv: Sequence[str]) -> int:
    from rankseg.report_xlsx import write_xlsx_report

    args = _parse_report_args(argv)
    _configure_logging(args.verbose)
    path = Path(args.path)
    if path.is_dir():
        sweep_path = path / SWEEP_FILENAME
        path = sweep_path if sweep_path.is_file() else path / REPORT_FILENAME
    if path.suffix == ".csv":
        source: Any = load_sweep(path)
        print(f"Sweep | axes: {', '.join(source.axes) or 'none'} | runs: {len(source.rows)}")
        for row in source.means:
            values = ", ".join(f"{key}={value}" for key, value in row.values.items())
            miou = "n/a" if row.miou is None else f"{row.miou:.4f}"
            map_value = "n/a" if row.map is None else f"{row.map:.4f}"
            print(f"  {values or 'base'}: miou {miou} | map {map_value}")
    else:
        source = RunReport.read(path)
        for line in summary_lines(source):
            print(line)
    if args.xlsx:
        write_xlsx_report(source, args.xlsx)
        print(f"Wrote {args.xlsx}")
    return EXIT_SUCCESS


def _toml_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        return f'"{value}"'
    if isinstance(value, list | tuple):
        return "[" + ", ".join(_toml_value(item) for item in value) + "]"
    return repr(value)


def _choices(hint: Any) -> str:
    for arg in (hint, *typing.get_args(hint)):
        if isinstance(arg, type) and issubclass(arg, Enum):
            return " | ".join(item.value for item in arg)
    return ""


def _generate_config_template() -> str:
    defaults = ExperimentConfig().to_dict()
    lines = [
        "# rankseg configuration template",
        "# Generated by `rankseg init`. Uncomment and edit values to customise defaults.",
        "# Any key can also be set on the command line: --set section.field=value",
    ]
    for section, section_type in SECTIONS.items():
        hints = typing.get_type_hints(section_type)
        lines.extend(["", f"[{section}]"])
        for item in dataclasses.fields(section_type):
            key = f"{section}.{item.name}"
            value = defaults[section][item.name]
            shown = TEMPLATE_EXAMPLES.get(key) if value is None else _toml_value(value)
            if shown is None:
                continue
            notes = [text for text in (_choices(hints[item.name]), FIELD_HELP.get(key)) if text]
            suffix = f"  # {'; '.join(notes)}" if notes else ""
            lines.append(f"# {item.name} = {shown}{suffix}")
    return "\n".join(lines)


def _run_init(argv: Sequence[str]) -> int:
    _parse_init_args(argv)
    target = Path.cwd() / CONFIG_TEMPLATE_NAME
    if target.exists():
        print(f"Configuration already exists at {target}")
        return EXIT_SUCCESS

    target.write_text(_generate_config_template() + "\n", encoding="utf-8")
    print(f"Wrote configuration template to {target}")
    return EXIT_SUCCESS


COMMANDS: dict[str, Callable[[Sequence[str]], int]] = {
    "gen-data": _run_gen_data,
    "train": _run_train,
    "eval": _run_eval,
    "sweep": _run_sweep,
    "dump-tau": _run_dump_tau,
    "report": _run_report,
    "init": _run_init,
}


def _print_usage(stream: Any) -> None:
    print("usage: rankseg {" + ",".join(COMMANDS) + "} [options]", file=stream)
    print("Run `rankseg COMMAND --help` for the options of one command.", file=stream)


def main(argv: Sequence[str] | None = None) -> int:
    argv_list = list(sys.argv[1:]) if argv is None else list(argv)

    if not argv_list:
        _print_usage(sys.stderr)
        return EXIT_CONFIG
    command, rest = argv_list[0], argv_list[1:]
    if command in {"-h", "--help"}:
        _print_usage(sys.stdout)
        return EXIT_SUCCESS
    if command == "--version":
        print(f"rankseg {__version__}")
        return EXIT_SUCCESS
    handler = COMMANDS.get(command)
    if handler is None:
        print(f"Error: unknown command {command!r}", file=sys.stderr)
        _print_usage(sys.stderr)
        return EXIT_CONFIG

    try:
        return handler(rest)
    except ConfigError as exc:
        print(f"Error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RankSegError, OSError) as exc:
        print(f"Error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
