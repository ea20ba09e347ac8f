"""Seeded direction checks on the default synthetic configuration.

These train full desk-scale runs and are deselected by default; run them with ``-m slow``.
"""

from __future__ import annotations

from functools import cache

import pytest

from rankseg.config import build_config
from rankseg.entrypoints import load_datasets
from rankseg.synth import Dataset
from rankseg.train import EvalSelection, TrainResult, evaluate, train

SEEDS = (0, 1, 2)

pytestmark = pytest.mark.slow


@cache
def _run(preset: str, seed: int) -> tuple[TrainResult, Dataset, float]:
    options = ["data.source=synthetic", "run.precision=float32", f"run.seed={seed}"]
    config = build_config({}, options, preset=preset)
    train_data, test_data = load_datasets(config)
    result = train(config, train_data)
    return result, test_data, evaluate(result.bundle, test_data).miou


def _miou(preset: str, seed: int) -> float:
    return _run(preset, seed)[2]


def test_ground_truth_selection_beats_the_baseline() -> None:
    gains = [_miou("gt_train_eval", seed) - _miou("baseline", seed) for seed in SEEDS]
    assert sum(gain >= 0.03 for gain in gains) >= 2, gains


def test_full_method_beats_the_baseline() -> None:
    gains = [_miou("mt_ls_ra", seed) - _miou("baseline", seed) for seed in SEEDS]
    assert sum(gain >= 0.005 for gain in gains) >= 2, gains


def test_inverse_temperature_falls_with_rank() -> None:
    correlations = [_run("mt_ls_ra", seed)[0].tau_spearman() for seed in SEEDS]
    assert sum(c is not None and c <= -0.5 for c in correlations) >= 2, correlations


def test_oracle_evaluation_is_not_worse_than_complete() -> None:
    outcomes = []
    for seed in SEEDS:
        result, test_data, oracle = _run("gt_train_eval", seed)
        complete = evaluate(result.bundle, test_data, selection=EvalSelection.COMPLETE).miou
        outcomes.append(oracle >= complete)
    assert sum(outcomes) >= 2, outcomes
