from __future__ import annotations

from collections.abc import Callable
from pathlib import Path
from typing import Any

import pytest
import yaml

from rankseg.config import ExperimentConfig, apply_overrides, flatten
from rankseg.synth import Dataset, Split, generate_dataset

TINY_SETTINGS: dict[str, dict[str, Any]] = {
    "data": {"source": "synthetic"},
    "synthetic": {
        "num_classes": 8,
        "height": 8,
        "width": 8,
        "channels": 3,
        "max_classes": 3,
        "noise_sigma": 0.1,
        "train_size": 6,
        "test_size": 4,
    },
    "model": {
        "patch": 4,
        "dim": 8,
        "depth": 1,
        "heads": 2,
        "psi_depth": 1,
        "downsample_factor": 2,
    },
    "selection": {"kappa": 3},
    "train": {"epochs": 2, "batch_size": 3, "base_lr": 0.01},
    "run": {"precision": "float64"},
}


@pytest.fixture
def tiny_config() -> Callable[..., ExperimentConfig]:
    """Factory for a seconds-long configuration; keyword overrides use ``section__field``."""

    def build(**overrides: Any) -> ExperimentConfig:
        values = flatten(TINY_SETTINGS)
        values.update({key.replace("__", "."): value for key, value in overrides.items()})
        return apply_overrides(ExperimentConfig(), values)

    return build


@pytest.fixture
def tiny_data(tiny_config) -> tuple[Dataset, Dataset]:
    synthetic = tiny_config().synthetic
    return (
        generate_dataset(synthetic, synthetic.train_size, split=Split.TRAIN),
        generate_dataset(synthetic, synthetic.test_size, split=Split.TEST),
    )


@pytest.fixture
def tiny_config_file(tmp_path: Path) -> Path:
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY_SETTINGS), encoding="utf-8")
    return path
