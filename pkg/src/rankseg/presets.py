"""Named experiment presets: one per ablation row, oracle row, and training scheme."""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass, field
from typing import Any

from rankseg.errors import ConfigError


@dataclass(frozen=True)
class Preset:
    name: str
    description: str
    overrides: Mapping[str, Any] = field(default_factory=dict)


def _build_presets() -> dict[str, Preset]:
    presets = [
        Preset(
            name="baseline",
            description="Complete-label pixel classification with a shared temperature",
            overrides={"run.mode": "baseline", "run.oracle": "none", "run.scheme": "joint"},
        ),
        Preset(
            name="mt",
            description="Adds the multi-label head and loss; still classifies over all labels",
            overrides={"run.mode": "mt", "run.oracle": "none", "run.scheme": "joint"},
        ),
        Preset(
            name="mt_ls",
            description="Top-kappa label selection with a shared temperature",
            overrides={"run.mode": "mt_ls", "run.oracle": "none", "run.scheme": "joint"},
        ),
        Preset(
            name="mt_ls_ra",
            description="Top-kappa label selection with rank-adaptive temperatures",
            overrides={"run.mode": "mt_ls_ra", "run.oracle": "none", "run.scheme": "joint"},
        ),
        Preset(
            name="gt_eval",
            description="Predicted selection in training, ground-truth labels at evaluation",
            overrides={"run.mode": "mt_ls_ra", "run.oracle": "gt_eval", "run.scheme": "joint"},
        ),
        Preset(
            name="gt_train_eval",
            description="Ground-truth label selection in both training and evaluation",
            overrides={
                "run.mode": "mt_ls_ra",
                "run.oracle": "gt_train_eval",
                "run.scheme": "joint",
            },
        ),
        Preset(
            name="independent",
            description="Separately trained multi-label model, frozen while segmentation trains",
            overrides={"run.mode": "mt_ls_ra", "run.oracle": "none", "run.scheme": "independent"},
        ),
    ]
    return {preset.name: preset for preset in presets}


PRESETS: dict[str, Preset] = _build_presets()


def list_presets() -> list[Preset]:
    return list(PRESETS.values())


def get_preset(name: str) -> Preset:
    try:
        return PRESETS[name.strip().lower()]
    except KeyError as exc:
        choices = ", ".join(PRESETS)
        raise ConfigError(f"Unknown preset {name!r}; choose from {choices}") from exc


__all__ = ["PRESETS", "Preset", "get_preset", "list_presets"]
