"""Model assembly, inference passes, cost accounting, and ``model.npz`` persistence."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from rankseg.blocks import (
    DecoderLayer,
    EncoderLayer,
    ParameterInit,
    PatchBackbone,
    patch_embed,
    patch_grid,
)
from rankseg.config import ExperimentConfig, Scheme, config_from_dict
from rankseg.errors import ConfigError
from rankseg.head import (
    CategorySource,
    CategoryTable,
    MultiLabelHead,
    MultiLabelHeadVariant,
    MultiLabelOutput,
    RankTemperatures,
    SelectionResult,
    complete_selection,
    initial_log_inverse_tau,
    rank_adaptive_pixel_classify,
    top_k_select,
    upsample_tokens,
)
from rankseg.optim import ParameterGroup, ParameterRegistry
from rankseg.tensor import Tape, Tensor, no_tape, precision

logger = logging.getLogger(__name__)


class ModelRole(str, Enum):
    JOINT = "joint"
    MULTILABEL = "multilabel"
    SEGMENTATION = "segmentation"


@dataclass
class RankSegModel:
    """One backbone with a multi-label head, a selected-label pixel classifier, or both."""

    role: ModelRole
    config: ExperimentConfig
    registry: ParameterRegistry
    backbone: PatchBackbone
    table: CategoryTable
    grid: tuple[int, int]
    ml_head: MultiLabelHead | None = None
    temps: RankTemperatures | None = None
    psi_layers: list[EncoderLayer] = field(default_factory=list)

    @classmethod
    def build(
        cls, config: ExperimentConfig, role: ModelRole, seed: int | None = None
    ) -> RankSegModel:
        """Create freshly initialized parameters in the current default precision."""

        synthetic, arch = config.synthetic, config.model
        seed = config.run.seed if seed is None else seed
        stream = 2 if role is ModelRole.MULTILABEL else 1
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(stream,)))
        registry = ParameterRegistry()
        backbone_init = ParameterInit(registry, rng, ParameterGroup.BACKBONE)
        backbone = PatchBackbone.create(
            backbone_init,
            channels=synthetic.channels,
            height=synthetic.height,
            width=synthetic.width,
            patch=arch.patch,
            dim=arch.dim,
            depth=arch.depth,
            heads=arch.heads,
            mlp_ratio=arch.mlp_ratio,
        )

        has_multilabel = role is ModelRole.MULTILABEL or (
            role is ModelRole.JOINT and config.uses_multilabel
        )
        has_segmentation = role is not ModelRole.MULTILABEL
        category_group = ParameterGroup.SEG_HEAD if has_segmentation else ParameterGroup.ML_HEAD
        seg_init = backbone_init.with_group(category_group)
        ml_init = backbone_init.with_group(ParameterGroup.ML_HEAD)
        K = synthetic.num_classes  # noqa: N806

        w = seg_init.normal("categories.w", (K, arch.dim))
        h = bias = None
        ml_head = None
        if has_multilabel:
            h = ml_init.normal("multilabel.h", (K, arch.dim))
            bias = ml_init.zeros("multilabel.bias", (K,))
            layers: list[EncoderLayer | DecoderLayer] = []
            if arch.head_variant is MultiLabelHeadVariant.TRANENC1:
                layers = [
                    EncoderLayer.create(
                        ml_init, "multilabel.xi0", arch.dim, arch.heads, arch.mlp_ratio
                    )
                ]
            elif arch.head_variant is MultiLabelHeadVariant.TRANDEC2:
                layers = [
                    DecoderLayer.create(
                        ml_init, f"multilabel.xi{index}", arch.dim, arch.heads, arch.mlp_ratio
                    )
                    for index in range(2)
                ]
            ml_head = MultiLabelHead(arch.head_variant, layers, arch.downsample_factor)

        temps = None
        psi_layers: list[EncoderLayer] = []
        if has_segmentation:
            temps = RankTemperatures(
                registry.register(
                    "temperatures.log_inverse_tau",
                    initial_log_inverse_tau(config.kappa_max),
                    ParameterGroup.SEG_HEAD,
                ),
                shared=not config.rank_adaptive,
            )
            psi_layers = [
                EncoderLayer.create(seg_init, f"psi{index}", arch.dim, arch.heads, arch.mlp_ratio)
                for index in range(arch.psi_depth)
            ]

        model = cls(
            role=role,
            config=config,
            registry=registry,
            backbone=backbone,
            table=CategoryTable(w, h, bias),
            grid=patch_grid(synthetic.height, synthetic.width, arch.patch),
            ml_head=ml_head,
            temps=temps,
            psi_layers=psi_layers,
        )
        logger.debug("Built %s model with %d parameters", role.value, registry.count())
        return model

    @property
    def has_multilabel(self) -> bool:
        return self.ml_head is not None

    @property
    def has_segmentation(self) -> bool:
        return self.temps is not None

    @property
    def ignore_index(self) -> int:
        return self.config.synthetic.ignore_index

    def encode(self, image: np.ndarray) -> Tensor:
        return patch_embed(Tensor(image), self.backbone)

    def multilabel(self, tokens: Tensor) -> MultiLabelOutput:
        if self.ml_head is None:
            raise ConfigError(f"{self.role.value} model has no multi-label head")
        return self.ml_head(tokens, self.grid, self.table)

    def classify(
        self,
        tokens: Tensor,
        sel: SelectionResult,
        refined: Tensor | None = None,
        *,
        shared: bool = False,
    ) -> Tensor:
        """Per-pixel probabilities over ``sel`` at full image resolution."""

        if self.temps is None:
            raise ConfigError(f"{self.role.value} model has no pixel classifier")
        temps = self.temps.as_shared() if shared else self.temps
        source = None
        if self.config.model.category_source is CategorySource.REFINED:
            source = refined
        z, _ = rank_adaptive_pixel_classify(
            tokens, self.table, sel, temps, self.psi_layers, category_tokens=source
        )
        return upsample_tokens(z, self.grid, self.config.model.patch)


@dataclass
class ModelBundle:
    """The trained artefact: a joint model, or a segmenter plus its frozen labeler."""

    segmenter: RankSegModel
    labeler: RankSegModel | None = None

    @property
    def config(self) -> ExperimentConfig:
        return self.segmenter.config

    @property
    def multilabel_model(self) -> RankSegModel | None:
        if self.labeler is not None:
            return self.labeler
        return self.segmenter if self.segmenter.has_multilabel else None

    def models(self) -> list[RankSegModel]:
        return [model for model in (self.labeler, self.segmenter) if model is not None]

    def multilabel_probs(
        self, image: np.ndarray, tokens: Tensor | None = None
    ) -> MultiLabelOutput | None:
        """Presence probabilities without recording a tape; ``tokens`` reuses a joint encoding."""

        model = self.multilabel_model
        if model is None:
            return None
        with no_tape():
            if model is not self.segmenter or tokens is None:
                tokens = model.encode(image)
            return model.multilabel(tokens)


def build_bundle(config: ExperimentConfig) -> ModelBundle:
    if config.run.scheme is Scheme.INDEPENDENT:
        return ModelBundle(
            segmenter=RankSegModel.build(config, ModelRole.SEGMENTATION),
            labeler=RankSegModel.build(config, ModelRole.MULTILABEL),
        )
    return ModelBundle(segmenter=RankSegModel.build(config, ModelRole.JOINT))


def forward_flops(bundle: ModelBundle) -> int:
    """Matmul FLOPs of one inference pass over a single image at the training kappa."""

    config = bundle.config
    synthetic = config.synthetic
    image = np.zeros((synthetic.channels, synthetic.height, synthetic.width))
    flops = 0
    for model in bundle.models():
        with Tape() as tape:
            tokens = model.encode(image)
            refined = None
            if model.has_multilabel:
                output = model.multilabel(tokens)
                refined = output.refined
            if model.has_segmentation:
                if config.uses_selection:
                    sel = top_k_select(None, config.selection.kappa, K=config.num_classes)
                else:
                    sel = complete_selection(config.num_classes)
                model.classify(tokens, sel, refined)
        flops += tape.matmul_flops
        if model.ml_head is not None:
            model.ml_head.calls -= 1
    return flops


def model_stats(bundle: ModelBundle) -> dict[str, int]:
    stats = {group.value: 0 for group in ParameterGroup}
    for model in bundle.models():
        for group in ParameterGroup:
            stats[group.value] += model.registry.count(group)
    stats["total"] = sum(stats[group.value] for group in ParameterGroup)
    stats["flops_per_image"] = forward_flops(bundle)
    return stats


def save_bundle(path: Path, bundle: ModelBundle) -> Path:
    arrays: dict[str, np.ndarray] = {}
    for model in bundle.models():
        for name, array in model.registry.state_dict().items():
            arrays[f"{model.role.value}/{name}"] = array
    meta = {"config": bundle.config.to_dict(), "roles": [m.role.value for m in bundle.models()]}
    encoded = json.dumps(meta, sort_keys=True).encode("utf-8")
    arrays["__meta__"] = np.frombuffer(encoded, dtype=np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as handle:
        np.savez(handle, **arrays)
    return path


def load_bundle(path: Path) -> ModelBundle:
    """Rebuild a bundle in its saved precision and restore every parameter."""

    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"Model file not found: {path}")
    with np.load(path) as archive:
        if "__meta__" not in archive:
            raise ConfigError(f"{path} is not a saved rankseg model")
        meta = json.loads(archive["__meta__"].tobytes().decode("utf-8"))
        arrays = {name: archive[name] for name in archive.files if name != "__meta__"}
    config = config_from_dict(meta["config"])
    with precision(config.run.precision):
        bundle = build_bundle(config)
    for model in bundle.models():
        prefix = f"{model.role.value}/"
        own = {
            name[len(prefix) :]: array
            for name, array in arrays.items()
            if name.startswith(prefix)
        }
        model.registry.load_state_dict(own)
    return bundle


__all__ = [
    "ModelBundle",
    "ModelRole",
    "RankSegModel",
    "build_bundle",
    "forward_flops",
    "load_bundle",
    "model_stats",
    "save_bundle",
]
