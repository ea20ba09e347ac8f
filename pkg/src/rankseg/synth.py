"""Deterministic synthetic segmentation data and the RSEG1 dataset file format.

Each image contains a few classes out of a large label set. Classes are painted
as axis-aligned rectangles over a background class; every class id owns a fixed
random channel signature, so pixels are separable by colour up to noise.
"""

from __future__ import annotations

import csv
import logging
import struct
from collections.abc import Sequence
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from rankseg.errors import ConfigError, DatasetFormatError, RetryLimitError
from rankseg.head import build_multilabel_target

logger = logging.getLogger(__name__)

MAGIC = b"RSEG1"
FORMAT_VERSION = 1
HEADER = struct.Struct("<5sHIIHHH")


class Split(int, Enum):
    """Spawn keys of the per-split sample streams; 0 is reserved for signatures."""

    TRAIN = 1
    TEST = 2


@dataclass(frozen=True)
class SyntheticConfig:
    num_classes: int = 64
    height: int = 32
    width: int = 32
    channels: int = 8
    max_classes: int = 6
    class_count_distribution: tuple[float, ...] | None = None
    zipf_exponent: float = 1.0
    blobs_per_class: tuple[int, int] = (1, 3)
    noise_sigma: float = 0.25
    seed: int = 0
    rect_grid: int = 1
    max_retries: int = 100
    train_size: int = 1000
    test_size: int = 200

    def __post_init__(self) -> None:
        if self.num_classes < 2:
            raise ConfigError("synthetic.num_classes must be at least 2")
        if not 1 <= self.max_classes <= self.num_classes:
            raise ConfigError("synthetic.max_classes must be in [1, num_classes]")
        if self.height < 1 or self.width < 1 or self.channels < 1:
            raise ConfigError("synthetic image extents and channels must be positive")
        if self.zipf_exponent < 0 or self.noise_sigma < 0:
            raise ConfigError("synthetic.zipf_exponent and noise_sigma must be non-negative")
        low, high = self.blobs_per_class
        if not 1 <= low <= high:
            raise ConfigError("synthetic.blobs_per_class must be an increasing positive range")
        if self.rect_grid < 1 or self.max_retries < 1:
            raise ConfigError("synthetic.rect_grid and max_retries must be positive")
        if self.class_count_distribution is not None:
            dist = np.asarray(self.class_count_distribution, dtype=np.float64)
            if dist.shape != (self.max_classes,) or np.any(dist < 0):
                raise ConfigError(
                    "synthetic.class_count_distribution needs max_classes non-negative entries"
                )
            if not np.isclose(dist.sum(), 1.0):
                raise ConfigError("synthetic.class_count_distribution must sum to 1")

    @property
    def ignore_index(self) -> int:
        return self.num_classes

    def count_probabilities(self) -> np.ndarray:
        if self.class_count_distribution is None:
            return np.full(self.max_classes, 1.0 / self.max_classes)
        dist = np.asarray(self.class_count_distribution, dtype=np.float64)
        return dist / dist.sum()

    def class_probabilities(self) -> np.ndarray:
        ranks = np.arange(1, self.num_classes + 1, dtype=np.float64)
        weights = 1.0 / np.power(ranks, self.zipf_exponent)
        return weights / weights.sum()


@dataclass
class SyntheticSample:
    image: np.ndarray
    seg_map: np.ndarray
    multilabel: np.ndarray

    @property
    def classes(self) -> list[int]:
        return np.flatnonzero(self.multilabel).tolist()


@dataclass
class Dataset:
    num_classes: int
    samples: list[SyntheticSample] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def ignore_index(self) -> int:
        return self.num_classes


def class_signatures(cfg: SyntheticConfig) -> np.ndarray:
    """Channel signature per class id, keyed only by the data seed."""

    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(0,)))
    return rng.normal(0.0, 1.0, size=(cfg.num_classes, cfg.channels)).astype(np.float32)


def sample_class_subset(cfg: SyntheticConfig, rng: np.random.Generator) -> list[int]:
    count = int(rng.choice(np.arange(1, cfg.max_classes + 1), p=cfg.count_probabilities()))
    chosen = rng.choice(cfg.num_classes, size=count, replace=False, p=cfg.class_probabilities())
    return [int(label) for label in chosen]


def _rectangle(cfg: SyntheticConfig, rng: np.random.Generator) -> tuple[int, int, int, int]:
    def span(extent: int) -> tuple[int, int]:
        low = max(1, extent // 8)
        high = max(low, extent // 2)
        size = int(rng.integers(low, high + 1))
        start = int(rng.integers(0, extent - size + 1))
        grid = cfg.rect_grid
        start = min((start // grid) * grid, extent - size)
        return start, start + size

    top, bottom = span(cfg.height)
    left, right = span(cfg.width)
    return top, bottom, left, right


def _paint(classes: Sequence[int], cfg: SyntheticConfig, rng: np.random.Generator) -> np.ndarray:
    seg_map = np.full((cfg.height, cfg.width), classes[0], dtype=np.int64)
    low, high = cfg.blobs_per_class
    for label in classes[1:]:
        for _ in range(int(rng.integers(low, high + 1))):
            top, bottom, left, right = _rectangle(cfg, rng)
            seg_map[top:bottom, left:right] = label
    return seg_map


def render_sample(
    classes: Sequence[int],
    cfg: SyntheticConfig,
    rng: np.random.Generator,
    signatures: np.ndarray | None = None,
) -> SyntheticSample:
    """Paint ``classes`` (the first is the background) into one image.

    Layouts are redrawn until every listed class keeps at least one pixel.
    """

    if not classes:
        raise ConfigError("render_sample needs at least one class")
    signatures = class_signatures(cfg) if signatures is None else signatures
    wanted = set(classes)
    for attempt in range(cfg.max_retries):
        seg_map = _paint(classes, cfg, rng)
        if set(np.unique(seg_map).tolist()) == wanted:
            break
        logger.debug("Layout attempt %d occluded a class; redrawing", attempt + 1)
    else:
        raise RetryLimitError(
            f"could not keep every class visible after {cfg.max_retries} layouts "
            "(raise synthetic.max_retries or lower synthetic.max_classes)"
        )

    image = np.transpose(signatures[seg_map], (2, 0, 1))
    if cfg.noise_sigma > 0:
        image = image + rng.normal(0.0, cfg.noise_sigma, size=image.shape)
    return SyntheticSample(
        image=np.ascontiguousarray(image, dtype=np.float32),
        seg_map=seg_map,
        multilabel=build_multilabel_target(seg_map, cfg.num_classes, cfg.ignore_index),
    )


def generate_samples(
    cfg: SyntheticConfig, count: int, split: Split = Split.TRAIN
) -> list[SyntheticSample]:
    if count < 0:
        raise ConfigError("sample count must be non-negative")
    signatures = class_signatures(cfg)
    streams = np.random.SeedSequence(cfg.seed, spawn_key=(int(split),)).spawn(count)
    samples = []
    for stream in streams:
        rng = np.random.default_rng(stream)
        samples.append(render_sample(sample_class_subset(cfg, rng), cfg, rng, signatures))
    logger.info("Generated %d %s samples", count, Split(split).name.lower())
    return samples


def generate_dataset(
    cfg: SyntheticConfig, count: int, path: Path | None = None, split: Split = Split.TRAIN
) -> Dataset:
    dataset = Dataset(cfg.num_classes, generate_samples(cfg, count, split))
    if path is not None:
        write_dataset(
            path, dataset.samples, cfg.num_classes, (cfg.channels, cfg.height, cfg.width)
        )
    return dataset


def write_dataset(
    path: Path,
    samples: Sequence[SyntheticSample],
    num_classes: int,
    extents: tuple[int, int, int] | None = None,
) -> Path:
    """Write an RSEG1 file; ``extents`` is ``(channels, height, width)`` for the header."""

    if extents is None:
        if not samples:
            raise DatasetFormatError("an empty dataset file needs explicit (C, H, W) extents")
        extents = samples[0].image.shape
    channels, height, width = (int(value) for value in extents)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as handle:
        handle.write(
            HEADER.pack(MAGIC, FORMAT_VERSION, num_classes, len(samples), channels, height, width)
        )
        for sample in samples:
            if sample.image.shape != (channels, height, width):
                raise DatasetFormatError("all samples in a dataset file must share one shape")
            handle.write(np.asarray(sample.seg_map, dtype="<u2").tobytes())
            handle.write(np.asarray(sample.image, dtype="<f4").tobytes())
    return path


def read_dataset(path: Path) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < HEADER.size:
        raise DatasetFormatError(f"{path}: file too short for an RSEG1 header")
    magic, version, num_classes, count, channels, height, width = HEADER.unpack_from(raw)
    if magic != MAGIC or version != FORMAT_VERSION:
        raise DatasetFormatError(f"{path}: not an RSEG1 v{FORMAT_VERSION} dataset")
    pixels = height * width
    record = pixels * 2 + channels * pixels * 4
    if len(raw) != HEADER.size + count * record:
        raise DatasetFormatError(
            f"{path}: expected {HEADER.size + count * record} bytes, found {len(raw)}"
        )

    samples = []
    offset = HEADER.size
    for _ in range(count):
        seg_map = np.frombuffer(raw, dtype="<u2", count=pixels, offset=offset)
        offset += pixels * 2
        image = np.frombuffer(raw, dtype="<f4", count=channels * pixels, offset=offset)
        offset += channels * pixels * 4
        seg_map = seg_map.reshape(height, width).astype(np.int64)
        samples.append(
            SyntheticSample(
                image=image.reshape(channels, height, width).astype(np.float32),
                seg_map=seg_map,
                multilabel=build_multilabel_target(seg_map, num_classes, num_classes),
            )
        )
    return Dataset(num_classes, samples)


def distribution_report(samples: Sequence[SyntheticSample]) -> list[tuple[int, float]]:
    """Cumulative percentage of images holding at most ``n`` classes, for n = 1..max."""

    counts = np.asarray([int(sample.multilabel.sum()) for sample in samples], dtype=np.int64)
    if counts.size == 0:
        return []
    histogram = np.bincount(counts, minlength=counts.max() + 1)[1:]
    cumulative = np.cumsum(histogram) * 100.0 / counts.size
    return [(index + 1, float(value)) for index, value in enumerate(cumulative)]


def write_distribution_csv(path: Path, rows: Sequence[tuple[int, float]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["classes", "cum_percent"])
        for classes, percent in rows:
            writer.writerow([classes, f"{percent:.4f}"])
    return path


__all__ = [
    "Dataset",
    "FORMAT_VERSION",
    "HEADER",
    "MAGIC",
    "Split",
    "SyntheticConfig",
    "SyntheticSample",
    "class_signatures",
    "distribution_report",
    "generate_dataset",
    "generate_samples",
    "read_dataset",
    "render_sample",
    "sample_class_subset",
    "write_dataset",
    "write_distribution_csv",
]
