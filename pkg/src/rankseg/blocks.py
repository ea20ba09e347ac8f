"""Transformer building blocks and the tiny patch backbone.

Every block registers its parameters into a :class:`ParameterRegistry` under a
dotted name prefix, so one registry describes a whole model and can be saved,
loaded, and stepped by the optimizer as a unit.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from rankseg.errors import ShapeError
from rankseg.optim import ParameterGroup, ParameterRegistry
from rankseg.tensor import (
    Tensor,
    add,
    add_row,
    gather_rows,
    gelu,
    layer_norm,
    matmul,
    reduce_mean,
    reshape,
    scalar_mul,
    softmax,
    transpose,
)

INIT_STD = 0.02


@dataclass
class ParameterInit:
    """Seeded factory that creates and registers parameters for one group."""

    registry: ParameterRegistry
    rng: np.random.Generator
    group: ParameterGroup
    std: float = INIT_STD

    def normal(self, name: str, shape: Sequence[int]) -> Tensor:
        return self.registry.register(name, self.rng.normal(0.0, self.std, size=shape), self.group)

    def zeros(self, name: str, shape: Sequence[int]) -> Tensor:
        return self.registry.register(name, np.zeros(shape), self.group)

    def ones(self, name: str, shape: Sequence[int]) -> Tensor:
        return self.registry.register(name, np.ones(shape), self.group)

    def with_group(self, group: ParameterGroup) -> ParameterInit:
        return ParameterInit(self.registry, self.rng, group, self.std)


@dataclass
class LinearLayer:
    weight: Tensor
    bias: Tensor

    @classmethod
    def create(cls, init: ParameterInit, name: str, d_in: int, d_out: int) -> LinearLayer:
        weight = init.normal(f"{name}.weight", (d_in, d_out))
        return cls(weight, init.zeros(f"{name}.bias", (d_out,)))

    @property
    def d_in(self) -> int:
        return self.weight.shape[0]

    @property
    def d_out(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.d_in:
            raise ShapeError(f"linear: expected [n, {self.d_in}] input, got {list(x.shape)}")
        return add_row(matmul(x, self.weight), self.bias)


@dataclass
class LayerNormParams:
    gain: Tensor
    bias: Tensor

    @classmethod
    def create(cls, init: ParameterInit, name: str, dim: int) -> LayerNormParams:
        return cls(init.ones(f"{name}.gain", (dim,)), init.zeros(f"{name}.bias", (dim,)))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias)


@dataclass
class AttentionBlock:
    """Multi-head scaled dot-product attention projections."""

    query: LinearLayer
    key: LinearLayer
    value: LinearLayer
    output: LinearLayer
    heads: int

    @classmethod
    def create(cls, init: ParameterInit, name: str, dim: int, heads: int) -> AttentionBlock:
        if heads <= 0 or dim % heads:
            raise ShapeError(f"attention: dim {dim} not divisible by {heads} heads")
        return cls(
            query=LinearLayer.create(init, f"{name}.query", dim, dim),
            key=LinearLayer.create(init, f"{name}.key", dim, dim),
            value=LinearLayer.create(init, f"{name}.value", dim, dim),
            output=LinearLayer.create(init, f"{name}.output", dim, dim),
            heads=heads,
        )

    @property
    def dim(self) -> int:
        return self.query.d_in

    def __call__(self, queries: Tensor, context: Tensor) -> Tensor:
        m, n = queries.shape[0], context.shape[0]
        head_dim = self.dim // self.heads
        q = transpose(reshape(self.query(queries), (m, self.heads, head_dim)), (1, 0, 2))
        k = transpose(reshape(self.key(context), (n, self.heads, head_dim)), (1, 2, 0))
        v = transpose(reshape(self.value(context), (n, self.heads, head_dim)), (1, 0, 2))
        weights = softmax(scalar_mul(matmul(q, k), 1.0 / math.sqrt(head_dim)))
        mixed = reshape(transpose(matmul(weights, v), (1, 0, 2)), (m, self.dim))
        return self.output(mixed)


@dataclass
class FeedForward:
    hidden: LinearLayer
    output: LinearLayer

    @classmethod
    def create(cls, init: ParameterInit, name: str, dim: int, ratio: int) -> FeedForward:
        return cls(
            LinearLayer.create(init, f"{name}.hidden", dim, dim * ratio),
            LinearLayer.create(init, f"{name}.output", dim * ratio, dim),
        )

    def __call__(self, x: Tensor) -> Tensor:
        return self.output(gelu(self.hidden(x)))


@dataclass
class EncoderLayer:
    attention: AttentionBlock
    mlp: FeedForward
    norm1: LayerNormParams
    norm2: LayerNormParams

    @classmethod
    def create(
        cls, init: ParameterInit, name: str, dim: int, heads: int, mlp_ratio: int = 2
    ) -> EncoderLayer:
        return cls(
            attention=AttentionBlock.create(init, f"{name}.attn", dim, heads),
            mlp=FeedForward.create(init, f"{name}.mlp", dim, mlp_ratio),
            norm1=LayerNormParams.create(init, f"{name}.norm1", dim),
            norm2=LayerNormParams.create(init, f"{name}.norm2", dim),
        )

    @property
    def dim(self) -> int:
        return self.attention.dim


@dataclass
class DecoderLayer:
    self_attention: AttentionBlock
    cross_attention: AttentionBlock
    mlp: FeedForward
    norm1: LayerNormParams
    norm2: LayerNormParams
    norm3: LayerNormParams

    @classmethod
    def create(
        cls, init: ParameterInit, name: str, dim: int, heads: int, mlp_ratio: int = 2
    ) -> DecoderLayer:
        return cls(
            self_attention=AttentionBlock.create(init, f"{name}.self_attn", dim, heads),
            cross_attention=AttentionBlock.create(init, f"{name}.cross_attn", dim, heads),
            mlp=FeedForward.create(init, f"{name}.mlp", dim, mlp_ratio),
            norm1=LayerNormParams.create(init, f"{name}.norm1", dim),
            norm2=LayerNormParams.create(init, f"{name}.norm2", dim),
            norm3=LayerNormParams.create(init, f"{name}.norm3", dim),
        )

    @property
    def dim(self) -> int:
        return self.self_attention.dim


def _check_tokens(tokens: Tensor, dim: int, what: str) -> None:
    if tokens.ndim != 2 or tokens.shape[1] != dim:
        raise ShapeError(f"{what}: expected [n, {dim}] tokens, got {list(tokens.shape)}")
    if tokens.shape[0] == 0:
        raise ShapeError(f"{what}: empty token set")


def encoder_forward(tokens: Tensor, layer: EncoderLayer) -> Tensor:
    """Pre-norm encoder update: attention then MLP, each on a residual path."""

    _check_tokens(tokens, layer.dim, "encoder")
    normed = layer.norm1(tokens)
    tokens = add(tokens, layer.attention(normed, normed))
    return add(tokens, layer.mlp(layer.norm2(tokens)))


def decoder_forward(queries: Tensor, context: Tensor, layer: DecoderLayer) -> Tensor:
    _check_tokens(queries, layer.dim, "decoder queries")
    _check_tokens(context, layer.dim, "decoder context")
    normed = layer.norm1(queries)
    queries = add(queries, layer.self_attention(normed, normed))
    queries = add(queries, layer.cross_attention(layer.norm2(queries), context))
    return add(queries, layer.mlp(layer.norm3(queries)))


@dataclass
class PatchBackbone:
    patch: int
    projection: LinearLayer
    positions: Tensor
    layers: list[EncoderLayer] = field(default_factory=list)

    @classmethod
    def create(
        cls,
        init: ParameterInit,
        channels: int,
        height: int,
        width: int,
        patch: int = 4,
        dim: int = 64,
        depth: int = 2,
        heads: int = 4,
        mlp_ratio: int = 2,
        name: str = "backbone",
    ) -> PatchBackbone:
        grid = patch_grid(height, width, patch)
        return cls(
            patch=patch,
            projection=LinearLayer.create(init, f"{name}.patch", channels * patch * patch, dim),
            positions=init.normal(f"{name}.positions", (grid[0] * grid[1], dim)),
            layers=[
                EncoderLayer.create(init, f"{name}.encoder{index}", dim, heads, mlp_ratio)
                for index in range(depth)
            ],
        )

    @property
    def dim(self) -> int:
        return self.projection.d_out


def patch_grid(height: int, width: int, patch: int) -> tuple[int, int]:
    if patch <= 0 or height % patch or width % patch:
        raise ShapeError(f"image {height}x{width} is not divisible by patch size {patch}")
    return height // patch, width // patch


def patch_embed(image: Tensor, backbone: PatchBackbone) -> Tensor:
    """Project non-overlapping patches, add positions, and run the encoder stack.

    Patches are numbered row-major over the patch grid; each patch vector lists
    its pixels channel first, then row, then column.
    """

    if image.ndim != 3:
        raise ShapeError(f"patch_embed: expected [C, H, W] image, got {list(image.shape)}")
    channels, height, width = image.shape
    p = backbone.patch
    gh, gw = patch_grid(height, width, p)
    if channels * p * p != backbone.projection.d_in:
        raise ShapeError(
            f"patch_embed: {channels} channels do not match projection input "
            f"{backbone.projection.d_in}"
        )
    patches = reshape(image, (channels, gh, p, gw, p))
    patches = reshape(transpose(patches, (1, 3, 0, 2, 4)), (gh * gw, channels * p * p))
    tokens = add(backbone.projection(patches), backbone.positions)
    for layer in backbone.layers:
        tokens = encoder_forward(tokens, layer)
    return tokens


def global_average_pool(tokens: Tensor) -> Tensor:
    if tokens.ndim != 2 or tokens.shape[0] == 0:
        raise ShapeError(
            f"global_average_pool: needs a nonempty [n, d] token set, got {list(tokens.shape)}"
        )
    return reduce_mean(tokens, axis=0)


def block_order(grid: tuple[int, int], factor: int) -> np.ndarray:
    """Row-major token indices regrouped so each factor x factor block is contiguous."""

    h, w = grid
    rows = np.arange(h).reshape(h // factor, factor)
    cols = np.arange(w).reshape(w // factor, factor)
    index = rows[:, None, :, None] * w + cols[None, :, None, :]
    return index.reshape(-1)


def downsample_tokens(tokens: Tensor, grid: tuple[int, int], factor: int) -> Tensor:
    h, w = grid
    if factor <= 0 or h % factor or w % factor:
        raise ShapeError(f"downsample_tokens: grid {h}x{w} not divisible by factor {factor}")
    if tokens.ndim != 2 or tokens.shape[0] != h * w:
        raise ShapeError(f"downsample_tokens: expected {h * w} tokens, got {list(tokens.shape)}")
    if factor == 1:
        return tokens
    dim = tokens.shape[1]
    grouped = gather_rows(tokens, block_order(grid, factor))
    grouped = reshape(grouped, (h * w // (factor * factor), factor * factor, dim))
    return reduce_mean(grouped, axis=1)


__all__ = [
    "AttentionBlock",
    "DecoderLayer",
    "EncoderLayer",
    "FeedForward",
    "INIT_STD",
    "LayerNormParams",
    "LinearLayer",
    "ParameterInit",
    "PatchBackbone",
    "block_order",
    "decoder_forward",
    "downsample_tokens",
    "encoder_forward",
    "global_average_pool",
    "patch_embed",
    "patch_grid",
]
