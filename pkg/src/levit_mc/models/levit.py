"""Toy-scale LeViT-style hybrid network for malware family assignment.

A strided convolutional stem turns the image into a grid of tokens; stages of
attention blocks with a learned relative-offset bias follow, separated by shrink
blocks whose queries are subsampled with stride 2 so that every stage works on a
quarter of the previous token count. The head averages the tokens (or pools them
with a learned query) and applies batch norm and a linear classifier.
"""

from __future__ import annotations

import functools
import math

from dataclasses import asdict, dataclass, fields
from typing import TYPE_CHECKING, Any

import numpy as np

from levit_mc.errors import ConfigError, ShapeError
from levit_mc.models.graph import HEAD_PREFIX, GraphBuilder, Mode, ModelGraph
from levit_mc.tensor import (
    Tensor,
    add,
    attention,
    conv2d,
    gather_bias,
    hardswish,
    linear,
    mean,
    tile_batch,
)


if TYPE_CHECKING:
    from numpy.typing import NDArray


ARCH = "levit-toy/v1"
FAMILY_CLASSES = 25
IMAGE_CHANNELS = 3
SHRINK_STRIDE = 2


@dataclass(frozen=True)
class LeViTConfig:
    """LeViT layout.

    Attributes:
        stem_channels: Output channels of each stride-2 stem convolution.
        stage_dims: Token width of each attention stage.
        stage_depths: Attention blocks per stage.
        heads: Attention heads per stage.
        key_dim: Query/key width per head; values are twice as wide.
        mlp_ratio: Hidden expansion of the token MLPs.
        num_classes: Head width; the family stage has 25 classes.
        attn_bias: Add the learned relative-offset bias to attention logits.
        attention_pool: Pool tokens with a learned query instead of averaging.
    """

    stem_channels: tuple[int, ...] = (8, 16, 32)
    stage_dims: tuple[int, ...] = (32, 48, 64)
    stage_depths: tuple[int, ...] = (2, 2, 2)
    heads: tuple[int, ...] = (2, 3, 4)
    key_dim: int = 8
    mlp_ratio: int = 2
    num_classes: int = FAMILY_CLASSES
    attn_bias: bool = True
    attention_pool: bool = False

    def __post_init__(self) -> None:
        """Validate the layout.

        Raises:
            ConfigError: If stage lists disagree in length or a count is not positive.
        """
        for name in ("stem_channels", "stage_dims", "stage_depths", "heads"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        stages = {len(self.stage_dims), len(self.stage_depths), len(self.heads)}
        if len(stages) != 1:
            err = (
                "stage_dims, stage_depths and heads must have equal lengths, got "
                f"{len(self.stage_dims)}, {len(self.stage_depths)}, {len(self.heads)}"
            )
            raise ConfigError(err)
        counts = (*self.stem_channels, *self.stage_dims, *self.heads, self.key_dim, self.mlp_ratio)
        empty = not self.stem_channels or not self.stage_dims
        if empty or min(counts) < 1 or min(self.stage_depths) < 0:
            err = f"levit counts must be positive: {self}"
            raise ConfigError(err)
        if self.stem_channels[-1] != self.stage_dims[0]:
            err = (
                f"the last stem width ({self.stem_channels[-1]}) must equal the first stage "
                f"width ({self.stage_dims[0]})"
            )
            raise ConfigError(err)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> LeViTConfig:
        """Rebuild a config from its echo, ignoring unknown keys.

        Args:
            data: Plain config data.

        Returns:
            The config.
        """
        known = {f.name for f in fields(cls)}
        return cls(**{key: value for key, value in data.items() if key in known})

    def to_dict(self) -> dict[str, Any]:
        """Plain-data echo for checkpoints.

        Returns:
            The config as a dict with lists.
        """
        return {
            key: list(value) if isinstance(value, tuple) else value
            for key, value in asdict(self).items()
        }


def stage_resolutions(config: LeViTConfig, image_size: int) -> list[int]:
    """Token-grid side of every stage.

    Args:
        config: The layout.
        image_size: Input image side.

    Returns:
        One grid side per stage.
    """
    side = image_size
    for _ in config.stem_channels:
        side = (side - 1) // 2 + 1
    sides = [side]
    for _ in config.stage_dims[1:]:
        sides.append(math.ceil(sides[-1] / SHRINK_STRIDE))
    return sides


def token_schedule(config: LeViTConfig, image_size: int = 224) -> list[int]:
    """Token count of every stage.

    Args:
        config: The layout.
        image_size: Input image side.

    Returns:
        One token count per stage, strictly decreasing across shrink blocks.
    """
    return [side * side for side in stage_resolutions(config, image_size)]


@functools.lru_cache(maxsize=64)
def relative_offset_index(resolution: int, stride: int = 1) -> NDArray[np.int64]:
    """Map every (query, key) position pair to its bias-table column.

    Queries sit on the key grid subsampled by `stride`; the column is determined
    by the absolute row and column offsets, so pairs with equal offsets share one
    learned scalar per head.

    Args:
        resolution: Side of the key grid.
        stride: Query subsampling stride.

    Returns:
        A read-only (Lq, Lk) integer array with values in [0, resolution**2).
    """
    keys = np.array([(r, c) for r in range(resolution) for c in range(resolution)])
    query_side = math.ceil(resolution / stride)
    queries = np.array(
        [(r * stride, c * stride) for r in range(query_side) for c in range(query_side)],
    )
    offsets = np.abs(queries[:, None, :] - keys[None, :, :])
    index = offsets[..., 0] * resolution + offsets[..., 1]
    index.setflags(write=False)
    return index


@dataclass(frozen=True)
class AttentionSpec:
    """Static description of one attention block.

    Attributes:
        prefix: Parameter name prefix.
        in_dim: Input token width.
        out_dim: Output token width.
        heads: Attention heads.
        key_dim: Query/key width per head.
        resolution: Side of the input token grid.
        stride: Query subsampling stride; 2 for shrink blocks.
        mlp_ratio: Hidden expansion of the block MLP.
        attn_bias: Whether the block has a bias table.
    """

    prefix: str
    in_dim: int
    out_dim: int
    heads: int
    key_dim: int
    resolution: int
    stride: int = 1
    mlp_ratio: int = 2
    attn_bias: bool = True

    @property
    def value_dim(self) -> int:
        """Value width per head."""
        return 2 * self.key_dim

    @property
    def out_resolution(self) -> int:
        """Side of the output token grid."""
        return math.ceil(self.resolution / self.stride)


def block_specs(config: LeViTConfig, image_size: int) -> list[AttentionSpec]:
    """Describe every attention block in forward order.

    Args:
        config: The layout.
        image_size: Input image side.

    Returns:
        Block descriptions, shrink blocks included.
    """
    specs = []
    sides = stage_resolutions(config, image_size)
    layout = zip(config.stage_dims, config.stage_depths, config.heads, strict=True)
    for stage, (dim, depth, heads) in enumerate(layout):
        if stage > 0:
            specs.append(
                AttentionSpec(
                    prefix=f"shrink{stage}",
                    in_dim=config.stage_dims[stage - 1],
                    out_dim=dim,
                    heads=config.heads[stage - 1],
                    key_dim=config.key_dim,
                    resolution=sides[stage - 1],
                    stride=SHRINK_STRIDE,
                    mlp_ratio=config.mlp_ratio,
                    attn_bias=config.attn_bias,
                ),
            )
        specs.extend(
            AttentionSpec(
                prefix=f"stage{stage}.block{block}",
                in_dim=dim,
                out_dim=dim,
                heads=heads,
                key_dim=config.key_dim,
                resolution=sides[stage],
                mlp_ratio=config.mlp_ratio,
                attn_bias=config.attn_bias,
            )
            for block in range(depth)
        )
    return specs


def _register_block(builder: GraphBuilder, spec: AttentionSpec) -> None:
    p = spec.prefix
    builder.batchnorm(f"{p}.attn.bn", spec.in_dim)
    builder.linear(f"{p}.attn.q", spec.in_dim, spec.heads * spec.key_dim)
    builder.linear(f"{p}.attn.kv", spec.in_dim, spec.heads * (spec.key_dim + spec.value_dim))
    if spec.attn_bias:
        table = builder.init.zeros(spec.heads, spec.resolution * spec.resolution)
        builder.tensor(f"{p}.attn.bias_table", table)
    builder.linear(f"{p}.attn.proj", spec.heads * spec.value_dim, spec.out_dim)
    builder.batchnorm(f"{p}.mlp.bn", spec.out_dim)
    builder.linear(f"{p}.mlp.fc1", spec.out_dim, spec.out_dim * spec.mlp_ratio)
    builder.linear(f"{p}.mlp.fc2", spec.out_dim * spec.mlp_ratio, spec.out_dim)


def build_levit(config: LeViTConfig, seed: int, image_size: int = 224) -> ModelGraph:
    """Create a seeded LeViT.

    The bias tables are sized for `image_size`; the config echo records it.

    Args:
        config: The layout.
        seed: Seeds every initializer.
        image_size: Input image side the model will see.

    Returns:
        The model.

    Raises:
        ConfigError: If the head does not have 25 classes or the image is too small.
    """
    if config.num_classes != FAMILY_CLASSES:
        err = f"the family network has 25 classes, got num_classes={config.num_classes}"
        raise ConfigError(err)
    if image_size < 2 ** len(config.stem_channels):
        err = f"image side {image_size} is too small for {len(config.stem_channels)} stem layers"
        raise ConfigError(err)
    echo = config.to_dict()
    echo["image_size"] = image_size
    builder = GraphBuilder(ARCH, echo, seed)
    channels = IMAGE_CHANNELS
    for i, width in enumerate(config.stem_channels):
        builder.conv(f"stem{i}.conv", channels, width, 3)
        builder.batchnorm(f"stem{i}.bn", width)
        channels = width
    for spec in block_specs(config, image_size):
        _register_block(builder, spec)
    last = config.stage_dims[-1]
    if config.attention_pool:
        heads = config.heads[-1]
        query = builder.init.rng.standard_normal((heads, 1, config.key_dim))
        query /= math.sqrt(config.key_dim)
        builder.tensor("head.pool.query", Tensor(query, requires_grad=True, dtype=np.float32))
        builder.linear("head.pool.kv", last, heads * 3 * config.key_dim)
        builder.linear("head.pool.proj", heads * 2 * config.key_dim, last)
    builder.batchnorm("head.bn", last)
    builder.linear(HEAD_PREFIX, last, config.num_classes)
    return builder.model


def _split_heads(x: Tensor, n: int, tokens: int, heads: int) -> Tensor:
    """(n * tokens, heads * d) -> (n, heads, tokens, d)."""
    return x.reshape(n, tokens, heads, -1).permute(0, 2, 1, 3)


def _merge_heads(x: Tensor) -> Tensor:
    """(n, heads, tokens, d) -> (n * tokens, heads * d)."""
    n, heads, tokens, depth = x.shape
    return x.permute(0, 2, 1, 3).reshape(n * tokens, heads * depth)


def _affine(model: ModelGraph, prefix: str, x: Tensor) -> Tensor:
    return linear(x, model.params[f"{prefix}.weight"], model.params[f"{prefix}.bias"])


def _check_tokens(tokens: Tensor, spec: AttentionSpec) -> None:
    if tokens.ndim != 3 or tokens.shape[2] != spec.in_dim:  # noqa: PLR2004
        err = f"{spec.prefix}: expected (N, L, {spec.in_dim}) tokens, got {tokens.shape}"
        raise ShapeError(err)
    length = tokens.shape[1]
    side = math.isqrt(length)
    if side * side != length:
        err = f"{spec.prefix}: {length} tokens do not form a square grid"
        raise ShapeError(err)
    if side != spec.resolution:
        err = f"{spec.prefix}: grid side {side} does not match block resolution {spec.resolution}"
        raise ShapeError(err)


def attention_forward(model: ModelGraph, spec: AttentionSpec, tokens: Tensor, mode: Mode) -> Tensor:
    """Multi-head attention over a token grid, without the residual.

    Args:
        model: The model holding the block parameters.
        spec: The block description.
        tokens: Tokens of shape (N, L, in_dim), L = resolution**2.
        mode: Training or evaluation behavior.

    Returns:
        Tokens of shape (N, out_resolution**2, out_dim).
    """
    _check_tokens(tokens, spec)
    n, length, dim = tokens.shape
    p = f"{spec.prefix}.attn"
    normed = model.batchnorm(f"{p}.bn", tokens.reshape(n * length, dim), mode)
    kv = _split_heads(_affine(model, f"{p}.kv", normed), n, length, spec.heads)
    keys = kv[:, :, :, : spec.key_dim]
    values = kv[:, :, :, spec.key_dim :]
    query_tokens = length
    source = normed
    if spec.stride > 1:
        grid = normed.reshape(n, spec.resolution, spec.resolution, dim)
        grid = grid[:, :: spec.stride, :: spec.stride, :]
        query_tokens = spec.out_resolution**2
        source = grid.reshape(n * query_tokens, dim)
    queries = _split_heads(_affine(model, f"{p}.q", source), n, query_tokens, spec.heads)
    bias = None
    if spec.attn_bias:
        offsets = relative_offset_index(spec.resolution, spec.stride)
        bias = gather_bias(model.params[f"{p}.bias_table"], offsets)
    mixed = _merge_heads(attention(queries, keys, values, bias))
    out = _affine(model, f"{p}.proj", hardswish(mixed))
    return out.reshape(n, query_tokens, spec.out_dim)


def mlp_forward(model: ModelGraph, spec: AttentionSpec, tokens: Tensor, mode: Mode) -> Tensor:
    """Token MLP with hardswish, without the residual.

    Args:
        model: The model holding the block parameters.
        spec: The block description.
        tokens: Tokens of shape (N, L, out_dim).
        mode: Training or evaluation behavior.

    Returns:
        Tokens of the same shape.
    """
    n, length, dim = tokens.shape
    p = f"{spec.prefix}.mlp"
    hidden = model.batchnorm(f"{p}.bn", tokens.reshape(n * length, dim), mode)
    hidden = hardswish(_affine(model, f"{p}.fc1", hidden))
    return _affine(model, f"{p}.fc2", hidden).reshape(n, length, dim)


def attention_block_forward(
    tokens: Tensor,
    model: ModelGraph,
    spec: AttentionSpec,
    mode: Mode = Mode.EVAL,
) -> Tensor:
    """Residual attention followed by a residual MLP.

    Shrink blocks (stride > 1) change the token count and width, so their
    attention output replaces the input instead of being added to it.

    Args:
        tokens: Tokens of shape (N, L, D) on a square grid.
        model: The model holding the block parameters and bias table.
        spec: The block description.
        mode: Training or evaluation behavior.

    Returns:
        Tokens of shape (N, L, D), or (N, ceil(sqrt(L)/2)**2, out_dim) for shrink blocks.
    """
    attended = attention_forward(model, spec, tokens, mode)
    x = attended if spec.stride > 1 or spec.in_dim != spec.out_dim else add(tokens, attended)
    return add(x, mlp_forward(model, spec, x, mode))


def _stem(model: ModelGraph, config: LeViTConfig, batch: Tensor, mode: Mode) -> Tensor:
    x = batch
    for i in range(len(config.stem_channels)):
        weight, bias = model.params[f"stem{i}.conv.weight"], model.params[f"stem{i}.conv.bias"]
        x = conv2d(x, weight, bias, 2, 1)
        x = hardswish(model.batchnorm(f"stem{i}.bn", x, mode))
    n, channels, side, _ = x.shape
    return x.permute(0, 2, 3, 1).reshape(n, side * side, channels)


def _pool(model: ModelGraph, config: LeViTConfig, tokens: Tensor) -> Tensor:
    if not config.attention_pool:
        return mean(tokens, axis=1)
    n, length, dim = tokens.shape
    heads = config.heads[-1]
    projected = _affine(model, "head.pool.kv", tokens.reshape(n * length, dim))
    kv = _split_heads(projected, n, length, heads)
    query = tile_batch(model.params["head.pool.query"], n)
    pooled = attention(query, kv[:, :, :, : config.key_dim], kv[:, :, :, config.key_dim :])
    return _affine(model, "head.pool.proj", hardswish(_merge_heads(pooled)))


def levit_forward(model: ModelGraph, batch: Tensor, mode: Mode = Mode.EVAL) -> Tensor:
    """Compute logits.

    Args:
        model: A LeViT built by `build_levit`.
        batch: Images of shape (N, 3, S, S) with S the image size the model was built for.
        mode: Training or evaluation behavior.

    Returns:
        Logits of shape (N, num_classes).

    Raises:
        ShapeError: If the batch does not match the model's image size.
    """
    config = LeViTConfig.from_dict(model.config)
    image_size = int(model.config.get("image_size", 224))
    expected = (IMAGE_CHANNELS, image_size, image_size)
    if batch.ndim != 4 or batch.shape[1:] != expected:  # noqa: PLR2004
        err = f"expected a (N, 3, {image_size}, {image_size}) image batch, got {batch.shape}"
        raise ShapeError(err)
    tokens = _stem(model, config, batch, mode)
    for spec in block_specs(config, image_size):
        tokens = attention_block_forward(tokens, model, spec, mode)
    pooled = model.batchnorm("head.bn", _pool(model, config, tokens), mode)
    return _affine(model, HEAD_PREFIX, pooled)
