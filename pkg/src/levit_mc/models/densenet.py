"""Toy-scale densely connected classifier for the benign/malign stage."""

from __future__ import annotations

import math

from dataclasses import asdict, dataclass, fields
from typing import TYPE_CHECKING, Any

from levit_mc.errors import ConfigError, ShapeError
from levit_mc.models.graph import HEAD_PREFIX, GraphBuilder, Mode, ModelGraph
from levit_mc.tensor import avgpool2d, concat, conv2d, global_avgpool, linear, relu


if TYPE_CHECKING:
    from levit_mc.tensor import Tensor


ARCH = "densenet-toy/v1"
BINARY_CLASSES = 2
IMAGE_CHANNELS = 3


@dataclass(frozen=True)
class DenseNetConfig:
    """DenseNet layout.

    Attributes:
        growth_rate: Channels each dense layer adds.
        block_layout: Dense layers per block.
        init_channels: Channels produced by the stem.
        num_classes: Head width; the triage stage is always binary.
        compression: Channel fraction kept by each transition.
        stem_stride: Stride of the 3x3 stem convolution.
        stem_pool: Average-pool factor after the stem, 1 for none.
    """

    growth_rate: int = 8
    block_layout: tuple[int, ...] = (2, 2, 2)
    init_channels: int = 16
    num_classes: int = BINARY_CLASSES
    compression: float = 0.5
    stem_stride: int = 2
    stem_pool: int = 2

    def __post_init__(self) -> None:
        """Validate the layout.

        Raises:
            ConfigError: If a count is not positive or compression is out of range.
        """
        object.__setattr__(self, "block_layout", tuple(int(n) for n in self.block_layout))
        counts = (self.growth_rate, self.init_channels, self.stem_stride, self.stem_pool)
        if not self.block_layout or min(self.block_layout) < 1 or min(counts) < 1:
            err = f"densenet counts must be positive: {self}"
            raise ConfigError(err)
        if not 0.0 < self.compression <= 1.0:
            err = f"densenet compression must lie in (0, 1], got {self.compression}"
            raise ConfigError(err)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> DenseNetConfig:
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
        data = asdict(self)
        data["block_layout"] = list(self.block_layout)
        return data

    def channel_plan(self) -> list[tuple[list[int], int]]:
        """Channel counts along the network.

        Returns:
            Per block, the input channel count of every dense layer and the channel
            count leaving the block's transition.
        """
        plan = []
        channels = self.init_channels
        for layers in self.block_layout:
            inputs = [channels + i * self.growth_rate for i in range(layers)]
            channels += layers * self.growth_rate
            channels = max(1, math.floor(channels * self.compression))
            plan.append((inputs, channels))
        return plan

    @property
    def head_channels(self) -> int:
        """Channels entering the classification head."""
        return self.channel_plan()[-1][1]


def build_densenet(config: DenseNetConfig, seed: int) -> ModelGraph:
    """Create a seeded DenseNet.

    Every block is followed by a compression transition (1x1 conv, 2x2 average
    pool), then batch norm, ReLU, global average pooling and a linear head.

    Args:
        config: The layout.
        seed: Seeds every initializer.

    Returns:
        The model.

    Raises:
        ConfigError: If the head is not binary.
    """
    if config.num_classes != BINARY_CLASSES:
        err = f"the triage network is binary, num_classes must be 2, got {config.num_classes}"
        raise ConfigError(err)
    builder = GraphBuilder(ARCH, config.to_dict(), seed)
    builder.conv("stem.conv", IMAGE_CHANNELS, config.init_channels, 3)
    channels = config.init_channels
    for block, (inputs, transition_out) in enumerate(config.channel_plan()):
        for layer, in_channels in enumerate(inputs):
            prefix = f"block{block}.layer{layer}"
            builder.batchnorm(f"{prefix}.bn", in_channels)
            builder.conv(f"{prefix}.conv", in_channels, config.growth_rate, 3)
        channels = inputs[-1] + config.growth_rate
        builder.batchnorm(f"trans{block}.bn", channels)
        builder.conv(f"trans{block}.conv", channels, transition_out, 1)
        channels = transition_out
    builder.batchnorm("head.bn", channels)
    builder.linear(HEAD_PREFIX, channels, config.num_classes)
    return builder.model


def _check_batch(batch: Tensor) -> None:
    square = batch.ndim == 4 and batch.shape[2] == batch.shape[3]  # noqa: PLR2004
    if not square or batch.shape[1] != IMAGE_CHANNELS:
        err = f"expected a (N, 3, S, S) image batch, got {batch.shape}"
        raise ShapeError(err)


def densenet_forward(model: ModelGraph, batch: Tensor, mode: Mode = Mode.EVAL) -> Tensor:
    """Compute logits.

    Args:
        model: A DenseNet built by `build_densenet`.
        batch: Images of shape (N, 3, S, S).
        mode: Training or evaluation behavior.

    Returns:
        Logits of shape (N, num_classes).
    """
    _check_batch(batch)
    config = DenseNetConfig.from_dict(model.config)
    params = model.params
    x = conv2d(batch, params["stem.conv.weight"], params["stem.conv.bias"], config.stem_stride, 1)
    if config.stem_pool > 1 and x.shape[2] >= config.stem_pool:
        x = avgpool2d(x, config.stem_pool)
    for block, layers in enumerate(config.block_layout):
        for layer in range(layers):
            prefix = f"block{block}.layer{layer}"
            y = relu(model.batchnorm(f"{prefix}.bn", x, mode))
            y = conv2d(y, params[f"{prefix}.conv.weight"], params[f"{prefix}.conv.bias"], 1, 1)
            x = concat([x, y], axis=1)
        x = relu(model.batchnorm(f"trans{block}.bn", x, mode))
        x = conv2d(x, params[f"trans{block}.conv.weight"], params[f"trans{block}.conv.bias"])
        if x.shape[2] >= 2:  # noqa: PLR2004
            x = avgpool2d(x, 2)
    x = global_avgpool(relu(model.batchnorm("head.bn", x, mode)))
    return linear(x, params[f"{HEAD_PREFIX}.weight"], params[f"{HEAD_PREFIX}.bias"])
