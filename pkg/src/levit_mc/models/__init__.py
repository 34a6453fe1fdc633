"""Model graphs and the architectures that read them."""

from __future__ import annotations

from typing import TYPE_CHECKING, Any

from levit_mc.errors import ConfigError
from levit_mc.models import densenet, levit
from levit_mc.models.densenet import DenseNetConfig, build_densenet, densenet_forward
from levit_mc.models.graph import HEAD_PREFIX, GraphBuilder, Mode, ModelGraph, ParamInit
from levit_mc.models.levit import (
    AttentionSpec,
    LeViTConfig,
    attention_block_forward,
    build_levit,
    levit_forward,
    relative_offset_index,
    token_schedule,
)


if TYPE_CHECKING:
    from collections.abc import Callable

    from levit_mc.tensor import Tensor

    Forward = Callable[[ModelGraph, Tensor, Mode], Tensor]


FORWARDS: dict[str, Forward] = {
    densenet.ARCH: densenet_forward,
    levit.ARCH: levit_forward,
}


def forward_for(arch: str) -> Forward:
    """Look up the forward definition of an architecture tag.

    Args:
        arch: The tag stored on a model or checkpoint.

    Returns:
        The forward function.

    Raises:
        ConfigError: If the tag is unknown.
    """
    try:
        return FORWARDS[arch]
    except KeyError:
        err = f"unknown architecture {arch!r}, expected one of {sorted(FORWARDS)}"
        raise ConfigError(err) from None


def build(arch: str, config: dict[str, Any], seed: int, image_size: int = 224) -> ModelGraph:
    """Build a seeded model from an architecture tag and plain config data.

    Args:
        arch: Architecture tag.
        config: Config data for the architecture.
        seed: Seeds every initializer.
        image_size: Input side, used by the LeViT bias tables.

    Returns:
        The model.

    Raises:
        ConfigError: If the tag is unknown.
    """
    if arch == densenet.ARCH:
        return build_densenet(DenseNetConfig.from_dict(config), seed)
    if arch == levit.ARCH:
        return build_levit(LeViTConfig.from_dict(config), seed, image_size)
    err = f"unknown architecture {arch!r}, expected one of {sorted(FORWARDS)}"
    raise ConfigError(err)


__all__ = [
    "FORWARDS",
    "HEAD_PREFIX",
    "AttentionSpec",
    "DenseNetConfig",
    "GraphBuilder",
    "LeViTConfig",
    "Mode",
    "ModelGraph",
    "ParamInit",
    "attention_block_forward",
    "build",
    "build_densenet",
    "build_levit",
    "densenet_forward",
    "forward_for",
    "levit_forward",
    "relative_offset_index",
    "token_schedule",
]
