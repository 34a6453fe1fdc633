"""Named parameter containers shared by the DenseNet and LeViT builders."""

from __future__ import annotations

import copy

from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, Any

import numpy as np

from levit_mc.errors import ConfigError
from levit_mc.tensor import Tensor, batchnorm2d


if TYPE_CHECKING:
    from collections.abc import Iterator, Mapping

    from numpy.typing import NDArray


HEAD_PREFIX = "head.fc"


class Mode(str, Enum):
    """Forward mode; controls batch-norm statistics."""

    TRAIN = "train"
    EVAL = "eval"


@dataclass
class ModelGraph:
    """An ordered set of named parameters plus the architecture that reads them.

    Attributes:
        arch: Architecture tag, selects the forward definition.
        config: Echo of the builder config as plain data.
        params: Trainable tensors in creation order.
        buffers: Non-trainable arrays (batch-norm running statistics).
    """

    arch: str
    config: dict[str, Any]
    params: dict[str, Tensor] = field(default_factory=dict)
    buffers: dict[str, NDArray[np.float32]] = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        """Width of the classification head."""
        return int(self.params[f"{HEAD_PREFIX}.weight"].shape[1])

    def parameter_count(self) -> int:
        """Count trainable scalars.

        Returns:
            The number of parameter elements.
        """
        return sum(int(tensor.data.size) for tensor in self.params.values())

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        """Iterate parameters in creation order.

        Yields:
            Name and tensor pairs.
        """
        yield from self.params.items()

    def zero_grad(self) -> None:
        """Drop every accumulated gradient."""
        for tensor in self.params.values():
            tensor.zero_grad()

    def with_params(self, params: Mapping[str, Tensor]) -> ModelGraph:
        """Return a copy reading the given tensors instead of its own.

        Buffers are copied so that training-mode statistics updates on the copy do
        not leak into this model.

        Args:
            params: Replacement tensors, one per parameter name.

        Returns:
            The new model.

        Raises:
            ConfigError: If the names or shapes differ.
        """
        if set(params) != set(self.params):
            err = "replacement parameters must use the same names"
            raise ConfigError(err)
        for name, tensor in params.items():
            if tensor.shape != self.params[name].shape:
                err = f"parameter {name}: shape {tensor.shape} != {self.params[name].shape}"
                raise ConfigError(err)
        return ModelGraph(
            arch=self.arch,
            config=copy.deepcopy(self.config),
            params={name: params[name] for name in self.params},
            buffers={name: array.copy() for name, array in self.buffers.items()},
        )

    def copy(self) -> ModelGraph:
        """Deep-copy parameters and buffers.

        Returns:
            An independent model.
        """
        return self.with_params(
            {
                name: Tensor(tensor.data.copy(), requires_grad=tensor.requires_grad)
                for name, tensor in self.params.items()
            },
        )

    def with_head(self, num_classes: int, seed: int) -> ModelGraph:
        """Return a copy whose linear head is re-initialized for a new class count.

        Args:
            num_classes: The new head width.
            seed: Seeds the new head weights.

        Returns:
            The new model; the source is unchanged.

        Raises:
            ConfigError: If the class count is not positive.
        """
        if num_classes < 1:
            err = f"head needs at least one class, got {num_classes}"
            raise ConfigError(err)
        model = self.copy()
        in_features = model.params[f"{HEAD_PREFIX}.weight"].shape[0]
        init = ParamInit(np.random.default_rng(seed))
        model.params[f"{HEAD_PREFIX}.weight"] = init.linear(in_features, num_classes)
        model.params[f"{HEAD_PREFIX}.bias"] = init.zeros(num_classes)
        model.config["num_classes"] = num_classes
        return model

    def forward(self, batch: Tensor, mode: Mode = Mode.EVAL) -> Tensor:
        """Run the architecture's forward definition.

        Args:
            batch: Images of shape (N, 3, S, S).
            mode: Training or evaluation behavior.

        Returns:
            Logits of shape (N, num_classes).
        """
        from levit_mc.models import forward_for  # noqa: PLC0415

        return forward_for(self.arch)(self, batch, mode)

    def batchnorm(self, prefix: str, x: Tensor, mode: Mode) -> Tensor:
        """Apply the batch-norm layer registered under `prefix`.

        Args:
            prefix: Layer name.
            x: Input of shape (N, C, H, W) or (M, C).
            mode: Training or evaluation behavior.

        Returns:
            The normalized tensor.
        """
        return batchnorm2d(
            x,
            self.params[f"{prefix}.gamma"],
            self.params[f"{prefix}.beta"],
            self.buffers[f"{prefix}.running_mean"],
            self.buffers[f"{prefix}.running_var"],
            training=Mode(mode) is Mode.TRAIN,
        )


class ParamInit:
    """Seeded initializers that register tensors on a model.

    Attributes:
        rng: The random generator; call order defines the parameter values.
    """

    def __init__(self, rng: np.random.Generator) -> None:
        """Initialize the helper.

        Args:
            rng: The random generator.
        """
        self.rng = rng

    def conv(self, out_channels: int, in_channels: int, kernel: int) -> Tensor:
        """He-normal convolution kernel.

        Args:
            out_channels: Output channels.
            in_channels: Input channels.
            kernel: Kernel side.

        Returns:
            A (O, C, K, K) tensor.
        """
        fan_in = in_channels * kernel * kernel
        values = self.rng.standard_normal((out_channels, in_channels, kernel, kernel))
        return Tensor(values * np.sqrt(2.0 / fan_in), requires_grad=True, dtype=np.float32)

    def linear(self, in_features: int, out_features: int) -> Tensor:
        """Normal weights scaled by `1 / sqrt(fan_in)`.

        Args:
            in_features: Input width.
            out_features: Output width.

        Returns:
            A (F, G) tensor.
        """
        values = self.rng.standard_normal((in_features, out_features))
        return Tensor(values / np.sqrt(in_features), requires_grad=True, dtype=np.float32)

    def zeros(self, *shape: int) -> Tensor:
        """Zero tensor.

        Args:
            *shape: Extents.

        Returns:
            The tensor.
        """
        return Tensor(np.zeros(shape), requires_grad=True, dtype=np.float32)

    def ones(self, *shape: int) -> Tensor:
        """One-filled tensor.

        Args:
            *shape: Extents.

        Returns:
            The tensor.
        """
        return Tensor(np.ones(shape), requires_grad=True, dtype=np.float32)


class GraphBuilder:
    """Registers named layers on a new `ModelGraph` in a fixed order.

    Attributes:
        model: The model under construction.
        init: The seeded initializers.
    """

    def __init__(self, arch: str, config: dict[str, Any], seed: int) -> None:
        """Start an empty model.

        Args:
            arch: Architecture tag.
            config: Config echo.
            seed: Seeds every initializer.
        """
        self.model = ModelGraph(arch=arch, config=config)
        self.init = ParamInit(np.random.default_rng(seed))

    def _add(self, name: str, tensor: Tensor) -> None:
        if name in self.model.params:
            err = f"duplicate parameter name {name}"
            raise ConfigError(err)
        self.model.params[name] = tensor

    def conv(self, prefix: str, in_channels: int, out_channels: int, kernel: int) -> None:
        """Register `{prefix}.weight` and `{prefix}.bias` for a convolution.

        Args:
            prefix: Layer name.
            in_channels: Input channels.
            out_channels: Output channels.
            kernel: Kernel side.
        """
        self._add(f"{prefix}.weight", self.init.conv(out_channels, in_channels, kernel))
        self._add(f"{prefix}.bias", self.init.zeros(out_channels))

    def linear(self, prefix: str, in_features: int, out_features: int) -> None:
        """Register `{prefix}.weight` and `{prefix}.bias` for an affine map.

        Args:
            prefix: Layer name.
            in_features: Input width.
            out_features: Output width.
        """
        self._add(f"{prefix}.weight", self.init.linear(in_features, out_features))
        self._add(f"{prefix}.bias", self.init.zeros(out_features))

    def batchnorm(self, prefix: str, channels: int) -> None:
        """Register scale, shift and running statistics for a batch norm.

        Args:
            prefix: Layer name.
            channels: Channel count.
        """
        self._add(f"{prefix}.gamma", self.init.ones(channels))
        self._add(f"{prefix}.beta", self.init.zeros(channels))
        self.model.buffers[f"{prefix}.running_mean"] = np.zeros(channels, dtype=np.float32)
        self.model.buffers[f"{prefix}.running_var"] = np.ones(channels, dtype=np.float32)

    def tensor(self, name: str, tensor: Tensor) -> None:
        """Register a free-form parameter.

        Args:
            name: Parameter name.
            tensor: The parameter.
        """
        self._add(name, tensor)
