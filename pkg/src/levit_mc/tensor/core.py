"""Dense float tensors that record the operations producing them."""

from __future__ import annotations

from typing import TYPE_CHECKING

import numpy as np

from levit_mc.errors import InvalidInput, NumericError, ShapeError


if TYPE_CHECKING:
    from collections.abc import Callable, Sequence

    from numpy.typing import ArrayLike, DTypeLike, NDArray

    Backward = Callable[[NDArray[np.floating]], Sequence["NDArray[np.floating] | None"]]


MAX_RANK = 4
STORAGE_DTYPE = np.float32
ACCUMULATE_DTYPE = np.float64
_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class Tensor:
    """A rank <= 4 float array plus the tape entry that produced it.

    Tensors created directly are leaves. Tensors returned by the functions in
    `levit_mc.tensor.ops` remember their inputs and a backward closure whenever any
    input requires a gradient; calling `backward` on a scalar result walks that
    tape in reverse and accumulates into the `grad` of every leaf that requires one.

    Attributes:
        data: The values, row-major, float32 unless created from float64 data.
        grad: Accumulated gradient with the shape of `data`, leaves only.
        requires_grad: Whether gradients flow to or through this tensor.
        op: Tag of the producing operation, "leaf" for inputs and parameters.
        parents: The input tensors of the producing operation.
    """

    def __init__(
        self,
        data: ArrayLike,
        *,
        requires_grad: bool = False,
        dtype: DTypeLike | None = None,
    ) -> None:
        """Initialize a leaf tensor.

        Args:
            data: Array-like values.
            requires_grad: Track gradients for this tensor.
            dtype: Storage dtype, float32 or float64. Defaults to float32 unless
                `data` is already a float64 array.

        Raises:
            ShapeError: If the rank exceeds four.
            InvalidInput: If the dtype is not a supported float type.
        """
        array = np.asarray(data)
        if dtype is None:
            target = array.dtype if array.dtype in _FLOAT_DTYPES else np.dtype(STORAGE_DTYPE)
        else:
            target = np.dtype(dtype)
        if target not in _FLOAT_DTYPES:
            err = f"unsupported tensor dtype {target}"
            raise InvalidInput(err)
        if array.ndim > MAX_RANK:
            err = f"tensor rank {array.ndim} exceeds {MAX_RANK}"
            raise ShapeError(err)
        self.data: NDArray[np.floating] = np.ascontiguousarray(array, dtype=target)
        self.grad: NDArray[np.floating] | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self.parents: tuple[Tensor, ...] = ()
        self._backward: Backward | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        """The tensor extents."""
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        """The tensor rank."""
        return int(self.data.ndim)

    @property
    def dtype(self) -> np.dtype[np.floating]:
        """The storage dtype."""
        return self.data.dtype

    def numpy(self) -> NDArray[np.floating]:
        """Return a copy of the values.

        Returns:
            The values as a new array.
        """
        return self.data.copy()

    def item(self) -> float:
        """Return the value of a single-element tensor.

        Returns:
            The scalar value.

        Raises:
            ShapeError: If the tensor has more than one element.
        """
        if self.data.size != 1:
            err = f"item() needs a single element, shape is {self.shape}"
            raise ShapeError(err)
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        """Drop the accumulated gradient."""
        self.grad = None

    def detach(self) -> Tensor:
        """Return a leaf sharing no tape with this tensor.

        Returns:
            A new leaf with copied values.
        """
        return Tensor(self.data.copy(), dtype=self.dtype)

    def backward(self, grad: ArrayLike | None = None) -> None:
        """Propagate gradients from this tensor to every leaf that requires one.

        Args:
            grad: Seed gradient; defaults to 1 for single-element tensors.

        Raises:
            InvalidInput: If no seed is given for a non-scalar tensor.
            ShapeError: If the seed shape does not match.
        """
        if grad is None:
            if self.data.size != 1:
                err = "backward() needs an explicit gradient for a non-scalar tensor"
                raise InvalidInput(err)
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(grad, dtype=self.dtype)
            if seed.shape != self.data.shape:
                err = f"gradient shape {seed.shape} does not match {self.shape}"
                raise ShapeError(err)

        pending: dict[int, NDArray[np.floating]] = {id(self): seed}
        for node in reversed(self._topological_order()):
            node_grad = pending.pop(id(node), None)
            if node_grad is None:
                continue
            if node._backward is None:
                node.grad = node_grad if node.grad is None else node.grad + node_grad
                continue
            for parent, parent_grad in zip(node.parents, node._backward(node_grad), strict=True):
                if parent_grad is None or not parent.requires_grad:
                    continue
                parent_grad = parent_grad.astype(parent.dtype, copy=False)
                key = id(parent)
                pending[key] = pending[key] + parent_grad if key in pending else parent_grad

    def _topological_order(self) -> list[Tensor]:
        """Order the tape so that every tensor follows its parents.

        Returns:
            The tensors reachable from this one through gradient-carrying edges.
        """
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            stack.extend(
                (parent, False)
                for parent in node.parents
                if parent.requires_grad and id(parent) not in visited
            )
        return order

    def reshape(self, *shape: int) -> Tensor:
        """Differentiable reshape.

        Args:
            *shape: The new extents.

        Returns:
            The reshaped tensor.
        """
        from levit_mc.tensor.ops import reshape  # noqa: PLC0415

        return reshape(self, shape)

    def permute(self, *axes: int) -> Tensor:
        """Differentiable axis permutation.

        Args:
            *axes: The new axis order.

        Returns:
            The permuted tensor.
        """
        from levit_mc.tensor.ops import permute  # noqa: PLC0415

        return permute(self, axes)

    def __add__(self, other: Tensor) -> Tensor:
        """Differentiable same-shape addition.

        Args:
            other: The right operand.

        Returns:
            The elementwise sum.
        """
        from levit_mc.tensor.ops import add  # noqa: PLC0415

        return add(self, other)

    def __getitem__(self, key: int | slice | tuple[int | slice, ...]) -> Tensor:
        """Differentiable basic slicing.

        Args:
            key: Integers and slices.

        Returns:
            The selected view, copied.
        """
        from levit_mc.tensor.ops import getitem  # noqa: PLC0415

        return getitem(self, key)

    def __repr__(self) -> str:
        """Return a short description.

        Returns:
            The representation.
        """
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{grad})"


def from_op(
    data: NDArray[np.floating],
    op: str,
    parents: Sequence[Tensor],
    backward: Backward,
) -> Tensor:
    """Wrap the result of an operation and record it on the tape.

    Args:
        data: The computed values.
        op: The operation tag.
        parents: The operation inputs, in the order `backward` returns gradients.
        backward: Maps the output gradient to one gradient per parent.

    Returns:
        The result tensor.

    Raises:
        NumericError: If the result contains NaN or infinity.
    """
    if not np.isfinite(data).all():
        err = f"non-finite values produced by {op}"
        raise NumericError(err)
    out = Tensor(data, dtype=data.dtype)
    out.op = op
    if any(parent.requires_grad for parent in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out._backward = backward  # noqa: SLF001
    return out


def result_dtype(*tensors: Tensor) -> np.dtype[np.floating]:
    """Return the storage dtype an operation on these tensors produces.

    Args:
        *tensors: The operation inputs.

    Returns:
        float64 if any input is float64, float32 otherwise.
    """
    return np.result_type(*(tensor.data for tensor in tensors))
