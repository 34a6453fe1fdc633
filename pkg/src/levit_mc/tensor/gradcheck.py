"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

import logging

from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from levit_mc.errors import InvalidInput
from levit_mc.tensor.core import Tensor


if TYPE_CHECKING:
    from collections.abc import Callable, Mapping

    from numpy.typing import ArrayLike, NDArray


LOGGER = logging.getLogger(__name__)

DEFAULT_STEP = 1e-3
DEFAULT_TOLERANCE = 1e-4


@dataclass(frozen=True)
class GradCheckReport:
    """Outcome of a gradient check.

    Attributes:
        max_rel_error: Relative error per checked input, `||a - n|| / max(||a||, ||n||)`
            over the checked elements (0 when both are zero).
        tolerance: The acceptance threshold.
        step: The finite-difference step.
        analytic: Backpropagated gradients.
        numeric: Finite-difference gradients (NaN where an element was skipped).
    """

    max_rel_error: dict[str, float]
    tolerance: float
    step: float
    analytic: dict[str, NDArray[np.float64]] = field(repr=False)
    numeric: dict[str, NDArray[np.float64]] = field(repr=False)

    @property
    def worst(self) -> float:
        """The largest relative error over all inputs."""
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        """Whether every input is within tolerance."""
        return self.worst < self.tolerance


def _evaluate(
    fn: Callable[[Mapping[str, Tensor]], Tensor],
    values: Mapping[str, NDArray[np.float64]],
) -> float:
    out = fn({name: Tensor(array, dtype=np.float64) for name, array in values.items()})
    return float(out.data.astype(np.float64).reshape(-1)[0])


def _relative_error(analytic: NDArray[np.float64], numeric: NDArray[np.float64]) -> float:
    diff = float(np.linalg.norm(analytic - numeric))
    scale = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)))
    return 0.0 if scale == 0.0 else diff / scale


def grad_check(
    fn: Callable[[Mapping[str, Tensor]], Tensor],
    inputs: Mapping[str, ArrayLike],
    h: float = DEFAULT_STEP,
    tolerance: float = DEFAULT_TOLERANCE,
    *,
    max_elements: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare backpropagated gradients with central finite differences.

    The graph is evaluated on a float64 shadow copy of the inputs, both for the
    analytic pass and for every perturbed evaluation.

    Args:
        fn: Builds the graph from named leaf tensors and returns a scalar tensor.
        inputs: Named input values.
        h: Finite-difference step.
        tolerance: Acceptance threshold for the relative error.
        max_elements: Check at most this many randomly chosen elements per input.
        seed: Seeds the element sampling.

    Returns:
        The per-input report.

    Raises:
        InvalidInput: If the graph output is not a scalar.
    """
    shadow = {name: np.array(value, dtype=np.float64) for name, value in inputs.items()}
    leaves = {
        name: Tensor(array.copy(), requires_grad=True, dtype=np.float64)
        for name, array in shadow.items()
    }
    out = fn(leaves)
    if out.data.size != 1:
        err = f"grad_check needs a scalar graph output, got shape {out.shape}"
        raise InvalidInput(err)
    if out.requires_grad:
        out.backward()

    rng = np.random.default_rng(seed)
    analytic: dict[str, NDArray[np.float64]] = {}
    numeric: dict[str, NDArray[np.float64]] = {}
    errors: dict[str, float] = {}
    for name, array in shadow.items():
        grad = leaves[name].grad
        analytic[name] = np.zeros_like(array) if grad is None else grad.astype(np.float64)
        flat_indices = np.arange(array.size)
        if max_elements is not None and array.size > max_elements:
            flat_indices = np.sort(rng.choice(array.size, size=max_elements, replace=False))
        estimate = np.full(array.shape, np.nan)
        for flat in flat_indices:
            index = np.unravel_index(flat, array.shape)
            original = array[index]
            array[index] = original + h
            upper = _evaluate(fn, shadow)
            array[index] = original - h
            lower = _evaluate(fn, shadow)
            array[index] = original
            estimate[index] = (upper - lower) / (2.0 * h)
        numeric[name] = estimate
        checked = ~np.isnan(estimate)
        errors[name] = _relative_error(analytic[name][checked], estimate[checked])
        LOGGER.debug(
            "grad_check %s: rel. err %.3e over %d elements",
            name,
            errors[name],
            checked.sum(),
        )
    return GradCheckReport(
        max_rel_error=errors,
        tolerance=tolerance,
        step=h,
        analytic=analytic,
        numeric=numeric,
    )
