"""Tests for the tensor core, its operations and the gradient checker."""

from __future__ import annotations

from typing import TYPE_CHECKING

import numpy as np
import pytest

from levit_mc.errors import InvalidInput, NumericError, ShapeError
from levit_mc.tensor import (
    Tensor,
    add,
    attention,
    avgpool2d,
    batchnorm2d,
    concat,
    conv2d,
    cross_entropy,
    gather_bias,
    getitem,
    global_avgpool,
    grad_check,
    hardswish,
    linear,
    mean,
    permute,
    relu,
    reshape,
    softmax,
    tile_batch,
)


if TYPE_CHECKING:
    from collections.abc import Callable, Mapping

    Graph = Callable[[Mapping[str, Tensor]], Tensor]


def _scalar(x: Tensor, seed: int = 11) -> Tensor:
    """Project a tensor onto a fixed random direction."""
    size = int(np.prod(x.shape))
    direction = np.random.default_rng(seed).standard_normal((size, 1))
    flat = reshape(x, (1, size))
    return linear(flat, Tensor(direction, dtype=np.float64), Tensor(np.zeros(1), dtype=np.float64))


def _inputs(seed: int, **shapes: tuple[int, ...]) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    return {name: rng.standard_normal(shape) for name, shape in shapes.items()}


def _assert_passes(fn: Graph, inputs: Mapping[str, np.ndarray], **kwargs: int) -> None:
    report = grad_check(fn, inputs, **kwargs)
    assert report.passed, report.max_rel_error


def test_conv2d_gradients() -> None:
    """Strided, padded convolution matches finite differences."""
    inputs = _inputs(0, x=(2, 3, 5, 5), w=(4, 3, 3, 3), b=(4,))
    _assert_passes(lambda t: _scalar(conv2d(t["x"], t["w"], t["b"], stride=2, pad=1)), inputs)


def test_conv2d_output_extent() -> None:
    """Output side is floor((S + 2p - k) / s) + 1."""
    x = Tensor(np.zeros((1, 3, 7, 7)))
    out = conv2d(x, Tensor(np.zeros((5, 3, 3, 3))), Tensor(np.zeros(5)), stride=2, pad=1)
    expected_shape = (1, 5, 4, 4)
    assert out.shape == expected_shape


def test_batchnorm_training_gradients() -> None:
    """Training-mode batch norm differentiates through the batch statistics."""
    inputs = _inputs(1, x=(4, 3, 2, 2), gamma=(3,), beta=(3,))

    def graph(t: Mapping[str, Tensor]) -> Tensor:
        out = batchnorm2d(
            t["x"],
            t["gamma"],
            t["beta"],
            np.zeros(3),
            np.ones(3),
            training=True,
        )
        return _scalar(out)

    _assert_passes(graph, inputs)


def test_batchnorm_updates_running_statistics() -> None:
    """Training mode moves the running mean towards the batch mean."""
    running_mean = np.zeros(2)
    running_var = np.ones(2)
    x = Tensor(np.full((4, 2), 10.0))
    ones, zeros = Tensor(np.ones(2)), Tensor(np.zeros(2))
    batchnorm2d(x, ones, zeros, running_mean, running_var, training=True)
    expected_mean = 1.0
    np.testing.assert_allclose(running_mean, expected_mean)
    out = batchnorm2d(x, ones, zeros, running_mean, running_var, training=False)
    assert out.data.mean() > 0.0


def test_attention_gradients_with_bias() -> None:
    """Attention with fewer queries than keys and a bias matches finite differences."""
    inputs = _inputs(2, q=(1, 2, 3, 4), k=(1, 2, 5, 4), v=(1, 2, 5, 6), bias=(2, 3, 5))
    _assert_passes(lambda t: _scalar(attention(t["q"], t["k"], t["v"], t["bias"])), inputs)


def test_attention_rows_are_convex_combinations() -> None:
    """Identical values produce the same output whatever the scores."""
    rng = np.random.default_rng(4)
    q = Tensor(rng.standard_normal((1, 1, 3, 2)))
    k = Tensor(rng.standard_normal((1, 1, 4, 2)))
    v = Tensor(np.ones((1, 1, 4, 3)))
    np.testing.assert_allclose(attention(q, k, v).data, 1.0, rtol=1e-6)


def test_gather_bias_gradients() -> None:
    """Shared table entries accumulate the gradients of every pair using them."""
    index = np.array([[0, 1, 2], [1, 0, 1]])
    inputs = _inputs(3, table=(2, 3))
    _assert_passes(lambda t: _scalar(gather_bias(t["table"], index)), inputs)


def test_activation_gradients() -> None:
    """Hardswish and ReLU match finite differences away from their kinks."""
    values = {"x": np.array([[-4.2, -2.5, -1.0, 0.3], [1.7, 2.9, 3.5, 4.4]])}
    _assert_passes(lambda t: _scalar(hardswish(t["x"])), values)
    _assert_passes(lambda t: _scalar(relu(t["x"])), values)


def test_hardswish_values() -> None:
    """Hardswish is zero below -3 and the identity above 3."""
    out = hardswish(Tensor(np.array([-4.0, 0.0, 4.0]), dtype=np.float64)).data
    np.testing.assert_allclose(out, [0.0, 0.0, 4.0])


def test_softmax_and_loss_gradients() -> None:
    """Cross entropy and softmax match finite differences."""
    inputs = _inputs(5, logits=(4, 3))
    labels = np.array([0, 2, 1, 2])
    _assert_passes(lambda t: cross_entropy(t["logits"], labels), inputs)
    _assert_passes(lambda t: _scalar(softmax(t["logits"], axis=1)), inputs)


def test_softmax_is_stable() -> None:
    """Large logits do not overflow."""
    probs = softmax(Tensor(np.array([[1000.0, 1000.0, -1000.0]]))).data
    np.testing.assert_allclose(probs.sum(axis=-1), 1.0)
    np.testing.assert_allclose(probs[0, :2], 0.5)


def test_cross_entropy_rejects_bad_labels() -> None:
    """Labels outside the class range are invalid."""
    with pytest.raises(InvalidInput):
        cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


def test_pooling_gradients() -> None:
    """Average pooling matches finite differences."""
    inputs = _inputs(6, x=(2, 2, 4, 4))
    _assert_passes(lambda t: _scalar(avgpool2d(t["x"], 2)), inputs)
    _assert_passes(lambda t: _scalar(global_avgpool(t["x"])), inputs)


def test_structural_gradients() -> None:
    """Reshape, permute, slicing, concat, mean, add and tiling route gradients."""
    inputs = _inputs(7, a=(2, 3, 4), b=(2, 3, 4), c=(3, 4))

    def graph(t: Mapping[str, Tensor]) -> Tensor:
        joined = concat([t["a"], t["b"]], axis=1)
        moved = permute(joined, (2, 0, 1))
        sliced = getitem(moved, (slice(None), slice(None), slice(1, 5)))
        pooled = mean(sliced, axis=2)
        tiled = mean(tile_batch(t["c"], 2), axis=0)
        head = reshape(getitem(tiled, slice(0, 2)), (4, 2))
        return _scalar(add(pooled, head))

    _assert_passes(graph, inputs)


def test_linear_gradients() -> None:
    """Linear layers match finite differences."""
    inputs = _inputs(8, x=(3, 4), w=(4, 2), b=(2,))
    _assert_passes(lambda t: _scalar(linear(t["x"], t["w"], t["b"])), inputs)


def test_shape_errors() -> None:
    """Incompatible operands raise ShapeError."""
    with pytest.raises(ShapeError):
        linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))), Tensor(np.zeros(2)))
    with pytest.raises(ShapeError):
        add(Tensor(np.zeros(2)), Tensor(np.zeros(3)))
    with pytest.raises(ShapeError):
        reshape(Tensor(np.zeros(6)), (4, 2))
    with pytest.raises(ShapeError):
        Tensor(np.zeros((1, 1, 1, 1, 1)))


def test_backward_accumulates_shared_inputs() -> None:
    """A leaf used twice receives the sum of both paths."""
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    out = _scalar(add(x, x), seed=0)
    out.backward()
    direction = np.random.default_rng(0).standard_normal((2, 1))[:, 0]
    assert x.grad is not None
    np.testing.assert_allclose(x.grad, 2.0 * direction, rtol=1e-6)


def test_backward_needs_a_seed_for_non_scalars() -> None:
    """Only single-element tensors have an implicit seed gradient."""
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(InvalidInput):
        relu(x).backward()
    with pytest.raises(ShapeError):
        relu(x).backward(np.ones(2))


def test_non_finite_results_raise() -> None:
    """Operations refuse to produce NaN or infinity."""
    with pytest.raises(NumericError):
        hardswish(Tensor(np.array([np.nan])))


def test_dtypes() -> None:
    """Storage is float32 unless float64 data is given."""
    assert Tensor([1, 2]).dtype == np.float32
    assert Tensor(np.zeros(2)).dtype == np.float64
    assert Tensor(np.zeros(2), dtype=np.float32).dtype == np.float32
    with pytest.raises(InvalidInput):
        Tensor([1], dtype=np.int32)


def test_item_and_detach() -> None:
    """Scalars expose their value; detached tensors leave the tape."""
    x = Tensor(np.array([[2.5]]), requires_grad=True)
    expected_value = 2.5
    assert x.item() == expected_value
    detached = relu(x).detach()
    assert not detached.requires_grad
    assert detached.op == "leaf"
    with pytest.raises(ShapeError):
        Tensor(np.zeros(2)).item()


def test_grad_check_flags_a_wrong_gradient() -> None:
    """A deliberately wrong backward fails the check."""
    from levit_mc.tensor.core import from_op

    def doubled_wrong(t: Mapping[str, Tensor]) -> Tensor:
        x = t["x"]
        out = from_op(x.data * 2.0, "wrong", (x,), lambda g: (g * 3.0,))
        return _scalar(out)

    report = grad_check(doubled_wrong, {"x": np.ones((2, 2))})
    assert not report.passed
    assert report.worst > report.tolerance


def test_grad_check_needs_a_scalar() -> None:
    """The graph output must have one element."""
    with pytest.raises(InvalidInput):
        grad_check(lambda t: relu(t["x"]), {"x": np.ones(3)})


def test_grad_check_sampling() -> None:
    """Sampled checks leave unchecked elements as NaN."""
    report = grad_check(lambda t: _scalar(relu(t["x"])), {"x": np.full(20, 0.5)}, max_elements=5)
    assert report.passed
    expected_checked = 5
    assert int((~np.isnan(report.numeric["x"])).sum()) == expected_checked


@pytest.mark.parametrize(
    ("x", "weight", "bias", "expected"),
    (
        pytest.param(np.full((1, 1, 1, 1), 3.0), np.full((1, 1, 1, 1), 2.0), 1.0, 7.0, id="1x1"),
        pytest.param(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)), 0.0, 9.0, id="3x3"),
    ),
)
def test_conv2d_single_window(
    x: np.ndarray,
    weight: np.ndarray,
    bias: float,
    expected: float,
) -> None:
    """A kernel covering the whole input gives one weighted sum.

    Args:
        x: Input feature map.
        weight: Kernel.
        bias: Bias of the only output channel.
        expected: The single output value.
    """
    out = conv2d(Tensor(x), Tensor(weight), Tensor(np.array([bias])))
    assert out.shape == (1, 1, 1, 1)
    np.testing.assert_allclose(out.data, expected)


def test_conv2d_matches_direct_loops() -> None:
    """The windowed product equals the textbook sum over channels and taps."""
    stride, pad = 2, 1
    x, w, b = _inputs(9, x=(2, 3, 6, 5), w=(4, 3, 3, 3), b=(4,)).values()
    out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, pad=pad).data
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    expected = np.zeros(out.shape)
    for n, o, i, j in np.ndindex(*out.shape):
        window = padded[n, :, i * stride : i * stride + 3, j * stride : j * stride + 3]
        expected[n, o, i, j] = (window * w[o]).sum() + b[o]
    np.testing.assert_allclose(out, expected, rtol=1e-10)


def test_linear_by_hand() -> None:
    """Rows are multiplied by the weight and shifted by the bias."""
    x = Tensor(np.array([[1.0, 2.0], [0.0, -1.0]]))
    w = Tensor(np.array([[3.0, 1.0], [4.0, 0.0]]))
    b = Tensor(np.array([1.0, -1.0]))
    expected = [[12.0, 0.0], [-3.0, -1.0]]
    np.testing.assert_allclose(linear(x, w, b).data, expected)


def test_batchnorm_with_zero_scale_returns_the_shift() -> None:
    """With gamma 0 every output equals beta."""
    x = Tensor(_inputs(10, x=(3, 2, 2, 2))["x"])
    beta = np.array([0.5, -2.0])
    out = batchnorm2d(
        x,
        Tensor(np.zeros(2)),
        Tensor(beta),
        np.zeros(2),
        np.ones(2),
        training=True,
    ).data
    np.testing.assert_allclose(out[:, 0], 0.5)
    np.testing.assert_allclose(out[:, 1], -2.0)


def test_batchnorm_normalizes_the_batch() -> None:
    """Training outputs have zero mean and unit variance per channel."""
    x = Tensor(_inputs(12, x=(8, 3, 2, 2))["x"] * 5.0 + 3.0)
    out = batchnorm2d(
        x,
        Tensor(np.ones(3)),
        Tensor(np.zeros(3)),
        np.zeros(3),
        np.ones(3),
        training=True,
    ).data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-10)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1.0, rtol=1e-3)


def test_relu_values() -> None:
    """ReLU clips negatives to zero."""
    out = relu(Tensor(np.array([-1.0, 0.0, 2.0]))).data
    np.testing.assert_allclose(out, [0.0, 0.0, 2.0])


@pytest.mark.parametrize(
    ("logits", "expected"),
    (
        pytest.param([0.0, 0.0], [0.5, 0.5], id="uniform"),
        pytest.param([1000.0, 0.0], [1.0, 0.0], id="saturated"),
    ),
)
def test_softmax_values(logits: list[float], expected: list[float]) -> None:
    """Softmax rows sum to one and saturate without overflow.

    Args:
        logits: One row of scores.
        expected: The probabilities.
    """
    probs = softmax(Tensor(np.array([logits]))).data
    np.testing.assert_allclose(probs[0], expected, atol=1e-12)


def test_attention_single_key_returns_the_value() -> None:
    """With one key every query reads that key's value."""
    q, k, v = _inputs(13, q=(2, 3, 4, 5), k=(2, 3, 1, 5), v=(2, 3, 1, 6)).values()
    out = attention(Tensor(q), Tensor(k), Tensor(v)).data
    np.testing.assert_allclose(out, np.broadcast_to(v, out.shape), rtol=1e-10)


def test_attention_zero_queries_average_the_values() -> None:
    """Zero queries weight every key equally."""
    k, v = _inputs(14, k=(1, 2, 5, 4), v=(1, 2, 5, 3)).values()
    out = attention(Tensor(np.zeros((1, 2, 3, 4))), Tensor(k), Tensor(v)).data
    expected = np.broadcast_to(v.mean(axis=2, keepdims=True), out.shape)
    np.testing.assert_allclose(out, expected, rtol=1e-10)


def test_avgpool_value() -> None:
    """A 2x2 window averages its four cells."""
    out = avgpool2d(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])), 2).data
    expected_value = 2.5
    np.testing.assert_allclose(out, expected_value)


def test_cross_entropy_of_uniform_logits() -> None:
    """Equal scores over 26 classes cost ln 26."""
    loss = cross_entropy(Tensor(np.zeros((3, 26))), [0, 5, 25]).item()
    assert loss == pytest.approx(np.log(26.0))


def test_grad_check_on_a_constant_graph() -> None:
    """A graph that ignores its input has zero gradients everywhere."""
    report = grad_check(lambda _: Tensor(np.array(4.0)), {"x": np.ones(3)})
    assert report.passed
    np.testing.assert_allclose(report.analytic["x"], 0.0)
    np.testing.assert_allclose(report.numeric["x"], 0.0)
