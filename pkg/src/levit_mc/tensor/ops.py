"""Differentiable operations over `Tensor`.

Every function checks its shapes, computes the forward values with numpy and
returns a tensor whose backward closure produces one gradient per input.
Reductions (means, variances, softmax normalizers, losses, bias and weight
gradients summed over a batch) accumulate in float64; matrix products run in the
storage precision of their inputs. Broadcasting is limited to the bias-add
patterns of `conv2d`, `linear`, `batchnorm2d` and `attention`; every other
extent mismatch raises `ShapeError`.
"""

from __future__ import annotations

import math

from typing import TYPE_CHECKING

import numpy as np

from levit_mc.errors import InvalidInput, ShapeError
from levit_mc.tensor.core import ACCUMULATE_DTYPE, Tensor, from_op, result_dtype


if TYPE_CHECKING:
    from collections.abc import Sequence

    from numpy.typing import ArrayLike, NDArray

    Array = NDArray[np.floating]


BN_EPS = 1e-5
BN_MOMENTUM = 0.1
HARDSWISH_LOW = -3.0
HARDSWISH_HIGH = 3.0


def _require(condition: bool, message: str) -> None:  # noqa: FBT001
    if not condition:
        raise ShapeError(message)


# structural


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two tensors of identical shape.

    Args:
        a: Left operand.
        b: Right operand.

    Returns:
        The sum.
    """
    _require(a.shape == b.shape, f"add: shapes {a.shape} and {b.shape} differ")
    dtype = result_dtype(a, b)
    return from_op(
        (a.data + b.data).astype(dtype, copy=False),
        "add",
        (a, b),
        lambda g: (g, g),
    )


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Reshape without changing the element order.

    Args:
        x: Input tensor.
        shape: New extents; one may be -1.

    Returns:
        The reshaped tensor.

    Raises:
        ShapeError: If the element count differs.
    """
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as exc:
        err = f"reshape: cannot view {x.shape} as {tuple(shape)}"
        raise ShapeError(err) from exc
    return from_op(out.copy(), "reshape", (x,), lambda g: (g.reshape(x.shape),))


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    """Reorder axes.

    Args:
        x: Input tensor.
        axes: A permutation of `range(x.ndim)`.

    Returns:
        The permuted tensor.
    """
    _require(sorted(axes) == list(range(x.ndim)), f"permute: {tuple(axes)} is not a permutation")
    inverse = tuple(int(i) for i in np.argsort(axes))
    return from_op(
        np.ascontiguousarray(x.data.transpose(tuple(axes))),
        "permute",
        (x,),
        lambda g: (g.transpose(inverse),),
    )


def getitem(x: Tensor, key: int | slice | tuple[int | slice, ...]) -> Tensor:
    """Basic slicing with integers and slices.

    Args:
        x: Input tensor.
        key: The index expression.

    Returns:
        The selected elements.
    """
    parts = key if isinstance(key, tuple) else (key,)
    _require(
        all(isinstance(part, (int, slice)) for part in parts),
        "getitem: only integers and slices are supported",
    )

    def backward(g: Array) -> tuple[Array]:
        grad = np.zeros_like(x.data, dtype=g.dtype)
        grad[key] = g
        return (grad,)

    return from_op(np.array(x.data[key]), "getitem", (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate tensors along an axis.

    Args:
        tensors: Tensors whose extents agree except along `axis`.
        axis: The concatenation axis.

    Returns:
        The concatenated tensor.
    """
    _require(len(tensors) > 0, "concat: nothing to concatenate")
    first = tensors[0]
    for tensor in tensors[1:]:
        other = tensor.shape[:axis] + tensor.shape[axis + 1 :]
        _require(
            tensor.ndim == first.ndim and other == first.shape[:axis] + first.shape[axis + 1 :],
            f"concat: {tensor.shape} does not match {first.shape} off axis {axis}",
        )
    dtype = result_dtype(*tensors)
    bounds = np.cumsum([tensor.shape[axis] for tensor in tensors])[:-1]

    def backward(g: Array) -> list[Array]:
        return list(np.split(g, bounds, axis=axis))

    return from_op(
        np.concatenate([tensor.data for tensor in tensors], axis=axis).astype(dtype, copy=False),
        "concat",
        tensors,
        backward,
    )


def mean(x: Tensor, axis: int) -> Tensor:
    """Arithmetic mean along one axis, which is removed.

    Args:
        x: Input tensor.
        axis: The reduced axis.

    Returns:
        The mean.
    """
    _require(-x.ndim <= axis < x.ndim, f"mean: axis {axis} out of range for {x.shape}")
    count = x.shape[axis]

    def backward(g: Array) -> tuple[Array]:
        spread = np.broadcast_to(np.expand_dims(g, axis) / count, x.shape)
        return (spread.astype(x.dtype),)

    out = x.data.mean(axis=axis, dtype=ACCUMULATE_DTYPE).astype(x.dtype)
    return from_op(out, "mean", (x,), backward)


def tile_batch(x: Tensor, batch: int) -> Tensor:
    """Repeat a tensor along a new leading batch axis.

    Args:
        x: Input tensor of rank <= 3.
        batch: Number of copies.

    Returns:
        A tensor of shape `(batch, *x.shape)`.
    """
    _require(batch > 0, "tile_batch: batch must be positive")
    out = np.broadcast_to(x.data, (batch, *x.shape)).copy()
    return from_op(
        out,
        "tile_batch",
        (x,),
        lambda g: (g.sum(axis=0, dtype=ACCUMULATE_DTYPE).astype(x.dtype),),
    )


def gather_bias(table: Tensor, index: NDArray[np.integer]) -> Tensor:
    """Look up per-head bias scalars by an integer offset index.

    Args:
        table: Bias table of shape (H, T).
        index: Integer array of shape (Lq, Lk) with values in [0, T).

    Returns:
        A tensor of shape (H, Lq, Lk) where entry (h, i, j) is `table[h, index[i, j]]`.
    """
    ranks = table.ndim == 2 and index.ndim == 2  # noqa: PLR2004
    _require(ranks, "gather_bias: expects (H, T) and (Lq, Lk)")
    entries = table.shape[1]
    _require(
        bool(index.size == 0 or (index.min() >= 0 and index.max() < entries)),
        "gather_bias: index out of range",
    )
    flat = index.ravel()

    def backward(g: Array) -> tuple[Array]:
        heads = g.reshape(table.shape[0], -1)
        grad = np.stack(
            [np.bincount(flat, weights=row, minlength=entries) for row in heads],
        )
        return (grad.astype(table.dtype),)

    return from_op(table.data[:, index], "gather_bias", (table,), backward)


# layers


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map `x @ weight + bias`.

    Args:
        x: Input of shape (N, F).
        weight: Weight of shape (F, G).
        bias: Bias of shape (G,).

    Returns:
        Output of shape (N, G).
    """
    ranks = x.ndim == 2 and weight.ndim == 2 and bias.ndim == 1  # noqa: PLR2004
    _require(ranks, "linear: expects ranks 2, 2, 1")
    _require(x.shape[1] == weight.shape[0], f"linear: {x.shape} @ {weight.shape}")
    _require(bias.shape[0] == weight.shape[1], f"linear: bias {bias.shape} for {weight.shape}")
    dtype = result_dtype(x, weight, bias)
    xd = x.data.astype(dtype, copy=False)
    wd = weight.data.astype(dtype, copy=False)

    def backward(g: Array) -> tuple[Array, Array, Array]:
        return (
            g @ wd.T,
            xd.T @ g,
            g.sum(axis=0, dtype=ACCUMULATE_DTYPE),
        )

    out = xd @ wd + bias.data.astype(dtype, copy=False)
    return from_op(out, "linear", (x, weight, bias), backward)


def _windows(padded: Array, kernel: int, stride: int, out_h: int, out_w: int) -> Array:
    """Return the strided (N, C, out_h, out_w, K, K) window view of a padded input."""
    view = np.lib.stride_tricks.sliding_window_view(padded, (kernel, kernel), axis=(2, 3))
    return view[:, :, : (out_h - 1) * stride + 1 : stride, : (out_w - 1) * stride + 1 : stride]


def _scatter_windows(grad_windows: Array, padded_shape: tuple[int, ...], stride: int) -> Array:
    """Sum (N, C, out_h, out_w, K, K) window gradients back onto the padded input."""
    _, _, out_h, out_w, kernel, _ = grad_windows.shape
    grad = np.zeros(padded_shape, dtype=grad_windows.dtype)
    for i in range(kernel):
        for j in range(kernel):
            grad[
                :,
                :,
                i : i + (out_h - 1) * stride + 1 : stride,
                j : j + (out_w - 1) * stride + 1 : stride,
            ] += grad_windows[:, :, :, :, i, j]
    return grad


def _output_extent(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding.

    Args:
        x: Input of shape (N, C, H, W).
        weight: Kernel of shape (O, C, K, K).
        bias: Bias of shape (O,).
        stride: Step between windows.
        pad: Zero padding on each spatial side.

    Returns:
        Output of shape (N, O, (H + 2 pad - K) // stride + 1, ...).
    """
    ranks = x.ndim == 4 and weight.ndim == 4  # noqa: PLR2004
    _require(ranks, "conv2d: expects NCHW input and OIKK weight")
    n, c, h, w = x.shape
    o, wc, k, k2 = weight.shape
    _require(k == k2, f"conv2d: kernel must be square, got {k}x{k2}")
    _require(wc == c, f"conv2d: input has {c} channels, weight expects {wc}")
    _require(bias.shape == (o,), f"conv2d: bias {bias.shape} for {o} output channels")
    _require(stride >= 1 and pad >= 0, "conv2d: stride must be >= 1 and pad >= 0")
    _require(h + 2 * pad >= k and w + 2 * pad >= k, f"conv2d: kernel {k} exceeds padded {h}x{w}")
    out_h, out_w = _output_extent(h, k, stride, pad), _output_extent(w, k, stride, pad)
    dtype = result_dtype(x, weight, bias)

    padded = np.pad(x.data.astype(dtype, copy=False), ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = _windows(padded, k, stride, out_h, out_w).transpose(0, 2, 3, 1, 4, 5)
    cols = cols.reshape(n * out_h * out_w, c * k * k)
    kernel = weight.data.astype(dtype, copy=False).reshape(o, c * k * k)

    out = (cols @ kernel.T).reshape(n, out_h, out_w, o).transpose(0, 3, 1, 2)
    out = out + bias.data.astype(dtype, copy=False).reshape(1, o, 1, 1)

    def backward(g: Array) -> tuple[Array, Array, Array]:
        grad_rows = g.transpose(0, 2, 3, 1).reshape(-1, o)
        grad_weight = (grad_rows.T @ cols).reshape(weight.shape)
        grad_bias = g.sum(axis=(0, 2, 3), dtype=ACCUMULATE_DTYPE)
        grad_cols = (grad_rows @ kernel).reshape(n, out_h, out_w, c, k, k)
        grad_cols = grad_cols.transpose(0, 3, 1, 2, 4, 5)
        grad_padded = _scatter_windows(grad_cols, padded.shape, stride)
        grad_x = grad_padded[:, :, pad : pad + h, pad : pad + w]
        return grad_x, grad_weight, grad_bias

    return from_op(np.ascontiguousarray(out), "conv2d", (x, weight, bias), backward)


def batchnorm2d(  # noqa: PLR0913
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: NDArray[np.floating],
    running_var: NDArray[np.floating],
    *,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Batch normalization over every axis except the channel axis 1.

    Accepts (N, C, H, W) feature maps and (M, C) token matrices. In training mode
    the batch statistics normalize the input and the running statistics are updated
    in place (unbiased variance); in eval mode the running statistics are used.

    Args:
        x: Input of shape (N, C, H, W) or (M, C).
        gamma: Per-channel scale of shape (C,).
        beta: Per-channel shift of shape (C,).
        running_mean: Per-channel running mean, updated in training mode.
        running_var: Per-channel running variance, updated in training mode.
        training: Use batch statistics.
        momentum: Weight of the batch statistics in the running update.
        eps: Added to the variance before the square root.

    Returns:
        The normalized tensor.
    """
    _require(x.ndim in {2, 4}, f"batchnorm2d: expects rank 2 or 4, got {x.shape}")
    channels = x.shape[1]
    for name, values in (
        ("gamma", gamma.shape),
        ("beta", beta.shape),
        ("running_mean", running_mean.shape),
        ("running_var", running_var.shape),
    ):
        _require(values == (channels,), f"batchnorm2d: {name} {values} for {channels} channels")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)  # noqa: PLR2004
    view = (1, channels) if x.ndim == 2 else (1, channels, 1, 1)  # noqa: PLR2004
    dtype = result_dtype(x, gamma, beta)
    data = x.data.astype(ACCUMULATE_DTYPE)
    count = data.size // channels

    if training:
        mu = data.mean(axis=axes)
        var = ((data - mu.reshape(view)) ** 2).mean(axis=axes)
        unbiased = var * count / (count - 1) if count > 1 else var
        running_mean[:] = (1.0 - momentum) * running_mean + momentum * mu
        running_var[:] = (1.0 - momentum) * running_var + momentum * unbiased
    else:
        mu = running_mean.astype(ACCUMULATE_DTYPE)
        var = running_var.astype(ACCUMULATE_DTYPE)
    inv_std = 1.0 / np.sqrt(var + eps)
    normed = (data - mu.reshape(view)) * inv_std.reshape(view)
    scale = gamma.data.astype(ACCUMULATE_DTYPE).reshape(view)
    out = normed * scale + beta.data.astype(ACCUMULATE_DTYPE).reshape(view)

    def backward(g: Array) -> tuple[Array, Array, Array]:
        grad = g.astype(ACCUMULATE_DTYPE)
        grad_gamma = (grad * normed).sum(axis=axes)
        grad_beta = grad.sum(axis=axes)
        grad_normed = grad * scale
        if training:
            grad_x = (inv_std.reshape(view) / count) * (
                count * grad_normed
                - grad_normed.sum(axis=axes).reshape(view)
                - normed * (grad_normed * normed).sum(axis=axes).reshape(view)
            )
        else:
            grad_x = grad_normed * inv_std.reshape(view)
        return grad_x.astype(dtype), grad_gamma.astype(dtype), grad_beta.astype(dtype)

    return from_op(out.astype(dtype), "batchnorm2d", (x, gamma, beta), backward)


# activations


def relu(x: Tensor) -> Tensor:
    """Rectified linear unit; the subgradient at 0 is 0.

    Args:
        x: Input tensor.

    Returns:
        `max(x, 0)` elementwise.
    """
    mask = x.data > 0
    return from_op(
        np.where(mask, x.data, 0).astype(x.dtype),
        "relu",
        (x,),
        lambda g: (g * mask,),
    )


def hardswish(x: Tensor) -> Tensor:
    """Hard swish, `x * clamp(x + 3, 0, 6) / 6`.

    Args:
        x: Input tensor.

    Returns:
        The activation.
    """
    data = x.data

    def backward(g: Array) -> tuple[Array]:
        slope = np.where(
            data < HARDSWISH_LOW,
            0.0,
            np.where(data > HARDSWISH_HIGH, 1.0, (2.0 * data + 3.0) / 6.0),
        )
        return ((g * slope).astype(x.dtype),)

    out = data * np.clip(data + 3.0, 0.0, 6.0) / 6.0
    return from_op(out.astype(x.dtype), "hardswish", (x,), backward)


# normalizers and losses


def _softmax_values(data: Array, axis: int) -> Array:
    shifted = np.exp(data - data.max(axis=axis, keepdims=True))
    total = shifted.sum(axis=axis, keepdims=True, dtype=ACCUMULATE_DTYPE)
    return (shifted / total).astype(data.dtype)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along an axis.

    Args:
        x: Input tensor.
        axis: The normalized axis.

    Returns:
        Values in (0, 1] summing to one along `axis`.
    """
    _require(-x.ndim <= axis < x.ndim, f"softmax: axis {axis} out of range for {x.shape}")
    probs = _softmax_values(x.data, axis)

    def backward(g: Array) -> tuple[Array]:
        inner = (g * probs).sum(axis=axis, keepdims=True, dtype=ACCUMULATE_DTYPE)
        return ((probs * (g - inner)).astype(x.dtype),)

    return from_op(probs, "softmax", (x,), backward)


def cross_entropy(logits: Tensor, labels: ArrayLike) -> Tensor:
    """Mean negative log-likelihood of integer labels under a softmax.

    Args:
        logits: Scores of shape (N, C).
        labels: N class indices in [0, C).

    Returns:
        A scalar tensor.

    Raises:
        InvalidInput: If a label is out of range.
    """
    rank = logits.ndim == 2  # noqa: PLR2004
    _require(rank, f"cross_entropy: logits must be (N, C), got {logits.shape}")
    targets = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, classes = logits.shape
    _require(targets.shape[0] == n, f"cross_entropy: {targets.shape[0]} labels for {n} rows")
    if targets.size and (targets.min() < 0 or targets.max() >= classes):
        err = f"cross_entropy: labels must lie in [0, {classes})"
        raise InvalidInput(err)
    data = logits.data.astype(ACCUMULATE_DTYPE)
    peak = data.max(axis=1, keepdims=True)
    log_norm = peak[:, 0] + np.log(np.exp(data - peak).sum(axis=1))
    rows = np.arange(n)
    loss = (log_norm - data[rows, targets]).mean()
    probs = np.exp(data - log_norm[:, None])

    def backward(g: Array) -> tuple[Array]:
        grad = probs.copy()
        grad[rows, targets] -= 1.0
        return ((grad * (g / n)).astype(logits.dtype),)

    return from_op(np.asarray(loss, dtype=logits.dtype), "cross_entropy", (logits,), backward)


# attention


def attention_weights(q: Array, k: Array, bias: Array | None = None) -> Array:
    """Row-stochastic attention weights `softmax(q k^T / sqrt(D) + bias)`.

    Args:
        q: Queries of shape (N, H, Lq, D).
        k: Keys of shape (N, H, Lk, D).
        bias: Optional additive bias of shape (H, Lq, Lk).

    Returns:
        Weights of shape (N, H, Lq, Lk).
    """
    logits = (q @ np.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(q.shape[-1]))
    if bias is not None:
        logits = logits + bias[None]
    return _softmax_values(logits, axis=-1)


def attention(q: Tensor, k: Tensor, v: Tensor, bias: Tensor | None = None) -> Tensor:
    """Scaled dot-product attention per head.

    Queries may be fewer than keys (subsampled queries) and the value width may
    differ from the key width.

    Args:
        q: Queries of shape (N, H, Lq, D).
        k: Keys of shape (N, H, Lk, D).
        v: Values of shape (N, H, Lk, Dv).
        bias: Optional additive logit bias of shape (H, Lq, Lk).

    Returns:
        Output of shape (N, H, Lq, Dv).
    """
    ranks = q.ndim == k.ndim == v.ndim == 4  # noqa: PLR2004
    _require(ranks, "attention: q, k, v must be (N, H, L, D)")
    n, heads, lq, depth = q.shape
    _require(
        k.shape[:2] == (n, heads) and k.shape[3] == depth,
        f"attention: k {k.shape} vs q {q.shape}",
    )
    _require(v.shape[:3] == k.shape[:3], f"attention: v {v.shape} vs k {k.shape}")
    lk = k.shape[2]
    parents: tuple[Tensor, ...] = (q, k, v)
    if bias is not None:
        expected = (heads, lq, lk)
        _require(bias.shape == expected, f"attention: bias {bias.shape} for {expected}")
        parents = (q, k, v, bias)
    dtype = result_dtype(*parents)
    qd, kd, vd = (t.data.astype(dtype, copy=False) for t in (q, k, v))
    scale = 1.0 / math.sqrt(depth)
    probs = attention_weights(qd, kd, None if bias is None else bias.data.astype(dtype, copy=False))

    def backward(g: Array) -> list[Array]:
        grad_v = np.swapaxes(probs, -1, -2) @ g
        grad_probs = g @ np.swapaxes(vd, -1, -2)
        inner = (grad_probs * probs).sum(axis=-1, keepdims=True, dtype=ACCUMULATE_DTYPE)
        grad_logits = (probs * (grad_probs - inner)).astype(dtype)
        grads = [
            (grad_logits @ kd) * scale,
            (np.swapaxes(grad_logits, -1, -2) @ qd) * scale,
            grad_v,
        ]
        if bias is not None:
            grads.append(grad_logits.sum(axis=0, dtype=ACCUMULATE_DTYPE))
        return grads

    return from_op((probs @ vd).astype(dtype, copy=False), "attention", parents, backward)


# pooling


def avgpool2d(x: Tensor, kernel: int, stride: int | None = None) -> Tensor:
    """Average pooling over square windows without padding.

    Args:
        x: Input of shape (N, C, H, W).
        kernel: Window side.
        stride: Step between windows, defaults to `kernel`.

    Returns:
        The pooled tensor.
    """
    step = kernel if stride is None else stride
    _require(x.ndim == 4, f"avgpool2d: expects NCHW, got {x.shape}")  # noqa: PLR2004
    _require(kernel >= 1 and step >= 1, "avgpool2d: kernel and stride must be >= 1")
    _, _, h, w = x.shape
    _require(h >= kernel and w >= kernel, f"avgpool2d: kernel {kernel} exceeds {h}x{w}")
    out_h, out_w = _output_extent(h, kernel, step, 0), _output_extent(w, kernel, step, 0)
    windows = _windows(x.data, kernel, step, out_h, out_w)
    out = windows.mean(axis=(4, 5), dtype=ACCUMULATE_DTYPE).astype(x.dtype)
    area = float(kernel * kernel)

    def backward(g: Array) -> tuple[Array]:
        share = np.broadcast_to((g / area)[..., None, None], (*g.shape, kernel, kernel))
        return (_scatter_windows(np.ascontiguousarray(share), x.shape, step),)

    return from_op(out, "avgpool2d", (x,), backward)


def global_avgpool(x: Tensor) -> Tensor:
    """Mean over the spatial axes.

    Args:
        x: Input of shape (N, C, H, W).

    Returns:
        Output of shape (N, C).
    """
    _require(x.ndim == 4, f"global_avgpool: expects NCHW, got {x.shape}")  # noqa: PLR2004
    _, _, h, w = x.shape

    def backward(g: Array) -> tuple[Array]:
        spread = np.broadcast_to((g / (h * w))[:, :, None, None], x.shape)
        return (spread.astype(x.dtype),)

    out = x.data.mean(axis=(2, 3), dtype=ACCUMULATE_DTYPE).astype(x.dtype)
    return from_op(out, "global_avgpool", (x,), backward)
