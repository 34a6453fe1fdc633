"""Minimal dense tensors with reverse-mode differentiation."""

from __future__ import annotations

from levit_mc.tensor.core import Tensor
from levit_mc.tensor.gradcheck import GradCheckReport, grad_check
from levit_mc.tensor.ops import (
    add,
    attention,
    attention_weights,
    avgpool2d,
    batchnorm2d,
    concat,
    conv2d,
    cross_entropy,
    gather_bias,
    getitem,
    global_avgpool,
    hardswish,
    linear,
    mean,
    permute,
    relu,
    reshape,
    softmax,
    tile_batch,
)


__all__ = [
    "GradCheckReport",
    "Tensor",
    "add",
    "attention",
    "attention_weights",
    "avgpool2d",
    "batchnorm2d",
    "concat",
    "conv2d",
    "cross_entropy",
    "gather_bias",
    "getitem",
    "global_avgpool",
    "grad_check",
    "hardswish",
    "linear",
    "mean",
    "permute",
    "relu",
    "reshape",
    "softmax",
    "tile_batch",
]
