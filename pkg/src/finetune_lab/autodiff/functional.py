"""User-facing differentiable ops built on the kernel registry."""

from __future__ import annotations

import math
from typing import Any

import numpy as np

from finetune_lab.autodiff.graph import apply
from finetune_lab.autodiff.kernels import LAYERNORM_EPS
from finetune_lab.autodiff.tensor import Tensor, as_tensor


def add(a: Any, b: Any) -> Tensor:
    a = as_tensor(a)
    return apply("add", a, as_tensor(b, like=a))


def mul(a: Any, b: Any) -> Tensor:
    a = as_tensor(a)
    return apply("mul", a, as_tensor(b, like=a))


def matmul(a: Any, b: Any) -> Tensor:
    a = as_tensor(a)
    return apply("matmul", a, as_tensor(b, like=a))


def gelu(x: Tensor) -> Tensor:
    return apply("gelu", x)


def layernorm(x: Tensor, eps: float = LAYERNORM_EPS) -> Tensor:
    """Normalize over the last axis (no affine)."""

    return apply("layernorm", x, eps=eps)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return apply("softmax", x, axis=axis)


def sum(x: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return apply("sum", x, axis=axis, keepdims=keepdims)


def mean(x: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    return apply("mean", x, axis=axis, keepdims=keepdims)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    return apply("reshape", x, shape=tuple(shape))


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    return apply("transpose", x, axes=tuple(axes))


def getitem(x: Tensor, key: Any) -> Tensor:
    return apply("getitem", x, key=key)


def gather(table: Tensor, index: np.ndarray) -> Tensor:
    return apply("gather", table, index=np.asarray(index, dtype=np.int64))


def cross_entropy(logits: Tensor, targets: Any) -> Tensor:
    """Mean soft-target cross-entropy; ``targets`` rows are probability vectors."""

    return apply("cross_entropy", logits, as_tensor(targets, like=logits))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as (in_features, out_features)."""

    out = matmul(x, weight)
    return add(out, bias) if bias is not None else out


def layer_norm_affine(x: Tensor, weight: Tensor, bias: Tensor, eps: float = LAYERNORM_EPS) -> Tensor:
    return add(mul(layernorm(x, eps), weight), bias)


def swap_last(x: Tensor) -> Tensor:
    axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    return transpose(x, axes)


def scaled_dot_product_attention(
    q: Tensor, k: Tensor, v: Tensor, bias: Tensor | None = None
) -> Tensor:
    """``softmax(q k^T / sqrt(d) + bias) v`` over (..., tokens, head_dim) operands."""

    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = mul(matmul(q, swap_last(k)), scale)
    if bias is not None:
        scores = add(scores, bias)
    return matmul(softmax(scores, axis=-1), v)


__all__ = [
    "add",
    "mul",
    "matmul",
    "gelu",
    "layernorm",
    "softmax",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "getitem",
    "gather",
    "cross_entropy",
    "linear",
    "layer_norm_affine",
    "swap_last",
    "scaled_dot_product_attention",
]
