"""Closed kernel set: pure numpy forward/backward pairs keyed by op kind.

Every kernel preserves the dtype of its first input. Reductions use numpy's default
(pairwise) summation on C-contiguous arrays, which fixes the reduction order for a
given shape; together with single-threaded BLAS this makes forward bit-reproducible.

GELU uses the tanh approximation::

    gelu(x) = 0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 * x**3)))

LayerNorm normalizes over the last axis with ``eps = 1e-5`` inside the square root and
has no affine part; the model applies weight and bias with ``mul``/``add``.
"""

from __future__ import annotations

import math
from typing import Any, ClassVar

import numpy as np

from finetune_lab.utils import FinetuneLabError

LAYERNORM_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715


class ShapeMismatchError(FinetuneLabError):
    """A kernel received inputs whose shapes do not fit its signature."""

    def __init__(
        self, kind: str, expected: str, actual: str, node_id: int | None = None
    ) -> None:
        self.kind = kind
        self.expected = expected
        self.actual = actual
        self.node_id = node_id
        super().__init__(str(self))

    def __str__(self) -> str:
        where = f"node {self.node_id} " if self.node_id is not None else ""
        return f"{where}({self.kind}): expected {self.expected}, got {self.actual}"


class Kernel:
    """Base class; subclasses register themselves under ``kind``."""

    kind: ClassVar[str] = ""

    @staticmethod
    def forward(*arrays: np.ndarray, **attrs: Any) -> tuple[np.ndarray, Any]:
        raise NotImplementedError

    @staticmethod
    def backward(saved: Any, grad: np.ndarray, **attrs: Any) -> tuple[Any, ...]:
        raise NotImplementedError


KERNELS: dict[str, type[Kernel]] = {}


def register(cls: type[Kernel]) -> type[Kernel]:
    KERNELS[cls.kind] = cls
    return cls


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` over the axes numpy broadcasting added to reach ``shape``."""

    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast(kind: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(
            kind, "broadcast-compatible shapes", f"{a.shape} and {b.shape}"
        ) from None


@register
class Add(Kernel):
    kind = "add"

    @staticmethod
    def forward(a, b):
        _broadcast("add", a, b)
        return np.add(a, b, dtype=a.dtype), (a.shape, b.shape)

    @staticmethod
    def backward(saved, grad):
        a_shape, b_shape = saved
        return unbroadcast(grad, a_shape), unbroadcast(grad, b_shape)


@register
class Mul(Kernel):
    kind = "mul"

    @staticmethod
    def forward(a, b):
        _broadcast("mul", a, b)
        return np.multiply(a, b, dtype=a.dtype), (a, b)

    @staticmethod
    def backward(saved, grad):
        a, b = saved
        return unbroadcast(grad * b, a.shape), unbroadcast(grad * a, b.shape)


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


@register
class MatMul(Kernel):
    kind = "matmul"

    @staticmethod
    def forward(a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ShapeMismatchError(
                "matmul", "(..., n, k) @ (..., k, m)", f"{a.shape} @ {b.shape}"
            )
        try:
            np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
        except ValueError:
            raise ShapeMismatchError(
                "matmul", "broadcastable batch dims", f"{a.shape} @ {b.shape}"
            ) from None
        return np.matmul(a, b).astype(a.dtype, copy=False), (a, b)

    @staticmethod
    def backward(saved, grad):
        a, b = saved
        grad_a = unbroadcast(np.matmul(grad, _swap(b)), a.shape)
        if b.ndim == 2:
            k, m = b.shape
            grad_b = a.reshape(-1, k).T @ grad.reshape(-1, m)
        else:
            grad_b = unbroadcast(np.matmul(_swap(a), grad), b.shape)
        return grad_a, grad_b


@register
class Gelu(Kernel):
    kind = "gelu"

    @staticmethod
    def forward(x):
        inner = _GELU_C * (x + _GELU_K * x**3)
        t = np.tanh(inner)
        return (0.5 * x * (1.0 + t)).astype(x.dtype, copy=False), (x, t)

    @staticmethod
    def backward(saved, grad):
        x, t = saved
        d_inner = _GELU_C * (1.0 + 3.0 * _GELU_K * x**2)
        local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * d_inner
        return ((grad * local).astype(x.dtype, copy=False),)


@register
class LayerNorm(Kernel):
    kind = "layernorm"

    @staticmethod
    def forward(x, eps=LAYERNORM_EPS):
        mu = x.mean(axis=-1, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=-1, keepdims=True)
        rstd = 1.0 / np.sqrt(var + eps)
        xhat = centered * rstd
        return xhat.astype(x.dtype, copy=False), (xhat, rstd)

    @staticmethod
    def backward(saved, grad, eps=LAYERNORM_EPS):
        xhat, rstd = saved
        g_mean = grad.mean(axis=-1, keepdims=True)
        gx_mean = (grad * xhat).mean(axis=-1, keepdims=True)
        return (rstd * (grad - g_mean - xhat * gx_mean),)


@register
class Softmax(Kernel):
    kind = "softmax"

    @staticmethod
    def forward(x, axis=-1):
        shifted = x - x.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        y = e / e.sum(axis=axis, keepdims=True)
        return y, y

    @staticmethod
    def backward(saved, grad, axis=-1):
        y = saved
        return (y * (grad - (grad * y).sum(axis=axis, keepdims=True)),)


@register
class Sum(Kernel):
    kind = "sum"

    @staticmethod
    def forward(x, axis=None, keepdims=False):
        out = np.asarray(x.sum(axis=axis, keepdims=keepdims), dtype=x.dtype)
        return out, x.shape

    @staticmethod
    def backward(saved, grad, axis=None, keepdims=False):
        shape = saved
        if axis is not None and not keepdims:
            grad = np.expand_dims(grad, axis)
        return (np.broadcast_to(grad, shape).copy(),)


@register
class Mean(Kernel):
    kind = "mean"

    @staticmethod
    def forward(x, axis=None, keepdims=False):
        out = np.asarray(x.mean(axis=axis, keepdims=keepdims), dtype=x.dtype)
        count = x.size // max(out.size, 1)
        return out, (x.shape, count)

    @staticmethod
    def backward(saved, grad, axis=None, keepdims=False):
        shape, count = saved
        if axis is not None and not keepdims:
            grad = np.expand_dims(grad, axis)
        return (np.broadcast_to(grad / count, shape).copy(),)


@register
class Reshape(Kernel):
    kind = "reshape"

    @staticmethod
    def forward(x, shape):
        try:
            out = x.reshape(shape)
        except ValueError:
            raise ShapeMismatchError(
                "reshape", f"a shape with {x.size} elements", f"{shape}"
            ) from None
        return out, x.shape

    @staticmethod
    def backward(saved, grad, shape):
        return (grad.reshape(saved),)


@register
class Transpose(Kernel):
    kind = "transpose"

    @staticmethod
    def forward(x, axes):
        if sorted(axes) != list(range(x.ndim)):
            raise ShapeMismatchError(
                "transpose", f"a permutation of {x.ndim} axes", f"{axes}"
            )
        return np.ascontiguousarray(x.transpose(axes)), None

    @staticmethod
    def backward(saved, grad, axes):
        return (np.ascontiguousarray(grad.transpose(np.argsort(axes))),)


@register
class GetItem(Kernel):
    """Basic indexing only (integers, slices, Ellipsis); no repeated positions."""

    kind = "getitem"

    @staticmethod
    def forward(x, key):
        try:
            out = np.ascontiguousarray(x[key])
        except IndexError:
            raise ShapeMismatchError("getitem", f"index valid for {x.shape}", f"{key}") from None
        return out, (x.shape, x.dtype)

    @staticmethod
    def backward(saved, grad, key):
        shape, dtype = saved
        out = np.zeros(shape, dtype=dtype)
        out[key] = grad
        return (out,)


@register
class Gather(Kernel):
    """``table[..., index]``: looks up the last axis of ``table`` with an int array."""

    kind = "gather"

    @staticmethod
    def forward(table, index):
        if table.ndim < 1:
            raise ShapeMismatchError("gather", "a table with rank >= 1", f"{table.shape}")
        if index.size and (index.min() < 0 or index.max() >= table.shape[-1]):
            raise ShapeMismatchError(
                "gather",
                f"indices in [0, {table.shape[-1]})",
                f"range [{index.min()}, {index.max()}]",
            )
        return np.ascontiguousarray(table[..., index]), table.shape

    @staticmethod
    def backward(saved, grad, index):
        shape = saved
        lead = int(np.prod(shape[:-1], dtype=np.int64))
        flat_index = index.reshape(-1)
        rows = grad.reshape(lead, flat_index.size)
        out = np.stack(
            [np.bincount(flat_index, weights=row, minlength=shape[-1]) for row in rows]
        )
        return (out.reshape(shape).astype(grad.dtype, copy=False),)


@register
class SoftCrossEntropy(Kernel):
    """Mean over the batch of ``-<target, log_softmax(logits)>``; targets get no grad."""

    kind = "cross_entropy"

    @staticmethod
    def forward(logits, targets):
        if logits.ndim != 2 or targets.shape != logits.shape:
            raise ShapeMismatchError(
                "cross_entropy", "logits (B, K) and targets (B, K)",
                f"{logits.shape} and {targets.shape}",
            )
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        log_probs = shifted - log_z
        per_sample = -(targets * log_probs).sum(axis=1)
        loss = np.asarray(per_sample.mean(), dtype=logits.dtype)
        return loss, (np.exp(log_probs), targets)

    @staticmethod
    def backward(saved, grad):
        probs, targets = saved
        batch = probs.shape[0]
        return (grad * (probs - targets) / batch, None)


__all__ = ["KERNELS", "Kernel", "LAYERNORM_EPS", "ShapeMismatchError", "unbroadcast"]
