"""Dense tensor value with an optional gradient slot."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any

import numpy as np

if TYPE_CHECKING:
    from collections.abc import Sequence

SUPPORTED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


@dataclass(slots=True, eq=False)
class Node:
    """One recorded kernel application: the op kind, its inputs and saved context."""

    id: int
    kind: str
    inputs: tuple[Tensor, ...]
    attrs: dict[str, Any] = field(default_factory=dict)
    saved: Any = None


class Tensor:
    """Row-major dense array in float32 or float64 with an additive gradient slot.

    A tensor produced by a kernel carries the :class:`Node` that created it; leaves
    (parameters, inputs, constants) have ``node is None``. ``grad`` is populated by
    :func:`finetune_lab.autodiff.graph.backward` for leaves with ``requires_grad`` and
    accumulates across calls until :meth:`zero_grad`.
    """

    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(
        self,
        data: Any,
        *,
        requires_grad: bool = False,
        dtype: Any = None,
        name: str | None = None,
    ) -> None:
        array = np.asarray(data, dtype=dtype)
        if array.dtype not in SUPPORTED_DTYPES:
            array = array.astype(np.float32)
        self.data: np.ndarray = array
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, grad: np.ndarray) -> None:
        """Add ``grad`` into the gradient slot, allocating it on first use."""

        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.data.shape:
            raise ValueError(
                f"gradient shape {grad.shape} does not match tensor shape {self.data.shape}"
            )
        if self.grad is None:
            self.grad = grad.copy()
        else:
            self.grad = self.grad + grad

    def detach(self) -> Tensor:
        return Tensor(self.data, requires_grad=False, name=self.name)

    # Operator sugar delegates to the functional kernels.

    def __add__(self, other: Any) -> Tensor:
        from finetune_lab.autodiff import functional as F

        return F.add(self, other)

    __radd__ = __add__

    def __mul__(self, other: Any) -> Tensor:
        from finetune_lab.autodiff import functional as F

        return F.mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other: Any) -> Tensor:
        from finetune_lab.autodiff import functional as F

        return F.matmul(self, other)

    def __getitem__(self, key: Any) -> Tensor:
        from finetune_lab.autodiff import functional as F

        return F.getitem(self, key)

    def reshape(self, *shape: int | Sequence[int]) -> Tensor:
        from finetune_lab.autodiff import functional as F

        if len(shape) == 1 and not isinstance(shape[0], int):
            shape = tuple(shape[0])
        return F.reshape(self, tuple(shape))

    def transpose(self, *axes: int) -> Tensor:
        from finetune_lab.autodiff import functional as F

        return F.transpose(self, tuple(axes))

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        kind = self.node.kind if self.node is not None else "leaf"
        return (
            f"Tensor(shape={self.shape}, dtype={self.dtype}, {kind},"
            f" requires_grad={self.requires_grad}{label})"
        )


def as_tensor(value: Any, *, like: Tensor | None = None) -> Tensor:
    """Wrap arrays and scalars as constant tensors, matching ``like``'s dtype."""

    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype))
