"""Minimal dense-tensor reverse-mode automatic differentiation."""

from finetune_lab.autodiff import functional
from finetune_lab.autodiff.gradcheck import (
    GradCheckError,
    check_gradients,
    finite_diff_grad,
    relative_error,
)
from finetune_lab.autodiff.graph import (
    Graph,
    GraphError,
    apply,
    backward,
    forward,
    is_grad_enabled,
    no_grad,
)
from finetune_lab.autodiff.kernels import KERNELS, LAYERNORM_EPS, ShapeMismatchError
from finetune_lab.autodiff.tensor import Node, Tensor, as_tensor

__all__ = [
    "KERNELS",
    "LAYERNORM_EPS",
    "Graph",
    "GraphError",
    "GradCheckError",
    "Node",
    "ShapeMismatchError",
    "Tensor",
    "apply",
    "as_tensor",
    "backward",
    "check_gradients",
    "finite_diff_grad",
    "forward",
    "functional",
    "is_grad_enabled",
    "no_grad",
    "relative_error",
]
