"""Central finite differences as the oracle for reverse-mode gradients."""

from __future__ import annotations

import logging
from collections.abc import Callable, Mapping
from typing import Any

import numpy as np

from finetune_lab.autodiff.graph import backward, no_grad
from finetune_lab.autodiff.tensor import Tensor
from finetune_lab.utils import FinetuneLabError

logger = logging.getLogger(__name__)


class GradCheckError(FinetuneLabError):
    """Finite differences could not be evaluated, or disagreed with backward()."""

    pass


def default_step(x: np.ndarray) -> np.ndarray:
    """Per-coordinate step ``1e-4 * (1 + |x|)``."""

    return 1e-4 * (1.0 + np.abs(x))


def _scalar(value: Any) -> float:
    data = value.data if isinstance(value, Tensor) else np.asarray(value)
    if data.size != 1:
        raise GradCheckError(f"function must return a scalar, got shape {data.shape}")
    result = float(data.reshape(-1)[0])
    if not np.isfinite(result):
        raise GradCheckError("function returned a non-finite value")
    return result


def finite_diff_grad(
    f: Callable[[Tensor], Any],
    x: Tensor | np.ndarray,
    h: float | np.ndarray | None = None,
    *,
    indices: np.ndarray | None = None,
) -> np.ndarray:
    """Central differences ``(f(x + h e_i) - f(x - h e_i)) / 2h`` per coordinate.

    ``indices`` (flat positions) restricts the evaluation to a subset; other entries
    of the returned array are ``nan``. ``x`` must be float64.
    """

    base = np.array(x.data if isinstance(x, Tensor) else x, copy=True)
    if base.dtype != np.float64:
        raise GradCheckError(f"finite differences require float64, got {base.dtype}")
    steps = np.broadcast_to(default_step(base) if h is None else np.asarray(h, dtype=np.float64), base.shape)

    flat = base.reshape(-1)
    flat_steps = steps.reshape(-1)
    grad = np.full(flat.shape, np.nan if indices is not None else 0.0)
    positions = range(flat.size) if indices is None else np.asarray(indices).reshape(-1)

    with no_grad():
        for i in positions:
            step = float(flat_steps[i])
            original = flat[i]
            flat[i] = original + step
            f_plus = _scalar(f(Tensor(base.copy())))
            flat[i] = original - step
            f_minus = _scalar(f(Tensor(base.copy())))
            flat[i] = original
            grad[i] = (f_plus - f_minus) / (2.0 * step)
    return grad.reshape(base.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``||a - n|| / max(||a||, ||n||)`` with a floor that keeps all-zero cases at 0."""

    diff = float(np.linalg.norm(analytic - numeric))
    scale = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)), 1e-12)
    return diff / scale


def check_gradients(
    f: Callable[..., Tensor],
    inputs: Mapping[str, np.ndarray],
    *,
    max_coords: int | None = None,
    seed: int = 0,
    rtol: float | None = None,
) -> dict[str, float]:
    """Compare backward() with finite differences for every named float64 input.

    ``f`` receives the inputs as keyword tensors and returns a scalar tensor. With
    ``max_coords`` only that many randomly chosen coordinates per input are checked.
    Returns the relative error per input; with ``rtol`` set, an input whose error
    exceeds it raises :class:`GradCheckError`.
    """

    tensors = {
        name: Tensor(np.asarray(value, dtype=np.float64), requires_grad=True, name=name)
        for name, value in inputs.items()
    }
    loss = f(**tensors)
    backward(loss)

    rng = np.random.default_rng(seed)
    errors: dict[str, float] = {}
    for name, tensor in tensors.items():
        analytic = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        indices = None
        if max_coords is not None and tensor.size > max_coords:
            indices = rng.choice(tensor.size, size=max_coords, replace=False)

        def partial(x: Tensor, _name: str = name) -> Tensor:
            bound = {k: (x if k == _name else t.detach()) for k, t in tensors.items()}
            return f(**bound)

        numeric = finite_diff_grad(partial, tensor.data, indices=indices)
        if indices is None:
            errors[name] = relative_error(analytic, numeric)
        else:
            errors[name] = relative_error(
                analytic.reshape(-1)[indices], numeric.reshape(-1)[indices]
            )
        logger.debug("gradcheck_input", extra={"input": name, "rel_error": errors[name]})
        if rtol is not None and not errors[name] <= rtol:
            raise GradCheckError(
                f"gradient of input {name!r} disagrees with finite differences:"
                f" relative error {errors[name]:.3e} > {rtol:.1e}"
            )
    return errors
