"""Finite-difference oracle and the gradient checks behind ``grad-check``."""

import numpy as np
import pytest

from finetune_lab.autodiff import GradCheckError, Tensor, check_gradients, finite_diff_grad
from finetune_lab.autodiff import functional as F
from finetune_lab.harness.selftest import grad_check


def test_finite_diff_of_cubic_matches_derivative():
    x = np.array([0.5, -1.0, 2.0])

    numeric = finite_diff_grad(lambda t: F.sum(F.mul(F.mul(t, t), t)), x)

    assert np.allclose(numeric, 3 * x**2, rtol=1e-7)


def test_finite_diff_subset_leaves_other_coordinates_nan():
    x = np.arange(4.0)

    numeric = finite_diff_grad(lambda t: F.sum(t), x, indices=np.array([1, 3]))

    assert np.isnan(numeric[0]) and np.isnan(numeric[2])
    assert numeric[1] == pytest.approx(1.0)


def test_finite_diff_requires_float64():
    with pytest.raises(GradCheckError, match="float64"):
        finite_diff_grad(lambda t: F.sum(t), np.ones(2, dtype=np.float32))


def test_finite_diff_rejects_non_scalar_function():
    with pytest.raises(GradCheckError, match="scalar"):
        finite_diff_grad(lambda t: F.mul(t, 2.0), np.ones(2))


def test_check_gradients_reports_small_error_per_input(rng):
    inputs = {"x": rng.standard_normal((3, 4)), "w": rng.standard_normal((4, 2))}

    errors = check_gradients(lambda x, w: F.sum(F.gelu(F.matmul(x, w))), inputs)

    assert set(errors) == {"x", "w"}
    assert max(errors.values()) < 1e-6


def test_check_gradients_raises_when_rtol_exceeded():
    def wrong(x: Tensor) -> Tensor:
        # the detached copy hides half of the dependence from backward()
        return F.sum(F.mul(x, x.detach()))

    with pytest.raises(GradCheckError, match="relative error"):
        check_gradients(wrong, {"x": np.array([1.0, 2.0])}, rtol=1e-4)


def test_grad_check_two_seeds_passes():
    results = grad_check(2)

    names = {r.name for r in results}
    assert {"add", "matmul", "layernorm", "softmax", "gather", "cross_entropy", "vit"} <= names
    assert all(r.passed for r in results), [r.line() for r in results if not r.passed]


@pytest.mark.slow
def test_grad_check_twenty_seeds_passes():
    results = grad_check(20)

    assert all(r.passed for r in results), [r.line() for r in results if not r.passed]
