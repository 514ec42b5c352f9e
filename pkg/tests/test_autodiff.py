"""Tests for tensors, kernels, recording and replay."""

import numpy as np
import pytest

from finetune_lab.autodiff import (
    Graph,
    GraphError,
    ShapeMismatchError,
    Tensor,
    backward,
    is_grad_enabled,
    no_grad,
)
from finetune_lab.autodiff import functional as F
from finetune_lab.autodiff.kernels import unbroadcast


def leaf(array) -> Tensor:
    return Tensor(np.asarray(array, dtype=np.float64), requires_grad=True)


class TestKernels:
    def test_add_broadcast_gradient_sums_over_expanded_axes(self):
        a = leaf(np.ones((3, 4)))
        b = leaf(np.ones(4))

        backward(F.sum(F.add(a, b)))

        assert np.array_equal(a.grad, np.ones((3, 4)))
        assert np.array_equal(b.grad, np.full(4, 3.0))

    def test_matmul_batched_against_numpy(self, rng):
        a = rng.standard_normal((2, 3, 4))
        b = rng.standard_normal((4, 5))

        out = F.matmul(Tensor(a), Tensor(b))

        assert np.allclose(out.data, a @ b)

    def test_gelu_tanh_approximation(self):
        x = np.array([-2.0, 0.0, 1.0])
        expected = 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x**3)))

        assert np.allclose(F.gelu(Tensor(x)).data, expected)

    def test_layernorm_output_is_normalized(self, rng):
        out = F.layernorm(Tensor(rng.standard_normal((5, 8)))).data

        assert np.allclose(out.mean(axis=-1), 0.0, atol=1e-12)
        assert np.allclose(out.var(axis=-1), 1.0, atol=1e-4)

    def test_softmax_rows_sum_to_one(self, rng):
        out = F.softmax(Tensor(rng.standard_normal((3, 7)) * 50)).data

        assert np.allclose(out.sum(axis=-1), 1.0)
        assert np.all(np.isfinite(out))

    def test_softmax_of_equal_logits_is_uniform(self):
        out = F.softmax(Tensor(np.zeros(3))).data

        assert np.allclose(out, 1.0 / 3.0)

    def test_layernorm_of_constant_row_is_zero(self):
        out = F.layernorm(Tensor(np.full((2, 6), 3.5))).data

        assert np.allclose(out, 0.0)

    def test_cross_entropy_matches_manual(self):
        logits = np.array([[2.0, 0.0, -1.0]])
        targets = np.array([[0.8, 0.1, 0.1]])
        log_probs = logits - np.log(np.exp(logits).sum())

        loss = F.cross_entropy(Tensor(logits), targets)

        assert loss.item() == pytest.approx(-(targets * log_probs).sum())

    def test_cross_entropy_gradient_is_probs_minus_targets(self):
        logits = leaf([[1.0, 2.0], [0.5, -0.5]])
        targets = np.array([[1.0, 0.0], [0.0, 1.0]])

        backward(F.cross_entropy(logits, targets))

        probs = np.exp(logits.data) / np.exp(logits.data).sum(axis=1, keepdims=True)
        assert np.allclose(logits.grad, (probs - targets) / 2)

    def test_gather_accumulates_repeated_indices(self):
        table = leaf(np.arange(4.0).reshape(1, 4))
        index = np.array([[0, 0], [3, 0]])

        out = F.gather(table, index)
        backward(F.sum(out))

        assert np.array_equal(out.data, [[[0.0, 0.0], [3.0, 0.0]]])
        assert np.array_equal(table.grad, [[3.0, 0.0, 0.0, 1.0]])

    def test_getitem_scatters_gradient(self):
        x = leaf(np.zeros((2, 3)))

        backward(F.sum(F.getitem(x, (slice(None), 1))))

        assert np.array_equal(x.grad, [[0, 1, 0], [0, 1, 0]])

    def test_reshape_and_transpose_round_trip_gradients(self, rng):
        x = leaf(rng.standard_normal((2, 3, 4)))
        weights = rng.standard_normal((4, 6))

        y = F.reshape(F.transpose(x, (2, 0, 1)), (4, 6))
        backward(F.sum(F.mul(y, weights)))

        expected = np.transpose(weights.reshape(4, 2, 3), (1, 2, 0))
        assert np.allclose(x.grad, expected)

    def test_kernels_preserve_float32(self):
        x = Tensor(np.ones((2, 2), dtype=np.float32))

        assert F.gelu(x).dtype == np.float32
        assert F.layernorm(x).dtype == np.float32
        assert F.mean(x).dtype == np.float32

    def test_unbroadcast_restores_shape(self):
        grad = np.ones((2, 3, 4))

        assert unbroadcast(grad, (3, 1)).shape == (3, 1)
        assert np.array_equal(unbroadcast(grad, (4,)), np.full(4, 6.0))


class TestShapeErrors:
    def test_matmul_mismatch_names_node_and_shapes(self):
        with pytest.raises(ShapeMismatchError) as info:
            F.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))

        assert info.value.node_id is not None
        assert "matmul" in str(info.value)

    def test_reshape_to_wrong_size(self):
        with pytest.raises(ShapeMismatchError):
            F.reshape(Tensor(np.ones(6)), (4, 2))

    def test_gather_out_of_range(self):
        with pytest.raises(ShapeMismatchError):
            F.gather(Tensor(np.ones((1, 3))), np.array([3]))


class TestBackward:
    def test_gradients_accumulate_until_zeroed(self):
        x = leaf([1.0, 2.0])

        backward(F.sum(F.mul(x, x)))
        backward(F.sum(F.mul(x, x)))
        assert np.array_equal(x.grad, [4.0, 8.0])

        x.zero_grad()
        assert x.grad is None

    def test_shared_subexpression_sums_both_paths(self):
        x = leaf([3.0])
        y = F.mul(x, 2.0)

        backward(F.sum(F.add(y, y)))

        assert np.array_equal(x.grad, [4.0])

    def test_non_scalar_loss_rejected(self):
        with pytest.raises(GraphError):
            backward(F.mul(leaf([1.0, 2.0]), 2.0))

    def test_loss_without_grad_inputs_rejected(self):
        with pytest.raises(GraphError):
            backward(F.sum(Tensor(np.ones(2))))

    def test_no_grad_records_nothing(self):
        x = leaf([1.0])

        with no_grad():
            assert not is_grad_enabled()
            y = F.mul(x, 2.0)

        assert is_grad_enabled()
        assert y.node is None
        assert not y.requires_grad


class TestGraph:
    @staticmethod
    def program(x, w):
        return F.sum(F.gelu(F.matmul(x, w)))

    def test_replay_matches_eager_values_and_gradients(self, rng):
        x0, w0 = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
        graph = Graph.trace(self.program, x=x0, w=w0)

        x, w = leaf(x0), leaf(w0)
        eager = self.program(x, w)
        backward(eager)

        out = graph.forward({"x": leaf(x0), "w": leaf(w0)})
        grads = graph.backward()

        assert out["output"].item() == eager.item()
        assert np.array_equal(grads["x"], x.grad)
        assert np.array_equal(grads["w"], w.grad)

    def test_replay_with_new_inputs(self, rng):
        graph = Graph.trace(self.program, x=np.zeros((3, 4)), w=np.zeros((4, 2)))
        x, w = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))

        out = graph.forward({"x": x, "w": w})

        assert out["output"].item() == pytest.approx(self.program(Tensor(x), Tensor(w)).item())

    def test_unbound_input(self):
        graph = Graph.trace(self.program, x=np.zeros((3, 4)), w=np.zeros((4, 2)))

        with pytest.raises(GraphError, match="unbound"):
            graph.forward({"x": np.zeros((3, 4))})

    def test_backward_before_forward(self):
        graph = Graph.trace(self.program, x=np.zeros((3, 4)), w=np.zeros((4, 2)))

        with pytest.raises(GraphError, match="before forward"):
            graph.backward()

    def test_records_are_topologically_ordered(self):
        graph = Graph.trace(self.program, x=np.zeros((3, 4)), w=np.zeros((4, 2)))

        for slot, record in graph.records.items():
            assert all(i < slot for i in record.inputs)
