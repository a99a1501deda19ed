"""
Tests for the reverse-mode autodiff primitives and the Adam optimizer
Gradients are checked against central finite differences in float64
"""

from typing import Callable

import numpy as np
import pytest

from fhrvae import autograd as ad
from fhrvae.autograd import Tensor
from fhrvae.errors import NumericalError, ShapeError


def numeric_grad(fn: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        original = x[idx]
        x[idx] = original + eps
        high = fn(x)
        x[idx] = original - eps
        low = fn(x)
        x[idx] = original
        grad[idx] = (high - low) / (2 * eps)
    return grad


def check_unary(build: Callable[[Tensor], Tensor], x: np.ndarray) -> None:
    param = ad.parameter(x.copy(), "x")
    ad.backward(ad.sum(build(param)))

    def value(arr: np.ndarray) -> float:
        with ad.no_grad():
            return ad.sum(build(Tensor(arr))).item()

    expected = numeric_grad(value, x.copy())
    np.testing.assert_allclose(param.grad, expected, rtol=1e-5, atol=1e-7)


@pytest.fixture
def rng():
    return np.random.default_rng(7)


@pytest.mark.parametrize(
    "build",
    [
        lambda t: ad.exp(t),
        lambda t: ad.tanh(t),
        lambda t: ad.sigmoid(t),
        lambda t: ad.square(t),
        lambda t: ad.softmax(t) * Tensor(np.arange(12.0).reshape(3, 4)),
        lambda t: ad.layer_norm(t) * Tensor(np.linspace(-1.0, 2.0, 12).reshape(3, 4)),
        lambda t: ad.logsumexp(t, axis=1),
        lambda t: ad.mean(ad.transpose(t), axis=0),
        lambda t: ad.take(t, (slice(None), slice(1, 3))),
        lambda t: ad.scale(ad.reshape(t, (4, 3)), 2.5),
    ],
    ids=["exp", "tanh", "sigmoid", "square", "softmax", "layer_norm", "logsumexp", "mean", "take", "reshape"],
)
def test_unary_gradients_match_finite_differences(build, rng):
    """Each primitive's pullback agrees with central differences"""
    check_unary(build, rng.normal(size=(3, 4)))


def test_log_gradient(rng):
    check_unary(lambda t: ad.log(t), rng.uniform(0.5, 2.0, size=(3, 4)))


def test_matmul_and_rowwise_bias_gradients(rng):
    """Batched matmul with a shared weight plus a broadcast bias row"""
    x = rng.normal(size=(2, 3, 4))
    w = ad.parameter(rng.normal(size=(4, 5)), "w")
    b = ad.parameter(rng.normal(size=(5,)), "b")
    ad.backward(ad.sum(ad.tanh(ad.matmul(Tensor(x), w) + b)))

    def value_w(arr):
        return float(np.tanh(x @ arr + b.data).sum())

    def value_b(arr):
        return float(np.tanh(x @ w.data + arr).sum())

    np.testing.assert_allclose(w.grad, numeric_grad(value_w, w.data.copy()), rtol=1e-5, atol=1e-7)
    np.testing.assert_allclose(b.grad, numeric_grad(value_b, b.data.copy()), rtol=1e-5, atol=1e-7)


def test_concat_and_broadcast_gradients(rng):
    a = ad.parameter(rng.normal(size=(2, 3)), "a")
    b = ad.parameter(rng.normal(size=(2, 2)), "b")
    joined = ad.concat([a, b], axis=-1)
    spread = ad.broadcast_to(ad.reshape(joined, (2, 1, 5)), (2, 4, 5))
    ad.backward(ad.sum(ad.square(spread)))
    np.testing.assert_allclose(a.grad, 8.0 * a.data)
    np.testing.assert_allclose(b.grad, 8.0 * b.data)


def test_shared_node_accumulates_once_per_use():
    """A node used twice receives the sum of both cotangents"""
    x = ad.parameter(np.array([3.0]), "x")
    y = x * x + x
    tape = ad.backward(ad.sum(y))
    assert x.grad[0] == pytest.approx(7.0)
    assert len(tape) == len({id(node) for node in tape.nodes})


def test_square_gradient_at_three():
    x = ad.parameter(np.array([3.0]), "x")
    ad.backward(ad.sum(x * x))
    assert x.grad[0] == pytest.approx(6.0)


def test_matmul_by_hand():
    a = Tensor(np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]))
    b = Tensor(np.array([[7.0, 8.0], [9.0, 10.0], [11.0, 12.0]]))
    np.testing.assert_array_equal(ad.matmul(a, b).data, [[58.0, 64.0], [139.0, 154.0]])


def test_softmax_of_uniform_row():
    out = ad.softmax(Tensor(np.full((2, 5), 0.7)))
    np.testing.assert_allclose(out.data, 0.2)


def test_layer_norm_standardises_rows(rng):
    out = ad.layer_norm(Tensor(rng.normal(3.0, 2.0, size=(4, 16))), eps=0.0)
    np.testing.assert_allclose(out.data.mean(axis=-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.data.var(axis=-1), 1.0, rtol=1e-9)


def test_backward_needs_scalar_root_with_trainable_leaf():
    x = ad.parameter(np.ones(3), "x")
    with pytest.raises(ShapeError):
        ad.backward(x * 2.0)
    with pytest.raises(ShapeError):
        ad.backward(ad.sum(Tensor(np.ones(3))))


def test_mismatched_broadcast_is_rejected():
    with pytest.raises(ShapeError):
        ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 1))))
    with pytest.raises(ShapeError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_non_finite_values_raise_numerical_error():
    with pytest.raises(NumericalError):
        ad.log(Tensor(np.array([1.0, 0.0])))
    with pytest.raises(NumericalError):
        ad.exp(Tensor(np.array([1000.0])))


def test_no_grad_records_nothing():
    x = ad.parameter(np.ones(2), "x")
    with ad.no_grad():
        y = ad.sum(x * 3.0)
    assert not y.requires_grad
    assert ad.sum(x * 3.0).requires_grad


class TestAdam:
    """Tests for the functional and in-place Adam updates"""

    def test_first_step_moves_by_learning_rate(self):
        """After bias correction the first step is lr * sign(g)"""
        params = {"w": np.array([1.0, -1.0, 0.5])}
        grads = {"w": np.array([0.3, -2.0, 1e-3])}
        new, state = ad.adam_step(params, grads, ad.AdamState(), lr=0.1)
        np.testing.assert_allclose(new["w"], params["w"] - 0.1 * np.sign(grads["w"]), rtol=1e-4)
        assert state.step == 1
        assert params["w"][0] == 1.0

    def test_missing_gradient_counts_as_zero(self):
        new, _ = ad.adam_step({"w": np.ones(2)}, {"w": None}, ad.AdamState())
        np.testing.assert_array_equal(new["w"], np.ones(2))

    def test_zero_gradient_leaves_parameters_unchanged(self):
        params = {"w": np.array([0.25, -4.0])}
        new, state = ad.adam_step(params, {"w": np.zeros(2)}, ad.AdamState(), lr=0.5)
        np.testing.assert_array_equal(new["w"], params["w"])
        assert state.step == 1

    def test_gradient_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ad.adam_step({"w": np.ones(2)}, {"w": np.ones(3)}, ad.AdamState())

    def test_optimizer_minimises_a_quadratic(self):
        w = ad.parameter(np.array([3.0, -2.0]), "w")
        optimizer = ad.AdamOptimizer({"w": w}, lr=0.1)
        for _ in range(500):
            optimizer.zero_grad()
            ad.backward(ad.sum(ad.square(w - 1.0)))
            optimizer.step()
        np.testing.assert_allclose(w.data, [1.0, 1.0], atol=5e-2)
