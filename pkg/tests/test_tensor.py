import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from offnet.core import (
    DimensionError,
    GraphError,
    Parameter,
    Tensor,
    backward,
    concat,
    gelu,
    grad_check,
    layer_norm,
    matmul,
    no_grad,
    sigmoid,
    softmax,
)

finite = st.floats(-50, 50, allow_nan=False, width=32)


# -- matmul ----------------------------------------------------------------------

def test_matmul_identity():
    a = Tensor(np.eye(2))
    b = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal((a @ b).data, [[1, 2], [3, 4]])


def test_matmul_hand_product():
    out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0, 6.0], [7.0, 8.0]]))
    np.testing.assert_array_equal(out.data, [[19, 22], [43, 50]])


def test_matmul_zero_annihilates(rng):
    out = Tensor(rng.normal(size=(3, 4))) @ Tensor(np.zeros((4, 5)))
    assert np.all(out.data == 0)


def test_matmul_shape_errors_name_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(DimensionError):
        matmul(Tensor(np.ones((2, 2, 3))), Tensor(np.ones((3, 3, 4))))


def test_matmul_batch_broadcast_equal_or_one(rng):
    a = rng.normal(size=(2, 1, 3, 4))
    b = rng.normal(size=(1, 5, 4, 2))
    out = matmul(Tensor(a), Tensor(b))
    np.testing.assert_allclose(out.data, a @ b, rtol=1e-5)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_matmul_associativity(seed):
    rng = np.random.default_rng(seed)
    a, b, c = (Tensor(rng.uniform(-1, 1, (4, 4))) for _ in range(3))
    left = ((a @ b) @ c).data
    right = (a @ (b @ c)).data
    assert np.abs(left - right).max() <= 1e-4


# -- softmax / activations -------------------------------------------------------------

def test_softmax_examples():
    np.testing.assert_allclose(softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    np.testing.assert_allclose(softmax(Tensor(np.array([0.0, math.log(3)]))).data, [0.25, 0.75], rtol=1e-6)
    big = softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(big))
    np.testing.assert_allclose(big, [1.0, 0.0], atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=finite), st.sampled_from([0, 1, -1]))
def test_softmax_sums_to_one(x, axis):
    out = softmax(Tensor(x), axis=axis).data
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(axis=axis), 1.0, atol=1e-5)


def test_activation_examples():
    assert gelu(Tensor([0.0])).data[0] == 0.0
    assert sigmoid(Tensor([0.0])).data[0] == 0.5
    assert sigmoid(Tensor(np.array([math.log(3)]))).data[0] == pytest.approx(0.75, abs=1e-12)
    np.testing.assert_allclose(gelu(Tensor([10.0, -10.0])).data, [10.0, 0.0], atol=1e-6)


def test_gelu_is_exact_erf_form():
    # x * Phi(x) at x = 1: Phi(1) = 0.8413447460685429
    assert gelu(Tensor(np.array([1.0]))).data[0] == pytest.approx(0.8413447460685429, abs=1e-12)


def test_sigmoid_stable_at_extremes():
    out = sigmoid(Tensor([-1000.0, 1000.0])).data
    np.testing.assert_array_equal(out, [0.0, 1.0])


# -- layer norm ---------------------------------------------------------------------

def test_layer_norm_constant_row_is_zero():
    out = layer_norm(Tensor(np.full((2, 4), 3.0)), Tensor(np.ones(4)), Tensor(np.zeros(4)))
    assert np.all(out.data == 0)


def test_layer_norm_plus_minus_one():
    out = layer_norm(Tensor(np.array([[1.0, -1.0]])), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0)
    np.testing.assert_allclose(out.data, [[1.0, -1.0]])


def test_layer_norm_affine_override(rng):
    out = layer_norm(Tensor(rng.normal(size=(3, 5))), Tensor(np.zeros(5)), Tensor(np.full(5, 2.5)))
    assert np.all(out.data == 2.5)


# -- backward -----------------------------------------------------------------------

def test_sum_of_squares_gradient():
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    backward((x * x).sum())
    np.testing.assert_array_equal(x.grad, [2.0, -4.0, 6.0])


def test_disconnected_parameter_gets_zero_grad():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    unused = Tensor(np.array([5.0]), requires_grad=True)
    loss = (x * x).sum() + unused * 0.0
    backward(loss.sum())
    np.testing.assert_array_equal(unused.grad, [0.0])


def test_two_backward_calls_double_gradients():
    x = Tensor(np.array([1.0, -3.0]), requires_grad=True)
    backward((x * x).sum())
    first = x.grad.copy()
    backward((x * x).sum())
    np.testing.assert_array_equal(x.grad, 2 * first)


def test_retained_graph_can_be_replayed():
    x = Tensor(np.array([2.0]), requires_grad=True)
    loss = (x * x * x).sum()
    backward(loss, retain_graph=True)
    backward(loss)
    np.testing.assert_array_equal(x.grad, [24.0])


def test_freed_graph_refuses_second_backward():
    x = Tensor(np.array([2.0]), requires_grad=True)
    loss = (x * x).sum()
    backward(loss)
    with pytest.raises(GraphError):
        backward(loss)


def test_non_scalar_loss_is_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(GraphError):
        backward(x * 2.0)


def test_loss_without_grad_inputs_is_rejected():
    with pytest.raises(GraphError):
        backward(Tensor(np.ones(3)).sum())


def test_shared_subexpression_equals_path_sum():
    # f = y*y + 3y with y = 2x: df/dx = (2y + 3) * 2
    x = Tensor(np.array([0.5, -1.5]), requires_grad=True)
    y = x * 2.0
    backward((y * y + y * 3.0).sum())
    yv = 2 * np.array([0.5, -1.5])
    np.testing.assert_allclose(x.grad, (2 * yv + 3) * 2)


def test_broadcast_gradients_are_summed_back(rng):
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4,)), requires_grad=True)
    backward((a + b).sum())
    np.testing.assert_array_equal(b.grad, np.full(4, 3.0))
    np.testing.assert_array_equal(a.grad, np.ones((3, 4)))


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        y = x * 3.0
    assert not y.requires_grad and y.is_leaf


def test_storage_defaults_to_float32():
    assert Tensor([1, 2, 3]).dtype == np.float32
    assert Parameter(np.zeros(3, dtype=np.float32)).requires_grad


def test_concat_gradient_splits(rng):
    a = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=(2, 1)), requires_grad=True)
    w = rng.normal(size=(2, 4))
    backward((concat([a, b], axis=1) * w).sum())
    np.testing.assert_allclose(a.grad, w[:, :3], rtol=1e-6)
    np.testing.assert_allclose(b.grad, w[:, 3:], rtol=1e-6)


# -- gradient checks over random small shapes -----------------------------------------------

shapes = st.tuples(st.integers(1, 3), st.integers(1, 4))


def _weighted(out, w):
    return (out * w).sum()


@settings(max_examples=10, deadline=None)
@given(shapes, st.integers(0, 2**31 - 1))
def test_grad_check_elementwise_ops(shape, seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.uniform(0.5, 2.0, shape))
    y = Tensor(rng.uniform(0.5, 2.0, shape))
    w = rng.normal(size=shape)
    cases = [
        lambda: _weighted(x * y + x / y - y, w),
        lambda: _weighted((x ** 3.0).exp().log(), w),
        lambda: _weighted(gelu(x - 1.0) + sigmoid(x * 2.0), w),
        lambda: _weighted(softmax(x, axis=-1), w),
        lambda: (x.reshape(-1).transpose() * w.reshape(-1)).mean(),
    ]
    for f in cases:
        assert grad_check(f, x).passed


@settings(max_examples=10, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_grad_check_matmul_and_layer_norm(m, k, n, seed):
    rng = np.random.default_rng(seed)
    a, b = Tensor(rng.normal(size=(m, k))), Tensor(rng.normal(size=(k, n)))
    w = rng.normal(size=(m, n))
    assert grad_check(lambda: _weighted(a @ b, w), a).passed
    assert grad_check(lambda: _weighted(a @ b, w), b).passed
    if k > 1:
        g, beta = Tensor(rng.normal(size=k)), Tensor(rng.normal(size=k))
        w2 = rng.normal(size=(m, k))
        for target in (a, g, beta):
            assert grad_check(lambda: _weighted(layer_norm(a, g, beta), w2), target).passed
