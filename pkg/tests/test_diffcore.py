import numpy as np
import pytest

from mirnet.diffcore import (GraphFreedError, NonFiniteError, ShapeError, Tensor, abs_, clamp, concat, exp,
                             gather_rows, grad_check, leaky_relu, log, no_grad, relu, sigmoid, softmax)

TOL = 1e-6


def leaf(rng, *shape, low=-1.0, high=1.0):
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True)


def away_from_zero(rng, *shape):
    x = rng.uniform(0.2, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)
    return Tensor(x, requires_grad=True)


def weights(rng, shape):
    return rng.normal(size=shape)


def test_grad_add_sub_mul_broadcast(rng):
    a, b = leaf(rng, 3, 4), leaf(rng, 4)
    w = weights(rng, (3, 4))
    assert grad_check(lambda: ((a + b) * w).sum(), [a, b]) < TOL
    assert grad_check(lambda: ((a - b) * w).sum(), [a, b]) < TOL
    assert grad_check(lambda: (a * b * w).sum(), [a, b]) < TOL
    assert grad_check(lambda: (-a * w).sum(), [a]) < TOL


def test_grad_matmul_batched(rng):
    a, b = leaf(rng, 2, 3, 4), leaf(rng, 4, 5)
    w = weights(rng, (2, 3, 5))
    assert grad_check(lambda: ((a @ b) * w).sum(), [a, b]) < TOL


def test_grad_pow_and_division(rng):
    a = leaf(rng, 3, 3, low=0.5, high=2.0)
    b = leaf(rng, 3, 3, low=0.5, high=2.0)
    w = weights(rng, (3, 3))
    assert grad_check(lambda: ((a ** 3.0) * w).sum(), [a]) < TOL
    assert grad_check(lambda: ((a ** -0.5) * w).sum(), [a]) < TOL
    assert grad_check(lambda: ((a / b) * w).sum(), [a, b]) < TOL


def test_grad_elementwise_functions(rng):
    w = weights(rng, (4, 3))
    x = leaf(rng, 4, 3)
    pos = leaf(rng, 4, 3, low=0.3, high=2.0)
    kinked = away_from_zero(rng, 4, 3)
    assert grad_check(lambda: (exp(x) * w).sum(), [x]) < TOL
    assert grad_check(lambda: (log(pos) * w).sum(), [pos]) < TOL
    assert grad_check(lambda: (sigmoid(x) * w).sum(), [x]) < TOL
    assert grad_check(lambda: (abs_(kinked) * w).sum(), [kinked]) < TOL
    assert grad_check(lambda: (relu(kinked) * w).sum(), [kinked]) < TOL
    assert grad_check(lambda: (leaky_relu(kinked) * w).sum(), [kinked]) < TOL


def test_grad_clamp_away_from_bounds(rng):
    x = Tensor(np.array([[-2.0, -0.3, 0.4], [0.1, 1.7, -0.8]]), requires_grad=True)
    w = weights(rng, (2, 3))
    assert grad_check(lambda: (clamp(x, -1.0, 1.0) * w).sum(), [x]) < TOL


def test_grad_softmax_plain_and_masked(rng):
    x = leaf(rng, 2, 4, 4)
    w = weights(rng, (2, 4, 4))
    mask = np.eye(4, dtype=bool) | (rng.random((4, 4)) < 0.5)
    assert grad_check(lambda: (softmax(x, axis=-1) * w).sum(), [x]) < TOL
    assert grad_check(lambda: (softmax(x, axis=-1, mask=mask) * w).sum(), [x]) < TOL


def test_grad_reductions_and_shapes(rng):
    x = leaf(rng, 2, 3, 4)
    w2 = weights(rng, (2, 4))
    w3 = weights(rng, (4, 3, 2))
    assert grad_check(lambda: (x.sum(axis=1) * w2).sum(), [x]) < TOL
    assert grad_check(lambda: (x.mean(axis=1) * w2).sum(), [x]) < TOL
    assert grad_check(lambda: (x.mean(axis=-1, keepdims=True) * x).sum(), [x]) < TOL
    assert grad_check(lambda: (x.transpose(2, 1, 0) * w3).sum(), [x]) < TOL
    assert grad_check(lambda: (x.reshape(6, 4) * w3.reshape(6, 4)).sum(), [x]) < TOL


def test_grad_concat_slice_gather(rng):
    a, b = leaf(rng, 2, 3), leaf(rng, 2, 2)
    w = weights(rng, (2, 5))
    assert grad_check(lambda: (concat([a, b], axis=-1) * w).sum(), [a, b]) < TOL

    x = leaf(rng, 3, 5)
    assert grad_check(lambda: (x[1:, ::2] * weights(np.random.default_rng(0), (2, 3))).sum(), [x]) < TOL

    y = leaf(rng, 2, 4, 3)
    index = np.array([[3, 0, 3], [1, 2, 0]])
    wg = weights(rng, (2, 3, 3))
    assert grad_check(lambda: (gather_rows(y, index) * wg).sum(), [y]) < TOL


def test_shared_subexpression_accumulates(rng):
    x = leaf(rng, 3)
    loss = (x * x).sum() + x.sum()
    loss.backward()
    assert np.allclose(x.grad, 2 * x.data + 1)


def test_second_backward_raises():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    loss = (x * x).sum()
    loss.backward()
    with pytest.raises(GraphFreedError):
        loss.backward()


def test_shape_mismatch_raises_shape_error():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((4,)))


def test_non_finite_forward_raises():
    with pytest.raises(NonFiniteError):
        log(Tensor(np.array([0.0, 1.0])))
    with pytest.raises(NonFiniteError):
        exp(Tensor(np.array([1000.0])))


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = (x * 2.0).sum()
    assert not y.requires_grad
    assert y.is_leaf


def test_softmax_masked_entries_are_zero(rng):
    mask = np.array([[True, False, True], [False, True, False]])
    out = softmax(Tensor(rng.normal(size=(2, 3))), axis=-1, mask=mask).data
    assert np.all(out[~mask] == 0.0)
    assert np.allclose(out.sum(axis=-1), 1.0)
    with pytest.raises(ShapeError):
        softmax(Tensor(np.zeros((1, 2))), mask=np.array([[False, False]]))


def test_numpy_array_on_left_defers_to_tensor():
    out = np.array([1.0, 2.0]) * Tensor(np.array([3.0, 4.0]), requires_grad=True)
    assert isinstance(out, Tensor)
    assert np.array_equal(out.data, [3.0, 8.0])


def test_scalar_forward_values():
    assert sigmoid(Tensor(np.array([0.0]))).data[0] == pytest.approx(0.5, abs=1e-15)
    assert softmax(Tensor(np.array([1.0, 0.0]))).data == pytest.approx([0.73106, 0.26894], abs=1e-5)


def test_scalar_derivatives():
    x = Tensor(np.array([3.0]), requires_grad=True)
    (x * x).sum().backward()
    assert x.grad[0] == pytest.approx(6.0)

    z = Tensor(np.array([0.0]), requires_grad=True)
    sigmoid(z).sum().backward()
    assert z.grad[0] == pytest.approx(0.25)


def test_grad_check_of_product():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = Tensor(np.array([3.0]), requires_grad=True)
    assert grad_check(lambda: (x * y).sum(), [x, y]) < 1e-6


def test_constant_function_has_zero_gradient():
    x = Tensor(np.array([1.5, -0.5]), requires_grad=True)
    c = Tensor(np.array([4.0, 2.0]))
    assert grad_check(lambda: (c * 2.0).sum(), [x]) == 0.0
    loss = (x * 0.0).sum()
    loss.backward()
    assert np.array_equal(x.grad, np.zeros(2))
