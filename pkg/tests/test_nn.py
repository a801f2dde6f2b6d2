import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from udg.nn import (MLP, SGD, Linear, NumericalError, ShapeError, StateError, cosine_lr,
                    linear_forward, sgd_step)

from conftest import numeric_grad, rel_err


def test_linear_identity():
    layer = Linear([[1.0, 0.0], [0.0, 1.0]], [0.0, 0.0])
    np.testing.assert_array_equal(linear_forward(np.array([[2.0, 3.0]]), layer), [[2.0, 3.0]])


def test_linear_scalar():
    assert linear_forward(np.array([[3.0]]), Linear([[2.0]], [1.0]))[0, 0] == 7.0


def test_linear_matches_triple_loop(rng):
    layer = Linear(rng.normal(size=(4, 3)), rng.normal(size=4))
    x = rng.normal(size=(2, 3))
    expected = np.zeros((2, 4))
    for b in range(2):
        for o in range(4):
            acc = layer.bias[o]
            for i in range(3):
                acc += layer.weight[o, i] * x[b, i]
            expected[b, o] = acc
    np.testing.assert_allclose(linear_forward(x, layer), expected, rtol=1e-12)


def test_linear_shape_error():
    with pytest.raises(ShapeError):
        linear_forward(np.ones((2, 5)), Linear(np.ones((4, 3)), np.zeros(4)))


def test_linear_is_affine(rng):
    layer = Linear(rng.normal(size=(5, 4)), rng.normal(size=5))
    x, y = rng.normal(size=(1, 4)), rng.normal(size=(1, 4))
    a, b = 1.7, -0.3
    lhs = linear_forward(a * x + b * y, layer)
    rhs = a * linear_forward(x, layer) + b * linear_forward(y, layer) + (1 - a - b) * layer.bias
    np.testing.assert_allclose(lhs, rhs, rtol=1e-9)


def test_single_layer_squared_loss_closed_form():
    layer = Linear([[0.5, -1.0]], [0.0])
    mlp = MLP([layer])
    x = np.array([[3.0, 0.5]])  # positive pre-activation, so the ReLU is the identity
    y = 0.25
    yhat = mlp.forward(x)[0, 0]
    assert yhat > 0
    mlp.backward(np.array([[2 * (yhat - y)]]))
    np.testing.assert_allclose(layer.grad_weight, 2 * (yhat - y) * x)


def test_two_layer_relu_finite_differences(rng):
    mlp = MLP.init([3, 4, 2], rng)
    x = rng.normal(size=(5, 3))
    target = rng.normal(size=(5, 2))

    def loss():
        return 0.5 * ((mlp.forward(x, cache=False) - target) ** 2).sum()

    out = mlp.forward(x)
    mlp.backward(out - target)
    for theta, grad in mlp.params():
        assert rel_err(grad, numeric_grad(loss, theta)) < 1e-4


def test_zero_upstream_gradient(rng):
    mlp = MLP.init([3, 4, 2], rng)
    mlp.forward(rng.normal(size=(2, 3)))
    mlp.backward(np.zeros((2, 2)))
    for _, grad in mlp.params():
        assert not grad.any()


def test_backward_before_forward(rng):
    with pytest.raises(StateError):
        MLP.init([2, 2], rng).backward(np.zeros((1, 2)))


def _param(theta, g):
    return [(np.array([theta], dtype=float), np.array([g], dtype=float))]


def test_sgd_plain_step():
    p = _param(1.0, 1.0)
    sgd_step(p, SGD(lr=0.1, momentum=0.0, weight_decay=0.0))
    assert p[0][0][0] == pytest.approx(0.9)


def test_sgd_momentum_two_steps():
    # v1 = 1, theta1 = -0.1; v2 = 0.9 + 1 = 1.9, theta2 = -0.1 - 0.19 = -0.29
    p = _param(0.0, 1.0)
    opt = SGD(lr=0.1, momentum=0.9, weight_decay=0.0)
    opt.step(p)
    opt.step(p)
    assert p[0][0][0] == pytest.approx(-0.29, abs=1e-15)


def test_sgd_zero_gradient_is_noop():
    p = _param(0.7, 0.0)
    SGD(lr=0.1, momentum=0.9, weight_decay=0.0).step(p)
    assert p[0][0][0] == 0.7


def test_sgd_weight_decay_is_coupled():
    p = _param(2.0, 0.0)
    SGD(lr=0.1, momentum=0.0, weight_decay=0.5).step(p)
    assert p[0][0][0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)


def test_sgd_rejects_non_finite():
    with pytest.raises(NumericalError):
        SGD(lr=0.1).step(_param(0.0, math.nan))


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=8),
       st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=8))
def test_sgd_zero_lr_is_identity(theta, grad):
    n = min(len(theta), len(grad))
    t = np.array(theta[:n])
    before = t.copy()
    opt = SGD(lr=0.0, momentum=0.9, weight_decay=5e-4)
    opt.step([(t, np.array(grad[:n]))])
    opt.step([(t, np.array(grad[:n]))])
    np.testing.assert_array_equal(t, before)


def test_cosine_lr_points():
    assert cosine_lr(0, 100, 0.1) == 0.1
    assert cosine_lr(100, 100, 0.1) == 0.0
    assert cosine_lr(50, 100, 0.1) == pytest.approx(0.05, abs=1e-15)


def test_cosine_lr_errors():
    with pytest.raises(ValueError):
        cosine_lr(0, 0, 0.1)
    with pytest.raises(ValueError):
        cosine_lr(11, 10, 0.1)


@settings(max_examples=50)
@given(st.integers(1, 500), st.floats(0.0, 10.0))
def test_cosine_lr_monotone_and_bounded(total, lr0):
    lrs = [cosine_lr(e, total, lr0) for e in range(total + 1)]
    assert all(0.0 <= v <= lr0 for v in lrs)
    assert all(b <= a + 1e-15 for a, b in zip(lrs, lrs[1:]))
