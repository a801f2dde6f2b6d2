import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from udg.losses import (LossWeights, auxiliary_loss, classification_loss, cross_entropy_grad,
                        entropy_oe_grad, entropy_oe_loss, total_loss)
from udg.model import softmax

from conftest import numeric_grad, rel_err


def test_classification_loss_examples(rng):
    assert classification_loss(np.eye(3), [0, 1, 2]) == 0.0
    assert classification_loss([[0.5, 0.5]], [1]) == pytest.approx(0.693147, abs=1e-6)
    p = softmax(rng.normal(size=(3, 4)))
    y = [2, 0, 3]
    oracle = sum(-math.log(p[i, y[i]]) for i in range(3)) / 3
    assert classification_loss(p, y) == pytest.approx(oracle, rel=1e-14)


def test_classification_loss_clamps_and_flags():
    diag = {}
    v = classification_loss([[1.0, 0.0]], [1], diag)
    assert v == pytest.approx(-math.log(1e-12))
    assert diag["clamped"] == 1


def test_label_out_of_range():
    with pytest.raises(ValueError):
        classification_loss([[0.5, 0.5]], [2])


def test_entropy_loss_examples():
    assert entropy_oe_loss(np.full((4, 2), 0.5)) == pytest.approx(math.log(2), abs=1e-15)
    assert entropy_oe_loss([[0.9, 0.1]]) == pytest.approx(-(math.log(0.9) + math.log(0.1)) / 2)
    assert entropy_oe_loss([[0.9, 0.1]]) == pytest.approx(1.20397, abs=1e-5)
    assert entropy_oe_loss([[0.6, 0.3, 0.1]]) > math.log(3)


def test_auxiliary_loss_examples(rng):
    assert auxiliary_loss(np.eye(4)[[3, 1]], [3, 1]) == 0.0
    assert auxiliary_loss(np.full((5, 4), 0.25), [0, 1, 2, 3, 0]) == pytest.approx(math.log(4), abs=1e-15)
    p = softmax(rng.normal(size=(6, 5)))
    g = [4, 4, 0, 1, 2, 3]
    assert auxiliary_loss(p, g) == pytest.approx(-sum(math.log(p[i, g[i]]) for i in range(6)) / 6, rel=1e-14)


def test_total_loss_examples():
    w = LossWeights(0.5, 0.1)
    assert total_loss(1.0, 0.693147, 2.0, w).total == pytest.approx(1.546574, abs=1e-6)
    assert total_loss(1.3, 0.7, 2.2, LossWeights(0.0, 0.0)).total == 1.3
    oe = total_loss(1.3, 0.7, 2.2, LossWeights(0.5, 0.0))
    assert oe.total == 1.3 + 0.5 * 0.7
    with pytest.raises(ValueError):
        LossWeights(-1.0, 0.1)


def _fd_check(loss_of_logits, grad, z):
    assert rel_err(grad, numeric_grad(loss_of_logits, z)) < 1e-4


def test_gradients_match_finite_differences(rng):
    for _ in range(10):
        z = rng.normal(size=(4, 3))
        y = rng.integers(0, 3, size=4)
        _fd_check(lambda: classification_loss(softmax(z), y), cross_entropy_grad(z, y), z)
        _fd_check(lambda: entropy_oe_loss(softmax(z)), entropy_oe_grad(z), z)
        _fd_check(lambda: auxiliary_loss(softmax(z), y), cross_entropy_grad(z, y), z)


@pytest.mark.parametrize("c", [2, 5, 10])
def test_entropy_minimum_is_log_classes(c, rng):
    assert entropy_oe_loss(np.full((3, c), 1.0 / c)) == pytest.approx(math.log(c), abs=1e-12)
    for _ in range(50):
        p = softmax(rng.normal(size=(3, c)))
        assert entropy_oe_loss(p) > math.log(c)


@settings(max_examples=100)
@given(arrays(np.float64, (5, 4), elements=st.floats(-20, 20)))
def test_entropy_lower_bound(z):
    p = softmax(z)
    assert entropy_oe_loss(p) >= math.log(4) - 1e-9


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1))
def test_classification_loss_permutation_invariant(seed):
    r = np.random.default_rng(seed)
    p = softmax(r.normal(size=(17, 6)))
    y = r.integers(0, 6, size=17)
    perm = r.permutation(17)
    assert classification_loss(p, y) == classification_loss(p[perm], y[perm])
