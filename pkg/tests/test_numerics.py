import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mts2s.numerics import (ContractError, DimensionError, DomainError, affine, affine_backward,
                            finite_difference_gradcheck, l2_distance_sq, l2_distance_sq_backward,
                            log_softmax, relative_error, sigmoid, softmax, softmax_backward)


def test_affine_hand_cases():
    assert np.array_equal(affine(np.array([1.0, 2.0]), np.zeros((2, 2)), np.array([3.0, 4.0])), [3, 4])
    assert np.array_equal(affine(np.array([1.0, 0.0]), np.eye(2), np.zeros(2)), [1, 0])
    W = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(affine(np.array([2.0, -1.0]), W, np.ones(2)), [1, 3])


def test_affine_rejects_mismatched_shapes():
    with pytest.raises(DimensionError):
        affine(np.ones(3), np.ones((2, 2)), np.ones(2))
    with pytest.raises(DimensionError):
        affine(np.ones(2), np.ones((2, 2)), np.ones(3))


def test_affine_batched_matches_rows():
    rng = np.random.default_rng(0)
    X, W, b = rng.normal(size=(4, 3)), rng.normal(size=(2, 3)), rng.normal(size=2)
    Y = affine(X, W, b)
    for i in range(4):
        assert np.allclose(Y[i], affine(X[i], W, b))


def test_affine_backward_gradcheck():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(3, 4))
    params = {"p": {"W": rng.normal(size=(2, 4)), "b": rng.normal(size=2)}}
    target = rng.normal(size=(3, 2))

    def loss(p):
        y = affine(x, p["p"]["W"], p["p"]["b"])
        d = y - target
        _, dW, db = affine_backward(d, x, p["p"]["W"])
        return 0.5 * float(np.sum(d * d)), {"p": {"W": dW, "b": db}}

    rep = finite_difference_gradcheck(loss, params, tolerance=1e-6)
    assert rep.passed, list(rep.lines())
    assert rep.max_error < 1e-6


def test_affine_backward_input_gradient():
    rng = np.random.default_rng(2)
    x, W, b = rng.normal(size=3), rng.normal(size=(2, 3)), rng.normal(size=2)
    dy = rng.normal(size=2)
    dx, _, _ = affine_backward(dy, x, W)
    eps = 1e-6
    for i in range(3):
        e = np.zeros(3)
        e[i] = eps
        num = (dy @ affine(x + e, W, b) - dy @ affine(x - e, W, b)) / (2 * eps)
        assert abs(num - dx[i]) < 1e-8


def test_softmax_hand_cases():
    assert np.allclose(softmax(np.zeros(3)), [1 / 3] * 3)
    y = softmax(np.array([1000.0, 0.0]))
    assert np.all(np.isfinite(y)) and y[0] == pytest.approx(1.0) and y[1] == pytest.approx(0.0)
    assert np.allclose(softmax(np.log([1.0, 2.0, 3.0])), [1 / 6, 2 / 6, 3 / 6])


def test_softmax_empty_is_domain_error():
    with pytest.raises(DomainError):
        softmax(np.array([]))
    with pytest.raises(DomainError):
        log_softmax(np.zeros((2, 0)))


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 20), elements=st.floats(-50, 50)))
def test_softmax_sums_to_one(x):
    y = softmax(x)
    assert abs(y.sum() - 1) < 1e-6
    assert np.all(y >= 0)
    assert np.allclose(np.exp(log_softmax(x)), y)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, 5, elements=st.floats(-20, 20)), st.floats(-100, 100))
def test_softmax_shift_invariant(x, c):
    assert np.allclose(softmax(x), softmax(x + c), atol=1e-12)


def test_softmax_backward_matches_differences():
    rng = np.random.default_rng(3)
    x, dy = rng.normal(size=4), rng.normal(size=4)
    g = softmax_backward(dy, softmax(x))
    eps = 1e-6
    for i in range(4):
        e = np.zeros(4)
        e[i] = eps
        num = (dy @ softmax(x + e) - dy @ softmax(x - e)) / (2 * eps)
        assert abs(num - g[i]) < 1e-8


def test_sigmoid_extremes_do_not_overflow():
    with np.errstate(over="raise"):
        y = sigmoid(np.array([-1000.0, 0.0, 1000.0]))
    assert np.array_equal(y, [0.0, 0.5, 1.0])


def test_l2_distance_hand_cases():
    assert l2_distance_sq(np.array([5.0, 5.0]), np.array([5.0, 5.0])) == 0
    assert l2_distance_sq(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 2
    assert l2_distance_sq(np.array([0.0]), np.array([3.0])) == 9
    assert np.array_equal(l2_distance_sq_backward(np.array([1.0, 2.0]), np.array([0.0, 0.0])), [2, 4])
    with pytest.raises(DimensionError):
        l2_distance_sq(np.zeros(2), np.zeros(3))


def test_gradcheck_quadratic():
    params = {"g": {"p": np.array([3.0])}}
    rep = finite_difference_gradcheck(lambda q: (float(q["g"]["p"][0] ** 2), {"g": {"p": 2 * q["g"]["p"]}}),
                                      params)
    e = rep.worst["g"]
    assert e.analytic == 6.0
    assert e.numeric == pytest.approx(6.0)
    assert e.rel_error < 1e-8
    assert params["g"]["p"][0] == 3.0     # restored


def test_gradcheck_constant_loss_passes():
    params = {"g": {"p": np.ones(3)}}
    rep = finite_difference_gradcheck(lambda q: (1.5, {}), params)
    assert rep.passed and rep.max_error == 0.0


def test_gradcheck_catches_wrong_gradient():
    params = {"g": {"p": np.array([1.0, 2.0])}}
    rep = finite_difference_gradcheck(lambda q: (float(np.sum(q["g"]["p"] ** 3)), {"g": {"p": 2 * q["g"]["p"]}}),
                                      params)
    assert not rep.passed
    assert rep.worst["g"].index in {(0,), (1,)}


def test_gradcheck_extended_reference_leaves_params_alone():
    params = {"g": {"p": np.array([0.5, -1.5])}}
    before = params["g"]["p"].copy()
    rep = finite_difference_gradcheck(lambda q: (np.sum(np.sin(q["g"]["p"])), {"g": {"p": np.cos(q["g"]["p"])}}),
                                      params, reference_dtype=np.longdouble)
    assert rep.passed and rep.max_error < 1e-9
    assert np.array_equal(params["g"]["p"], before)


def test_gradcheck_refuses_float32_and_nondeterminism():
    with pytest.raises(ContractError):
        finite_difference_gradcheck(lambda q: (0.0, {}), {"g": {"p": np.ones(2, np.float32)}})
    rng = np.random.default_rng(0)
    with pytest.raises(ContractError):
        finite_difference_gradcheck(lambda q: (float(rng.normal()), {"g": {"p": rng.normal(size=2)}}),
                                    {"g": {"p": np.ones(2)}})


def test_relative_error_floor():
    assert relative_error(0.0, 0.0) == 0.0
    assert relative_error(1e-12, 0.0) == pytest.approx(1e-4)
    assert math.isclose(relative_error(2.0, 1.0), 0.5)
