import numpy as np
import pytest

from lords.core.errors import ConfigError, ShapeError
from lords.core.optim import adamw_step, AdamWState


def test_first_step_moves_by_lr():
    params = [np.array([[0.5, -1.0]])]
    state = AdamWState.zeros_like(params)
    (p,), state = adamw_step(state, params, [np.ones((1, 2))], lr=0.1)
    np.testing.assert_allclose(p - params[0], -0.1, rtol=1e-6)
    assert state.t == 1


def test_zero_gradient_is_a_no_op():
    params = [np.arange(6.0).reshape(2, 3)]
    state = AdamWState.zeros_like(params)
    for _ in range(5):
        params, state = adamw_step(state, params, [np.zeros((2, 3))], lr=0.1)
    np.testing.assert_array_equal(params[0], np.arange(6.0).reshape(2, 3))


def test_minimises_quadratic():
    theta = [np.array([[1.0]])]
    state = AdamWState.zeros_like(theta)
    for _ in range(100):
        theta, state = adamw_step(state, theta, [2.0 * theta[0]], lr=0.05)
    assert abs(theta[0][0, 0]) < 0.2


def test_decoupled_weight_decay():
    params = [np.array([[2.0]])]
    state = AdamWState.zeros_like(params, weight_decay=0.5)
    (p,), _ = adamw_step(state, params, [np.zeros((1, 1))], lr=0.1)
    assert p[0, 0] == pytest.approx(2.0 * (1.0 - 0.1 * 0.5))


def test_step_is_pure():
    params = [np.ones((2, 2))]
    state = AdamWState.zeros_like(params)
    adamw_step(state, params, [np.ones((2, 2))], lr=0.1)
    assert state.t == 0
    assert np.all(state.m[0] == 0.0)
    np.testing.assert_array_equal(params[0], np.ones((2, 2)))


def test_invalid_beta():
    with pytest.raises(ConfigError):
        AdamWState.zeros_like([np.ones((1, 1))], beta1=1.0)


def test_mismatched_gradient():
    params = [np.ones((2, 2))]
    with pytest.raises(ShapeError):
        adamw_step(AdamWState.zeros_like(params), params, [np.ones((2, 3))], lr=0.1)
    with pytest.raises(ShapeError):
        adamw_step(AdamWState.zeros_like(params), params, [], lr=0.1)
