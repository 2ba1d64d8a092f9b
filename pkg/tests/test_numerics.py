import numpy as np
import pytest

from featsplat.errors import ConfigurationError, ContractViolation, NumericalError
from featsplat.numerics import (
    AdamState,
    LinearLayer,
    LrSchedule,
    adam_step,
    linear_layer,
    lr_at_step,
    mlp_backward,
    mlp_forward,
)
from oracles import central_difference, rel_err, straight_line_mlp


def test_identity_layer_forward():
    layer = LinearLayer(weight=np.eye(2), bias=np.zeros(2), activation="none")
    y, _ = mlp_forward([layer], np.array([1.0, 2.0]))
    np.testing.assert_array_equal(y, [1.0, 2.0])


def test_zero_weight_layer_returns_bias():
    layer = LinearLayer(weight=np.zeros((2, 3)), bias=np.array([3.0, 3.0]),
                        activation="none")
    y, _ = mlp_forward([layer], np.array([5.0, -1.0, 0.5]))
    np.testing.assert_array_equal(y, [3.0, 3.0])


def test_forward_matches_straight_line_reevaluation(rng):
    layers = [linear_layer(5, 7, "relu", rng), linear_layer(7, 3, "none", rng)]
    for l in layers:
        l.bias = rng.normal(size=l.bias.shape)
    x = rng.normal(size=(6, 5))
    y, _ = mlp_forward(layers, x)
    np.testing.assert_allclose(y, straight_line_mlp(layers, x), rtol=1e-12)


def test_forward_deterministic(rng):
    layers = [linear_layer(4, 4, "relu", rng)]
    x = rng.normal(size=(3, 4))
    y1, _ = mlp_forward(layers, x)
    y2, _ = mlp_forward(layers, x)
    assert np.array_equal(y1, y2)


def test_forward_dim_mismatch():
    layer = LinearLayer(weight=np.eye(2), bias=np.zeros(2), activation="none")
    with pytest.raises(ConfigurationError):
        mlp_forward([layer], np.zeros(3))


def test_backward_identity_layer():
    layer = LinearLayer(weight=np.eye(2), bias=np.zeros(2), activation="none")
    _, cache = mlp_forward([layer], np.array([0.3, -0.7]))
    dx, _ = mlp_backward([layer], cache, np.array([1.0, 0.0]))
    np.testing.assert_array_equal(dx, [1.0, 0.0])


def test_backward_relu_gates_negative_preactivation():
    layer = LinearLayer(weight=np.eye(2), bias=np.array([0.0, -5.0]),
                        activation="relu")
    _, cache = mlp_forward([layer], np.array([1.0, 1.0]))
    dx, grads = mlp_backward([layer], cache, np.array([1.0, 1.0]))
    np.testing.assert_array_equal(dx, [1.0, 0.0])
    np.testing.assert_array_equal(grads[0][1], [1.0, 0.0])


def test_backward_matches_finite_differences(rng):
    layers = [linear_layer(4, 6, "relu", rng), linear_layer(6, 2, "none", rng)]
    for l in layers:
        l.bias = rng.normal(size=l.bias.shape) * 0.5
    x = rng.normal(size=(5, 4))
    up = rng.normal(size=(5, 2))

    def loss():
        y, _ = mlp_forward(layers, x)
        return float(np.sum(up * y))

    _, cache = mlp_forward(layers, x)
    dx, grads = mlp_backward(layers, cache, up)
    for arr, analytic in [(x, dx), (layers[0].weight, grads[0][0]),
                          (layers[0].bias, grads[0][1]),
                          (layers[1].weight, grads[1][0]),
                          (layers[1].bias, grads[1][1])]:
        idx = np.arange(arr.size)
        fd = central_difference(loss, arr, idx)
        assert rel_err(analytic.reshape(-1), fd).max() < 1e-5


def test_backward_stale_cache_rejected(rng):
    layers = [linear_layer(4, 4, "relu", rng)]
    _, cache = mlp_forward(layers, np.zeros((2, 4)))
    with pytest.raises(ContractViolation):
        mlp_backward(layers + layers, cache, np.zeros((2, 4)))
    with pytest.raises(ContractViolation):
        mlp_backward(layers, cache, np.zeros((3, 4)))


# Adam ----------------------------------------------------------------------

def test_adam_first_step_approximates_signed_gradient():
    param = np.array([1.0, -2.0, 0.5])
    grad = np.array([0.3, -0.2, 1.4])
    state = AdamState.for_param(param, eps=1e-15)
    new = adam_step(param, grad, state, lr=0.1)
    np.testing.assert_allclose(new - param, -0.1 * np.sign(grad), atol=1e-9)
    assert state.step_count == 1


def test_adam_zero_gradient_is_fixed_point():
    param = np.array([0.7, -0.1])
    state = AdamState.for_param(param)
    new = adam_step(param, np.zeros(2), state, lr=0.5)
    np.testing.assert_array_equal(new, param)
    np.testing.assert_array_equal(state.m, np.zeros(2))
    np.testing.assert_array_equal(state.v, np.zeros(2))
    assert state.step_count == 1


def test_adam_descends_quadratic():
    w = np.array([1.0])
    state = AdamState.for_param(w)
    history = [abs(w[0])]
    for _ in range(10):
        w = adam_step(w, 2.0 * w, state, lr=0.1)
        history.append(abs(w[0]))
    assert all(b < a for a, b in zip(history, history[1:]))


def test_adam_nan_gradient_aborts():
    param = np.zeros(3)
    state = AdamState.for_param(param)
    before = (state.m.copy(), state.step_count)
    with pytest.raises(NumericalError):
        adam_step(param, np.array([0.0, np.nan, 0.0]), state, lr=0.1)
    assert state.step_count == before[1]
    np.testing.assert_array_equal(state.m, before[0])


# LR schedules ---------------------------------------------------------------

def test_lr_endpoints():
    s = LrSchedule(lr_init=0.01, lr_final=0.0001, max_steps=100)
    assert lr_at_step(s, 0) == pytest.approx(0.01)
    assert lr_at_step(s, 100) == pytest.approx(0.0001)
    assert lr_at_step(s, 10_000) == pytest.approx(0.0001)


def test_lr_log_midpoint_closed_form():
    s = LrSchedule(lr_init=0.0032, lr_final=0.0000032, max_steps=7000)
    assert lr_at_step(s, 3500) == pytest.approx(0.0032 * 10 ** -1.5, rel=1e-12)


def test_lr_monotone_nonincreasing():
    s = LrSchedule(lr_init=0.02, lr_final=0.0005, max_steps=321)
    values = [lr_at_step(s, t) for t in range(0, 400, 7)]
    assert all(b <= a + 1e-15 for a, b in zip(values, values[1:]))


def test_lr_delay_ramp():
    s = LrSchedule(lr_init=0.01, lr_final=0.01, max_steps=100,
                   delay_mult=0.1, delay_steps=50)
    assert lr_at_step(s, 0) == pytest.approx(0.001)
    assert lr_at_step(s, 50) == pytest.approx(0.01)
    # disabled ramp leaves the schedule untouched
    s0 = LrSchedule(lr_init=0.01, lr_final=0.01, max_steps=100, delay_mult=0.1)
    assert lr_at_step(s0, 0) == pytest.approx(0.01)


def test_lr_positivity_validated():
    with pytest.raises(ConfigurationError):
        LrSchedule(lr_init=0.0, lr_final=0.1, max_steps=10)
    with pytest.raises(ConfigurationError):
        LrSchedule(lr_init=0.1, lr_final=-0.1, max_steps=10)
