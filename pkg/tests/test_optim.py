"""Adam update: first-step properties, convergence oracle, failure modes."""

import numpy as np
import pytest

from sarslide.errors import TrainingError
from sarslide.optim import AdamState, adam_step, init_adam_state


class Hyper:
    learning_rate = 0.001
    adam_beta1 = 0.9
    adam_beta2 = 0.999
    adam_eps = 1e-8


def test_zero_gradient_leaves_params_unchanged():
    params = [np.array([1.5, -2.0], dtype=np.float32)]
    state = init_adam_state(params)
    new_p, new_state = adam_step(params, [np.zeros(2, dtype=np.float32)],
                                 state, Hyper)
    assert np.array_equal(new_p[0], params[0])
    assert new_state.t == 1


def test_first_step_magnitude_is_learning_rate():
    # With bias correction, step 1 is lr * g / (|g| + eps') regardless of g.
    for g in (0.01, 3.0, -250.0):
        params = [np.array([0.0])]
        state = init_adam_state(params)
        new_p, _ = adam_step(params, [np.array([g])], state, Hyper)
        assert abs(new_p[0][0]) == pytest.approx(Hyper.learning_rate, rel=1e-4)
        assert np.sign(new_p[0][0]) == -np.sign(g)


def test_quadratic_bowl_converges():
    # Start within reach: Adam moves at most ~lr per step, so 500 steps
    # cover 0.5 of parameter distance at lr 0.001.
    w = np.array([0.3])
    params = [w]
    state = init_adam_state(params)
    history = [abs(w[0])]
    for _ in range(500):
        grads = [2.0 * params[0]]
        params, state = adam_step(params, grads, state, Hyper)
        history.append(abs(params[0][0]))
    assert history[-1] < 0.1 * history[0]
    # Monotone decrease after burn-in.
    tail = history[10:]
    assert all(b <= a + 1e-12 for a, b in zip(tail, tail[1:]))


def test_functional_update_does_not_mutate_inputs():
    params = [np.array([1.0, 2.0], dtype=np.float32)]
    grads = [np.array([0.5, -0.5], dtype=np.float32)]
    state = init_adam_state(params)
    snapshot = params[0].copy()
    new_p, new_state = adam_step(params, grads, state, Hyper)
    assert np.array_equal(params[0], snapshot)
    assert state.t == 0 and new_state.t == 1
    assert not np.array_equal(new_p[0], params[0])


def test_dtype_preserved():
    params = [np.ones(3, dtype=np.float32)]
    grads = [np.ones(3, dtype=np.float32)]
    new_p, state = adam_step(params, grads, init_adam_state(params), Hyper)
    assert new_p[0].dtype == np.float32
    assert state.m[0].dtype == np.float32


def test_nan_gradient_aborts_with_diagnostics():
    params = [np.ones(3, dtype=np.float32)]
    grads = [np.array([1.0, np.nan, 2.0], dtype=np.float32)]
    with pytest.raises(TrainingError, match="non-finite gradient"):
        adam_step(params, grads, init_adam_state(params), Hyper)


def test_shape_mismatch_rejected():
    params = [np.ones(3)]
    with pytest.raises(TrainingError, match="shape"):
        adam_step(params, [np.ones(2)], init_adam_state(params), Hyper)
    with pytest.raises(TrainingError, match="length"):
        adam_step(params, [np.ones(3), np.ones(3)],
                  init_adam_state(params), Hyper)


def test_matches_reference_scalar_iteration():
    # Hand-rolled reference recurrence, float64.
    lr, b1, b2, eps = 0.001, 0.9, 0.999, 1e-8
    w = 0.7
    m = v = 0.0
    params = [np.array([0.7])]
    state = init_adam_state(params)
    for t in range(1, 30):
        g = np.cos(t * 0.3) * 2.0
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        params, state = adam_step(params, [np.array([g])], state, Hyper)
        assert params[0][0] == pytest.approx(w, rel=1e-12)
