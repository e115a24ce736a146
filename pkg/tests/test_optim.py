import numpy as np
import pytest

from edumine.autodiff import Parameter
from edumine.errors import TrainingError
from edumine.optim import Adam, AdamState, adam_update


def test_zero_gradient_leaves_parameter_unchanged():
    p = Parameter(np.array([1.5, -2.0]), "p")
    opt = Adam([p])
    opt.step()
    assert np.array_equal(p.value, [1.5, -2.0])
    assert opt.states[0].t == 1


def test_first_step_moves_by_learning_rate_against_gradient_sign():
    # With bias correction the first update is -lr * g / (|g| + eps).
    value = np.array([1.0])
    state = AdamState(np.zeros(1), np.zeros(1))
    adam_update(value, np.array([0.5]), state, lr=0.001)
    assert value[0] == pytest.approx(1.0 - 0.001, abs=1e-9)


def test_repeated_same_sign_gradient_moves_monotonically():
    value = np.array([0.0])
    state = AdamState(np.zeros(1), np.zeros(1))
    adam_update(value, np.array([2.0]), state, lr=0.01)
    first = value[0]
    adam_update(value, np.array([2.0]), state, lr=0.01)
    assert first < 0.0
    assert value[0] < first


def test_step_counter_strictly_increases():
    value = np.array([0.0])
    state = AdamState(np.zeros(1), np.zeros(1))
    for expected in (1, 2, 3):
        adam_update(value, np.array([0.1]), state)
        assert state.t == expected


def test_updates_are_bit_reproducible():
    def run():
        rng = np.random.default_rng(42)
        value = rng.normal(size=7)
        state = AdamState(np.zeros(7), np.zeros(7))
        for _ in range(25):
            adam_update(value, rng.normal(size=7), state, lr=0.05)
        return value

    a, b = run(), run()
    assert np.array_equal(a, b)


def test_nan_gradient_aborts_with_diagnostic():
    p = Parameter(np.zeros(2), "weights")
    p.grad[0] = np.nan
    opt = Adam([p])
    with pytest.raises(TrainingError, match="weights"):
        opt.step()


def test_parameters_stay_finite_after_steps():
    rng = np.random.default_rng(1)
    p = Parameter(rng.normal(size=(3, 3)), "p")
    opt = Adam([p], lr=0.1)
    for _ in range(50):
        p.grad[...] = rng.normal(size=(3, 3)) * 100.0
        opt.step()
    assert np.all(np.isfinite(p.value))
