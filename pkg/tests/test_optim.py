import math

import numpy as np
import pytest

from bilevel_rl.errors import ContractError, InputError
from bilevel_rl.optim import AdamState, Direction, LrSchedule, adam_step, mse_loss, schedule_lr


def hand_adam(grads, lr, b1=0.9, b2=0.999, eps=1e-8, x0=0.0, sign=-1.0):
    """Scalar Adam written out step by step."""
    x, m, v = x0, 0.0, 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1**t)
        vh = v / (1 - b2**t)
        x = x + sign * lr * mh / (math.sqrt(vh) + eps)
    return x


def test_first_step_magnitude_is_lr():
    p = np.zeros(7)
    adam_step(AdamState(lr=0.01), p, np.ones(7))
    assert np.allclose(np.abs(p), 0.01, atol=1e-6 * 0.01)


def test_zero_gradient_leaves_params():
    p = np.arange(4.0)
    adam_step(AdamState(), p, np.zeros(4))
    assert np.array_equal(p, np.arange(4.0))


@pytest.mark.parametrize("direction,sign", [(Direction.DESCEND, -1.0), (Direction.ASCEND, 1.0)])
def test_matches_hand_recursion(direction, sign):
    grads = [0.3, -1.2, 0.05, 2.0, -0.7]
    state = AdamState(lr=0.02)
    p = np.array([1.5])
    for g in grads:
        adam_step(state, p, np.array([g]), direction)
    assert p[0] == pytest.approx(hand_adam(grads, 0.02, x0=1.5, sign=sign), abs=1e-12)
    assert state.step_count == 5 and np.all(state.v >= 0)


def test_constant_gradient_step_approaches_lr():
    state = AdamState(lr=1e-3)
    p = np.zeros(1)
    prev = 0.0
    for _ in range(2000):
        adam_step(state, p, np.array([0.37]))
        step, prev = prev - p[0], p[0]
    assert step == pytest.approx(1e-3, rel=1e-6)


def test_rejects_bad_gradients():
    with pytest.raises(InputError):
        adam_step(AdamState(), np.zeros(2), np.array([1.0, np.inf]))
    with pytest.raises(ContractError):
        adam_step(AdamState(), np.zeros(2), np.zeros(3))
    with pytest.raises(ContractError):
        AdamState(lr=0.0)


def test_schedule_examples():
    assert schedule_lr(LrSchedule(1e-3, 0.99, 10), 5) == 1e-3
    assert schedule_lr(LrSchedule(1e-3, 0.99, 10), 11) == pytest.approx(9.9e-4, rel=1e-15)
    s = LrSchedule(1e-3, 1.0, 0)
    assert all(schedule_lr(s, m) == 1e-3 for m in range(0, 5000, 250))


def test_schedule_counts_decays_from_start():
    s = LrSchedule(0.1, 0.5, 3)
    assert [schedule_lr(s, m) for m in range(6)] == [0.1, 0.1, 0.1, 0.1, 0.05, 0.025]
    with pytest.raises(ContractError):
        schedule_lr(s, -1)


def test_mse_examples():
    assert mse_loss([0.5, 2.0], [0.5, 2.0])[0] == 0.0
    loss, g = mse_loss(np.array([1.0, 1.0]), np.zeros(2))
    assert loss == 1.0 and np.array_equal(g, [1.0, 1.0])
    with pytest.raises(ContractError):
        mse_loss([], [])


def test_mse_gradient_finite_differences():
    rng = np.random.default_rng(3)
    pred, target = rng.normal(size=(5, 2)), rng.normal(size=(5, 2))
    _, g = mse_loss(pred, target)
    h = 1e-6
    for idx in np.ndindex(pred.shape):
        up, dn = pred.copy(), pred.copy()
        up[idx] += h
        dn[idx] -= h
        fd = (mse_loss(up, target)[0] - mse_loss(dn, target)[0]) / (2 * h)
        assert abs(fd - g[idx]) < 1e-8
