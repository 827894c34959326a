"""Adam and the exponential learning-rate schedule."""
import math

import numpy as np
import pytest

from ncpp.optim import AdamState, ExponentialDecay, adam_step, lr_schedule
from ncpp.tensor import ShapeError, Tensor


def test_zero_gradient_leaves_params_and_advances_t():
    p = {"w": Tensor(np.array([1.0, -2.0]), requires_grad=True)}
    st = AdamState()
    adam_step(p, {"w": np.zeros(2)}, st, lr=0.1)
    np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])
    assert st.t == 1


@pytest.mark.parametrize("g", [1e-3, 0.5, -7.0, 1e4])
def test_first_step_moves_by_lr(g):
    p = {"w": Tensor(np.array([0.3]), requires_grad=True)}
    adam_step(p, {"w": np.array([g])}, AdamState(), lr=0.01)
    assert abs(abs(p["w"].data[0] - 0.3) - 0.01) < 1e-6


def test_matches_hand_rolled_adam():
    rng = np.random.default_rng(0)
    w = rng.standard_normal(3)
    p = {"w": Tensor(w.copy(), requires_grad=True)}
    st = AdamState()
    m = np.zeros(3)
    v = np.zeros(3)
    for t in range(1, 6):
        g = rng.standard_normal(3)
        adam_step(p, {"w": g}, st, lr=0.05)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w = w - 0.05 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p["w"].data, w, rtol=1e-13)
    assert st.m["w"].shape == st.v["w"].shape == (3,)


def test_quadratic_descent():
    p = {"x": Tensor(np.array([1.0]), requires_grad=True)}
    st = AdamState()
    prev = 1.0
    for _ in range(10):
        adam_step(p, {"x": 2 * p["x"].data}, st, lr=0.1)
        cur = abs(p["x"].data[0])
        assert cur < prev
        prev = cur


def test_errors():
    p = {"w": Tensor(np.zeros(2), requires_grad=True)}
    with pytest.raises(ShapeError):
        adam_step(p, {"w": np.zeros(3)}, AdamState(), lr=0.1)
    with pytest.raises(ValueError):
        adam_step(p, {"w": np.zeros(2)}, AdamState(), lr=0.0)


def test_schedule_values():
    assert lr_schedule(0) == 0.01
    assert math.isclose(lr_schedule(1000), 0.0096, rel_tol=1e-12)
    sched = ExponentialDecay(0.01, 0.96, 1000)
    lrs = [sched(s) for s in range(0, 10001)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(ValueError):
        sched(-1)
