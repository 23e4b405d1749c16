import numpy as np
import pytest

from isoscan.optim import OptimState, Schedule, adam_step, lr_at


def test_first_adam_step():
    p = {"t": np.zeros(1)}
    st = OptimState({"t": np.zeros(1)}, {"t": np.zeros(1)})
    adam_step(p, {"t": np.ones(1)}, st, 0.1)
    assert abs(p["t"][0] + 0.1) < 1e-6
    assert st.step == 1


def test_quadratic_converges():
    p = {"t": np.array([3.0])}
    st = OptimState({"t": np.zeros(1)}, {"t": np.zeros(1)})
    for _ in range(2000):
        adam_step(p, {"t": 2 * p["t"]}, st, 0.05)
    assert abs(p["t"][0]) < 1e-2


def test_schedule_endpoints():
    s = Schedule(base_lr=1e-3, warmup_epochs=10, total_epochs=200)
    assert lr_at(0, s) == 0.0
    assert lr_at(5, s) == pytest.approx(5e-4)
    assert lr_at(10, s) == pytest.approx(1e-3)
    assert lr_at(105, s) == pytest.approx(5e-4)
    assert lr_at(200, s) == pytest.approx(0.0, abs=1e-15)
    lrs = [lr_at(e, s) for e in np.linspace(10, 200, 50)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_bad_schedule():
    with pytest.raises(ValueError):
        Schedule(warmup_epochs=10, total_epochs=10)
