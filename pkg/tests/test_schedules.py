import math

import numpy as np
import pytest

from facenas import schedules as S
from facenas.tensor import ContractError, DimensionError, Tensor


def test_cosine_mod_endpoints():
    cfg = S.ScheduleConfig(1e-4, 0.1, 80, 0)
    assert abs(S.cosine_mod_lr(cfg, 0) - 0.1) <= 1e-12
    assert abs(S.cosine_mod_lr(cfg, 80) - 1e-4) <= 1e-12


def test_cosine_mod_midpoint():
    cfg = S.ScheduleConfig(1e-4, 0.1, 80, 0)
    factor = (2 ** 1.5 - 2) / 2
    assert factor == pytest.approx(0.414214, abs=1e-6)
    lr = S.cosine_mod_lr(cfg, 40)
    assert abs(lr - (1e-4 + factor * (0.1 - 1e-4))) < 1e-9
    assert lr == pytest.approx(0.041480, abs=1e-6)


def test_cosine_mod_range_contract():
    cfg = S.ScheduleConfig(1e-4, 0.1, 10, 0)
    with pytest.raises(ContractError):
        S.cosine_mod_lr(cfg, -0.1)
    with pytest.raises(ContractError):
        S.cosine_mod_lr(cfg, 10.5)
    with pytest.raises(ContractError):
        S.ScheduleConfig(0.2, 0.1)


def test_cosine_mod_decreasing_and_below_standard():
    cfg = S.ScheduleConfig(1e-4, 0.1, 100, 0)
    grid = np.linspace(0, 100, 4001)
    mod = np.array([S.cosine_mod_lr(cfg, t) for t in grid])
    std = np.array([S.standard_cosine_lr(cfg, t) for t in grid])
    assert np.all(np.diff(mod) < 0)
    assert np.all(mod[1:-1] < std[1:-1])


def test_warmup_then_cosine():
    cfg = S.ScheduleConfig(1e-4, 0.1, 80, 20)
    assert S.warmup_then_cosine(cfg, 0, 100) == 0.0
    assert S.warmup_then_cosine(cfg, 10, 100) == pytest.approx(0.05)
    assert S.warmup_then_cosine(cfg, 20, 100) == 0.1
    assert abs(S.warmup_then_cosine(cfg, 100, 100) - 1e-4) <= 1e-12
    # continuity at the handoff, from the left
    assert abs(S.warmup_then_cosine(cfg, 20 - 1e-9, 100) - 0.1) < 1e-9


def test_warm_restarts():
    cfg = S.ScheduleConfig(1e-4, 0.1, 10, 0, restarts=[(10, 0.1), (20, 0.05)])
    assert S.restart_lr(cfg, 0) == pytest.approx(0.1)
    assert S.restart_lr(cfg, 10) == pytest.approx(1e-4)
    assert S.restart_lr(cfg, 10.0001) == pytest.approx(0.05, rel=1e-6)
    assert S.restart_lr(cfg, 30) == pytest.approx(1e-4)
    assert S.restart_lr(cfg, 50) == 1e-4


@pytest.mark.parametrize("epoch, want", [(0, 0.1), (19, 0.1), (20, 0.01), (39, 0.01), (40, 1e-3),
                                         (60, 1e-4), (99, 1e-4), (1000, 1e-4)])
def test_piecewise_controller_lr(epoch, want):
    assert S.piecewise_controller_lr(epoch) == pytest.approx(want, rel=1e-12)


def _p(v):
    return Tensor(np.array(v, dtype=float), requires_grad=True)


def test_momentum_degenerates_to_sgd():
    w = _p([1.0, -2.0])
    S.momentum_step([w], [np.array([0.5, 0.5])], S.OptimState(beta=0.0, weight_decay=0.0), 0.1)
    assert np.array_equal(w.data, [1.0 - 0.05, -2.0 - 0.05])


def test_momentum_zero_gradient_keeps_params():
    w = _p([3.0])
    S.momentum_step([w], [np.zeros(1)], S.OptimState(0.9, 0.0), 0.5)
    assert w.data[0] == 3.0


def test_momentum_update_rule():
    w = _p([1.0])
    st = S.OptimState(0.9, 1e-2)
    S.momentum_step([w], [np.array([2.0])], st, 0.1)
    v1 = 2.0 + 1e-2 * 1.0
    assert w.data[0] == pytest.approx(1.0 - 0.1 * v1)
    w_prev = w.data[0]
    S.momentum_step([w], [np.array([2.0])], st, 0.1)
    v2 = 0.9 * v1 + 2.0 + 1e-2 * w_prev
    assert w.data[0] == pytest.approx(w_prev - 0.1 * v2)


def test_quadratic_bowl_converges():
    # f(w) = w^2 / 2: (w, v) evolves linearly, w_n = Re(c * z^n) with |z| = sqrt(beta)
    beta, lr = 0.9, 0.1
    w = _p([1.0])
    st = S.OptimState(beta, 0.0)
    M = np.array([[1 - lr, -lr * beta], [1.0, beta]])  # acts on (w, v)
    state = np.array([1.0, 0.0])
    for n in range(1, 151):
        S.momentum_step([w], [w.data.copy()], st, lr)
        state = M @ state
        assert w.data[0] == pytest.approx(state[0], abs=1e-12)
        if n == 100:
            assert abs(w.data[0]) < 5e-3
    assert np.max(np.abs(np.linalg.eigvals(M))) == pytest.approx(math.sqrt(beta))
    assert abs(w.data[0]) < 1e-3


def test_zero_decay_is_bit_exact_pure_momentum():
    rng = np.random.default_rng(0)
    grads = [rng.standard_normal(4) for _ in range(20)]
    w = _p(rng.standard_normal(4))
    ref = w.data.copy()
    v = np.zeros(4)
    st = S.OptimState(0.9, 0.0)
    for g in grads:
        S.momentum_step([w], [g], st, 0.03)
        v = 0.9 * v + g
        ref = ref - 0.03 * v
    assert w.data.tobytes() == ref.tobytes()


def test_momentum_shape_checks():
    with pytest.raises(DimensionError):
        S.momentum_step([_p([1.0, 2.0])], [np.zeros(3)], S.OptimState(), 0.1)
    with pytest.raises(DimensionError):
        S.momentum_step([_p([1.0])], [], S.OptimState(), 0.1)


def test_momentum_keyed_velocity():
    a, b = _p([1.0]), _p([1.0])
    st = S.OptimState(0.5, 0.0)
    S.momentum_step([a], [np.ones(1)], st, 1.0, keys=["a"])
    S.momentum_step([b], [np.ones(1)], st, 1.0, keys=["b"])
    assert a.data[0] == b.data[0] == 0.0
    S.momentum_step([a], [np.ones(1)], st, 1.0, keys=["a"])
    assert a.data[0] == pytest.approx(-1.5)
    assert math.isclose(st.velocity["b"][0], 1.0)
