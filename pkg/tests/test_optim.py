"""Baseline optimizers, the recompute NGD path, and the LR schedule."""

import copy

import numpy as np
import pytest

from fngd import core, linalg, nn, optim


def _rng(seed):
    return np.random.Generator(np.random.PCG64(seed))


# ------------------------------------------------------------- first order

def test_sgd_hand_step():
    params = {"w": np.array([1.0])}
    optim.sgd_step(params, {"w": np.array([0.5])}, lr=0.1)
    assert params["w"][0] == 0.95


def test_momentum_buffer_recurrence():
    state = optim.MomentumState(beta=0.9)
    params = {"w": np.array([0.0])}
    g = {"w": np.array([1.0])}
    optim.sgd_momentum_step(state, params, g, lr=0.1)
    assert state.buffers["w"][0] == 1.0
    assert params["w"][0] == -0.1
    optim.sgd_momentum_step(state, params, g, lr=0.1)
    assert abs(state.buffers["w"][0] - 1.9) <= 1e-15
    assert abs(params["w"][0] - (-0.1 - 0.19)) <= 1e-15


def test_adamw_decay_only_shrinks_geometrically():
    state = optim.AdamWState(weight_decay=0.01)
    w0 = 3.0
    params = {"w": np.array([w0])}
    zero = {"w": np.array([0.0])}
    lr = 0.1
    for _ in range(5):
        optim.adamw_step(state, params, zero, lr)
    assert abs(params["w"][0] - w0 * (1 - lr * 0.01) ** 5) <= 1e-12


def test_adamw_first_step_is_signed_unit_step():
    # bias correction makes mhat = g and vhat = g*g at t=1
    state = optim.AdamWState(eps=0.0)
    params = {"w": np.array([1.0, 1.0])}
    optim.adamw_step(state, params, {"w": np.array([0.4, -0.01])}, lr=0.1)
    assert np.abs(params["w"] - [0.9, 1.1]).max() <= 1e-12


def test_adamw_gradient_scale_invariance():
    rng = _rng(0)
    grads = [rng.standard_normal(6) for _ in range(12)]
    deltas = []
    for scale in (1.0, 2.0):
        state = optim.AdamWState(eps=1e-12)
        params = {"w": np.zeros(6)}
        last = None
        for g in grads:
            before = params["w"].copy()
            optim.adamw_step(state, params, {"w": scale * g}, lr=0.05)
            last = params["w"] - before
        deltas.append(last)
    diff = np.abs(deltas[0] - deltas[1]).max()
    assert diff <= 1e-6 * np.abs(deltas[0]).max()


# ---------------------------------------------------------------- ngd_smw

def _toy(seed, m=4):
    rng = _rng(seed)
    net = nn.Network(
        [nn.Dense.create(3, 4, rng), nn.Relu(), nn.Dense.create(4, 2, rng)],
        "squared_error",
    )
    batches = [(rng.standard_normal((3, m)), rng.standard_normal((2, m)))
               for _ in range(5)]
    return net, batches


def test_ngd_first_epoch_is_bitwise_identical_to_coefficient_phase():
    net_a, batches = _toy(1)
    net_b = copy.deepcopy(net_a)
    rule = core.DampingRule()
    table = core.CoefficientTable()
    for x, t in batches:
        optim.ngd_smw_step(net_a, x, t, 0.1, rule)
        core.epoch_one_step(net_b, x, t, table, 0.1, rule)
    for name, p in net_a.parameters().items():
        assert np.array_equal(p, net_b.parameters()[name]), name


def test_ngd_solves_every_step_and_shared_step_never_solves(monkeypatch):
    calls = {"n": 0}
    real = linalg.solve_spd

    def counting(a, b):
        calls["n"] += 1
        return real(a, b)

    monkeypatch.setattr(linalg, "solve_spd", counting)
    net, batches = _toy(2)
    rule = core.DampingRule()
    layers = len(net.preconditioned())

    table = core.CoefficientTable()
    for x, t in batches:
        core.epoch_one_step(net, x, t, table, 0.1, rule)
    assert calls["n"] == layers * len(batches)
    table.finalize()

    calls["n"] = 0
    for x, t in batches:
        core.shared_step(net, x, t, table, 0.1)
    assert calls["n"] == 0

    calls["n"] = 0
    for x, t in batches:
        optim.ngd_smw_step(net, x, t, 0.1, rule)
    assert calls["n"] == layers * len(batches)


# --------------------------------------------------------------- schedule

def test_schedule_default_milestones_hand_values():
    sched = optim.make_lr_schedule(0.2, epochs=100)
    assert sched.milestones == (50, 75)
    assert optim.schedule_lr(sched, 0) == 0.2
    assert optim.schedule_lr(sched, 49) == 0.2
    assert abs(optim.schedule_lr(sched, 50) - 0.02) <= 1e-16
    assert abs(optim.schedule_lr(sched, 74) - 0.02) <= 1e-16
    assert abs(optim.schedule_lr(sched, 75) - 0.002) <= 1e-17
    assert abs(optim.schedule_lr(sched, 99) - 0.002) <= 1e-17


def test_schedule_validation():
    with pytest.raises(ValueError, match="base_lr"):
        optim.LrSchedule(0.0)
    with pytest.raises(ValueError, match="decay"):
        optim.LrSchedule(0.1, decay=0.0)
    with pytest.raises(ValueError, match="ascending"):
        optim.LrSchedule(0.1, milestones=(5, 3))
    with pytest.raises(ValueError, match="non-negative"):
        optim.LrSchedule(0.1, milestones=(-1,))


def test_schedule_no_decay_is_constant():
    sched = optim.LrSchedule(0.3, milestones=(2, 4), decay=1.0)
    assert all(optim.schedule_lr(sched, e) == 0.3 for e in range(6))
