import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from asyncoffload.config import WorkloadConfig
from asyncoffload.selection import mask_from_channels, select_channels
from asyncoffload.staleopt import (
    AccumulationBuffers,
    BufferSafetyError,
    PartialStaleOptimizer,
    RhoTracker,
    StaleOptConfig,
    SyncOptimizer,
    load_checkpoint,
    lr_schedule,
    rho_from_trace,
    rho_measured,
    save_checkpoint,
    staleness_factor,
    warmup_penalty,
)
from asyncoffload.workloads import Quadratic


def _cfg(**kw):
    base = dict(S=4, warmup_steps=0, total_steps=200, lr=0.1, kind="sgd")
    base.update(kw)
    return StaleOptConfig(**base)


def _grads(n, steps, seed=0):
    rng = np.random.default_rng(seed)
    return [rng.standard_normal(n) for _ in range(steps)]


def test_hand_recurrence_sgd():
    opt = PartialStaleOptimizer([1.0, 1.0], [True, False], _cfg(S=2, lr=0.1, total_steps=4))
    history = []
    for _ in range(4):
        opt.step(opt.theta.copy())  # gradient of 1/2 |theta|^2
        history.append(opt.theta.copy())
    np.testing.assert_allclose(history[0], [0.9, 1.0])
    np.testing.assert_allclose(history[1], [0.81, 0.9])
    np.testing.assert_allclose(history[2], [0.729, 0.9])
    np.testing.assert_allclose(history[3], [0.6561, 0.81])


@pytest.mark.parametrize("kind", ["sgd", "adamw"])
@pytest.mark.parametrize("S,mask", [(1, "channel"), (4, "all")])
def test_degenerate_cases_match_sync_bitwise(kind, S, mask):
    n = 48
    mk = np.zeros(n, bool)
    mk[::7] = True
    if mask == "all":
        mk[:] = True
    cfg = _cfg(S=S, kind=kind, lr=0.01, warmup_steps=10, total_steps=300)
    a, b = PartialStaleOptimizer(np.ones(n), mk, cfg), SyncOptimizer(np.ones(n), cfg)
    for g in _grads(n, 300, seed=1):
        a.step(g)
        b.step(g)
        assert np.array_equal(a.theta, b.theta)


def test_warmup_is_synchronous():
    cfg = _cfg(S=4, warmup_steps=5, total_steps=20)
    n = 10
    mk = np.arange(n) < 3
    a, b = PartialStaleOptimizer(np.ones(n), mk, cfg), SyncOptimizer(np.ones(n), cfg)
    for g in _grads(n, 5):
        assert a.step(g) is False
        b.step(g)
    assert np.array_equal(a.theta, b.theta)
    assert not a.in_warmup


def test_flush_now_divisors():
    def run(rounds, S, flush_early):
        opt = PartialStaleOptimizer([1.0, 1.0], [True, False], _cfg(S=S, lr=0.1, total_steps=10))
        for _ in range(rounds):
            opt.step(opt.theta.copy())
        if flush_early:
            assert opt.flush_now()
        return opt

    scheduled = run(4, 4, False)
    manual = run(4, 99, True)
    assert np.array_equal(scheduled.theta, manual.theta)
    # single round: same as a synchronous step on that coordinate
    one = run(1, 4, True)
    assert one.theta[1] == pytest.approx(0.9)
    # three of four rounds: mean of three identical unit gradients
    three = run(3, 4, True)
    assert three.flush_log[-1] == (3, 3)
    assert three.theta[1] == pytest.approx(1.0 - 0.1 * 1.0)


def test_flush_now_empty_is_noop():
    opt = PartialStaleOptimizer([1.0], [False], _cfg())
    with pytest.warns(RuntimeWarning):
        assert opt.flush_now() is False


def test_constant_gradient_conservation():
    S, lr, g = 5, 0.05, np.array([0.3, -1.2, 2.0])
    opt = PartialStaleOptimizer(np.zeros(3), [True, False, False], _cfg(S=S, lr=lr))
    for _ in range(S):
        opt.step(g)
    # one averaged flush moves theta_c exactly as S steps of mean gradient / S
    np.testing.assert_allclose(opt.theta[1:], -lr * g[1:], rtol=1e-15)
    np.testing.assert_allclose(opt.theta[0], -S * lr * g[0])


def test_buffer_safety_paths():
    buf = AccumulationBuffers(3, trace=True)
    with pytest.raises(BufferSafetyError):
        buf.end_flush()
    buf.accumulate(np.ones(3), np.arange(3))
    data, rounds = buf.begin_flush()
    assert rounds == 1 and data.sum() == 3
    with pytest.raises(BufferSafetyError):
        buf.begin_flush()
    buf.accumulate(np.ones(3), np.arange(3))  # new active buffer is fine
    buf.end_flush()
    assert not buf.updating.any()
    buf.updating[0] = 1.0
    with pytest.raises(BufferSafetyError):
        buf.begin_flush()
    buf2 = AccumulationBuffers(2)
    buf2.begin_flush()
    buf2.active_index = buf2.consuming  # simulate a role mix-up
    with pytest.raises(BufferSafetyError):
        buf2.accumulate(np.ones(2), np.arange(2))


def test_no_write_lands_in_consumed_buffer():
    n = 30
    mk = np.arange(n) < 5
    opt = PartialStaleOptimizer(np.zeros(n), mk, _cfg(S=3, total_steps=100), trace_buffers=True)
    for g in _grads(n, 100):
        opt.step(g)
    consumed = {}
    for epoch, idx in opt.buffers.consume_log:
        consumed[epoch] = idx
    for epoch, idx in opt.buffers.write_log:
        # writes in epoch e go to the buffer that epoch e+1 consumes, never the one epoch e consumed
        if epoch in consumed:
            assert idx != consumed[epoch]
        if epoch + 1 in consumed:
            assert idx == consumed[epoch + 1]


def test_adamw_important_state_independent_of_S():
    n = 20
    mk = np.arange(n) % 3 == 0
    gs = _grads(n, 120, seed=4)
    states = []
    for S in (2, 3, 7):
        opt = PartialStaleOptimizer(np.ones(n), mk, _cfg(S=S, kind="adamw", lr=0.01, total_steps=120))
        for g in gs:
            opt.step(g)
        states.append((opt.theta[mk].copy(), opt.m[mk].copy(), opt.v[mk].copy(), opt.step_g))
    for st in states[1:]:
        for a, b in zip(states[0], st):
            assert np.array_equal(a, b)


@pytest.mark.parametrize("kind", ["sgd", "adamw"])
def test_concurrent_matches_serial(kind):
    n = 64
    mk = np.arange(n) < 8
    gs = _grads(n, 150, seed=2)
    cfg = _cfg(S=4, kind=kind, lr=0.01, warmup_steps=7, total_steps=150)
    a = PartialStaleOptimizer(np.ones(n), mk, cfg)
    b = PartialStaleOptimizer(np.ones(n), mk, cfg, concurrent=True)
    try:
        for g in gs:
            assert a.step(g) == b.step(g)
        assert np.array_equal(a.theta, b.theta) and np.array_equal(a.m, b.m)
    finally:
        b.close()


def test_checkpoint_round_trip_mid_cycle(tmp_path):
    n = 25
    mk = np.arange(n) < 5
    cfg = _cfg(S=4, kind="adamw", lr=0.01, warmup_steps=3, total_steps=60)
    gs = _grads(n, 60, seed=9)
    ref = PartialStaleOptimizer(np.ones(n), mk, cfg)
    for g in gs[:30]:
        ref.step(g)
    ref.set_interval(6)  # pending change survives the round trip
    path = save_checkpoint(ref, tmp_path / "opt.npz")
    back = load_checkpoint(path)
    for key, val in ref.state_dict().items():
        other = back.state_dict()[key]
        assert np.array_equal(val, other) if isinstance(val, np.ndarray) else val == other, key
    for g in gs[30:]:
        ref.step(g)
        back.step(g)
    assert np.array_equal(ref.theta, back.theta)
    assert np.array_equal(ref.age, back.age)


def test_mask_change_rules():
    n = 6
    cfg = _cfg(S=2, kind="adamw", lr=0.01, total_steps=50)
    opt = PartialStaleOptimizer(np.ones(n), np.arange(n) < 2, cfg)
    opt.step(np.ones(n))
    with pytest.raises(RuntimeError):
        opt.set_mask(np.arange(n) < 3)
    opt.step(np.ones(n))  # flush: both partitions have taken different step counts
    assert opt.at_boundary and opt.step_g != opt.step_c
    new = np.arange(n) >= 4
    mig = opt.set_mask(new)
    assert mig.moments_reset and mig.to_important == 2 and mig.to_delayed == 2
    moved = np.array([1, 1, 0, 0, 1, 1], bool)
    assert not opt.m[moved].any() and not opt.age[moved].any()
    assert opt.set_mask(new) is None


def test_set_interval_defers_until_boundary():
    opt = PartialStaleOptimizer(np.zeros(2), [True, False], _cfg(S=2))
    opt.step(np.ones(2))
    opt.set_interval(5)
    assert opt.S == 2
    opt.step(np.ones(2))
    assert opt.S == 5
    with pytest.raises(ValueError):
        opt.set_interval(0)


def test_step_input_validation():
    opt = PartialStaleOptimizer(np.zeros(3), [True, False, True], _cfg(total_steps=1))
    with pytest.raises(ValueError):
        opt.step(np.ones(4))
    with pytest.raises(ValueError):
        opt.step(np.array([1.0, np.nan, 0.0]))
    opt.step(np.ones(3))
    with pytest.raises(RuntimeError):
        opt.step(np.ones(3))


def test_config_validation():
    with pytest.raises(ValueError):
        StaleOptConfig(S=0)
    with pytest.raises(ValueError):
        StaleOptConfig(warmup_steps=20, total_steps=10)
    assert StaleOptConfig(total_steps=1000).warmup_steps == 50


def test_lr_schedules():
    f = lr_schedule("cosine", 1.0, 100, 0.1)
    assert f(0) == pytest.approx(0.1) and f(9) == pytest.approx(1.0)
    assert f(10) == pytest.approx(1.0) and f(100) == pytest.approx(0.0)
    assert lr_schedule("constant", 0.3, 10)(7) == 0.3
    with pytest.raises(ValueError):
        lr_schedule("step", 1.0, 10)


def test_rho_trivial_and_trace_replay(rng):
    g = rng.standard_normal(10)
    assert rho_from_trace([g], [np.ones(10, bool)]) == 0.0
    assert rho_from_trace([g], [np.zeros(10, bool)]) == 1.0
    grads = [rng.standard_normal(10) * (t + 1) for t in range(5)]
    masks = [np.arange(10) < 3] * 5
    tr = RhoTracker()
    for gg, mk in zip(grads, masks):
        tr.observe(gg, mk)
    brute = max(float(gg[3:] @ gg[3:]) for gg in grads) / max(float(gg @ gg) for gg in grads)
    assert tr.value == pytest.approx(brute)
    with pytest.raises(ValueError):
        rho_measured([0.0], [0.0])


def test_penalty_calculators():
    assert staleness_factor(0.10, 4) == pytest.approx(1.1832, abs=1e-3)
    assert staleness_factor(0.0, 9) == 1.0
    assert staleness_factor(1.0, 3) == 2.0
    assert warmup_penalty(0.1, 4, 0, 1000, 0.6) == staleness_factor(0.1, 4)
    assert warmup_penalty(0.1, 4, 1000, 1000, 0.6) == 1.0
    assert warmup_penalty(0.1, 4, 7500, 150000, 0.6) == pytest.approx(1.1311, abs=1e-3)
    with pytest.raises(ValueError):
        warmup_penalty(0.1, 4, 0, 10, 1.0)


@settings(max_examples=40, deadline=None)
@given(st.floats(0, 1), st.integers(1, 16), st.floats(0.05, 0.95), st.floats(0, 1), st.floats(0, 1))
def test_warmup_penalty_bounded_and_decreasing(rho, S, beta, f1, f2):
    lo, hi = sorted((f1, f2))
    a = warmup_penalty(rho, S, lo * 1000, 1000, beta)
    b = warmup_penalty(rho, S, hi * 1000, 1000, beta)
    assert 1.0 <= b <= a + 1e-12 <= staleness_factor(rho, S) + 1e-12


def test_quadratic_mean_sq_grad_within_staleness_bound():
    wc = WorkloadConfig(kind="quadratic", n_outputs=32, n_features=100, relevant_frac=0.1, relevant_scale=10.0, curvature_sigma=0.0,
                        noise=0.05)
    wl = Quadratic(wc, seed=0)
    T = 2000
    cfg = StaleOptConfig(S=4, total_steps=T, lr=0.5, kind="sgd")
    theta0 = wl.init_params(None)
    _, g0 = wl.loss_and_grad(theta0, None)
    sel = select_channels((g0.reshape(wl.shape) ** 2).sum(0), 0.1)
    mask = mask_from_channels(sel, wl.shape).ravel()

    def mean_sq(opt):
        rng = np.random.default_rng(1)
        tot = 0.0
        tr = RhoTracker()
        for _ in range(T):
            _, g = wl.loss_and_grad(opt.theta, wl.sample_batch(rng))
            tr.observe(g, mask)
            tot += float(g @ g)
            opt.step(g)
        return tot / T, tr.value

    stale, rho = mean_sq(PartialStaleOptimizer(theta0, mask, cfg))
    sync, _ = mean_sq(SyncOptimizer(theta0, cfg))
    assert 0.05 < rho < 0.15
    assert stale / sync <= staleness_factor(rho, 4) ** 2 * 1.10
