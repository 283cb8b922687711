import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cavflow import crossing_time, evaluate, feasible_range, solve_coefficients
from cavflow.errors import DegenerateHorizonError, InvalidPlanError, PlanDomainError
from cavflow.trajectory import evaluate_clamped, min_speed


def boundary_residuals(plan, t0, p0, v0, tf, pf):
    p_start, v_start, _ = evaluate(plan, t0)
    p_end, _, a_end = evaluate(plan, tf)
    return (abs(p_start - p0), abs(v_start - v0), abs(p_end - pf), abs(a_end))


def reference_solve(t0, p0, v0, tf, pf):
    """Independent oracle: assemble and solve the boundary-condition system
    for the epoch-relative coefficients with a generic linear solver."""
    horizon = tf - t0
    a = np.array([
        [0.0, 0.0, 0.0, 1.0],
        [0.0, 0.0, 1.0, 0.0],
        [horizon ** 3, horizon ** 2, horizon, 1.0],
        [6.0 * horizon, 2.0, 0.0, 0.0],
    ])
    return np.linalg.solve(a, np.array([p0, v0, pf, 0.0]))


def test_constant_speed_solution():
    plan = solve_coefficients(0.0, 0.0, 12.5, 20.0, 250.0)
    assert plan.c3 == pytest.approx(0.0, abs=1e-12)
    assert plan.c2 == pytest.approx(0.0, abs=1e-12)
    assert plan.c1 == pytest.approx(12.5)
    assert plan.c0 == pytest.approx(0.0)


def test_accelerating_solution_matches_reference():
    plan = solve_coefficients(0.0, 0.0, 10.0, 20.0, 250.0)
    ref = reference_solve(0.0, 0.0, 10.0, 20.0, 250.0)
    assert plan.c3 == pytest.approx(-0.003125, abs=1e-12)
    assert plan.c2 == pytest.approx(0.1875, abs=1e-12)
    assert plan.c1 == pytest.approx(10.0)
    assert plan.c0 == pytest.approx(0.0)
    assert np.allclose([plan.c3, plan.c2, plan.c1, plan.c0], ref, atol=1e-12)


def test_time_shift_equivalence():
    base = solve_coefficients(0.0, 0.0, 10.0, 20.0, 250.0)
    shifted = solve_coefficients(5.0, 0.0, 10.0, 25.0, 250.0)
    for tau in np.linspace(0.0, 20.0, 41):
        pb, vb, ab = evaluate(base, tau)
        ps, vs, a_s = evaluate(shifted, 5.0 + tau)
        assert ps == pytest.approx(pb, abs=1e-9)
        assert vs == pytest.approx(vb, abs=1e-9)
        assert a_s == pytest.approx(ab, abs=1e-9)


def test_degenerate_horizon():
    with pytest.raises(DegenerateHorizonError):
        solve_coefficients(10.0, 0.0, 10.0, 10.0 + 1e-9, 250.0)


def test_eval_constant_speed_midpoint():
    plan = solve_coefficients(0.0, 0.0, 12.5, 20.0, 250.0)
    assert evaluate(plan, 10.0) == pytest.approx((125.0, 12.5, 0.0))


def test_eval_boundary_values():
    plan = solve_coefficients(0.0, 0.0, 10.0, 20.0, 250.0)
    pos, speed, accel = evaluate(plan, 20.0)
    assert pos == pytest.approx(250.0)
    assert speed == pytest.approx(13.75)
    assert accel == pytest.approx(0.0, abs=1e-9)
    pos, speed, accel = evaluate(plan, 0.0)
    assert (pos, speed) == pytest.approx((0.0, 10.0))
    assert accel == pytest.approx(0.375)


def test_eval_outside_window():
    plan = solve_coefficients(0.0, 0.0, 10.0, 20.0, 250.0)
    with pytest.raises(PlanDomainError):
        evaluate(plan, 20.5)
    with pytest.raises(PlanDomainError):
        evaluate(plan, -0.5)
    assert evaluate_clamped(plan, 25.0) == evaluate(plan, 20.0)


def test_crossing_constant_speed():
    plan = solve_coefficients(0.0, 0.0, 12.5, 20.0, 250.0)
    assert crossing_time(plan, 100.0) == pytest.approx(8.0, abs=1e-6)


def test_crossing_accelerating_plan():
    plan = solve_coefficients(0.0, 0.0, 10.0, 20.0, 250.0)
    t = crossing_time(plan, 100.0)
    assert t == pytest.approx(8.77, abs=5e-3)
    assert evaluate(plan, t)[0] == pytest.approx(100.0, abs=1e-6)


def test_crossing_at_exit_is_exit_time():
    plan = solve_coefficients(3.0, 40.0, 9.0, 24.0, 250.0)
    assert crossing_time(plan, 250.0) == pytest.approx(plan.t_exit, abs=1e-9)
    assert crossing_time(plan, 40.0) == pytest.approx(3.0, abs=1e-9)


def test_crossing_rejects_nonmonotone_plan():
    # Long horizon over a short distance: the cubic reverses.
    plan = solve_coefficients(0.0, 0.0, 10.0, 100.0, 250.0)
    assert min_speed(plan) < 0.0
    with pytest.raises(InvalidPlanError):
        crossing_time(plan, 125.0)


def test_crossing_outside_position_range():
    plan = solve_coefficients(0.0, 0.0, 12.5, 20.0, 250.0)
    with pytest.raises(PlanDomainError):
        crossing_time(plan, 260.0)


def test_feasible_range_cruise(config):
    r = feasible_range(0.0, 20.0, 250.0, config)
    assert r.t_lo == pytest.approx(12.5)


def test_feasible_range_accelerate_then_cruise(config):
    r = feasible_range(0.0, 10.0, 250.0, config)
    assert r.t_lo == pytest.approx(13.3333, abs=1e-4)
    assert r.t_hi == pytest.approx(239.875, abs=1e-9)


def test_feasible_range_short_zone_single_ramp(config):
    # 10 m is too short to reach either speed bound from 10 m/s.
    r = feasible_range(240.0, 10.0, 250.0, config)
    t_fast = (-10.0 + np.sqrt(100.0 + 2 * 3.0 * 10.0)) / 3.0
    t_slow = (10.0 - np.sqrt(100.0 - 2 * 4.0 * 10.0)) / 4.0
    assert r.t_lo == pytest.approx(t_fast, abs=1e-9)
    assert r.t_hi == pytest.approx(t_slow, abs=1e-9)


def test_feasible_range_requires_forward_distance(config):
    with pytest.raises(PlanDomainError):
        feasible_range(250.0, 10.0, 250.0, config)


@settings(max_examples=200, deadline=None)
@given(
    t0=st.floats(0.0, 900.0),
    p0=st.floats(0.0, 240.0),
    v0=st.floats(1.0, 20.0),
    horizon=st.floats(0.5, 300.0),
)
def test_boundary_residuals_random(t0, p0, v0, horizon):
    plan = solve_coefficients(t0, p0, v0, t0 + horizon, 250.0)
    res = boundary_residuals(plan, t0, p0, v0, t0 + horizon, 250.0)
    assert max(res) <= 1e-9


def test_boundary_residuals_bulk():
    rng = np.random.default_rng(123)
    worst = 0.0
    for _ in range(1000):
        t0 = rng.uniform(0.0, 900.0)
        p0 = rng.uniform(0.0, 240.0)
        v0 = rng.uniform(1.0, 20.0)
        tf = t0 + rng.uniform(0.5, 300.0)
        plan = solve_coefficients(t0, p0, v0, tf, 250.0)
        worst = max(worst, *boundary_residuals(plan, t0, p0, v0, tf, 250.0))
    assert worst <= 1e-9


def test_crossing_roundtrip():
    rng = np.random.default_rng(7)
    for _ in range(200):
        v0 = rng.uniform(2.0, 20.0)
        horizon = rng.uniform(13.0, 60.0)
        plan = solve_coefficients(0.0, 0.0, v0, horizon, 250.0)
        if min_speed(plan) <= 0.0:
            continue
        t = rng.uniform(0.0, horizon)
        pos = evaluate(plan, t)[0]
        assert crossing_time(plan, pos) == pytest.approx(t, abs=1e-5)


def test_position_strictly_increasing_when_speed_positive(config):
    plan = solve_coefficients(0.0, 0.0, 10.0, 20.0, 250.0)
    ts = np.arange(0.0, 20.0 + 1e-9, config.dt_check)
    positions = [evaluate(plan, t)[0] for t in ts]
    assert all(b > a for a, b in zip(positions, positions[1:]))
