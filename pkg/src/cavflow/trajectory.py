"""Cubic motion primitives: coefficient solve, evaluation, inversion, bounds.

A plan is the unique cubic p(t) fixed by four boundary conditions: position
and speed at the plan epoch, position at the exit time, and zero
acceleration at the exit time.  Coefficients are stored in epoch-relative
time (tau = t - t_start): the absolute-time representation loses ~11 digits
once epochs reach a few hundred seconds, which would break the 1e-9
boundary-residual contract.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import DegenerateHorizonError, InvalidPlanError, PlanDomainError
from .scenario import ScenarioConfig

MIN_HORIZON = 1e-6          # s; below this the boundary system is singular
CROSSING_TOL = 1e-6         # m; bisection convergence for crossing_time


@dataclass(frozen=True)
class TrajectoryPlan:
    """One committed cubic trajectory, valid on [t_start, t_exit]."""

    c3: float
    c2: float
    c1: float
    c0: float
    t_start: float
    t_exit: float
    p_start: float
    p_exit: float

    @property
    def duration(self) -> float:
        return self.t_exit - self.t_start


@dataclass(frozen=True)
class FeasibleRange:
    """Exit-time interval reachable under the speed and input bounds."""

    t_lo: float
    t_hi: float

    @property
    def width(self) -> float:
        return self.t_hi - self.t_lo


def solve_coefficients(t0: float, p0: float, v0: float, tf: float, pf: float) -> TrajectoryPlan:
    """Solve the 4x4 boundary-condition system for the cubic coefficients.

    Boundary conditions: p(t0) = p0, v(t0) = v0, p(tf) = pf, u(tf) = 0.
    In epoch-relative time the system is triangular after one elimination
    step, so it is solved in closed form; boundary residuals stay below
    1e-11 for any horizon and epoch.
    """
    horizon = tf - t0
    if horizon <= MIN_HORIZON:
        raise DegenerateHorizonError(f"horizon {horizon:.3g} s is below {MIN_HORIZON} s")
    # Rows 1, 2, and 4 give c0, c1, and c2 = -3*c3*T; row 3 then fixes c3.
    c3 = (p0 + v0 * horizon - pf) / (2.0 * horizon ** 3)
    c2 = -3.0 * c3 * horizon
    return TrajectoryPlan(c3=float(c3), c2=float(c2), c1=v0, c0=p0,
                          t_start=t0, t_exit=tf, p_start=p0, p_exit=pf)


def evaluate(plan: TrajectoryPlan, t: float) -> tuple[float, float, float]:
    """Position, speed, and acceleration at time t within the plan window."""
    if t < plan.t_start - 1e-9 or t > plan.t_exit + 1e-9:
        raise PlanDomainError(
            f"t={t:.6f} outside plan window [{plan.t_start:.6f}, {plan.t_exit:.6f}]")
    return _eval_unchecked(plan, t)


def evaluate_clamped(plan: TrajectoryPlan, t: float) -> tuple[float, float, float]:
    """Like evaluate, but queries outside the window pin to its endpoints."""
    return _eval_unchecked(plan, min(max(t, plan.t_start), plan.t_exit))


def _eval_unchecked(plan: TrajectoryPlan, t: float) -> tuple[float, float, float]:
    tau = t - plan.t_start
    pos = ((plan.c3 * tau + plan.c2) * tau + plan.c1) * tau + plan.c0
    speed = (3.0 * plan.c3 * tau + 2.0 * plan.c2) * tau + plan.c1
    accel = 6.0 * plan.c3 * tau + 2.0 * plan.c2
    return pos, speed, accel


def eval_arrays(plan: TrajectoryPlan, ts: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized evaluation over absolute times (no window check)."""
    tau = ts - plan.t_start
    pos = ((plan.c3 * tau + plan.c2) * tau + plan.c1) * tau + plan.c0
    speed = (3.0 * plan.c3 * tau + 2.0 * plan.c2) * tau + plan.c1
    accel = 6.0 * plan.c3 * tau + 2.0 * plan.c2
    return pos, speed, accel


def sample_times(t_start: float, t_end: float, dt: float) -> np.ndarray:
    """Grid over [t_start, t_end] at step dt, always containing both endpoints."""
    if t_end <= t_start:
        return np.array([t_start])
    n = int(np.floor((t_end - t_start) / dt + 1e-9))
    ts = t_start + dt * np.arange(n + 1)
    if ts[-1] < t_end - 1e-12:
        ts = np.append(ts, t_end)
    else:
        ts[-1] = t_end
    return ts


def min_speed(plan: TrajectoryPlan) -> float:
    """Exact minimum of the (quadratic) speed over the plan window."""
    lo, hi = plan.t_start, plan.t_exit
    candidates = [_eval_unchecked(plan, lo)[1], _eval_unchecked(plan, hi)[1]]
    if plan.c3 != 0.0:
        t_vertex = plan.t_start - plan.c2 / (3.0 * plan.c3)
        if lo < t_vertex < hi:
            candidates.append(_eval_unchecked(plan, t_vertex)[1])
    return min(candidates)


@lru_cache(maxsize=8192)
def crossing_time(plan: TrajectoryPlan, pos: float) -> float:
    """Unique time at which the plan reaches `pos`, by bisection.

    Requires strictly positive speed over the window so the position is
    invertible; converges to |p(t) - pos| <= 1e-6 m.  Memoized: committed
    plans are queried at the same conflict positions over and over during
    a scan.
    """
    if pos < plan.p_start - 1e-9 or pos > plan.p_exit + 1e-9:
        raise PlanDomainError(
            f"pos={pos:.6f} outside plan range [{plan.p_start:.6f}, {plan.p_exit:.6f}]")
    if min_speed(plan) <= 0.0:
        raise InvalidPlanError("plan speed crosses zero; position is not invertible")

    c3, c2, c1, c0 = plan.c3, plan.c2, plan.c1, plan.c0
    t0 = plan.t_start
    lo, hi = 0.0, plan.t_exit - t0
    p_lo = c0
    p_hi = ((c3 * hi + c2) * hi + c1) * hi + c0
    if pos <= p_lo:
        return t0
    if pos >= p_hi:
        return t0 + hi
    # Newton steps inside a shrinking bisection bracket.
    x = lo + (hi - lo) * (pos - p_lo) / (p_hi - p_lo)
    for _ in range(200):
        p = ((c3 * x + c2) * x + c1) * x + c0
        if abs(p - pos) <= CROSSING_TOL:
            return t0 + x
        if p < pos:
            lo = x
        else:
            hi = x
        v = (3.0 * c3 * x + 2.0 * c2) * x + c1
        if v > 0.0:
            x_next = x + (pos - p) / v
            if lo < x_next < hi:
                x = x_next
                continue
        x = 0.5 * (lo + hi)
    return t0 + 0.5 * (lo + hi)


def feasible_range(p0: float, v0: float, pf: float, config: ScenarioConfig) -> FeasibleRange:
    """Fastest and slowest travel durations from (p0, v0) to pf.

    Lower bound: full acceleration to v_max, then cruise.  Upper bound:
    full braking to v_min, then crawl.  If the zone is too short to finish
    the ramp, the single-ramp time is used instead.  Durations; add the
    current time to obtain absolute exit times.
    """
    dist = pf - p0
    if dist <= 0.0:
        raise PlanDomainError(f"p0={p0} must precede pf={pf}")
    v0 = _clamp_speed(v0, config)

    d_acc = (config.v_max ** 2 - v0 ** 2) / (2.0 * config.u_max)
    if d_acc <= dist:
        t_lo = (config.v_max - v0) / config.u_max + (dist - d_acc) / config.v_max
    else:
        t_lo = (-v0 + np.sqrt(v0 ** 2 + 2.0 * config.u_max * dist)) / config.u_max

    brake = -config.u_min
    d_dec = (v0 ** 2 - config.v_min ** 2) / (2.0 * brake)
    if d_dec <= dist:
        t_hi = (v0 - config.v_min) / brake + (dist - d_dec) / config.v_min
    else:
        t_hi = (v0 - np.sqrt(v0 ** 2 + 2.0 * config.u_min * dist)) / brake

    return FeasibleRange(t_lo=float(t_lo), t_hi=float(max(t_hi, t_lo)))


def _clamp_speed(v0: float, config: ScenarioConfig) -> float:
    # Executed plans respect the bounds at sample resolution only; absorb
    # round-off sized excursions, reject anything larger.
    tol = 1e-6
    if v0 < config.v_min - tol or v0 > config.v_max + tol:
        raise PlanDomainError(f"speed {v0} outside [{config.v_min}, {config.v_max}]")
    return min(max(v0, config.v_min), config.v_max)
