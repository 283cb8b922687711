"""Safety and state-bound checks for candidate trajectories.

All checks sample the plan window at `dt_check` (endpoints included) and
report a normalized violation measure so that infeasible candidates from
different constraint families can be compared on one scale: speed excess is
divided by the speed band, input excess by the input band, lateral gap
deficit by the required time gap, rear-end gap deficit by the standstill
distance.  A report is feasible iff its worst violation is zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from typing import Mapping, Sequence

import numpy as np

from .errors import OrderingError, PlanDomainError
from .scenario import ScenarioConfig
from .trajectory import (
    TrajectoryPlan,
    crossing_time,
    eval_arrays,
    evaluate_clamped,
    min_speed,
    sample_times,
)

# Violations at or below this (normalized) level are floating-point noise
# from the coefficient solve, not real constraint violations.
VIOLATION_SLACK = 1e-9

# Recorded conflict-point crossing times for vehicles that already passed a
# point: maps (vid, conflict id) -> absolute seconds.  The recording vehicle
# may have left the zone since.
CrossingLog = Mapping[tuple[int, int], float]

# Lane each recorded crossing happened on, same keys as the CrossingLog.
# Optional: entries of unknown lane are applied conservatively.
CrossingLanes = Mapping[tuple[int, int], int]


class Violated(str, Enum):
    INPUT = "input"
    SPEED = "speed"
    LATERAL = "lateral"
    REAR_END = "rear_end"
    NONE = "none"


@dataclass(frozen=True, eq=False)
class PastTrack:
    """Executed positions sampled at a fixed step, starting at t0.

    Identity-hashed (ndarray payload), which is what the lagged-position
    cache needs: one object per vehicle per planning cycle.
    """

    t0: float
    dt: float
    positions: np.ndarray

    def at(self, queries: np.ndarray) -> np.ndarray:
        """Linear interpolation, pinned to the recorded ends."""
        x = np.clip((queries - self.t0) / self.dt, 0.0, len(self.positions) - 1.0)
        j = np.minimum(np.floor(x).astype(int), max(len(self.positions) - 2, 0))
        frac = x - j
        if len(self.positions) == 1:
            return np.full_like(queries, self.positions[0])
        return self.positions[j] * (1.0 - frac) + self.positions[j + 1] * frac


@dataclass(frozen=True)
class CommittedPlan:
    """A trajectory another vehicle is already bound to.

    `past` optionally records the vehicle's executed positions before the
    plan epoch; when present, rear-end queries reaching behind the epoch
    use it instead of the epoch clamp.
    """

    vid: int
    lane: int
    plan: TrajectoryPlan
    past: PastTrack | None = None


@dataclass(frozen=True)
class ConstraintReport:
    feasible: bool
    worst_violation: float
    first_violated: Violated

    @staticmethod
    def ok() -> "ConstraintReport":
        return ConstraintReport(True, 0.0, Violated.NONE)


def _report(violation: float, kind: Violated) -> ConstraintReport:
    if violation <= VIOLATION_SLACK:
        return ConstraintReport.ok()
    return ConstraintReport(False, violation, kind)


def bound_violations(plan: TrajectoryPlan, config: ScenarioConfig) -> tuple[float, float]:
    """Normalized (input, speed) excesses over the sampled plan window.

    The acceleration is linear in time, so its extrema sit at the window
    endpoints.  When the acceleration keeps one sign across the window the
    speed is monotone and its sampled extrema are the endpoint values too;
    only plans whose acceleration crosses zero mid-window need the dense
    speed sweep.
    """
    dur = plan.t_exit - plan.t_start
    u0 = 2.0 * plan.c2
    uf = 6.0 * plan.c3 * dur + 2.0 * plan.c2
    input_excess = max(u0 - config.u_max, uf - config.u_max,
                       config.u_min - u0, config.u_min - uf, 0.0)

    v0 = plan.c1
    vf = (3.0 * plan.c3 * dur + 2.0 * plan.c2) * dur + plan.c1
    if u0 * uf >= 0.0:
        v_hi, v_lo = max(v0, vf), min(v0, vf)
    else:
        ts = sample_times(plan.t_start, plan.t_exit, config.dt_check)
        _, speeds, _ = eval_arrays(plan, ts)
        v_hi, v_lo = float(np.max(speeds)), float(np.min(speeds))
    speed_excess = max(v_hi - config.v_max, config.v_min - v_lo, 0.0)

    return (input_excess / (config.u_max - config.u_min),
            speed_excess / (config.v_max - config.v_min))


def check_bounds(plan: TrajectoryPlan, config: ScenarioConfig) -> ConstraintReport:
    """Input and speed limits along the whole plan."""
    input_viol, speed_viol = bound_violations(plan, config)
    if input_viol > VIOLATION_SLACK:
        return ConstraintReport(False, max(input_viol, speed_viol), Violated.INPUT)
    return _report(speed_viol, Violated.SPEED)


def lateral_violation(
    plan: TrajectoryPlan,
    lane: int,
    others: Sequence[CommittedPlan],
    config: ScenarioConfig,
    past_crossings: CrossingLog | None = None,
    crossing_lanes: CrossingLanes | None = None,
) -> float:
    """Worst normalized crossing-time gap deficit against committed plans.

    For each conflict point the candidate has not yet passed, every other
    vehicle on the conflicting lane contributes a required time separation.
    A vehicle already past the point (possibly already out of the zone)
    constrains the candidate through its recorded crossing time when one is
    available, and not at all otherwise.  Recorded crossings made on the
    candidate's own lane are the rear-end check's business and are skipped
    when their lane is known.
    """
    past_crossings = past_crossings or {}
    crossing_lanes = crossing_lanes or {}
    worst = 0.0
    for cp in config.conflicts_of(lane):
        pos_self = cp.pos_on(lane)
        if pos_self < plan.p_start:
            continue  # candidate already past this point; its time is history
        if pos_self > plan.p_exit + 1e-9:
            raise PlanDomainError(
                f"conflict point {cp.id} at {pos_self} m beyond plan end {plan.p_exit} m")
        other_lane = cp.lane_b if cp.lane_a == lane else cp.lane_a

        other_times = []
        handled = set()
        for other in others:
            if other.lane != other_lane:
                continue
            handled.add(other.vid)
            pos_other = cp.pos_on(other_lane)
            if pos_other >= other.plan.p_start and min_speed(other.plan) > 0.0:
                other_times.append(crossing_time(other.plan, min(pos_other, other.plan.p_exit)))
            elif (other.vid, cp.id) in past_crossings:
                other_times.append(past_crossings[(other.vid, cp.id)])
        for (vid, cpid), t_rec in past_crossings.items():
            if cpid != cp.id or vid in handled:
                continue
            rec_lane = crossing_lanes.get((vid, cpid))
            if rec_lane is not None and rec_lane != other_lane:
                continue
            other_times.append(t_rec)

        if not other_times:
            continue
        t_self = crossing_time(plan, pos_self)
        for t_other in other_times:
            gap = abs(t_self - t_other)
            if gap < config.delta_lateral:
                worst = max(worst, (config.delta_lateral - gap) / config.delta_lateral)
    return worst


def check_lateral(
    plan: TrajectoryPlan,
    lane: int,
    others: Sequence[CommittedPlan],
    config: ScenarioConfig,
    past_crossings: CrossingLog | None = None,
    crossing_lanes: CrossingLanes | None = None,
) -> ConstraintReport:
    return _report(
        lateral_violation(plan, lane, others, config, past_crossings, crossing_lanes),
        Violated.LATERAL)


def rear_end_violation(
    plan: TrajectoryPlan,
    predecessor: CommittedPlan | None,
    config: ScenarioConfig,
) -> float:
    """Worst normalized spacing deficit against the immediate predecessor.

    The headway rule compares the predecessor's position delta_rear seconds
    ago with the candidate's current position, over the interval from the
    candidate's epoch to the predecessor's exit.  Query times before the
    predecessor's plan epoch read its executed track when one is attached,
    and otherwise pin to the epoch.
    """
    if predecessor is None:
        return 0.0
    pred = predecessor.plan
    p_pred_now = evaluate_clamped(pred, plan.t_start)[0]
    p_self_now = evaluate_clamped(plan, plan.t_start)[0]
    if p_pred_now <= p_self_now:
        raise OrderingError(
            f"predecessor {predecessor.vid} at {p_pred_now:.3f} m is not ahead "
            f"of candidate at {p_self_now:.3f} m")

    lo = max(plan.t_start, pred.t_start)
    hi = pred.t_exit
    if hi <= lo:
        return 0.0
    ts, pred_pos = _lagged_positions(predecessor, lo, hi,
                                     config.dt_check, config.delta_rear)
    self_pos, _, _ = eval_arrays(plan, np.minimum(ts, plan.t_exit))
    deficit = float(np.max(config.d_min - (pred_pos - self_pos)))
    return max(deficit, 0.0) / config.d_min


@lru_cache(maxsize=512)
def _lagged_positions(predecessor: CommittedPlan, lo: float, hi: float,
                      dt: float, delta_rear: float) -> tuple[np.ndarray, np.ndarray]:
    """Sample grid over [lo, hi] and the predecessor's position delta_rear
    earlier at each sample.  Cached: every candidate in a scan reuses it."""
    pred = predecessor.plan
    ts = sample_times(lo, hi, dt)
    queries = ts - delta_rear
    pred_pos, _, _ = eval_arrays(pred, np.maximum(queries, pred.t_start))
    before_epoch = queries < pred.t_start
    if predecessor.past is not None and before_epoch.any():
        pred_pos[before_epoch] = predecessor.past.at(queries[before_epoch])
    return ts, pred_pos


def check_rear_end(
    plan: TrajectoryPlan,
    lane: int,
    predecessor: CommittedPlan | None,
    config: ScenarioConfig,
) -> ConstraintReport:
    if predecessor is not None and predecessor.lane != lane:
        raise OrderingError(
            f"predecessor {predecessor.vid} is on lane {predecessor.lane}, not {lane}")
    return _report(rear_end_violation(plan, predecessor, config), Violated.REAR_END)


def find_predecessor(
    plan: TrajectoryPlan,
    lane: int,
    committed: Sequence[CommittedPlan],
) -> CommittedPlan | None:
    """Nearest committed same-lane plan ahead of the candidate at its epoch."""
    best = None
    best_pos = None
    p_self = plan.p_start
    for other in committed:
        if other.lane != lane:
            continue
        p_other = evaluate_clamped(other.plan, plan.t_start)[0]
        if p_other <= p_self:
            continue
        if best_pos is None or p_other < best_pos:
            best, best_pos = other, p_other
    return best


def check_all(
    plan: TrajectoryPlan,
    lane: int,
    committed: Sequence[CommittedPlan],
    config: ScenarioConfig,
    past_crossings: CrossingLog | None = None,
    crossing_lanes: CrossingLanes | None = None,
) -> ConstraintReport:
    """All constraint families, reported in the order input, speed,
    lateral, rear-end; the worst violation across families is returned."""
    input_viol, speed_viol = bound_violations(plan, config)
    if min_speed(plan) > 0.0:
        lat_viol = lateral_violation(plan, lane, committed, config, past_crossings,
                                     crossing_lanes)
    else:
        # Position is not invertible, so crossing times are undefined; the
        # speed bound already rules the candidate out.
        lat_viol = 0.0
    pred = find_predecessor(plan, lane, committed)
    rear_viol = rear_end_violation(plan, pred, config)

    ordered = (
        (input_viol, Violated.INPUT),
        (speed_viol, Violated.SPEED),
        (lat_viol, Violated.LATERAL),
        (rear_viol, Violated.REAR_END),
    )
    worst = max(v for v, _ in ordered)
    if worst <= VIOLATION_SLACK:
        return ConstraintReport.ok()
    first = next(kind for v, kind in ordered if v > VIOLATION_SLACK)
    return ConstraintReport(False, worst, first)
