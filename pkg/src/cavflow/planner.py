"""Decision sequencing and the sequential minimum-exit-time solver.

Every vehicle's exit time is searched on the grid {t_lo, t_lo + eps, ...}
inside its feasible range; the first candidate whose cubic passes all
constraint checks wins.  Vehicles solve sequentially in a priority order
derived from their feasible ranges, each seeing the plans committed by the
vehicles before it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .constraints import CommittedPlan, check_all
from .errors import CavflowError, DataError
from .scenario import CoordGraph, ScenarioConfig, VehicleState, build_graph
from .trajectory import FeasibleRange, TrajectoryPlan, feasible_range, solve_coefficients


@dataclass(frozen=True)
class PlanningInstance:
    """Snapshot of all in-zone vehicles at one planning instant.

    Ranges hold absolute exit times.  `committed_crossings` carries the
    recorded conflict-point crossing times of vehicles already past a
    point, keyed by (vid, conflict id); the recording vehicle may have
    left the zone.  `crossing_lanes` tags each record with the lane it was
    made on so same-lane records are not misread as lateral constraints.
    """

    time_now: float
    states: tuple[VehicleState, ...]
    graph: CoordGraph
    ranges: Mapping[int, FeasibleRange]
    committed_crossings: Mapping[tuple[int, int], float] = field(default_factory=dict)
    crossing_lanes: Mapping[tuple[int, int], int] = field(default_factory=dict)

    def state_of(self, vid: int) -> VehicleState:
        for s in self.states:
            if s.vid == vid:
                return s
        raise CavflowError(f"vehicle {vid} not in instance")


@dataclass(frozen=True)
class SolveResult:
    vid: int
    t_exit: float
    plan: TrajectoryPlan
    feasible: bool
    iterations: int
    violation: float


def make_instance(
    time_now: float,
    states: Sequence[VehicleState],
    config: ScenarioConfig,
    committed_crossings: Mapping[tuple[int, int], float] | None = None,
    crossing_lanes: Mapping[tuple[int, int], int] | None = None,
) -> PlanningInstance:
    """Assemble graph and absolute-time feasible ranges for a state set.

    Lanes of recorded crossings made by vehicles still in the instance are
    filled in automatically; pass `crossing_lanes` for departed vehicles.
    """
    graph = build_graph(states, config)
    ranges = {}
    lane_of = {}
    for s in states:
        rel = feasible_range(s.pos, s.speed, config.exit_pos, config)
        ranges[s.vid] = FeasibleRange(time_now + rel.t_lo, time_now + rel.t_hi)
        lane_of[s.vid] = s.lane
    crossings = dict(committed_crossings or {})
    lanes = dict(crossing_lanes or {})
    for (vid, cpid) in crossings:
        if (vid, cpid) not in lanes and vid in lane_of:
            lanes[(vid, cpid)] = lane_of[vid]
    return PlanningInstance(
        time_now=time_now,
        states=tuple(states),
        graph=graph,
        ranges=ranges,
        committed_crossings=crossings,
        crossing_lanes=lanes,
    )


def decision_sequence(instance: PlanningInstance) -> list[int]:
    """Solve order: ascending (t_lo, t_hi) lexicographically, then vid.

    Vehicles that can leave soonest go first; among equals, the one with
    the tighter range; remaining ties fall back to entry order.
    """
    keys = {}
    for s in instance.states:
        r = instance.ranges.get(s.vid)
        if r is None:
            raise CavflowError(f"no feasible range for vehicle {s.vid}")
        keys[s.vid] = (r.t_lo, r.t_hi, s.vid)
    return sorted(keys, key=keys.__getitem__)


def lane_consistent_order(seq: Sequence[int], instance: PlanningInstance) -> list[int]:
    """Reorder a decision sequence so same-lane vehicles appear front-first.

    A follower can never physically pass its leader, so the leader's plan
    must be committed before the follower solves or the rear-end check has
    nothing to bind against.  The range-based priority almost always puts
    leaders first already; when it does not (a crawling leader ahead of a
    fast entrant), the lane's vehicles are permuted within the sequence
    slots the lane already occupies, leaving all other vehicles untouched.
    """
    by_lane: dict[int, list[int]] = {}
    for vid in seq:
        by_lane.setdefault(instance.state_of(vid).lane, []).append(vid)
    replacement: dict[int, int] = {}
    for lane_vids in by_lane.values():
        want = sorted(lane_vids, key=lambda v: -instance.state_of(v).pos)
        if want != lane_vids:
            replacement.update(zip(lane_vids, want))
    if not replacement:
        return list(seq)
    return [replacement.get(vid, vid) for vid in seq]


def candidate_grid_size(rng: FeasibleRange, epsilon: float) -> int:
    """Number of grid candidates in [t_lo, t_hi] anchored at t_lo."""
    return int((rng.t_hi - rng.t_lo) / epsilon + 1e-9) + 1


def solve_exit_time_scan(
    vid: int,
    instance: PlanningInstance,
    committed: Sequence[CommittedPlan],
    config: ScenarioConfig,
) -> SolveResult:
    """Ascending grid scan for the minimum feasible exit time.

    Starts at the range's lower end and steps by epsilon until a candidate
    passes every check.  If the whole grid fails, the candidate with the
    smallest violation (earliest on ties) is returned marked infeasible so
    downstream vehicles still see a trajectory.
    """
    state = instance.state_of(vid)
    rng = instance.ranges[vid]
    n = candidate_grid_size(rng, config.epsilon)

    best: tuple[float, float, TrajectoryPlan] | None = None
    iterations = 0
    for j in range(n):
        t_f = rng.t_lo + j * config.epsilon
        plan = solve_coefficients(instance.time_now, state.pos, state.speed,
                                  t_f, config.exit_pos)
        report = check_all(plan, state.lane, committed, config,
                           instance.committed_crossings, instance.crossing_lanes)
        iterations += 1
        if report.feasible:
            return SolveResult(vid, t_f, plan, True, iterations, 0.0)
        if best is None or report.worst_violation < best[0]:
            best = (report.worst_violation, t_f, plan)

    assert best is not None
    return SolveResult(vid, best[1], best[2], False, iterations, best[0])


def cooperative_replan(
    instance: PlanningInstance,
    config: ScenarioConfig,
    committed: Sequence[CommittedPlan] = (),
) -> dict[int, SolveResult]:
    """Solve all vehicles sequentially, committing each result in turn.

    `committed` seeds the context with plans of vehicles outside the
    instance (none in normal use).  One vehicle coming back infeasible
    does not abort the rest; its fallback plan is committed like any other.
    """
    order = lane_consistent_order(decision_sequence(instance), instance)
    committed_now = list(committed)
    results: dict[int, SolveResult] = {}
    for vid in order:
        res = solve_exit_time_scan(vid, instance, committed_now, config)
        results[vid] = res
        committed_now.append(CommittedPlan(vid, instance.state_of(vid).lane, res.plan))
    return results


# ---------------------------------------------------------------------------
# Snapshot file I/O (JSON; see docs/FORMATS.md).


def save_snapshot(instance: PlanningInstance, path: str) -> None:
    doc = {
        "time_now": instance.time_now,
        "vehicles": [
            {"vid": s.vid, "lane": s.lane, "pos": s.pos, "speed": s.speed,
             "entry_time": s.entry_time}
            for s in instance.states
        ],
        "crossings": [
            {"vid": vid, "conflict": cid, "time": t,
             **({"lane": instance.crossing_lanes[(vid, cid)]}
                if (vid, cid) in instance.crossing_lanes else {})}
            for (vid, cid), t in sorted(instance.committed_crossings.items())
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_snapshot(path: str, config: ScenarioConfig) -> PlanningInstance:
    """Read a planning snapshot; graph and ranges are derived on load."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"snapshot {path}: {exc}") from exc
    try:
        time_now = float(doc["time_now"])
        states = []
        for i, entry in enumerate(doc["vehicles"]):
            try:
                states.append(VehicleState(
                    vid=int(entry["vid"]), lane=int(entry["lane"]),
                    pos=float(entry["pos"]), speed=float(entry["speed"]),
                    entry_time=float(entry.get("entry_time", 0.0))))
            except (TypeError, KeyError, ValueError) as exc:
                raise DataError(f"snapshot vehicles[{i}]: {exc}") from exc
        crossings = {}
        crossing_lanes = {}
        for i, entry in enumerate(doc.get("crossings", [])):
            try:
                key = (int(entry["vid"]), int(entry["conflict"]))
                crossings[key] = float(entry["time"])
                if "lane" in entry:
                    crossing_lanes[key] = int(entry["lane"])
            except (TypeError, KeyError, ValueError) as exc:
                raise DataError(f"snapshot crossings[{i}]: {exc}") from exc
    except (TypeError, KeyError) as exc:
        raise DataError(f"snapshot {path}: missing field {exc}") from exc
    if not states:
        raise DataError(f"snapshot {path}: no vehicles")
    return make_instance(time_now, states, config, crossings, crossing_lanes)
