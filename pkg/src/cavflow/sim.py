"""Discrete-time closed-loop traffic simulation.

Vehicles arrive as a per-lane Poisson process, are admitted when legal
spacing behind their lane predecessor is achievable, follow their committed
cubic plans exactly (no execution noise), and are re-planned either at
every step or once on entry.  A continuous audit re-measures the executed
lateral and rear-end gaps independently of the planner, so any safety
regression shows up as an explicit flag rather than a silent assumption.

All randomness flows from one seeded PCG64 generator; two runs with the
same seed produce bit-identical metrics.
"""

from __future__ import annotations

import csv
import json
import time as _time
from dataclasses import dataclass, field

import numpy as np

from .constraints import CommittedPlan, PastTrack, check_all, rear_end_violation
from .errors import CavflowError, ConfigurationError, DegenerateHorizonError, OrderingError
from .gnn import DatasetRecord, RecordVehicle, SageModel, predict_exit_times, write_records
from .planner import (
    PlanningInstance,
    SolveResult,
    decision_sequence,
    lane_consistent_order,
    make_instance,
    solve_exit_time_scan,
)
from .scenario import ScenarioConfig, VehicleState
from .trajectory import TrajectoryPlan, crossing_time, evaluate_clamped, solve_coefficients
from .warmstart import solve_warmstart

SOLVERS = ("baseline", "gnn")
REPLAN_MODES = ("every_step", "entry_only")

_LATERAL_AUDIT_TOL = 1e-5   # s; two bisected crossing times
_REAR_AUDIT_TOL = 1e-6      # m; exact when delta_rear is a step multiple


@dataclass(frozen=True)
class ArrivalModel:
    """Poisson arrivals split across lanes with uniform entry speeds."""

    total_rate: float                                  # vehicles/hour
    lane_split: tuple[float, ...] | None = None        # None = uniform
    entry_speed_range: tuple[float, float] = (8.0, 14.0)
    seed: int = 0

    def validate(self, config: ScenarioConfig) -> None:
        if self.total_rate <= 0.0:
            raise ConfigurationError("total_rate: must be positive")
        if self.lane_split is not None:
            if len(self.lane_split) != config.n_lanes:
                raise ConfigurationError("lane_split: one entry per lane required")
            if any(p < 0 for p in self.lane_split) or abs(sum(self.lane_split) - 1.0) > 1e-9:
                raise ConfigurationError("lane_split: must be nonnegative and sum to 1")
        lo, hi = self.entry_speed_range
        if not (config.v_min <= lo <= hi <= config.v_max):
            raise ConfigurationError("entry_speed_range: must lie within [v_min, v_max]")

    def split(self, config: ScenarioConfig) -> tuple[float, ...]:
        if self.lane_split is not None:
            return self.lane_split
        return tuple(1.0 / config.n_lanes for _ in range(config.n_lanes))


@dataclass
class SimMetrics:
    """Outcome of one run.  Wall-clock fields are measurement artifacts and
    are excluded from the deterministic metrics file."""

    travel_times: list[float] = field(default_factory=list)
    vehicles: list[dict] = field(default_factory=list)
    per_step_eval_counts: list[int] = field(default_factory=list)
    per_step_solve_counts: list[int] = field(default_factory=list)
    per_step_solver_seconds: list[float] = field(default_factory=list)
    audit_flags: list[str] = field(default_factory=list)
    gaps: list[float] = field(default_factory=list)
    arrivals: int = 0
    admitted: int = 0
    retired: int = 0
    in_zone_end: int = 0
    queued_end: int = 0
    infeasible_solves: int = 0
    replans_kept: int = 0

    @property
    def mean_travel_time(self) -> float:
        return float(np.mean(self.travel_times)) if self.travel_times else 0.0

    @property
    def std_travel_time(self) -> float:
        return float(np.std(self.travel_times)) if self.travel_times else 0.0

    @property
    def total_evals(self) -> int:
        return int(sum(self.per_step_eval_counts))

    @property
    def total_solves(self) -> int:
        return int(sum(self.per_step_solve_counts))

    def mean_evals_per_solve(self) -> float:
        solves = self.total_solves
        return self.total_evals / solves if solves else 0.0

    def to_dict(self, include_timing: bool = False) -> dict:
        doc = {
            "arrivals": self.arrivals,
            "admitted": self.admitted,
            "retired": self.retired,
            "in_zone_end": self.in_zone_end,
            "queued_end": self.queued_end,
            "infeasible_solves": self.infeasible_solves,
            "replans_kept": self.replans_kept,
            "mean_travel_time": self.mean_travel_time,
            "std_travel_time": self.std_travel_time,
            "total_constraint_evals": self.total_evals,
            "total_solves": self.total_solves,
            "mean_evals_per_solve": self.mean_evals_per_solve(),
            "mean_gap": float(np.mean(self.gaps)) if self.gaps else 0.0,
            "audit_flags": list(self.audit_flags),
            "travel_times": list(self.travel_times),
        }
        if include_timing:
            doc["per_step_solver_seconds"] = list(self.per_step_solver_seconds)
        return doc


class _Vehicle:
    __slots__ = ("vid", "lane", "entry_time", "speed0", "pos", "speed",
                 "plan", "crossed", "history", "_dt")

    def __init__(self, vid: int, lane: int, entry_time: float, speed: float, dt: float):
        self.vid = vid
        self.lane = lane
        self.entry_time = entry_time
        self.speed0 = speed
        self.pos = 0.0
        self.speed = speed
        self.plan: TrajectoryPlan | None = None
        self.crossed: set[int] = set()
        self.history: list[float] = [0.0]  # positions at entry_time + k*dt
        self._dt = dt

    def state(self) -> VehicleState:
        return VehicleState(self.vid, self.lane, self.pos, self.speed, self.entry_time)

    def committed(self) -> CommittedPlan:
        """Current plan plus the executed track, so lagged spacing queries
        resolve against what actually happened rather than the epoch clamp."""
        assert self.plan is not None
        return CommittedPlan(self.vid, self.lane, self.plan,
                             past=PastTrack(self.entry_time, self._dt,
                                            np.array(self.history)))

    def hist_pos(self, t: float, dt: float) -> float:
        """Executed position at time t (linear interpolation between steps)."""
        x = (t - self.entry_time) / dt
        j = int(np.floor(x))
        j = max(0, min(j, len(self.history) - 1))
        if j >= len(self.history) - 1:
            return self.history[-1]
        frac = x - j
        return self.history[j] * (1.0 - frac) + self.history[j + 1] * frac


class _Engine:
    def __init__(self, config: ScenarioConfig, arrival: ArrivalModel,
                 solver: str, replan: str, model: SageModel | None,
                 record_gap: bool = False, adopt_always: bool = False):
        if solver not in SOLVERS:
            raise ConfigurationError(f"solver: must be one of {SOLVERS}")
        if replan not in REPLAN_MODES:
            raise ConfigurationError(f"replan: must be one of {REPLAN_MODES}")
        if solver == "gnn" and model is None:
            raise ConfigurationError("solver 'gnn' requires a trained model")
        arrival.validate(config)
        if arrival.seed is None:
            raise ConfigurationError("arrival seed must be set explicitly")
        self.config = config
        self.arrival = arrival
        self.solver = solver
        self.replan = replan
        self.model = model
        self.record_gap = record_gap
        self.adopt_always = adopt_always
        self.rng = np.random.default_rng(arrival.seed)
        self.dt = config.dt_sim
        self.vehicles: dict[int, _Vehicle] = {}
        self.entry_queues: dict[int, list[float]] = {ln: [] for ln in config.lane_ids()}
        self.crossings: dict[tuple[int, int], float] = {}
        self.crossing_lanes: dict[tuple[int, int], int] = {}
        self.conflict_log: dict[int, list[tuple[int, int, float]]] = {
            cp.id: [] for cp in config.conflicts}
        self.next_vid = 0
        self.metrics = SimMetrics()
        self.dataset_sink = None     # callable(instance, results) or None
        self.traj_writer = None
        self._rear_tol = self._rear_audit_tol()

    def _rear_audit_tol(self) -> float:
        steps = self.config.delta_rear / self.dt
        if abs(steps - round(steps)) < 1e-9:
            return _REAR_AUDIT_TOL
        # Linear interpolation of a cubic between samples
        return _REAR_AUDIT_TOL + self.config.u_max * self.dt * self.dt / 4.0

    # -- arrivals ----------------------------------------------------------

    def sample_arrivals(self) -> None:
        split = self.arrival.split(self.config)
        lo, hi = self.arrival.entry_speed_range
        per_sec = self.arrival.total_rate / 3600.0
        for lane, frac in zip(self.config.lane_ids(), split):
            lam = per_sec * frac * self.dt
            count = int(self.rng.poisson(lam)) if lam > 0 else 0
            for _ in range(count):
                self.entry_queues[lane].append(float(self.rng.uniform(lo, hi)))
                self.metrics.arrivals += 1

    def admit(self, now: float) -> list[_Vehicle]:
        admitted = []
        for lane in self.config.lane_ids():
            queue = self.entry_queues[lane]
            while queue and self._can_admit(lane, queue[0], now):
                speed = queue.pop(0)
                veh = _Vehicle(self.next_vid, lane, now, speed, self.dt)
                self.next_vid += 1
                self.vehicles[veh.vid] = veh
                self.metrics.admitted += 1
                admitted.append(veh)
        return admitted

    def _can_admit(self, lane: int, speed: float, now: float) -> bool:
        """Admit only if the slowest bound-feasible cubic keeps legal
        spacing behind the lane's rearmost vehicle."""
        pred = None
        for veh in self.vehicles.values():
            if veh.lane == lane and (pred is None or veh.pos < pred.pos):
                pred = veh
        if pred is None:
            return True
        if pred.plan is None or pred.pos <= self.config.d_min:
            return False
        dist = self.config.exit_pos
        t_slow = 3.0 * dist / (2.0 * self.config.v_min + speed)
        try:
            plan = solve_coefficients(now, 0.0, speed, now + t_slow, dist)
            viol = rear_end_violation(plan, pred.committed(), self.config)
        except (DegenerateHorizonError, OrderingError):
            return False
        return viol <= 1e-9

    # -- planning ----------------------------------------------------------

    def _instance_for(self, now: float, vehicles: list[_Vehicle]) -> PlanningInstance:
        return make_instance(now, [v.state() for v in vehicles], self.config,
                             self.crossings, self.crossing_lanes)

    def _replan_well_posed(self, veh: _Vehicle) -> bool:
        """True while the bound-feasible exit-duration window of the cubic
        family is wide enough for the scan grid to resolve.

        Near the exit that window shrinks below the grid step and a fresh
        solve can only fail; the vehicle then rides out its committed plan.
        """
        dist = self.config.exit_pos - veh.pos
        v0 = veh.speed
        if dist <= 0.0:
            return False
        # Exit durations where the initial acceleration hits its bounds.
        t_fast = (-3.0 * v0 + np.sqrt(9.0 * v0 * v0 + 12.0 * self.config.u_max * dist)) \
            / (2.0 * self.config.u_max)
        disc = 9.0 * v0 * v0 + 12.0 * self.config.u_min * dist
        t_slow = np.inf if disc < 0.0 else \
            (-3.0 * v0 + np.sqrt(disc)) / (2.0 * self.config.u_min)
        # Exit durations where the exit speed stays within its bounds.
        lo = max(t_fast, 3.0 * dist / (2.0 * self.config.v_max + v0))
        hi = min(t_slow, 3.0 * dist / (2.0 * self.config.v_min + v0))
        return hi - lo >= 1.5 * self.config.epsilon

    def plan_step(self, now: float, newly_admitted: list[_Vehicle]) -> None:
        if self.replan == "every_step":
            # Vehicles exiting within the step, or too close to the exit
            # for the grid, keep their plans; they still constrain everyone
            # else through the committed set.
            replannable = [v for v in self.vehicles.values()
                           if v.plan is None
                           or (v.plan.t_exit > now + self.dt and self._replan_well_posed(v))]
        else:
            replannable = newly_admitted
        if not replannable:
            self.metrics.per_step_eval_counts.append(0)
            self.metrics.per_step_solve_counts.append(0)
            self.metrics.per_step_solver_seconds.append(0.0)
            return
        fixed = [v for v in self.vehicles.values() if v not in replannable]

        # The instance spans every replannable vehicle plus, for entry-only
        # planning, the rest of the zone so predictions see full context.
        if self.replan == "every_step":
            instance = self._instance_for(now, replannable)
        else:
            instance = self._instance_for(now, replannable + fixed)
        committed = [v.committed() for v in fixed if v.plan is not None]
        solve_vids = {v.vid for v in replannable}

        old_plans = {v.vid: v.plan for v in replannable if v.plan is not None}

        t0 = _time.perf_counter()
        results, adopted, extra_evals = self._solve_instance(
            instance, committed, solve_vids, old_plans)
        elapsed = _time.perf_counter() - t0

        evals = sum(r.iterations for r in results.values()) + extra_evals
        infeasible = sum(1 for r in results.values()
                         if not r.feasible and r.vid not in old_plans)
        kept = sum(1 for vid in results if adopted[vid] is not results[vid].plan)
        self.metrics.per_step_eval_counts.append(evals)
        self.metrics.per_step_solve_counts.append(len(results))
        self.metrics.per_step_solver_seconds.append(elapsed)
        self.metrics.infeasible_solves += infeasible
        self.metrics.replans_kept += kept

        for vid in results:
            self.vehicles[vid].plan = adopted[vid]

        if self.dataset_sink is not None and all(r.feasible for r in results.values()):
            self.dataset_sink(instance, results)

    def _solve_instance(self, instance: PlanningInstance,
                        committed: list[CommittedPlan],
                        solve_vids: set[int] | None = None,
                        old_plans: dict[int, TrajectoryPlan] | None = None,
                        ) -> tuple[dict[int, SolveResult], dict[int, TrajectoryPlan], int]:
        order = lane_consistent_order(decision_sequence(instance), instance)
        if solve_vids is not None:
            order = [vid for vid in order if vid in solve_vids]
        old_plans = old_plans or {}
        seeds = None
        if self.solver == "gnn":
            seeds = predict_exit_times(self.model, instance, self.config)
        committed_now = list(committed)
        results: dict[int, SolveResult] = {}
        adopted: dict[int, TrajectoryPlan] = {}
        extra_evals = 0
        for vid in order:
            if seeds is None:
                res = solve_exit_time_scan(vid, instance, committed_now, self.config)
            else:
                rng = instance.ranges[vid]
                seed = min(max(seeds[vid], rng.t_lo), rng.t_hi)
                res = solve_warmstart(vid, instance, committed_now, seed, self.config)
                if self.record_gap:
                    ref = solve_exit_time_scan(vid, instance, committed_now, self.config)
                    if res.feasible and ref.feasible:
                        self.metrics.gaps.append(res.t_exit - ref.t_exit)
            results[vid] = res
            # Replanning must never make a vehicle worse off: a fresh plan
            # is adopted only when it beats the committed exit time (the
            # scan grid re-anchors every step, so a re-solve can come back
            # a fraction of a step later than what the vehicle already
            # holds); otherwise the committed plan stands, provided it is
            # still consistent with the plans committed this cycle.
            plan = res.plan if res.feasible else None
            old = None if (self.adopt_always and plan is not None) else old_plans.get(vid)
            if old is not None and (plan is None or old.t_exit <= res.t_exit + 1e-12):
                lane = instance.state_of(vid).lane
                report = check_all(old, lane, committed_now, self.config,
                                   instance.committed_crossings,
                                   instance.crossing_lanes)
                extra_evals += 1
                if report.feasible:
                    plan = old
            if plan is None:
                plan = res.plan  # infeasible fallback with no usable old plan
            adopted[vid] = plan
            committed_now.append(
                CommittedPlan(vid, instance.state_of(vid).lane, plan,
                              past=self._past_of(vid)))
        return results, adopted, extra_evals

    def _past_of(self, vid: int) -> PastTrack | None:
        veh = self.vehicles.get(vid)
        if veh is None:
            return None
        return PastTrack(veh.entry_time, self.dt, np.array(veh.history))

    # -- execution ---------------------------------------------------------

    def advance(self, now: float) -> None:
        t_new = now + self.dt
        for veh in list(self.vehicles.values()):
            plan = veh.plan
            if plan is None:
                raise CavflowError(f"vehicle {veh.vid} advanced without a plan")
            old_pos = veh.pos
            if plan.t_exit <= t_new:
                self._record_crossings(veh, old_pos, self.config.exit_pos)
                self.metrics.retired += 1
                travel = plan.t_exit - veh.entry_time
                self.metrics.travel_times.append(float(travel))
                self.metrics.vehicles.append({
                    "vid": veh.vid, "lane": veh.lane,
                    "entry_time": veh.entry_time,
                    "exit_time": plan.t_exit,
                    "travel_time": float(travel),
                    "entry_speed": veh.speed0,
                })
                del self.vehicles[veh.vid]
                continue
            pos, speed, accel = evaluate_clamped(plan, t_new)
            self._record_crossings(veh, old_pos, pos)
            veh.pos, veh.speed = float(pos), float(speed)
            veh.history.append(veh.pos)
            if self.traj_writer is not None:
                self.traj_writer.writerow(
                    [f"{t_new:.3f}", veh.vid, veh.lane,
                     f"{pos:.6f}", f"{speed:.6f}", f"{accel:.6f}"])

    def _record_crossings(self, veh: _Vehicle, old_pos: float, new_pos: float) -> None:
        for cp in self.config.conflicts_of(veh.lane):
            if cp.id in veh.crossed:
                continue
            pos_cp = cp.pos_on(veh.lane)
            if old_pos < pos_cp <= new_pos:
                tau = crossing_time(veh.plan, pos_cp)
                veh.crossed.add(cp.id)
                self.crossings[(veh.vid, cp.id)] = tau
                self.crossing_lanes[(veh.vid, cp.id)] = veh.lane
                self._audit_lateral(cp.id, veh.vid, veh.lane, tau)
                self.conflict_log[cp.id].append((veh.vid, veh.lane, tau))

    # -- audit -------------------------------------------------------------

    def _audit_lateral(self, cpid: int, vid: int, lane: int, tau: float) -> None:
        for other_vid, other_lane, other_tau in self.conflict_log[cpid]:
            if other_lane == lane:
                continue
            gap = abs(tau - other_tau)
            if gap < self.config.delta_lateral - _LATERAL_AUDIT_TOL:
                self.metrics.audit_flags.append(
                    f"lateral: conflict {cpid} vehicles {other_vid},{vid} "
                    f"gap {gap:.6f} < {self.config.delta_lateral}")

    def audit_rear_end(self, t_now: float) -> None:
        by_lane: dict[int, list[_Vehicle]] = {}
        for veh in self.vehicles.values():
            by_lane.setdefault(veh.lane, []).append(veh)
        for members in by_lane.values():
            members.sort(key=lambda v: -v.pos)
            for lead, follow in zip(members, members[1:]):
                q = max(t_now - self.config.delta_rear, lead.entry_time)
                gap = lead.hist_pos(q, self.dt) - follow.pos
                if gap < self.config.d_min - self._rear_tol:
                    self.metrics.audit_flags.append(
                        f"rear_end: lane {lead.lane} vehicles {lead.vid},{follow.vid} "
                        f"gap {gap:.6f} < {self.config.d_min} at t={t_now:.2f}")

    # -- main loop ---------------------------------------------------------

    def run(self, duration: float) -> SimMetrics:
        n_steps = int(round(duration / self.dt))
        for k in range(n_steps):
            now = k * self.dt
            self.sample_arrivals()
            newly = self.admit(now)
            self.plan_step(now, newly)
            self.advance(now)
            self.audit_rear_end(now + self.dt)
        self.metrics.in_zone_end = len(self.vehicles)
        self.metrics.queued_end = sum(len(q) for q in self.entry_queues.values())
        return self.metrics


def run(
    config: ScenarioConfig,
    arrival: ArrivalModel,
    duration: float,
    solver: str = "baseline",
    replan: str = "every_step",
    model: SageModel | None = None,
    traj_log: str | None = None,
    record_gap: bool = False,
) -> SimMetrics:
    """Simulate `duration` seconds of traffic and return the metrics."""
    engine = _Engine(config, arrival, solver, replan, model, record_gap)
    if traj_log is None:
        return engine.run(duration)
    with open(traj_log, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "vid", "lane", "pos", "speed", "accel"])
        engine.traj_writer = writer
        return engine.run(duration)


def generate_dataset(
    config: ScenarioConfig,
    arrival: ArrivalModel,
    duration: float,
    out_path: str,
    append: bool = False,
    first_instance_id: int = 0,
) -> int:
    """Run the ascending-scan solver with per-step replanning and append one
    record per step on which every vehicle's solve came back feasible.

    Fresh solutions are always adopted here (no keep-if-not-better), so a
    record's labels and the plans its vehicles actually coordinated against
    are one and the same: rebuilding each vehicle's cubic from its label
    reproduces a mutually feasible plan set exactly.
    """
    engine = _Engine(config, arrival, "baseline", "every_step", None,
                     adopt_always=True)
    records: list[DatasetRecord] = []
    counter = [first_instance_id]

    def sink(instance: PlanningInstance, results: dict[int, SolveResult]) -> None:
        vehicles = tuple(
            RecordVehicle(
                vid=s.vid, pos=s.pos, speed=s.speed, lane=s.lane,
                t_lo=instance.ranges[s.vid].t_lo - instance.time_now,
                t_hi=instance.ranges[s.vid].t_hi - instance.time_now,
                label=results[s.vid].t_exit - instance.time_now,
            )
            for s in instance.states)
        records.append(DatasetRecord(counter[0], vehicles, instance.graph.edges))
        counter[0] += 1

    engine.dataset_sink = sink
    engine.run(duration)
    return write_records(records, out_path, append=append)


def bench(
    config: ScenarioConfig,
    rates: list[float],
    seeds: list[int],
    duration: float,
    model: SageModel | None = None,
    record_gap: bool = True,
    arms: list[tuple[str, str]] | None = None,
) -> list[dict]:
    """Run the full comparison matrix and return one row per cell.

    Default arms: both solvers crossed with both replanning modes; the
    gnn arms require a model.
    """
    if arms is None:
        arms = [("baseline", "entry_only"), ("baseline", "every_step"),
                ("gnn", "entry_only"), ("gnn", "every_step")]
    rows = []
    for rate in rates:
        for seed in seeds:
            for solver, replan in arms:
                if solver == "gnn" and model is None:
                    raise ConfigurationError("bench: gnn arm requires a model")
                arrival = ArrivalModel(total_rate=rate, seed=seed)
                metrics = run(config, arrival, duration, solver=solver,
                              replan=replan, model=model,
                              record_gap=record_gap and solver == "gnn")
                wall = np.array(metrics.per_step_solver_seconds)
                solved_steps = wall[np.array(metrics.per_step_solve_counts) > 0]
                rows.append({
                    "rate": rate,
                    "seed": seed,
                    "solver": solver,
                    "replan": replan,
                    "retired": metrics.retired,
                    "mean_travel_time": metrics.mean_travel_time,
                    "std_travel_time": metrics.std_travel_time,
                    "mean_evals_per_solve": metrics.mean_evals_per_solve(),
                    "mean_step_wall": float(np.mean(solved_steps)) if len(solved_steps) else 0.0,
                    "p95_step_wall": float(np.percentile(solved_steps, 95)) if len(solved_steps) else 0.0,
                    "mean_gap": float(np.mean(metrics.gaps)) if metrics.gaps else 0.0,
                    "audit_flags": len(metrics.audit_flags),
                    "infeasible_solves": metrics.infeasible_solves,
                })
    return rows


def write_metrics_jsonl(metrics: SimMetrics, path: str) -> None:
    """Deterministic metrics file: summary line then one line per vehicle."""
    with open(path, "w", encoding="utf-8") as fh:
        summary = {"kind": "summary", **metrics.to_dict(include_timing=False)}
        summary.pop("travel_times")
        fh.write(json.dumps(summary, sort_keys=True) + "\n")
        for veh in metrics.vehicles:
            fh.write(json.dumps({"kind": "vehicle", **veh}, sort_keys=True) + "\n")


def write_timing_json(metrics: SimMetrics, path: str) -> None:
    """Wall-clock sidecar; not covered by the determinism contract."""
    doc = {
        "per_step_solver_seconds": metrics.per_step_solver_seconds,
        "mean_step_wall": float(np.mean(metrics.per_step_solver_seconds))
        if metrics.per_step_solver_seconds else 0.0,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
        fh.write("\n")
