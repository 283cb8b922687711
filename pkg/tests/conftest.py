import numpy as np
import pytest

from cavflow import VehicleState, default_scenario
from cavflow.planner import make_instance


@pytest.fixture(scope="session")
def config():
    return default_scenario()


def random_states(rng, config, max_vehicles=8):
    """Physically plausible vehicle set: same-lane gaps wide enough that a
    legal following plan exists, speeds strictly inside the band."""
    n = int(rng.integers(1, max_vehicles + 1))
    states = []
    lane_fronts = {}
    vid = 0
    for _ in range(n):
        lane = int(rng.choice(config.lane_ids()))
        speed = float(rng.uniform(config.v_min + 0.5, config.v_max - 0.5))
        if lane in lane_fronts:
            pos = lane_fronts[lane] - config.d_min - speed * config.delta_rear \
                - float(rng.uniform(5.0, 40.0))
        else:
            pos = float(rng.uniform(0.0, config.exit_pos - 30.0))
        if pos < 0.0:
            continue
        states.append(VehicleState(vid, lane, pos, speed))
        lane_fronts[lane] = pos
        vid += 1
    if not states:
        states.append(VehicleState(0, int(rng.choice(config.lane_ids())),
                                   float(rng.uniform(0, 200)),
                                   float(rng.uniform(5, 15))))
    return states


def random_instance(rng, config, max_vehicles=8):
    """Random planning snapshot; vehicles already past a conflict point get
    a consistent recorded crossing time."""
    states = random_states(rng, config, max_vehicles)
    time_now = float(rng.uniform(0.0, 50.0))
    crossings = {}
    for s in states:
        for cp in config.conflicts_of(s.lane):
            pos_cp = cp.pos_on(s.lane)
            if s.pos > pos_cp:
                crossings[(s.vid, cp.id)] = time_now - (s.pos - pos_cp) / s.speed
    return make_instance(time_now, states, config, crossings)


def exhaustive_scan(vid, instance, committed, config):
    """Independent oracle for the ascending exit-time search: walk the grid
    from the bottom, checking every candidate until the first pass."""
    from cavflow.constraints import check_all
    from cavflow.trajectory import solve_coefficients

    state = instance.state_of(vid)
    rng = instance.ranges[vid]
    n = int((rng.t_hi - rng.t_lo) / config.epsilon + 1e-9) + 1
    best = None
    for j in range(n):
        t_f = rng.t_lo + j * config.epsilon
        plan = solve_coefficients(instance.time_now, state.pos, state.speed,
                                  t_f, config.exit_pos)
        report = check_all(plan, state.lane, committed, config,
                           instance.committed_crossings, instance.crossing_lanes)
        if report.feasible:
            return t_f, j + 1, True, 0.0
        if best is None or report.worst_violation < best[0]:
            best = (report.worst_violation, t_f)
    return best[1], n, False, best[0]


def gradcheck_worst_error(records, model, delta=1.0, eps=1e-6):
    """Worst relative deviation between analytic gradients and central
    finite differences, over every parameter.

    Central differences are only valid where the loss is smooth, so the
    probe point is required to sit clear of the rectifier and Huber kinks;
    callers pick a draw that satisfies this.
    """
    from cavflow.gnn import (
        TrainSettings, _compile_record, _degrees, _forward_arrays, _stack,
        loss_and_grads, sigmoid,
    )

    settings = TrainSettings(hidden_dim=model.hidden_dim,
                             n_layers=len(model.layers))
    batch = _stack([_compile_record(r, settings) for r in records])

    # Smoothness guard: no pre-activation near zero, no error near the
    # Huber breakpoint, at a scale comfortably above the probe step.
    deg = _degrees(batch.x.shape[0], batch.dst)
    z, _, cache = _forward_arrays(model, batch.x, batch.src, batch.dst, deg,
                                  keep_cache=True)
    for _, zk in cache:
        assert np.min(np.abs(zk)) > 1e-3, "probe point touches a rectifier kink"
    pred = batch.t_lo + (batch.t_hi - batch.t_lo) * sigmoid(z)
    assert np.min(np.abs(np.abs(pred - batch.labels) - delta)) > 1e-3, \
        "probe point touches the Huber breakpoint"

    _, grads = loss_and_grads(model, batch, delta)

    def loss_only():
        return loss_and_grads(model, batch, delta)[0]

    worst = 0.0
    arrays = []
    for k, layer in enumerate(model.layers):
        arrays.append((layer.W, f"W{k}"))
        arrays.append((layer.b, f"b{k}"))
    arrays.append((model.head_w, "head_w"))
    for arr, name in arrays:
        g = np.asarray(grads[name])
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + eps
            up = loss_only()
            arr[idx] = orig - eps
            down = loss_only()
            arr[idx] = orig
            fd = (up - down) / (2 * eps)
            worst = max(worst, abs(fd - g[idx]) / max(abs(fd), abs(g[idx]), 1e-8))
    orig = model.head_b
    model.head_b = orig + eps
    up = loss_only()
    model.head_b = orig - eps
    down = loss_only()
    model.head_b = orig
    fd = (up - down) / (2 * eps)
    worst = max(worst, abs(fd - grads["head_b"]) / max(abs(fd), abs(grads["head_b"]), 1e-8))
    return worst


def replay_joint_safety(instance, results, config):
    """Re-check every lateral pair and every rear-end pair of feasible
    plans, plus each feasible plan's own bounds; returns violations found.

    Rear-end pairs are same-lane immediate neighbors over the full vehicle
    set (an infeasible vehicle between two feasible ones separates them:
    there is no direct spacing constraint across it, and its own fallback
    plan is violating by definition, so pairs involving it are skipped).
    """
    from cavflow.constraints import (
        VIOLATION_SLACK, CommittedPlan, check_bounds, lateral_violation,
        rear_end_violation,
    )

    feasible = {vid for vid, res in results.items() if res.feasible}
    committed = {
        vid: CommittedPlan(vid, instance.state_of(vid).lane, results[vid].plan)
        for vid in feasible
    }
    problems = []

    for vid in feasible:
        state = instance.state_of(vid)
        report = check_bounds(results[vid].plan, config)
        if not report.feasible:
            problems.append((vid, "bounds", report.worst_violation))
        others = [cp for other, cp in committed.items() if other != vid]
        lat = lateral_violation(results[vid].plan, state.lane, others, config,
                                instance.committed_crossings,
                                instance.crossing_lanes)
        if lat > VIOLATION_SLACK:
            problems.append((vid, "lateral", lat))

    by_lane = {}
    for s in instance.states:
        by_lane.setdefault(s.lane, []).append(s)
    for members in by_lane.values():
        members.sort(key=lambda s: -s.pos)
        for lead, follow in zip(members, members[1:]):
            if lead.vid not in feasible or follow.vid not in feasible:
                continue
            viol = rear_end_violation(results[follow.vid].plan,
                                      committed[lead.vid], config)
            if viol > VIOLATION_SLACK:
                problems.append(((lead.vid, follow.vid), "rear_end", viol))
    return problems
