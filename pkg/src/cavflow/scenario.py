"""Intersection geometry, vehicle limits, and the coordination graph.

The scenario is a single-lane unsignalized crossing: every approach has one
straight-through lane of identical length, and lanes from different roads
intersect at conflict points near the zone exit.  All quantities are SI
(meters, seconds, m/s, m/s^2).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

from .errors import ConfigurationError


@dataclass(frozen=True)
class Lane:
    """One approach lane, measured from the control-zone entry."""

    id: int
    stop_line_pos: float
    label: str = ""


@dataclass(frozen=True)
class ConflictPoint:
    """Crossing of two lanes; positions are along each lane separately."""

    id: int
    lane_a: int
    lane_b: int
    pos_on_a: float
    pos_on_b: float

    def involves(self, lane: int) -> bool:
        return lane == self.lane_a or lane == self.lane_b

    def pos_on(self, lane: int) -> float:
        if lane == self.lane_a:
            return self.pos_on_a
        if lane == self.lane_b:
            return self.pos_on_b
        raise ConfigurationError(f"conflict point {self.id} does not touch lane {lane}")


@dataclass(frozen=True)
class ScenarioConfig:
    """Physical limits, safety gaps, geometry, and solver step sizes.

    Immutable after construction; safe to share across threads.
    """

    entry_pos: float
    exit_pos: float
    v_min: float
    v_max: float
    u_min: float
    u_max: float
    delta_lateral: float   # min crossing-time gap at a shared conflict point, s
    delta_rear: float      # rear-end time headway, s
    d_min: float           # standstill spacing, m
    lanes: tuple[Lane, ...]
    conflicts: tuple[ConflictPoint, ...]
    epsilon: float         # exit-time scan step, s
    dt_check: float        # constraint sampling step, s
    dt_sim: float          # simulation step, s

    def __post_init__(self) -> None:
        validate_config(self)

    @property
    def n_lanes(self) -> int:
        return len(self.lanes)

    def lane_ids(self) -> list[int]:
        return [ln.id for ln in self.lanes]

    def lane_index(self, lane_id: int) -> int:
        for i, ln in enumerate(self.lanes):
            if ln.id == lane_id:
                return i
        raise ConfigurationError(f"unknown lane id {lane_id}")

    def conflicts_of(self, lane_id: int) -> list[ConflictPoint]:
        return [cp for cp in self.conflicts if cp.involves(lane_id)]

    def conflict_between(self, lane_a: int, lane_b: int) -> ConflictPoint | None:
        pair = {lane_a, lane_b}
        for cp in self.conflicts:
            if {cp.lane_a, cp.lane_b} == pair:
                return cp
        return None


@dataclass(frozen=True)
class VehicleState:
    """Kinematic state of one vehicle at a planning instant.

    Vehicle ids are assigned in control-zone entry order.
    """

    vid: int
    lane: int
    pos: float
    speed: float
    entry_time: float = 0.0


@dataclass(frozen=True)
class CoordGraph:
    """Undirected coordination graph over in-zone vehicles.

    An edge joins two vehicles that share a lateral or rear-end safety
    constraint.  Edges are stored as sorted (low, high) vid pairs.
    """

    nodes: tuple[int, ...]
    edges: tuple[tuple[int, int], ...]

    def neighbors(self, vid: int) -> list[int]:
        out = []
        for a, b in self.edges:
            if a == vid:
                out.append(b)
            elif b == vid:
                out.append(a)
        return out


def validate_config(config: ScenarioConfig) -> None:
    """Check every ScenarioConfig invariant; raise naming the first violated key."""
    if not config.exit_pos > config.entry_pos:
        raise ConfigurationError("exit_pos: must exceed entry_pos")
    if not (0.0 < config.v_min < config.v_max):
        raise ConfigurationError("v_min: need 0 < v_min < v_max")
    if not (config.u_min < 0.0 < config.u_max):
        raise ConfigurationError("u_min: need u_min < 0 < u_max")
    for key in ("delta_lateral", "delta_rear", "d_min"):
        if not getattr(config, key) > 0.0:
            raise ConfigurationError(f"{key}: must be positive")
    if not config.epsilon > 0.0:
        raise ConfigurationError("epsilon: must be positive")
    if not (0.0 < config.dt_check <= config.epsilon):
        raise ConfigurationError("dt_check: need 0 < dt_check <= epsilon")
    if not config.dt_sim > 0.0:
        raise ConfigurationError("dt_sim: must be positive")

    seen_lane_ids = set()
    for ln in config.lanes:
        if ln.id in seen_lane_ids:
            raise ConfigurationError(f"lanes: duplicate lane id {ln.id}")
        seen_lane_ids.add(ln.id)
        if not (0.0 < ln.stop_line_pos < config.exit_pos):
            raise ConfigurationError(f"lanes[{ln.id}].stop_line_pos: must lie inside the zone")

    seen_pairs = set()
    for cp in config.conflicts:
        if cp.lane_a == cp.lane_b:
            raise ConfigurationError(f"conflicts[{cp.id}]: lane_a == lane_b")
        for lane_id in (cp.lane_a, cp.lane_b):
            if lane_id not in seen_lane_ids:
                raise ConfigurationError(f"conflicts[{cp.id}]: unknown lane {lane_id}")
        for key, pos in (("pos_on_a", cp.pos_on_a), ("pos_on_b", cp.pos_on_b)):
            if not (0.0 < pos < config.exit_pos):
                raise ConfigurationError(f"conflicts[{cp.id}].{key}: must lie inside the zone")
        pair = frozenset((cp.lane_a, cp.lane_b))
        if pair in seen_pairs:
            raise ConfigurationError(f"conflicts[{cp.id}]: duplicate lane pair")
        seen_pairs.add(pair)


def default_scenario() -> ScenarioConfig:
    """Four-lane crossing of two perpendicular roads, 250 m control zone.

    Lanes 0 and 1 run on one road (opposite directions), lanes 2 and 3 on
    the other.  The crossing box sits near the exit; each cross-road lane
    pair meets at exactly one conflict point, 235 m or 241 m from entry
    depending on which side of the box the lane enters.
    """
    lanes = (
        Lane(0, 230.0, "road A eastbound"),
        Lane(1, 230.0, "road A westbound"),
        Lane(2, 230.0, "road B northbound"),
        Lane(3, 230.0, "road B southbound"),
    )
    conflicts = (
        ConflictPoint(0, 0, 2, 241.0, 235.0),
        ConflictPoint(1, 0, 3, 235.0, 241.0),
        ConflictPoint(2, 1, 2, 235.0, 241.0),
        ConflictPoint(3, 1, 3, 241.0, 235.0),
    )
    return ScenarioConfig(
        entry_pos=0.0,
        exit_pos=250.0,
        v_min=1.0,
        v_max=20.0,
        u_min=-4.0,
        u_max=3.0,
        delta_lateral=2.0,
        delta_rear=1.5,
        d_min=10.0,
        lanes=lanes,
        conflicts=conflicts,
        epsilon=0.1,
        dt_check=0.1,
        dt_sim=0.1,
    )


def build_graph(states: Sequence[VehicleState], config: ScenarioConfig) -> CoordGraph:
    """Coordination graph: rear-end edges between same-lane immediate
    neighbors, lateral edges between every cross-lane pair whose lanes
    share a conflict point.

    Permutation-invariant in the input order.
    """
    if not states:
        raise ConfigurationError("build_graph: empty state list")
    vids = [s.vid for s in states]
    if len(set(vids)) != len(vids):
        raise ConfigurationError("build_graph: duplicate vehicle ids")
    lane_ids = set(config.lane_ids())
    for s in states:
        if s.lane not in lane_ids:
            raise ConfigurationError(f"build_graph: unknown lane id {s.lane}")

    edges: set[tuple[int, int]] = set()

    by_lane: dict[int, list[VehicleState]] = {}
    for s in states:
        by_lane.setdefault(s.lane, []).append(s)
    for members in by_lane.values():
        members.sort(key=lambda s: (-s.pos, s.vid))
        for lead, follow in zip(members, members[1:]):
            edges.add(_edge(lead.vid, follow.vid))

    for i, si in enumerate(states):
        for sk in states[i + 1:]:
            if si.lane == sk.lane:
                continue
            if config.conflict_between(si.lane, sk.lane) is not None:
                edges.add(_edge(si.vid, sk.vid))

    return CoordGraph(nodes=tuple(sorted(vids)), edges=tuple(sorted(edges)))


def _edge(a: int, b: int) -> tuple[int, int]:
    return (a, b) if a < b else (b, a)


# ---------------------------------------------------------------------------
# Scenario file I/O.  Flat JSON document whose keys mirror ScenarioConfig;
# see docs/FORMATS.md.

_SCALAR_KEYS = (
    "entry_pos", "exit_pos", "v_min", "v_max", "u_min", "u_max",
    "delta_lateral", "delta_rear", "d_min", "epsilon", "dt_check", "dt_sim",
)


def load_scenario(path: str) -> ScenarioConfig:
    """Load and validate a scenario file; raise naming the first bad key."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"scenario file {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigurationError("scenario file: top level must be an object")

    kwargs = {}
    for key in _SCALAR_KEYS:
        if key not in raw:
            raise ConfigurationError(f"{key}: missing")
        try:
            kwargs[key] = float(raw[key])
        except (TypeError, ValueError):
            raise ConfigurationError(f"{key}: not a number") from None

    lanes = []
    for i, entry in enumerate(raw.get("lanes", [])):
        try:
            lanes.append(Lane(int(entry["id"]), float(entry["stop_line_pos"]),
                              str(entry.get("label", ""))))
        except (TypeError, KeyError, ValueError):
            raise ConfigurationError(f"lanes[{i}]: need id and stop_line_pos") from None
    if not lanes:
        raise ConfigurationError("lanes: missing or empty")

    conflicts = []
    for i, entry in enumerate(raw.get("conflicts", [])):
        try:
            conflicts.append(ConflictPoint(
                int(entry["id"]), int(entry["lane_a"]), int(entry["lane_b"]),
                float(entry["pos_on_a"]), float(entry["pos_on_b"])))
        except (TypeError, KeyError, ValueError):
            raise ConfigurationError(
                f"conflicts[{i}]: need id, lane_a, lane_b, pos_on_a, pos_on_b") from None

    return ScenarioConfig(lanes=tuple(lanes), conflicts=tuple(conflicts), **kwargs)


def save_scenario(config: ScenarioConfig, path: str) -> None:
    doc = {key: getattr(config, key) for key in _SCALAR_KEYS}
    doc["lanes"] = [
        {"id": ln.id, "stop_line_pos": ln.stop_line_pos, "label": ln.label}
        for ln in config.lanes
    ]
    doc["conflicts"] = [
        {"id": cp.id, "lane_a": cp.lane_a, "lane_b": cp.lane_b,
         "pos_on_a": cp.pos_on_a, "pos_on_b": cp.pos_on_b}
        for cp in config.conflicts
    ]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
