"""Cooperative trajectory planning for connected automated vehicles at a
single-lane unsignalized intersection, plus a learned warm-start for the
per-step exit-time optimization."""

__version__ = "0.1.0"

from .constraints import (
    CommittedPlan,
    ConstraintReport,
    Violated,
    check_all,
    check_bounds,
    check_lateral,
    check_rear_end,
)
from .gnn import (
    DatasetRecord,
    NodeFeatures,
    SageLayer,
    SageModel,
    TrainSettings,
    forward,
    huber_loss,
    load_model,
    predict_exit_times,
    save_model,
    train,
)
from .planner import (
    PlanningInstance,
    SolveResult,
    cooperative_replan,
    decision_sequence,
    load_snapshot,
    make_instance,
    save_snapshot,
    solve_exit_time_scan,
)
from .scenario import (
    ConflictPoint,
    CoordGraph,
    Lane,
    ScenarioConfig,
    VehicleState,
    build_graph,
    default_scenario,
    load_scenario,
    save_scenario,
)
from .sim import ArrivalModel, SimMetrics, bench, generate_dataset, run
from .trajectory import (
    FeasibleRange,
    TrajectoryPlan,
    crossing_time,
    evaluate,
    feasible_range,
    solve_coefficients,
)
from .warmstart import CandidateQueue, cooperative_replan_warmstart, solve_warmstart

__all__ = [
    "ArrivalModel", "CandidateQueue", "CommittedPlan", "ConflictPoint",
    "ConstraintReport", "CoordGraph", "DatasetRecord", "FeasibleRange",
    "Lane", "NodeFeatures", "PlanningInstance", "SageLayer", "SageModel",
    "ScenarioConfig", "SimMetrics", "SolveResult", "TrainSettings",
    "TrajectoryPlan", "VehicleState", "Violated", "bench", "build_graph",
    "check_all", "check_bounds", "check_lateral", "check_rear_end",
    "cooperative_replan", "cooperative_replan_warmstart", "crossing_time",
    "decision_sequence", "default_scenario", "evaluate", "feasible_range",
    "forward", "generate_dataset", "huber_loss", "load_model",
    "load_scenario", "load_snapshot", "make_instance", "predict_exit_times",
    "run", "save_model", "save_scenario", "save_snapshot",
    "solve_coefficients", "solve_exit_time_scan", "solve_warmstart", "train",
]
