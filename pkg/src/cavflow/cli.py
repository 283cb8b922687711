"""Command-line front end.

Subcommands: gen-data, train, simulate, bench, plan.  Every command takes
an explicit --seed (no silent time-based seeding) and writes a run manifest
next to its primary output before producing any artifact.  Exit codes:
0 success, 1 runtime or data error, 2 usage error.
"""

from __future__ import annotations

import argparse
import datetime
import json
import sys
import time

import numpy as np

from . import __version__
from .errors import CavflowError
from .gnn import TrainSettings, load_model, read_records, save_model, train
from .planner import cooperative_replan, load_snapshot
from .scenario import ScenarioConfig, default_scenario, load_scenario
from .sim import ArrivalModel, bench, generate_dataset, run, write_metrics_jsonl, write_timing_json
from .warmstart import cooperative_replan_warmstart

# Published travel-time improvement targets (%) used for side-by-side
# comparison in bench summaries; not a pass/fail criterion here.
REFERENCE_IMPROVEMENT_PCT = {1200: 7.11, 1400: 10.63, 1600: 12.74}


def _load_config(path: str | None) -> ScenarioConfig:
    if path is None:
        return default_scenario()
    return load_scenario(path)


def _rate_list(text: str) -> list[float]:
    try:
        rates = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad rate list {text!r}") from None
    if not rates:
        raise argparse.ArgumentTypeError("empty rate list")
    return rates


def _seed_list(text: str) -> list[int]:
    try:
        seeds = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("empty seed list")
    return seeds


class Manifest:
    """Reproducibility record written before any output artifact."""

    def __init__(self, command: str, args: argparse.Namespace, outputs: list[str]):
        self.path = getattr(args, "manifest", None) or f"{outputs[0]}.manifest.json"
        self.doc = {
            "command": command,
            "version": __version__,
            "arguments": {k: v for k, v in vars(args).items() if k != "func"},
            "outputs": outputs,
            "started_utc": datetime.datetime.now(datetime.timezone.utc).isoformat(),
            "finished_utc": None,
        }
        self._write()

    def _write(self) -> None:
        with open(self.path, "w", encoding="utf-8") as fh:
            json.dump(self.doc, fh, indent=2, sort_keys=True, default=str)
            fh.write("\n")

    def finish(self) -> None:
        self.doc["finished_utc"] = datetime.datetime.now(datetime.timezone.utc).isoformat()
        self._write()


def cmd_gen_data(args: argparse.Namespace) -> int:
    config = _load_config(args.scenario)
    rates = args.rates
    manifest = Manifest("gen-data", args, [args.out])
    total = 0
    for i, rate in enumerate(rates):
        arrival = ArrivalModel(total_rate=rate, seed=args.seed + i)
        total += generate_dataset(config, arrival, args.duration, args.out,
                                  append=i > 0, first_instance_id=total)
        print(f"rate {rate:g} veh/h: {total} records so far")
    manifest.finish()
    print(f"wrote {total} records to {args.out}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    config = _load_config(args.scenario)
    records = read_records(args.data)
    settings = TrainSettings.for_scenario(
        config,
        hidden_dim=args.hidden,
        n_layers=args.layers,
        learning_rate=args.lr,
        batch_size=args.batch,
        epochs=args.epochs,
        patience=args.patience,
        split=args.split,
        seed=args.seed,
        val_target=args.val_target,
    )
    curve_path = args.curve or f"{args.out}.losses.csv"
    manifest = Manifest("train", args, [args.out, curve_path])

    n_total = len(records)
    n_train = int(round(args.split * n_total))
    print(f"training on {n_train} records, validating on {n_total - n_train} "
          f"(split {args.split:g})")

    t0 = time.perf_counter()
    result = train(records, settings,
                   on_epoch=lambda e: print(
                       f"epoch {e['epoch']:3d}  train {e['train_loss']:.4f}  "
                       f"val {e['val_loss']:.4f}"))
    elapsed = time.perf_counter() - t0

    save_model(result.model, args.out)
    with open(curve_path, "w", encoding="utf-8") as fh:
        fh.write("epoch,train_loss,val_loss\n")
        for e in result.history:
            fh.write(f"{e['epoch']},{e['train_loss']!r},{e['val_loss']!r}\n")
    manifest.finish()

    final = result.history[-1]
    print(f"final train loss {final['train_loss']:.4f}, "
          f"best val loss {result.best_val_loss:.4f} (epoch {result.best_epoch})")
    print(f"model written to {args.out} ({elapsed:.1f} s)")
    return 0


def cmd_simulate(args: argparse.Namespace) -> int:
    config = _load_config(args.scenario)
    replan = {"entry": "entry_only", "every": "every_step"}.get(args.replan, args.replan)
    model = load_model(args.model) if args.model else None
    manifest = Manifest("simulate", args, [args.out])

    arrival = ArrivalModel(total_rate=args.rate, seed=args.seed)
    metrics = run(config, arrival, args.duration, solver=args.solver,
                  replan=replan, model=model, traj_log=args.traj_log)

    write_metrics_jsonl(metrics, args.out)
    if args.timing_out:
        write_timing_json(metrics, args.timing_out)
    manifest.finish()
    print(f"{metrics.retired} vehicles retired, mean travel time "
          f"{metrics.mean_travel_time:.3f} s (std {metrics.std_travel_time:.3f}), "
          f"{len(metrics.audit_flags)} audit flags")
    print(f"metrics written to {args.out}")
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    config = _load_config(args.scenario)
    rates = args.rates
    seeds = args.seeds
    model = load_model(args.model)
    csv_path = args.csv or f"{args.out}.summary.csv"
    manifest = Manifest("bench", args, [args.out, csv_path])

    rows = bench(config, rates, seeds, args.duration, model,
                 record_gap=not args.no_gap)

    with open(args.out, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    fields = list(rows[0].keys())
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write(",".join(fields) + "\n")
        for row in rows:
            fh.write(",".join(str(row[f]) for f in fields) + "\n")

    _print_bench_summary(rows, rates)
    manifest.finish()
    print(f"rows written to {args.out}, summary to {csv_path}")
    return 0


def _pooled_mean_tt(rows: list[dict], rate: float, solver: str, replan: str) -> float:
    cells = [r for r in rows
             if r["rate"] == rate and r["solver"] == solver and r["replan"] == replan]
    weights = sum(r["retired"] for r in cells)
    if not cells or weights == 0:
        return float("nan")
    return sum(r["mean_travel_time"] * r["retired"] for r in cells) / weights


def _print_bench_summary(rows: list[dict], rates: list[float]) -> None:
    print()
    print(f"{'rate':>6} {'arm':>22} {'mean tt':>9} {'evals/solve':>12} "
          f"{'step wall':>10} {'gap':>8}")
    for rate in rates:
        for solver in ("baseline", "gnn"):
            for replan in ("entry_only", "every_step"):
                cells = [r for r in rows if r["rate"] == rate
                         and r["solver"] == solver and r["replan"] == replan]
                if not cells:
                    continue
                tt = _pooled_mean_tt(rows, rate, solver, replan)
                evals = np.mean([r["mean_evals_per_solve"] for r in cells])
                wall = np.mean([r["mean_step_wall"] for r in cells])
                gap = np.mean([r["mean_gap"] for r in cells])
                print(f"{rate:>6g} {solver + '/' + replan:>22} {tt:>9.3f} "
                      f"{evals:>12.2f} {wall * 1e3:>8.2f}ms {gap:>8.3f}")
    print()
    for rate in rates:
        entry = _pooled_mean_tt(rows, rate, "baseline", "entry_only")
        every = _pooled_mean_tt(rows, rate, "baseline", "every_step")
        if entry and every and entry == entry and every == every:
            improvement = 100.0 * (entry - every) / entry
            target = REFERENCE_IMPROVEMENT_PCT.get(int(rate))
            suffix = f" (reference target {target:.2f}%)" if target else ""
            print(f"rate {rate:g}: every_step improves travel time by "
                  f"{improvement:.2f}% over entry_only{suffix}")


def cmd_plan(args: argparse.Namespace) -> int:
    config = _load_config(args.scenario)
    instance = load_snapshot(args.snapshot, config)
    model = load_model(args.model) if args.model else None

    overrides: dict[int, float] = {}
    if args.t_hat:
        for chunk in args.t_hat.split(","):
            if "=" in chunk:
                vid, value = chunk.split("=", 1)
                overrides[int(vid)] = float(value)
            elif len(instance.states) == 1:
                overrides[instance.states[0].vid] = float(chunk)
            else:
                raise CavflowError(
                    "--t-hat needs vid=seconds pairs when several vehicles are present")
    if model is None:
        # No prediction source: seed un-overridden vehicles at mid-range.
        for s in instance.states:
            if s.vid not in overrides:
                r = instance.ranges[s.vid]
                overrides[s.vid] = 0.5 * (r.t_lo + r.t_hi)

    scan = cooperative_replan(instance, config)
    warm = cooperative_replan_warmstart(instance, model, config,
                                        seed_overrides=overrides)

    print(f"{'vid':>5} {'scan t_exit':>12} {'iters':>6} {'warm t_exit':>12} "
          f"{'iters':>6} {'gap':>8} {'feasible':>9}")
    for vid in sorted(r.vid for r in scan.values()):
        s, w = scan[vid], warm[vid]
        feas = "yes" if (s.feasible and w.feasible) else "NO"
        print(f"{vid:>5} {s.t_exit:>12.4f} {s.iterations:>6} {w.t_exit:>12.4f} "
              f"{w.iterations:>6} {w.t_exit - s.t_exit:>8.4f} {feas:>9}")
        if not s.feasible:
            print(f"      scan infeasible: violation {s.violation:.4f}")
        if not w.feasible:
            print(f"      warm infeasible: violation {w.violation:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cavflow",
        description="Cooperative intersection trajectory planning toolkit.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a training dataset from simulation")
    p.add_argument("--scenario", help="scenario file (default: built-in 4-lane crossing)")
    p.add_argument("--rates", type=_rate_list, required=True,
                   help="comma-separated traffic volumes, veh/h")
    p.add_argument("--duration", type=float, default=600.0, help="seconds per rate")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="output dataset (JSON lines)")
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the exit-time regressor")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="model file")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--split", type=float, default=0.9)
    p.add_argument("--hidden", type=int, default=256)
    p.add_argument("--layers", type=int, default=3)
    p.add_argument("--batch", type=int, default=256)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--patience", type=int, default=20)
    p.add_argument("--val-target", type=float, default=None,
                   help="stop once validation loss reaches this value")
    p.add_argument("--curve", help="loss curve CSV (default: <out>.losses.csv)")
    p.add_argument("--scenario")
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("simulate", help="run one closed-loop simulation")
    p.add_argument("--solver", choices=["baseline", "gnn"], default="baseline")
    p.add_argument("--replan", choices=["entry", "every", "entry_only", "every_step"],
                   default="every")
    p.add_argument("--rate", type=float, required=True, help="veh/h")
    p.add_argument("--duration", type=float, default=600.0)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--model", help="model file (required for --solver gnn)")
    p.add_argument("--out", default="metrics.jsonl")
    p.add_argument("--traj-log", help="per-step trajectory CSV")
    p.add_argument("--timing-out", help="wall-clock sidecar JSON")
    p.add_argument("--scenario")
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("bench", help="run the full comparison matrix")
    p.add_argument("--rates", type=_rate_list, required=True)
    p.add_argument("--seeds", type=_seed_list, required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--duration", type=float, default=600.0)
    p.add_argument("--out", default="bench.jsonl")
    p.add_argument("--csv", help="summary CSV (default: <out>.summary.csv)")
    p.add_argument("--no-gap", action="store_true",
                   help="skip the warm-vs-scan optimality-gap measurement")
    p.add_argument("--scenario")
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("plan", help="solve one snapshot with both algorithms")
    p.add_argument("--snapshot", required=True)
    p.add_argument("--model")
    p.add_argument("--t-hat", dest="t_hat",
                   help="seed override: vid=seconds[,vid=seconds...]")
    p.add_argument("--scenario")
    p.set_defaults(func=cmd_plan)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "simulate" and args.solver == "gnn" and not args.model:
        parser.error("--solver gnn requires --model")
    try:
        return args.func(args)
    except (CavflowError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
