import json
import subprocess
import sys

import numpy as np
import pytest

from cavflow import VehicleState, save_scenario
from cavflow.cli import main
from cavflow.gnn import init_model, save_model
from cavflow.planner import make_instance, save_snapshot


def run_cli(args, capsys=None):
    return main(args)


@pytest.fixture(scope="module")
def stub_model_path(tmp_path_factory, config):
    rng = np.random.default_rng(0)
    model = init_model(6, 8, 2, config.exit_pos, config.v_max,
                       tuple(config.lane_ids()), rng)
    for layer in model.layers:
        layer.W[:] = 0.0
        layer.b[:] = 0.0
    model.head_w[:] = 0.0
    model.head_b = -40.0
    path = tmp_path_factory.mktemp("model") / "stub.sage"
    save_model(model, str(path))
    return str(path)


def test_gen_data_writes_dataset_and_manifest(tmp_path):
    out = tmp_path / "data.jsonl"
    code = main(["gen-data", "--rates", "1200", "--duration", "15",
                 "--seed", "7", "--out", str(out)])
    assert code == 0
    assert out.exists()
    manifest = json.loads((tmp_path / "data.jsonl.manifest.json").read_text())
    assert manifest["command"] == "gen-data"
    assert manifest["finished_utc"] is not None
    assert manifest["arguments"]["seed"] == 7


def test_gen_data_missing_out_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["gen-data", "--rates", "1200", "--duration", "15", "--seed", "7"])
    assert exc.value.code == 2


def test_gen_data_missing_seed_usage_error(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["gen-data", "--rates", "1200", "--duration", "15",
              "--out", str(tmp_path / "d.jsonl")])
    assert exc.value.code == 2


def test_gen_data_unreadable_scenario(tmp_path, capsys):
    code = main(["gen-data", "--rates", "1200", "--duration", "5", "--seed", "1",
                 "--out", str(tmp_path / "d.jsonl"),
                 "--scenario", str(tmp_path / "missing.json")])
    assert code == 1
    assert "missing.json" in capsys.readouterr().err


def test_train_and_determinism(tmp_path, capsys):
    data = tmp_path / "data.jsonl"
    assert main(["gen-data", "--rates", "1200", "--duration", "20",
                 "--seed", "3", "--out", str(data)]) == 0

    def train_once(name):
        out = tmp_path / name
        code = main(["train", "--data", str(data), "--out", str(out),
                     "--epochs", "3", "--seed", "11", "--hidden", "8",
                     "--layers", "2", "--batch", "32"])
        assert code == 0
        return (tmp_path / f"{name}.losses.csv").read_text()

    first = train_once("m1.sage")
    capsys.readouterr()
    second = train_once("m2.sage")
    assert first == second
    assert (tmp_path / "m1.sage").read_text() == (tmp_path / "m2.sage").read_text()
    header, *rows = first.strip().splitlines()
    assert header == "epoch,train_loss,val_loss"
    assert len(rows) == 3


def test_train_split_report(tmp_path, capsys):
    data = tmp_path / "data.jsonl"
    main(["gen-data", "--rates", "1200", "--duration", "20", "--seed", "3",
          "--out", str(data)])
    capsys.readouterr()
    main(["train", "--data", str(data), "--out", str(tmp_path / "m.sage"),
          "--epochs", "1", "--seed", "1", "--hidden", "4", "--layers", "1"])
    out = capsys.readouterr().out
    n = len(open(data).readlines())
    n_train = int(round(0.9 * n))
    assert f"training on {n_train} records, validating on {n - n_train}" in out


def test_simulate_writes_metrics(tmp_path):
    out = tmp_path / "metrics.jsonl"
    traj = tmp_path / "traj.csv"
    code = main(["simulate", "--solver", "baseline", "--replan", "entry",
                 "--rate", "1200", "--duration", "30", "--seed", "3",
                 "--out", str(out), "--traj-log", str(traj)])
    assert code == 0
    lines = out.read_text().splitlines()
    assert json.loads(lines[0])["kind"] == "summary"
    assert traj.read_text().startswith("t,vid,lane,pos,speed,accel")


def test_simulate_gnn_without_model_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["simulate", "--solver", "gnn", "--rate", "1200",
              "--duration", "10", "--seed", "1"])
    assert exc.value.code == 2


def test_simulate_determinism(tmp_path):
    outs = []
    for name in ("a.jsonl", "b.jsonl"):
        out = tmp_path / name
        main(["simulate", "--rate", "1000", "--duration", "30", "--seed", "9",
              "--out", str(out)])
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]


def test_bench_rows_and_summary(tmp_path, stub_model_path, capsys):
    out = tmp_path / "bench.jsonl"
    code = main(["bench", "--rates", "900", "--seeds", "1,2", "--duration", "30",
                 "--model", stub_model_path, "--out", str(out), "--no-gap"])
    assert code == 0
    rows = [json.loads(l) for l in out.read_text().splitlines()]
    assert len(rows) == 1 * 2 * 4
    summary = capsys.readouterr().out
    assert "every_step improves travel time" in summary
    csv_text = (tmp_path / "bench.jsonl.summary.csv").read_text()
    assert csv_text.count("\n") == len(rows) + 1


def test_bench_empty_seeds_usage_error(tmp_path, stub_model_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["bench", "--rates", "900", "--seeds", ",", "--duration", "10",
              "--model", stub_model_path, "--out", str(tmp_path / "b.jsonl")])
    assert exc.value.code == 2
    assert "seed" in capsys.readouterr().err


def test_plan_lone_vehicle(tmp_path, config, capsys):
    inst = make_instance(0.0, [VehicleState(0, 0, 0.0, 20.0)], config)
    snap = tmp_path / "snap.json"
    save_snapshot(inst, str(snap))
    code = main(["plan", "--snapshot", str(snap)])
    assert code == 0
    out = capsys.readouterr().out
    assert "12.5000" in out


def test_plan_perfect_seed_one_iteration(tmp_path, config, capsys):
    inst = make_instance(0.0, [VehicleState(0, 0, 0.0, 20.0)], config)
    snap = tmp_path / "snap.json"
    save_snapshot(inst, str(snap))
    code = main(["plan", "--snapshot", str(snap), "--t-hat", "12.5"])
    assert code == 0
    out = capsys.readouterr().out
    line = next(l for l in out.splitlines() if l.strip().startswith("0 "))
    columns = line.split()
    assert columns[1] == columns[3] == "12.5000"   # scan and warm agree
    assert columns[4] == "1"                       # one constraint evaluation
    assert float(columns[5]) == 0.0                # zero gap


def test_plan_infeasible_snapshot_reports_fallback(tmp_path, config, capsys):
    # A recently recorded crossing on the conflicting lane blocks the whole
    # (deliberately clipped) range of a vehicle approaching the crossing box.
    import json as _json

    from cavflow.trajectory import crossing_time, solve_coefficients

    inst = make_instance(0.0, [VehicleState(0, 0, 228.0, 18.0)], config)
    plan_lo = solve_coefficients(0.0, 228.0, 18.0,
                                 inst.ranges[0].t_lo, config.exit_pos)
    cp = config.conflicts[0]
    tau = crossing_time(plan_lo, cp.pos_on(0)) + 0.8
    snap = tmp_path / "snap.json"
    snap.write_text(_json.dumps({
        "time_now": 0.0,
        "vehicles": [{"vid": 0, "lane": 0, "pos": 228.0, "speed": 18.0}],
        "crossings": [{"vid": 9, "conflict": cp.id, "time": tau, "lane": 2}],
    }))
    code = main(["plan", "--snapshot", str(snap)])
    assert code == 0
    out = capsys.readouterr().out
    assert out.count("infeasible: violation") == 2   # both algorithms fall back
    assert " NO" in out


def test_plan_malformed_snapshot(tmp_path, capsys):
    snap = tmp_path / "broken.json"
    snap.write_text("{")
    code = main(["plan", "--snapshot", str(snap)])
    assert code == 1
    assert "broken.json" in capsys.readouterr().err


def test_custom_scenario_flows_through(tmp_path, config):
    scen = tmp_path / "scenario.json"
    save_scenario(config, str(scen))
    out = tmp_path / "m.jsonl"
    code = main(["simulate", "--rate", "600", "--duration", "20", "--seed", "2",
                 "--scenario", str(scen), "--out", str(out)])
    assert code == 0


def test_cli_entrypoint_subprocess():
    proc = subprocess.run([sys.executable, "-m", "cavflow.cli", "--version"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert proc.stdout.strip() == "0.1.0"
