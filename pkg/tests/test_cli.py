import json
import subprocess
import sys

import numpy as np
import pytest

from aoisched import __version__
from aoisched.analytic import random_policy_aoi
from aoisched.cli import main, read_csv
from aoisched.sim.scenarios import scenario_small_factory


def run(tmp_path, *argv):
    return main([*argv, "--out-dir", str(tmp_path)])


def header(path):
    with open(path) as fh:
        return fh.readline()


def test_analyze_writes_closed_form(tmp_path):
    assert run(tmp_path, "analyze", "--scenario", "toy-a", "--p", "0.4") == 0
    rows = read_csv(tmp_path / "analyze_toy-a.csv")
    assert [r["source"] for r in rows] == ["0", "1", "overall"]
    assert float(rows[-1]["analytic_aoi"]) == pytest.approx(3.0, abs=1e-12)


def test_analyze_oracle_column(tmp_path):
    assert run(tmp_path, "analyze", "--scenario", "small-factory", "--p", "0.5", "--alpha", "0.2", "--oracle-Q", "3000") == 0
    rows = read_csv(tmp_path / "analyze_small-factory.csv")
    for r in rows[:-1]:
        assert float(r["oracle_aoi"]) == pytest.approx(float(r["analytic_aoi"]), rel=1e-6)


def test_floats_round_trip(tmp_path):
    run(tmp_path, "analyze", "--scenario", "small-factory", "--p", "0.37", "--alpha", "0.13")
    rows = read_csv(tmp_path / "analyze_small-factory.csv")
    per, overall = random_policy_aoi(scenario_small_factory(0.13, 0.37))
    assert float(rows[-1]["analytic_aoi"]) == overall
    assert [float(r["analytic_aoi"]) for r in rows[:-1]] == list(per)


def test_provenance_header(tmp_path):
    run(tmp_path, "analyze", "--scenario", "toy-a", "--p", "0.4")
    line = header(tmp_path / "analyze_toy-a.csv")
    assert line.startswith(f"# aoisched {__version__} command=analyze seed=")
    params = json.loads(line.split("params=", 1)[1])
    assert params["p"] == 0.4 and params["scenario"] == "toy-a"


def test_output_directory_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("AOISCHED_OUT", str(tmp_path / "env"))
    assert main(["analyze", "--scenario", "toy-a", "--p", "0.4"]) == 0
    assert (tmp_path / "env" / "analyze_toy-a.csv").exists()


def test_motivating_schedules(tmp_path):
    code = run(
        tmp_path, "simulate", "--scenario", "motivating", "--policy", "myopic", "--policy", "optimal",
        "--Q", "8", "--slots", "6", "--no-burn-in", "--runs", "1", "--deterministic-init",
    )
    assert code == 0
    totals, actions = {}, {}
    for name in ("myopic", "optimal"):
        rows = read_csv(tmp_path / f"trace_motivating_{name}.csv")
        totals[name] = sum(int(r[f"aoi_{k}"]) for r in rows for k in range(3))
        actions[name] = [int(r["action"]) for r in rows]
    # Camera indices: 0 is C4, 1 is C1, 2 is C2.
    assert totals == {"myopic": 38, "optimal": 36}
    assert actions["myopic"] == [1, 0, 0, 0, 1, 1]
    assert actions["optimal"] == [1, 0, 0, 1, 1, 1]


def test_solve_then_policy_map(tmp_path):
    assert run(tmp_path, "solve", "--scenario", "toy-b", "--p", "0.6", "--alpha", "0.4", "--Q", "25") == 0
    trace = read_csv(tmp_path / "solve_toy-b_trace.csv")
    assert all(float(r["delta_low"]) <= float(r["delta_high"]) for r in trace)
    dump = tmp_path / "solve_toy-b_policy.csv"
    assert len(read_csv(dump)) == 4 * 25 * 25
    assert run(tmp_path, "policy-map", "--scenario", "toy-b", "--p", "0.6", "--alpha", "0.4",
               "--policy-file", str(dump), "--states", "0,1", "--aoi-max", "30") == 0
    from_file = read_csv(tmp_path / "policy_map_toy-b_file.csv")
    assert run(tmp_path, "policy-map", "--scenario", "toy-b", "--p", "0.6", "--alpha", "0.4",
               "--policy", "optimal", "--Q", "25", "--states", "0,1", "--aoi-max", "30") == 0
    direct = read_csv(tmp_path / "policy_map_toy-b_optimal.csv")
    assert len(direct) == 900
    assert [r["action"] for r in from_file] == [r["action"] for r in direct]


def test_simulate_results(tmp_path):
    code = run(tmp_path, "simulate", "--scenario", "small-factory", "--p", "0.5", "--alpha", "0.2",
               "--policy", "random", "--policy", "qmdp-detect-myopic", "--slots", "3000", "--burn-in", "200",
               "--runs", "3", "--seed", "5")
    assert code == 0
    rows = read_csv(tmp_path / "simulate_small-factory.csv")
    assert [r["policy"] for r in rows] == ["random", "qmdp-detect-myopic"]
    assert all(float(r["stderr"]) > 0 for r in rows)
    assert not list(tmp_path.glob("trace_*"))


def test_sweep_rows(tmp_path):
    code = run(tmp_path, "sweep", "--scenario", "toy-a", "--param", "p", "--values", "0.2:0.6:0.2",
               "--policy", "random-analytic", "--policy", "myopic", "--slots", "2000", "--burn-in", "100",
               "--runs", "2")
    assert code == 0
    rows = read_csv(tmp_path / "sweep_toy-a_p.csv")
    assert len(rows) == 6
    assert [float(r["p"]) for r in rows[::2]] == [0.2, 0.4, 0.6]
    assert all(float(r["mean_aoi"]) == pytest.approx(3.0) for r in rows if r["policy"] == "random-analytic")


def test_sweep_without_policy_is_a_config_error(tmp_path):
    assert run(tmp_path, "sweep", "--scenario", "toy-a", "--param", "p", "--values", "0.2,0.4") == 2


def test_bad_spec_file(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("sensors: {count: 1, channel: [1.0]}\nsources:\n  - {transition: [[0.5, 0.6]], obs_prob: [[1.0]]}\n")
    assert run(tmp_path, "analyze", "--spec", str(bad)) == 2
    missing = tmp_path / "missing.yaml"
    missing.write_text("sensors: {count: 1, channel: [1.0]}\n")
    assert run(tmp_path, "analyze", "--spec", str(missing)) == 2


def test_spec_file_is_used(tmp_path):
    good = tmp_path / "one.yaml"
    good.write_text("sensors: {count: 1, channel: [1.0]}\nsources:\n  - {transition: [[1.0]], obs_prob: [[0.25]]}\n")
    assert run(tmp_path, "analyze", "--spec", str(good)) == 0
    assert float(read_csv(tmp_path / "analyze_one.csv")[-1]["analytic_aoi"]) == pytest.approx(4.0)


def test_other_config_errors(tmp_path):
    assert run(tmp_path, "analyze", "--scenario", "toy-a") == 2
    assert run(tmp_path, "simulate", "--scenario", "toy-a", "--p", "0.5", "--policy", "nonsense") == 2
    assert run(tmp_path, "simulate", "--scenario", "large-factory", "--gamma", "0.5", "--alpha", "0.05",
               "--policy", "optimal") == 2
    assert run(tmp_path, "solve", "--scenario", "toy-a", "--p", "0.5", "--aperiodicity", "0") == 2
    assert run(tmp_path, "bogus") == 2


def test_non_convergence_exit_code(tmp_path):
    assert run(tmp_path, "solve", "--scenario", "toy-b", "--p", "0.6", "--alpha", "0.4", "--max-iters", "1") == 3
    assert run(tmp_path, "simulate", "--scenario", "toy-b", "--p", "0.6", "--alpha", "0.4", "--policy", "optimal",
               "--max-iters", "1", "--slots", "100", "--burn-in", "10") == 3


def test_console_script(tmp_path):
    out = subprocess.run(
        [sys.executable, "-m", "aoisched.cli", "analyze", "--scenario", "toy-a", "--p", "0.5", "--out-dir", str(tmp_path)],
        capture_output=True, text=True,
    )
    assert out.returncode == 0
    assert (tmp_path / "analyze_toy-a.csv").exists()
