import csv
import io

import numpy as np
import pytest

from fpcoord.bench import (
    run_beta_sweep,
    run_closed_loop,
    run_filter_vs_aa,
    run_memory_sweep,
    scenario_from_config,
    tracking_error,
    write_csv,
)
from fpcoord.cli import main
from fpcoord.config import ConfigError, dump_config, network_to_dict
from fpcoord.network import EdgeSpec, NetworkTopology
from fpcoord.subsystem import LinearSubsystem
from fpcoord.instances import four_subsystem_benchmark, physical_radius
from fpcoord.fp_engine import spectral_radius


def scenario(kind, **params):
    return scenario_from_config({"schema_version": 1, "experiment": {"kind": kind, **params}})


def test_benchmark_instance_properties(benchmark):
    assert spectral_radius(benchmark.M_v) == pytest.approx(0.9, abs=1e-9)
    assert physical_radius(benchmark.topology, benchmark.subsystems) <= 0.95
    assert [s.state_dim for s in benchmark.subsystems] == [4, 2, 2, 3]
    assert [s.input_dim for s in benchmark.subsystems] == [2, 0, 0, 1]
    assert benchmark.topology.controlled == frozenset({0, 3})
    again = four_subsystem_benchmark(seed=0)
    np.testing.assert_array_equal(again.M_v, benchmark.M_v)


def test_beta_sweep_rows():
    rows = run_beta_sweep(scenario("beta-sweep", betas=[0.0, 0.5, 1.0]))
    assert rows[0] == ("beta", "spectral_radius", "converged", "iterations", "consistent")
    zero = rows[1]
    assert zero[2] is False and zero[3] == 500
    assert all(r[4] for r in rows[1:])


def test_beta_sweep_empty_grid():
    assert write_csv(run_beta_sweep(scenario("beta-sweep", betas=[]))) == (
        "beta,spectral_radius,converged,iterations,consistent\n"
    )


def test_memory_sweep_unreachable_tolerance():
    rows = run_memory_sweep(scenario("memory-sweep", memory=[1, 3], sigma_max=5))
    assert rows[0] == ("m", "iterations_to_tol", "final_eps", "status")
    assert [r[3] for r in rows[1:]] == ["MaxIterations", "MaxIterations"]
    assert rows[1][1] is None


def test_race_columns_and_convergence():
    rows = run_filter_vs_aa(scenario("race", variant="detuned"))
    assert rows[0] == ("iteration", "eps_filter", "eps_aa", "eps_plain")
    last_aa = [r[2] for r in rows[1:] if r[2] is not None][-1]
    assert last_aa <= 1e-8


def test_closed_loop_zero_setpoint_holds():
    sc = scenario_from_config(
        {"benchmark": {"disturbance": 0.0}, "experiment": {"kind": "closed-loop", "steps": 3, "step_time": 100}}
    )
    rows = run_closed_loop(sc)
    for r in rows[1:]:
        y = np.array(r[1:7], dtype=float)
        assert np.max(np.abs(y)) < 1e-9


def test_closed_loop_starvation_completes():
    rows = run_closed_loop(scenario("closed-loop", steps=6, step_time=2, sigma_max=1))
    assert [r[-1] for r in rows[1:]] == ["Incomplete"] * 6
    assert all(np.isfinite(float(x)) for r in rows[1:] for x in r[1:-1])


def test_tracking_error_helper():
    rows = [("time", "y0_0", "r0_0"), (0, 0.5, 1.0), (1, 0.98, 1.0)]
    assert tracking_error(rows, {0: np.array([True])}) == pytest.approx(0.02)


def test_csv_deterministic(tmp_path):
    out = [tmp_path / "a.csv", tmp_path / "b.csv"]
    for p in out:
        assert main(["race", "--seed", "3", "--out", str(p), "--quiet", "--sigma-max", "60"]) == 0
    assert out[0].read_bytes() == out[1].read_bytes()
    header = next(csv.reader(io.StringIO(out[0].read_text())))
    assert header == ["iteration", "eps_filter", "eps_aa", "eps_plain"]


def test_cli_stdout_and_overrides(capsys):
    assert main(["memory-sweep", "--eps-max", "1e-4", "--quiet"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "m,iterations_to_tol,final_eps,status"
    assert len(out) == 6


def test_cli_config_errors(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("schema_version = 2\n")
    assert main(["race", "--config", str(bad)]) == 2
    assert "schema_version" in capsys.readouterr().err
    assert main(["race", "--config", str(tmp_path / "missing.toml")]) == 2
    mismatch = tmp_path / "m.toml"
    mismatch.write_text('schema_version = 1\n[experiment]\nkind = "race"\n')
    assert main(["beta-sweep", "--config", str(mismatch)]) == 2
    assert main(["race", "--sigma-max", "0"]) == 2


def test_cli_bad_setpoints_is_config_error(tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text('schema_version = 1\n[experiment]\nkind = "closed-loop"\nsetpoints = [[1.0], [], [], [0.7, 0.0]]\n')
    assert main(["closed-loop", "--config", str(cfg)]) == 2
    assert "setpoints[0]" in capsys.readouterr().err


def test_cli_solver_failure_exit_code(tmp_path, capsys):
    # unit feedthrough ring: M_v has an eigenvalue at 1, so Pi cannot be designed
    top = NetworkTopology(2, [EdgeSpec(0, 1, 1), EdgeSpec(1, 0, 1)], horizon=1)
    node = LinearSubsystem(
        A=[[0.0]], B=np.zeros((1, 0)), E=[[0.0]], C_v=[[0.0]], C_y=np.zeros((0, 1)),
        D_v=[[1.0]], horizon=1, in_dims=(1,), out_dims=(1,),
    )
    cfg = network_to_dict(top, [node, node])
    cfg["experiment"] = {"kind": "race"}
    path = tmp_path / "ring.toml"
    dump_config(cfg, path)
    assert main(["race", "--config", str(path)]) == 1
    assert "not stabilisable" in capsys.readouterr().err


def test_scenario_requires_kind():
    with pytest.raises(ConfigError, match="kind"):
        scenario_from_config({"schema_version": 1})
