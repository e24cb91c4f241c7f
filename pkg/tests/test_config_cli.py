import json

import numpy as np
import pytest
from numpy.testing import assert_allclose

from hsdc.analysis import read_csv_metadata
from hsdc.cli import EXIT_CONFIG, EXIT_MAX_ITERATIONS, EXIT_OK, main
from hsdc.config import OUTPUT_ROOT_ENV, build_problem, default_output_dir, parse_config
from hsdc.errors import ConfigError
from hsdc.monodomain import MonodomainProblem, load_state, save_state


def write_config(tmp_path, **data):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(data))
    return path


def run(tmp_path, command, config, *flags):
    out = tmp_path / f"out-{command}"
    code = main([command, "--config", str(write_config(tmp_path, **config)), "--out", str(out),
                 *flags])
    return code, out


def test_minimal_defaults(tmp_path):
    cfg = parse_config(write_config(tmp_path, problem="dahlquist"))
    assert cfg.tol == 5e-8 and cfg.K == 100
    assert cfg.nodes == [8, 4] and cfg.L == 2
    assert cfg.variant == "hsdc" and cfg.P == 1 and cfg.workers == 0


def test_nodes_must_decrease(tmp_path):
    with pytest.raises(ConfigError, match="nodes must be strictly decreasing") as info:
        parse_config(write_config(tmp_path, problem="dahlquist", nodes="4,6"))
    assert info.value.field == "nodes"


def test_flag_overrides_file(tmp_path):
    cfg = parse_config(write_config(tmp_path, problem="dahlquist", dt=0.05),
                       {"dt": 0.025, "P": None})
    assert cfg.dt == 0.025


@pytest.mark.parametrize("data, field", [
    (dict(problem="dahlquist", speed=3), "speed"),
    (dict(dt=0.1), "problem"),
    (dict(problem="heat"), "problem"),
    (dict(problem="dahlquist", dt=-0.1), "dt"),
    (dict(problem="dahlquist", K=2.5), "K"),
    (dict(problem="dahlquist", tol="small"), "tol"),
    (dict(problem="dahlquist", dt=0.1, T=0.25), "T"),
    (dict(problem="dahlquist", nodes=[4, 2], levels=3), "levels"),
    (dict(problem="monodomain_1d", counts=[4]), "counts"),
    (dict(problem="monodomain_1d", lengths=[8.0, 8.0]), "lengths"),
    (dict(problem="dahlquist", variant="fast"), "variant"),
])
def test_distinct_diagnostics(tmp_path, data, field):
    with pytest.raises(ConfigError) as info:
        parse_config(write_config(tmp_path, **data))
    assert info.value.field == field
    assert field in str(info.value)


def test_malformed_file(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    with pytest.raises(ConfigError, match="not valid JSON"):
        parse_config(path)
    with pytest.raises(ConfigError, match="not found"):
        parse_config(tmp_path / "missing.json")


def test_levels_select_default_nodes(tmp_path):
    assert parse_config(write_config(tmp_path, problem="dahlquist", levels=3)).nodes == [8, 4, 2]


def test_monodomain_mesh_from_dx(tmp_path):
    cfg = parse_config(write_config(tmp_path, problem="monodomain_1d", lengths=[16.0], dx=0.2))
    assert cfg.counts == [80]
    prob = build_problem(cfg)
    assert isinstance(prob, MonodomainProblem)
    assert_allclose(prob.dx[0], 0.2)


def test_n_steps_derived(tmp_path):
    cfg = parse_config(write_config(tmp_path, problem="dahlquist", dt=0.05, T=2.0))
    assert cfg.n_steps == 40


def test_output_root_env(tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path / "root"))
    cfg = parse_config(write_config(tmp_path, problem="dahlquist"))
    out = default_output_dir(cfg, "simulate")
    assert out.parent == tmp_path / "root" and out.name.startswith("simulate-")


DAHLQUIST = dict(problem="dahlquist", lam_I=-1.0, lam_E=-0.5, lam_e=-2.0, dt=0.1, T=0.8,
                 nodes=[4, 2], P=4, tol=1e-10)


def test_simulate_dahlquist(tmp_path):
    code, out = run(tmp_path, "simulate", DAHLQUIST)
    assert code == EXIT_OK
    summary = json.loads((out / "summary.json").read_text())
    assert summary["status"] == "ok" and summary["completed_blocks"] == 2
    assert summary["max_final_residual"] < 1e-10
    y, t, _ = load_state(out / "state_000008.bin")
    assert t == pytest.approx(0.8)
    assert_allclose(y, np.exp(-3.5 * 0.8), rtol=1e-9)
    resolved = json.loads((out / "config.resolved.json").read_text())
    assert resolved["command"] == "simulate" and resolved["dt"] == 0.1
    _, rows = read_csv_metadata(out / "iterations.csv")
    assert rows[0] == ["block", "step", "t", "iterations", "converged", "final_residual"]
    assert len(rows) == 9


def test_resolved_config_replays(tmp_path):
    _, out = run(tmp_path, "simulate", DAHLQUIST)
    resolved = json.loads((out / "config.resolved.json").read_text())
    for key in ("command", "version", "config_hash"):
        resolved.pop(key)
    resolved["out"] = str(tmp_path / "replay")
    replay = tmp_path / "replay.json"
    replay.write_text(json.dumps(resolved))
    assert main(["simulate", "--config", str(replay)]) == EXIT_OK
    assert (tmp_path / "replay" / "iterations.csv").read_bytes() == \
        (out / "iterations.csv").read_bytes()


def test_simulate_zero_horizon(tmp_path):
    code, out = run(tmp_path, "simulate", dict(DAHLQUIST, T=0.0))
    assert code == EXIT_OK
    y, t, _ = load_state(out / "state_000000.bin")
    assert t == 0.0 and y.tolist() == [1.0]
    assert json.loads((out / "summary.json").read_text())["completed_blocks"] == 0


def test_simulate_unreachable_tolerance(tmp_path):
    code, out = run(tmp_path, "simulate", DAHLQUIST, "--tol", "1e-30", "--max-iters", "2")
    assert code == EXIT_MAX_ITERATIONS
    summary = json.loads((out / "summary.json").read_text())
    assert summary["status"] == "max_iterations"
    _, rows = read_csv_metadata(out / "iterations.csv")
    assert len(rows) == 5
    assert all(r[3] == "2" for r in rows[1:])


def test_config_error_exit_code(tmp_path, capsys):
    code, _ = run(tmp_path, "simulate", dict(DAHLQUIST, nodes=[2, 4]))
    assert code == EXIT_CONFIG
    assert "nodes must be strictly decreasing" in capsys.readouterr().err


def test_blocks_must_split(tmp_path):
    code, _ = run(tmp_path, "simulate", DAHLQUIST, "--procs", "3")
    assert code == EXIT_CONFIG


def test_problem_flag_without_config(tmp_path):
    out = tmp_path / "o"
    assert main(["simulate", "--problem", "linear_gating", "--dt", "0.1", "--T", "0.2",
                 "--nodes", "3", "--out", str(out)]) == EXIT_OK
    assert main(["simulate"]) == EXIT_CONFIG


def test_outputs_bitwise_identical(tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    cfg = write_config(tmp_path, **DAHLQUIST)
    assert main(["simulate", "--config", str(cfg), "--out", str(a)]) == EXIT_OK
    assert main(["simulate", "--config", str(cfg), "--out", str(b), "--workers", "4"]) == EXIT_OK
    for name in ("iterations.csv", "summary.json", "state_000008.bin", "state_000004.bin"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_initial_state_file(tmp_path):
    cfg = dict(problem="monodomain_1d", lengths=[8.0], counts=[16], dt=0.05, T=0.1,
               nodes=[3], tol=1e-8)
    prob = build_problem(parse_config(write_config(tmp_path, **cfg)))
    save_state(tmp_path / "init.bin", prob.initial_state(), prob)
    code, out = run(tmp_path, "simulate", dict(cfg, initial_state=str(tmp_path / "init.bin")))
    assert code == EXIT_OK
    y0, _, _ = load_state(out / "state_000000.bin")
    assert y0.tobytes() == prob.initial_state().tobytes()


def test_initial_state_wrong_mesh(tmp_path):
    other = MonodomainProblem(build_problem(parse_config(write_config(
        tmp_path, problem="monodomain_1d", lengths=[8.0], counts=[16]))).ionic, [8.0], [20])
    save_state(tmp_path / "init.bin", other.initial_state(), other)
    code, _ = run(tmp_path, "simulate", dict(problem="monodomain_1d", lengths=[8.0],
                                             counts=[16], dt=0.05, T=0.1,
                                             initial_state=str(tmp_path / "init.bin")))
    assert code != EXIT_OK


@pytest.mark.slow
def test_simulate_hh_tissue(tmp_path):
    cfg = dict(problem="monodomain_1d", ionic="hh", lengths=[16.0], dx=0.2, dt=0.05, T=2.0,
               nodes=[8, 4], P=4)
    code, out = run(tmp_path, "simulate", cfg)
    assert code == EXIT_OK
    summary = json.loads((out / "summary.json").read_text())
    assert summary["completed_blocks"] == 10
    assert summary["max_final_residual"] < 5e-8


def test_converge_command(tmp_path):
    cfg = dict(DAHLQUIST, T=1.0, dts=[1 / 16, 1 / 32, 1 / 64], K_values=[1, 2], P=1, nodes=[4])
    code, out = run(tmp_path, "converge", cfg)
    assert code == EXIT_OK
    _, rows = read_csv_metadata(out / "convergence.csv")
    assert rows[0] == ["mode", "value", "dt", "error", "order"]
    assert len(rows) == 7
    finest = [float(rows[i][4]) for i in (3, 6)]
    assert_allclose(finest, [1, 2], atol=0.4)


def test_stability_command(tmp_path, capsys):
    cfg = dict(problem="dahlquist", nodes=[4, 2], P=2, K=5, grid_min=-100.0, grid_max=0.0,
               grid_points=5)
    code, out = run(tmp_path, "stability", cfg)
    assert code == EXIT_OK
    meta, rows = read_csv_metadata(out / "stability.csv")
    assert len(rows) == 6 and len(rows[0]) == 6
    assert "summary" in meta
    assert "max |R_P|" in capsys.readouterr().out


def test_iterations_command(tmp_path):
    cfg = dict(DAHLQUIST, dts=[0.05, 0.1], Ps=[1, 2, 4])
    code, out = run(tmp_path, "iterations", cfg)
    assert code == EXIT_OK
    _, rows = read_csv_metadata(out / "iterations.csv")
    assert len(rows) == 7
    code, _ = run(tmp_path, "iterations", cfg, "--tol", "1e-30", "--max-iters", "2")
    assert code == EXIT_MAX_ITERATIONS


def test_residuals_command(tmp_path):
    code, out = run(tmp_path, "residuals", dict(DAHLQUIST, n_blocks=2))
    assert code == EXIT_OK
    _, rows = read_csv_metadata(out / "residuals.csv")
    assert rows[0] == ["step", "t", "iteration", "residual"]
    assert {r[0] for r in rows[1:]} == {str(n) for n in range(8)}
