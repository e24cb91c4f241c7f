"""Command-line entry point.

Subcommands ``simulate``, ``converge``, ``stability``, ``iterations`` and
``residuals``.  Exit codes: 0 success, 2 invalid configuration, 3 iteration cap
reached, 4 divergence, 1 any other failure.
"""

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from hsdc import __version__
from hsdc.analysis import (StabilityScanSpec, config_hash, convergence_study, iteration_stats,
                           residual_trace, stability_scan, write_csv)
from hsdc.config import build_problem, default_output_dir, initial_value, parse_config
from hsdc.errors import ConfigError, DivergenceError, HSDCError, MaxIterationsError
from hsdc.monodomain import MonodomainProblem, save_state
from hsdc.pfasst import LevelHierarchy, run_block

__all__ = ["main", "build_parser", "EXIT_OK", "EXIT_CONFIG", "EXIT_MAX_ITERATIONS",
           "EXIT_DIVERGENCE"]

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_MAX_ITERATIONS = 3
EXIT_DIVERGENCE = 4

COMMANDS = ("simulate", "converge", "stability", "iterations", "residuals")


def build_parser():
    parser = argparse.ArgumentParser(prog="hsdc", description="Hybrid SDC / PFASST solver.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--problem", help="override the problem type")
        p.add_argument("--dt", type=float, help="step size (ms)")
        p.add_argument("--T", type=float, dest="T", help="final time (ms)")
        p.add_argument("--nodes", help="nodes per level, e.g. 8,4")
        p.add_argument("--levels", type=int, help="number of levels")
        p.add_argument("--procs", type=int, dest="P", help="steps per block P")
        p.add_argument("--tol", type=float, help="relative residual tolerance")
        p.add_argument("--max-iters", type=int, dest="K", help="iteration cap K")
        p.add_argument("--variant", choices=("hsdc", "naive_sdc"))
        p.add_argument("--out", help="output directory")
        p.add_argument("--workers", type=int, help="worker threads (0: logical emulation)")
        p.add_argument("--frozen-prefix", action="store_const", const=True,
                       dest="frozen_prefix", help="stop iterating converged leading steps")
    return parser


def _overrides(args):
    keys = ("problem", "dt", "T", "nodes", "levels", "P", "tol", "K", "variant", "out",
            "workers", "frozen_prefix")
    return {k: getattr(args, k) for k in keys}


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


def _finite_or_none(x):
    x = float(x)
    return x if math.isfinite(x) else None


def _require(cfg, key):
    if getattr(cfg, key) is None:
        raise ConfigError(f"missing required field '{key}'", field=key)


# -- subcommands ------------------------------------------------------------


def cmd_simulate(cfg, out):
    _require(cfg, "dt")
    if cfg.T is None:
        raise ConfigError("missing required field 'T' (or 'n_steps')", field="T")
    n_steps = cfg.n_steps
    if n_steps % cfg.P:
        raise ConfigError(f"{n_steps} steps do not split into blocks of P = {cfg.P}", field="P")
    system = build_problem(cfg)
    y = initial_value(cfg, system)
    problem = system if isinstance(system, MonodomainProblem) else None

    def snapshot(step, t, state):
        save_state(out / f"state_{step:06d}.bin", state, problem, t=t)

    snapshot(0, 0.0, y)
    rows = []
    summary = dict(status="ok", exit_code=EXIT_OK, n_steps=n_steps, n_blocks=n_steps // cfg.P,
                   completed_blocks=0, t_final=0.0, total_iterations=0,
                   mean_iterations=None, std_iterations=None, max_final_residual=None)
    code = EXIT_OK
    if n_steps:
        hier = LevelHierarchy(system, cfg.nodes, cfg.dt, cfg.exponential)
        n_blocks = n_steps // cfg.P
        t = 0.0
        for b in range(n_blocks):
            try:
                res = run_block(system, hier, y, cfg.P, cfg.tol, cfg.K, t0=t,
                                workers=cfg.workers, frozen_prefix=cfg.frozen_prefix)
                failure = None
            except MaxIterationsError as exc:
                res, failure = exc.result, ("max_iterations", EXIT_MAX_ITERATIONS, str(exc))
            except DivergenceError as exc:
                res, failure = None, ("diverged", EXIT_DIVERGENCE, str(exc))
            if res is not None:
                final = res.residual_trace[-1]
                for p in range(cfg.P):
                    n = b * cfg.P + p
                    rows.append([b, n, (n + 1) * cfg.dt, int(res.iterations[p]),
                                 int(final[p] < cfg.tol or final[p] == 0), float(final[p])])
            if failure is not None:
                summary.update(status=failure[0], exit_code=failure[1], message=failure[2])
                code = failure[1]
                break
            y = res.y_end
            t = (b + 1) * cfg.P * cfg.dt
            summary["completed_blocks"] = b + 1
            summary["t_final"] = t
            if (b + 1) % cfg.snapshot_every == 0 or b + 1 == n_blocks:
                snapshot((b + 1) * cfg.P, t, y)
    write_csv(out / "iterations.csv",
              ["block", "step", "t", "iterations", "converged", "final_residual"],
              rows, cfg.identity())
    if rows:
        its = np.array([r[3] for r in rows], dtype=float)
        summary.update(total_iterations=int(its.sum()), mean_iterations=float(its.mean()),
                       std_iterations=float(its.std()),
                       max_final_residual=_finite_or_none(max(r[5] for r in rows)))
    if code == EXIT_OK and np.all(np.isfinite(y)):
        summary["final_state_max_abs"] = float(np.max(np.abs(y)))
    _write_json(out / "summary.json", summary)
    return code


def cmd_converge(cfg, out):
    _require(cfg, "T")
    dts = cfg.dts
    if dts is None:
        _require(cfg, "dt")
        dts = [cfg.dt, cfg.dt / 2, cfg.dt / 4]
    system = build_problem(cfg)
    y0 = initial_value(cfg, system)
    rows = []
    reference = None
    runs = [("K", k) for k in cfg.K_values] or [("tol", cfg.tol)]
    for kind, value in runs:
        kw = {"K": value} if kind == "K" else {"tol": value}
        table = convergence_study(system, y0, cfg.nodes, dts, cfg.T, P=cfg.P,
                                  reference=reference, workers=cfg.workers,
                                  exponential=cfg.exponential, **kw)
        reference = table.reference
        for r in table.rows:
            rows.append([kind, value, r.dt, r.error, r.order])
            print(f"{kind}={value} dt={r.dt:g} error={r.error:.3e} order={r.order:.3f}")
    write_csv(out / "convergence.csv", ["mode", "value", "dt", "error", "order"], rows,
              cfg.identity())
    return EXIT_OK


def cmd_stability(cfg, out):
    grid = np.linspace(cfg.grid_min, cfg.grid_max, cfg.grid_points)
    spec = StabilityScanSpec(lam_E=cfg.lam_E_scan, lam_I=grid, lam_e=grid, P=cfg.P,
                             nodes=tuple(cfg.nodes), K=cfg.K, tol=cfg.tol, variant=cfg.variant)
    res = stability_scan(spec, path=out / "stability.csv")
    print(f"max |R_P| = {res.max_abs!r}, points with |R_P| > 1: {res.n_unstable}")
    return EXIT_OK


def cmd_iterations(cfg, out):
    dts = cfg.dts
    if dts is None:
        _require(cfg, "dt")
        dts = [cfg.dt]
    system = build_problem(cfg)
    y0 = initial_value(cfg, system)
    rows = iteration_stats(system, y0, dts, cfg.Ps, cfg.nodes, cfg.tol, cfg.K,
                           n_blocks=cfg.n_blocks, workers=cfg.workers,
                           frozen_prefix=cfg.frozen_prefix, exponential=cfg.exponential)
    write_csv(out / "iterations.csv", ["dt", "P", "mean", "std", "converged"],
              [[r.dt, r.P, r.mean, r.std, int(r.converged)] for r in rows], cfg.identity())
    for r in rows:
        print(f"dt={r.dt:g} P={r.P} mean={r.mean:.3f} std={r.std:.3f} converged={r.converged}")
    return EXIT_OK if all(r.converged for r in rows) else EXIT_MAX_ITERATIONS


def cmd_residuals(cfg, out):
    _require(cfg, "dt")
    system = build_problem(cfg)
    y0 = initial_value(cfg, system)
    residual_trace(system, y0, cfg.nodes, cfg.dt, cfg.P, cfg.n_blocks, cfg.tol, cfg.K,
                   workers=cfg.workers, path=out / "residuals.csv", config=cfg.identity(),
                   exponential=cfg.exponential, frozen_prefix=cfg.frozen_prefix)
    return EXIT_OK


_DISPATCH = {
    "simulate": cmd_simulate,
    "converge": cmd_converge,
    "stability": cmd_stability,
    "iterations": cmd_iterations,
    "residuals": cmd_residuals,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        overrides = _overrides(args)
        if args.config is None and overrides["problem"] is None:
            raise ConfigError("give --config or --problem", field="problem")
        cfg = parse_config(args.config, overrides)
        out = default_output_dir(cfg, args.command)
        out.mkdir(parents=True, exist_ok=True)
        resolved = cfg.to_dict()
        resolved["command"] = args.command
        resolved["version"] = __version__
        resolved["config_hash"] = config_hash(cfg.identity())
        _write_json(out / "config.resolved.json", resolved)
        code = _DISPATCH[args.command](cfg, out)
    except ConfigError as exc:
        print(f"hsdc: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MaxIterationsError as exc:
        print(f"hsdc: {exc}", file=sys.stderr)
        return EXIT_MAX_ITERATIONS
    except DivergenceError as exc:
        print(f"hsdc: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (HSDCError, OSError) as exc:
        print(f"hsdc: {exc}", file=sys.stderr)
        return EXIT_ERROR
    print(f"hsdc: wrote {Path(out)}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
