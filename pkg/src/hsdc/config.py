"""Run configuration: a flat JSON schema validated into :class:`RunConfig`.

Keys (all optional unless noted):

    problem         (required) dahlquist | linear_gating | monodomain_1d | monodomain_2d
    ionic           hh | synthetic                         (monodomain only, default hh)
    rho             stiffness target of the synthetic model (default 1000)
    lengths         domain side lengths in mm              (default [64] / [16, 16])
    counts          mesh cells per dimension               (default [320] / [80, 80])
    dx              mesh width in mm; overrides counts as round(length / dx)
    front_position  planar-front location in mm            (default 15% of the first side)
    front_width     planar-front width in mm               (default 1)
    front_gates     rest | steady: gates behind the front  (default rest, a travelling wave)
    lam_I, lam_E, lam_e   rates of the scalar test equation (default -1 each)
    lam, w_inf      linear gating rate and steady state    (default -1000, 0.25)
    y0              scalar initial value                   (default 1)
    dt              step size in ms (required by every subcommand except stability)
    T, n_steps      final time or number of steps; T = dt * n_steps if both given
    nodes           collocation nodes per level, strictly decreasing (default [8, 4])
    levels          number of levels; must match nodes
    P               steps per block (default 1)
    tol             relative residual tolerance            (default 5e-8)
    K               iteration cap                          (default 100)
    variant         hsdc | naive_sdc                       (default hsdc)
    workers         worker threads, 0 = logical emulation  (default 0)
    frozen_prefix   skip work on converged leading steps   (default false)
    out             output directory
    initial_state   path to a state file
    snapshot_every  blocks between state snapshots         (default 1)
    seed            reserved, unused by the numerics       (default 0)
    dts             step ladder for converge / iterations
    K_values        fixed iteration counts for converge (empty: iterate to tol)
    Ps              block sizes for iterations
    n_blocks        blocks per iterations / residuals run  (default 1)
    lam_E_scan      explicit rate of the stability scan    (default -2)
    grid_min, grid_max, grid_points   stability grid over [grid_min, grid_max]^2
"""

import json
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from hsdc.errors import ConfigError, HSDCError
from hsdc.ionic import hh_model, synthetic_stiff_model

__all__ = ["RunConfig", "PROBLEMS", "IONIC_MODELS", "parse_config", "load_config_file",
           "build_problem", "initial_value", "default_output_dir", "OUTPUT_ROOT_ENV"]

PROBLEMS = ("dahlquist", "linear_gating", "monodomain_1d", "monodomain_2d")
IONIC_MODELS = ("hh", "synthetic")
VARIANTS = ("hsdc", "naive_sdc")
OUTPUT_ROOT_ENV = "HSDC_OUTPUT_ROOT"


@dataclass
class RunConfig:
    problem: str
    ionic: str = "hh"
    rho: float = 1000.0
    lengths: list = None
    counts: list = None
    dx: float = None
    front_position: float = None
    front_width: float = 1.0
    front_gates: str = "rest"
    lam_I: float = -1.0
    lam_E: float = -1.0
    lam_e: float = -1.0
    lam: float = -1000.0
    w_inf: float = 0.25
    y0: float = 1.0
    dt: float = None
    T: float = None
    n_steps: int = None
    nodes: list = field(default_factory=lambda: [8, 4])
    levels: int = None
    P: int = 1
    tol: float = 5e-8
    K: int = 100
    variant: str = "hsdc"
    workers: int = 0
    frozen_prefix: bool = False
    out: str = None
    initial_state: str = None
    snapshot_every: int = 1
    seed: int = 0
    dts: list = None
    K_values: list = field(default_factory=list)
    Ps: list = field(default_factory=lambda: [1])
    n_blocks: int = 1
    lam_E_scan: float = -2.0
    grid_min: float = -1000.0
    grid_max: float = 0.0
    grid_points: int = 51

    @property
    def L(self):
        return len(self.nodes)

    @property
    def is_monodomain(self):
        return self.problem.startswith("monodomain")

    @property
    def exponential(self):
        return self.variant == "hsdc"

    def to_dict(self):
        return asdict(self)

    def identity(self):
        """Fields that determine the numerical results (hashed into output metadata)."""
        d = self.to_dict()
        for key in _NON_NUMERICAL:
            d.pop(key)
        return d


# output location and thread count never change the numbers written
_NON_NUMERICAL = ("out", "workers")


_FIELDS = {f.name for f in fields(RunConfig)}


def load_config_file(path):
    """Read a flat JSON object; malformed files raise :class:`ConfigError`."""
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found", field="config") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}", field="config") from None
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object", field="config")
    return data


def _number(data, key, kind=float, positive=False, nonneg=False, allow_none=True):
    v = data.get(key)
    if v is None:
        if allow_none:
            return None
        raise ConfigError(f"missing required field '{key}'", field=key)
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"field '{key}' must be a number, got {v!r}", field=key)
    if kind is int:
        if int(v) != v:
            raise ConfigError(f"field '{key}' must be an integer, got {v!r}", field=key)
        v = int(v)
    else:
        v = float(v)
        if not math.isfinite(v):
            raise ConfigError(f"field '{key}' must be finite", field=key)
    if positive and not v > 0:
        raise ConfigError(f"field '{key}' must be positive, got {v!r}", field=key)
    if nonneg and v < 0:
        raise ConfigError(f"field '{key}' must be nonnegative, got {v!r}", field=key)
    data[key] = v
    return v


def _list(data, key, kind=float, positive=False):
    v = data.get(key)
    if v is None:
        return None
    if isinstance(v, str):
        try:
            v = [kind(s) for s in v.replace(" ", "").split(",") if s]
        except ValueError:
            raise ConfigError(f"field '{key}' must be a comma-separated list", field=key) from None
    if isinstance(v, (int, float)) and not isinstance(v, bool):
        v = [v]
    if not isinstance(v, (list, tuple)):
        raise ConfigError(f"field '{key}' must be a list, got {v!r}", field=key)
    out = []
    for x in v:
        if isinstance(x, bool) or not isinstance(x, (int, float)):
            raise ConfigError(f"field '{key}' must hold numbers, got {x!r}", field=key)
        if kind is int and int(x) != x:
            raise ConfigError(f"field '{key}' must hold integers, got {x!r}", field=key)
        x = kind(x)
        if positive and not x > 0:
            raise ConfigError(f"field '{key}' entries must be positive, got {x!r}", field=key)
        out.append(x)
    data[key] = out
    return out


def _choice(data, key, options):
    v = data.get(key)
    if v is not None and v not in options:
        raise ConfigError(f"field '{key}' must be one of {list(options)}, got {v!r}", field=key)


def parse_config(path=None, overrides=None):
    """Validate a configuration.

    Args:
        path: optional JSON file.
        overrides: mapping of values that take precedence over the file
            (``None`` entries are ignored).

    Returns:
        A validated :class:`RunConfig`.

    Raises:
        ConfigError: naming the offending field.
    """
    data = {} if path is None else load_config_file(path)
    unknown = sorted(set(data) - _FIELDS)
    if unknown:
        raise ConfigError(f"unknown config key '{unknown[0]}'", field=unknown[0])
    for k, v in (overrides or {}).items():
        if k not in _FIELDS:
            raise ConfigError(f"unknown config key '{k}'", field=k)
        if v is not None:
            data[k] = v

    if data.get("problem") is None:
        raise ConfigError("missing required field 'problem'", field="problem")
    _choice(data, "problem", PROBLEMS)
    _choice(data, "ionic", IONIC_MODELS)
    _choice(data, "variant", VARIANTS)
    _choice(data, "front_gates", ("rest", "steady"))

    for key in ("lam_I", "lam_E", "lam_e", "lam", "w_inf", "y0", "lam_E_scan",
                "grid_min", "grid_max", "front_position"):
        _number(data, key)
    for key in ("rho", "dx", "dt", "tol", "front_width"):
        _number(data, key, positive=True)
    _number(data, "T", nonneg=True)
    for key in ("n_steps", "workers", "seed"):
        _number(data, key, kind=int, nonneg=True)
    for key in ("P", "K", "levels", "snapshot_every", "n_blocks", "grid_points"):
        _number(data, key, kind=int, positive=True)
    for key in ("lengths", "dts"):
        _list(data, key, positive=True)
    for key in ("counts", "Ps", "K_values"):
        _list(data, key, kind=int, positive=True)
    nodes = _list(data, "nodes", kind=int, positive=True)
    if "frozen_prefix" in data and not isinstance(data["frozen_prefix"], bool):
        raise ConfigError("field 'frozen_prefix' must be true or false", field="frozen_prefix")
    for key in ("out", "initial_state"):
        if data.get(key) is not None and not isinstance(data[key], str):
            raise ConfigError(f"field '{key}' must be a path string", field=key)

    levels = data.get("levels")
    if nodes is None:
        nodes = [max(1, 8 >> l) for l in range(levels or 2)]
        data["nodes"] = nodes
    if any(b >= a for a, b in zip(nodes, nodes[1:])):
        raise ConfigError("nodes must be strictly decreasing", field="nodes")
    if levels is not None and levels != len(nodes):
        raise ConfigError(f"levels = {levels} but {len(nodes)} node counts given", field="levels")
    data["levels"] = len(nodes)

    dt, T, n = data.get("dt"), data.get("T"), data.get("n_steps")
    if dt is not None:
        if T is None and n is not None:
            data["T"] = dt * n
        elif T is not None:
            steps = T / dt
            if abs(steps - round(steps)) > 1e-9 * max(1.0, steps):
                raise ConfigError(f"T = {T} is not a multiple of dt = {dt}", field="T")
            if n is not None and n != round(steps):
                raise ConfigError(f"T = {T} disagrees with dt * n_steps = {dt * n}", field="n_steps")
            data["n_steps"] = int(round(steps))

    problem = data["problem"]
    if problem.startswith("monodomain"):
        dim = 1 if problem == "monodomain_1d" else 2
        lengths = data.get("lengths") or ([64.0] if dim == 1 else [16.0, 16.0])
        if len(lengths) != dim:
            raise ConfigError(f"field 'lengths' needs {dim} entries for {problem}", field="lengths")
        if data.get("dx") is not None:
            counts = [max(1, int(round(L / data["dx"]))) for L in lengths]
        else:
            counts = data.get("counts") or ([320] if dim == 1 else [80, 80])
        if len(counts) != dim:
            raise ConfigError(f"field 'counts' needs {dim} entries for {problem}", field="counts")
        if any(c < 8 for c in counts):
            raise ConfigError("field 'counts' needs at least 8 cells per dimension", field="counts")
        data["lengths"], data["counts"] = lengths, counts
        fp = data.get("front_position")
        if fp is not None and not 0 < fp < lengths[0]:
            raise ConfigError(f"front_position {fp} outside (0, {lengths[0]})",
                              field="front_position")
    if data.get("grid_min") is not None and data.get("grid_max") is not None:
        if data["grid_min"] > data["grid_max"]:
            raise ConfigError("grid_min exceeds grid_max", field="grid_min")
    return RunConfig(**data)


def build_problem(cfg):
    """The split system described by ``cfg``."""
    from hsdc.monodomain import MonodomainProblem
    from hsdc.split_system import make_dahlquist, make_linear_gating

    if cfg.problem == "dahlquist":
        return make_dahlquist(cfg.lam_I, cfg.lam_E, cfg.lam_e)
    if cfg.problem == "linear_gating":
        return make_linear_gating(cfg.lam, cfg.w_inf)
    try:
        ionic = hh_model() if cfg.ionic == "hh" else synthetic_stiff_model(cfg.rho)
        return MonodomainProblem(ionic, cfg.lengths, cfg.counts)
    except HSDCError as exc:
        raise ConfigError(str(exc), field="ionic" if cfg.ionic != "hh" else "counts") from None


def initial_value(cfg, system):
    """Initial state: from ``cfg.initial_state`` if given, else the problem default."""
    from hsdc.monodomain import MonodomainProblem, load_state

    if cfg.initial_state is not None:
        problem = system if isinstance(system, MonodomainProblem) else None
        y, _, _ = load_state(cfg.initial_state, problem)
        if y.size != system.size:
            raise ConfigError("initial state size does not match the problem",
                              field="initial_state")
        return y
    if isinstance(system, MonodomainProblem):
        fp = cfg.front_position
        return system.planar_front_initial_state(fp, cfg.front_width, gates=cfg.front_gates)
    return np.full(system.size, cfg.y0)


def default_output_dir(cfg, command):
    """``cfg.out`` or ``$HSDC_OUTPUT_ROOT/<command>-<hash>`` (root defaults to ``./hsdc-output``)."""
    if cfg.out is not None:
        return Path(cfg.out)
    from hsdc.analysis import config_hash

    root = Path(os.environ.get(OUTPUT_ROOT_ENV, "hsdc-output"))
    return root / f"{command}-{config_hash(cfg.identity())}"
