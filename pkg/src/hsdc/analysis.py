"""Experiment drivers: stability scans, convergence studies, iteration statistics
and residual traces.

Every CSV written here starts with ``# key: value`` metadata lines (package
version and a hash of the generating configuration).
"""

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from hsdc.errors import DivergenceError, HSDCError, InvalidArgumentError, MaxIterationsError
from hsdc.pfasst import LevelHierarchy, run_block, run_many_blocks
from hsdc.split_system import DahlquistSystem

__all__ = [
    "VARIANTS",
    "StabilityScanSpec",
    "ScanResult",
    "ConvergenceRow",
    "ConvergenceTable",
    "IterationRow",
    "stability_function",
    "stability_values",
    "stability_scan",
    "convergence_study",
    "iteration_stats",
    "residual_trace",
    "config_hash",
    "write_csv",
    "read_csv_metadata",
]

VARIANTS = ("hsdc", "naive_sdc")


def _version():
    from hsdc import __version__
    return __version__


def config_hash(config):
    """Short SHA-256 digest of a JSON-serializable configuration."""
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def write_csv(path, header, rows, config=None, extra=None):
    """Write a CSV table preceded by ``# key: value`` metadata lines.

    Args:
        path: output file.
        header: column names, or None for a headerless matrix.
        rows: iterable of row sequences.
        config: configuration dict whose hash is recorded.
        extra: further metadata entries.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"version": _version(), "config_hash": config_hash(config or {})}
    meta.update(extra or {})
    with open(path, "w", newline="") as fh:
        for k, v in meta.items():
            fh.write(f"# {k}: {v}\n")
        w = csv.writer(fh, lineterminator="\n")
        if header is not None:
            w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
    return path


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def read_csv_metadata(path):
    """``(metadata dict, list of data rows)`` of a file written by :func:`write_csv`."""
    meta, rows = {}, []
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    body = []
    for line in lines:
        if line.startswith("# "):
            k, _, v = line[2:].partition(": ")
            meta[k] = v
        else:
            body.append(line)
    rows = list(csv.reader(body))
    return meta, rows


# -- stability --------------------------------------------------------------


def _grid(values, name):
    arr = np.atleast_1d(np.asarray(values, dtype=float))
    if arr.ndim != 1 or arr.size == 0:
        raise InvalidArgumentError(f"{name} grid must be a non-empty list")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError(f"{name} grid must be finite")
    return tuple(float(v) for v in arr)


@dataclass(frozen=True)
class StabilityScanSpec:
    """Scalar test-equation setup for stability scans.

    Attributes:
        lam_E: explicit rate.
        lam_I: implicit rates (grid rows).
        lam_e: exponential rates (grid columns).
        P: steps per block.
        nodes: node counts per level.
        K: iteration cap.
        tol: stopping tolerance (0 runs exactly ``K`` iterations).
        variant: ``"hsdc"`` or ``"naive_sdc"`` (the latter sets ``Lambda_n = 0``).
        dt: step size, fixed to 1.
    """

    lam_E: float
    lam_I: tuple = (0.0,)
    lam_e: tuple = (0.0,)
    P: int = 1
    nodes: tuple = (6,)
    K: int = 100
    tol: float = 1e-10
    variant: str = "hsdc"
    dt: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "lam_I", _grid(self.lam_I, "lam_I"))
        object.__setattr__(self, "lam_e", _grid(self.lam_e, "lam_e"))
        object.__setattr__(self, "nodes", tuple(int(m) for m in np.atleast_1d(self.nodes)))
        if not math.isfinite(self.lam_E):
            raise InvalidArgumentError("lam_E must be finite")
        if self.dt != 1.0:
            raise InvalidArgumentError("stability scans use unit steps")
        if self.variant not in VARIANTS:
            raise InvalidArgumentError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if int(self.P) != self.P or self.P < 1:
            raise InvalidArgumentError("P must be a positive integer")
        if int(self.K) != self.K or self.K < 1:
            raise InvalidArgumentError("K must be a positive integer")
        if not self.tol >= 0:
            raise InvalidArgumentError("tol must be nonnegative")

    def to_dict(self):
        return asdict(self)


def stability_values(spec, lam_I, lam_e):
    """``|R_P|`` for paired arrays of rates, evaluated as one batched block.

    Diverged or non-finite results are reported as ``inf``.
    """
    lam_I = np.atleast_1d(np.asarray(lam_I, dtype=float))
    lam_e = np.atleast_1d(np.asarray(lam_e, dtype=float))
    lam_I, lam_e = np.broadcast_arrays(lam_I, lam_e)
    if not (np.all(np.isfinite(lam_I)) and np.all(np.isfinite(lam_e))):
        raise InvalidArgumentError("rates must be finite")
    sys_ = DahlquistSystem(lam_I.ravel(), np.full(lam_I.size, spec.lam_E), lam_e.ravel())
    hier = LevelHierarchy(sys_, spec.nodes, spec.dt, exponential=spec.variant == "hsdc")
    with np.errstate(all="ignore"):
        try:
            res = run_block(sys_, hier, np.ones(sys_.size), spec.P, spec.tol, spec.K,
                            strict=False)
            y = np.abs(res.y_end)
        except DivergenceError:
            y = np.full(sys_.size, np.inf)
    y = np.where(np.isfinite(y), y, np.inf)
    return y.reshape(lam_I.shape)


def stability_function(spec, lam_I, lam_e):
    """``|R_P(lam_I, lam_E, lam_e)|``: modulus after one block of ``P`` unit steps from 1."""
    if not (math.isfinite(lam_I) and math.isfinite(lam_e)):
        raise InvalidArgumentError("rates must be finite")
    return float(stability_values(spec, [lam_I], [lam_e])[0])


@dataclass
class ScanResult:
    """``values[i, j] = |R_P(lam_I[i], lam_e[j])|``."""

    spec: StabilityScanSpec
    values: np.ndarray

    @property
    def max_abs(self):
        return float(np.max(self.values))

    @property
    def n_unstable(self):
        return int(np.count_nonzero(self.values > 1.0))


def stability_scan(spec, path=None, chunk=None):
    """Evaluate ``|R_P|`` on the ``lam_I x lam_e`` grid.

    Args:
        spec: the scan setup.
        path: optional CSV output (first row ``lam_I\\lam_e`` then the ``lam_e``
            values, first column ``lam_I``), followed by a summary comment line.
        chunk: maximum grid points per batched block (default: whole grid).
    """
    LI, LE = np.meshgrid(spec.lam_I, spec.lam_e, indexing="ij")
    flat_I, flat_e = LI.ravel(), LE.ravel()
    n = flat_I.size
    chunk = n if chunk is None else max(1, int(chunk))
    out = np.empty(n)
    for s in range(0, n, chunk):
        out[s:s + chunk] = stability_values(spec, flat_I[s:s + chunk], flat_e[s:s + chunk])
    result = ScanResult(spec=spec, values=out.reshape(LI.shape))
    if path is not None:
        rows = [[li] + list(result.values[i]) for i, li in enumerate(spec.lam_I)]
        write_csv(path, ["lam_I\\lam_e"] + list(spec.lam_e), rows, spec.to_dict())
        with open(path, "a") as fh:
            fh.write(f"# summary: max_abs={result.max_abs!r} n_gt_1={result.n_unstable}\n")
    return result


# -- convergence ------------------------------------------------------------


@dataclass
class ConvergenceRow:
    dt: float
    error: float
    order: float


@dataclass
class ConvergenceTable:
    """Errors against a reference solution with observed orders.

    ``order`` of row ``i`` is computed from rows ``i - 1`` and ``i`` (NaN in row 0).
    """

    rows: list
    reference_dt: float
    reference: np.ndarray = field(repr=False)

    @property
    def dts(self):
        return np.array([r.dt for r in self.rows])

    @property
    def errors(self):
        return np.array([r.error for r in self.rows])

    @property
    def orders(self):
        return np.array([r.order for r in self.rows[1:]])

    def to_csv(self, path, config=None):
        return write_csv(path, ["dt", "error", "order"],
                         [[r.dt, r.error, r.order] for r in self.rows], config)


def _integrate(system, y0, nodes, dt, T, P, tol, K, t0=0.0, exponential=True, workers=0):
    n_steps = T / dt
    if abs(n_steps - round(n_steps)) > 1e-9 * max(1.0, n_steps):
        raise InvalidArgumentError(f"final time {T} is not a multiple of the step {dt}")
    n_steps = int(round(n_steps))
    if n_steps % P:
        raise InvalidArgumentError(f"{n_steps} steps do not split into blocks of {P}")
    hier = LevelHierarchy(system, nodes, dt, exponential)
    strict = tol > 0
    stats = run_many_blocks(system, hier, y0, P, n_steps // P, tol, K, t0=t0,
                            workers=workers, strict=strict)
    return stats


def _rel_err(y, ref):
    return float(np.max(np.abs(y - ref)) / np.max(np.abs(ref)))


def convergence_study(system, y0, nodes, dts, T, K=None, tol=None, P=1, reference=None,
                      reference_nodes=None, workers=0, exponential=True):
    """Self-convergence study.

    Either ``K`` (fixed iteration count per block) or ``tol`` (iterate to
    convergence with cap 100) must be given.

    Args:
        system: the split system.
        y0: initial value at ``t = 0``.
        nodes: node counts per level.
        dts: at least three step sizes forming a dyadic ladder (largest first).
        T: final time.
        K: fixed iterations per block.
        tol: stopping tolerance.
        P: steps per block.
        reference: optional precomputed reference state at ``T``; by default the
            same method at ``min(dts) / 4`` with ``tol = 1e-13``.
        reference_nodes: node counts for the reference run (default ``nodes``).
        exponential: False selects the naive SDC sweeper (``Lambda_n = 0``).

    Returns:
        A :class:`ConvergenceTable`.
    """
    dts = [float(d) for d in dts]
    if len(dts) < 3:
        raise InvalidArgumentError("need at least three step sizes")
    ratios = np.array(dts[:-1]) / np.array(dts[1:])
    if not np.allclose(ratios, 2.0, rtol=1e-12):
        raise InvalidArgumentError("step sizes must halve from one entry to the next")
    if (K is None) == (tol is None):
        raise InvalidArgumentError("give exactly one of K and tol")
    ref_dt = dts[-1] / 4.0
    if reference is None:
        rnodes = nodes if reference_nodes is None else reference_nodes
        reference = _integrate(system, y0, rnodes, ref_dt, T, 1, 1e-13, 100,
                                exponential=exponential).y_final
    reference = np.asarray(reference, dtype=float)
    rows = []
    for i, dt in enumerate(dts):
        if K is not None:
            y = _integrate(system, y0, nodes, dt, T, P, 0.0, K, exponential=exponential,
                           workers=workers).y_final
        else:
            y = _integrate(system, y0, nodes, dt, T, P, tol, 100, exponential=exponential,
                           workers=workers).y_final
        err = _rel_err(y, reference)
        order = math.nan
        if i > 0 and rows[-1].error > 0 and err > 0:
            order = math.log(rows[-1].error / err) / math.log(dts[i - 1] / dt)
        rows.append(ConvergenceRow(dt, err, order))
    return ConvergenceTable(rows=rows, reference_dt=ref_dt, reference=reference)


# -- iterations and residuals -------------------------------------------------


@dataclass
class IterationRow:
    dt: float
    P: int
    mean: float
    std: float
    converged: bool


def iteration_stats(system, y0, dts, Ps, nodes, tol, K, n_blocks=1, workers=0,
                    frozen_prefix=False, exponential=True):
    """Mean and standard deviation of per-step iteration counts per ``(dt, P)`` cell.

    Each cell runs ``n_blocks`` blocks of ``P`` steps (one block covers
    ``T = P dt``).  A failing cell yields NaN statistics and the scan continues.

    Returns:
        List of :class:`IterationRow` in ``dts``-major order.
    """
    rows = []
    for dt in dts:
        for P in Ps:
            hier = LevelHierarchy(system, nodes, dt, exponential)
            try:
                st = run_many_blocks(system, hier, y0, P, n_blocks, tol, K, workers=workers,
                                     frozen_prefix=frozen_prefix, strict=True)
                rows.append(IterationRow(float(dt), int(P), st.mean_iterations,
                                         st.std_iterations, True))
            except (MaxIterationsError, DivergenceError, HSDCError):
                rows.append(IterationRow(float(dt), int(P), math.nan, math.nan, False))
    return rows


def residual_trace(system, y0, nodes, dt, P, n_blocks, tol, K, workers=0, path=None,
                   config=None, strict=False, exponential=True, frozen_prefix=False):
    """Relative residual after each iteration for every step.

    Returns:
        List of ``(step, t_n, iteration, residual)`` tuples, ``step`` counted
        globally over all blocks and ``t_n`` the end time of that step.
    """
    hier = LevelHierarchy(system, nodes, dt, exponential)
    st = run_many_blocks(system, hier, y0, P, n_blocks, tol, K, workers=workers,
                         frozen_prefix=frozen_prefix, strict=strict)
    rows = []
    for b, tr in enumerate(st.residual_traces):
        for p in range(P):
            n = b * P + p
            for k in range(tr.shape[0]):
                rows.append((n, (n + 1) * dt, k + 1, float(tr[k, p])))
    if path is not None:
        write_csv(path, ["step", "t", "iteration", "residual"], rows, config)
    return rows
