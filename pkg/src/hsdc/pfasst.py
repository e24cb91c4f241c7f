"""Multilevel parallel-in-time controller.

A block of ``P`` consecutive steps is the composite system

    D(z) = C_P(z) - (E (x) H) z = b,

where ``H`` feeds the last node of step ``p - 1`` into every node of step ``p``
and ``b`` carries the initial value into step 0.  Levels ``l = 0..L-1`` use
decreasing node counts at the same step size.  Each iteration

1. restricts the fine iterate level by level, forming FAS corrections
   ``tau_{l+1} = C_{l+1}(R z_l) - R C_l(z_l) + R tau_l`` and sweeping every step
   independently on intermediate levels,
2. sweeps the coarsest level step after step, passing each step's last node on,
3. interpolates the coarse change back up, sweeping independently per step,
4. evaluates the fine composite residual.

The block has converged when every step satisfies
``||r_p||_inf < tol ||y_p||_inf``.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from hsdc.collocation import CollocationLevel, interp_matrix
from hsdc.errors import DivergenceError, InvalidArgumentError, MaxIterationsError
from hsdc.sweeper import Sweeper, relative_residual

__all__ = [
    "LevelHierarchy",
    "BlockState",
    "BlockResult",
    "RunStatistics",
    "restrict_block",
    "prolong_block",
    "fas_tau",
    "coarse_sequential_pass",
    "fine_parallel_pass",
    "burn_in",
    "run_block",
    "run_many_blocks",
]


def _node_transfer(from_nodes, to_nodes):
    """Node-space transfer including the copied left endpoint."""
    inner = interp_matrix(from_nodes, to_nodes)
    out = np.zeros((len(to_nodes) + 1, len(from_nodes) + 1))
    out[0, 0] = 1.0
    out[1:, 1:] = inner
    return out


class LevelHierarchy:
    """Collocation levels, sweepers and transfer operators for one step size.

    Args:
        system: the split system.
        node_counts: ``M_1 > M_2 > ... > M_L >= 1``.
        dt: step size shared by all levels.
        exponential: passed to every :class:`~hsdc.sweeper.Sweeper`.
        coupling: passed to every :class:`~hsdc.sweeper.Sweeper`.
    """

    def __init__(self, system, node_counts, dt, exponential=True, coupling="exact"):
        counts = [int(m) for m in np.atleast_1d(node_counts)]
        if not counts or any(m < 1 for m in counts):
            raise InvalidArgumentError("node counts must be positive integers")
        if any(a <= b for a, b in zip(counts, counts[1:])):
            raise InvalidArgumentError("nodes must be strictly decreasing")
        self.system = system
        self.dt = float(dt)
        self.node_counts = tuple(counts)
        self.levels = [CollocationLevel.radau(m) for m in counts]
        self.sweepers = [Sweeper(system, lev, dt, exponential, coupling=coupling)
                         for lev in self.levels]
        self.R = [_node_transfer(a.nodes, b.nodes) for a, b in zip(self.levels, self.levels[1:])]
        self.T = [_node_transfer(b.nodes, a.nodes) for a, b in zip(self.levels, self.levels[1:])]

    @property
    def L(self):
        return len(self.levels)

    def restrict(self, l, nodes):
        """Node values at level ``l`` mapped to level ``l + 1``."""
        out = self.R[l] @ nodes
        out[0] = nodes[0]
        return out

    def prolong(self, l, nodes):
        """Node values at level ``l + 1`` mapped to level ``l``."""
        out = self.T[l] @ nodes
        out[0] = nodes[0]
        return out


def restrict_block(hier, block, from_level, to_level):
    """Apply the restriction stepwise to a list of node arrays."""
    if to_level != from_level + 1 or not 0 <= from_level < hier.L - 1:
        raise InvalidArgumentError(f"cannot restrict from level {from_level} to {to_level}")
    return [hier.restrict(from_level, np.asarray(z)) for z in block]


def prolong_block(hier, block, from_level, to_level):
    """Apply the prolongation stepwise to a list of node arrays."""
    if to_level != from_level - 1 or not 1 <= from_level < hier.L:
        raise InvalidArgumentError(f"cannot prolong from level {from_level} to {to_level}")
    return [hier.prolong(to_level, np.asarray(z)) for z in block]


@dataclass
class BlockState:
    """Iterate of one block.

    Attributes:
        t0: start time of the block.
        y0: initial value of the block.
        steps: per level, the list of :class:`~hsdc.sweeper.StepNodes` (one per step).
        tau: per level, the FAS corrections (``(P, M_l + 1, N)`` array or None).
        residuals: latest relative residual per step (finest level).
        iterations: iteration count per step.
    """

    t0: float
    y0: np.ndarray
    steps: list
    tau: list
    residuals: np.ndarray = None
    iterations: np.ndarray = None

    @property
    def P(self):
        return len(self.steps[0])

    def fine_nodes(self):
        return np.stack([s.y for s in self.steps[0]])


class _Runner:
    """Maps independent per-step work onto threads (or runs it inline)."""

    def __init__(self, workers):
        self.workers = int(workers or 0)
        self._pool = ThreadPoolExecutor(self.workers) if self.workers > 1 else None

    def map(self, fn, items):
        items = list(items)
        if self._pool is None or len(items) < 2:
            return [fn(x) for x in items]
        return list(self._pool.map(fn, items))

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()


def _incoming(steps, p, y0, first=0, frozen_end=None):
    """Initial value fed into step ``p``: previous last node or the block start."""
    if p == first:
        return y0 if frozen_end is None else frozen_end
    return steps[p - 1].y[-1]


def fas_tau(hier, fine_steps, coarse_steps, l, fine_tau=None, runner=None):
    """FAS correction on level ``l + 1`` from the iterate on level ``l``.

    ``coarse_steps`` must hold the restriction of ``fine_steps``.  The
    cross-step ``H`` terms of both composite operators cancel because the
    restriction keeps node 0 and the last node (``c_M = 1`` on every level),
    so the correction is formed stepwise.
    """
    fsw, csw = hier.sweepers[l], hier.sweepers[l + 1]

    def one(p):
        t = csw.collocation_op(coarse_steps[p]) - hier.R[l] @ fsw.collocation_op(fine_steps[p])
        if fine_tau is not None:
            t += hier.R[l] @ fine_tau[p]
        t[0] = 0.0 if fine_tau is None else fine_tau[p][0]
        return t

    run = runner.map if runner is not None else (lambda f, xs: [f(x) for x in xs])
    return np.stack(run(one, range(len(fine_steps))))


def coarse_sequential_pass(sweeper, steps, y0, tau=None, first=0, frozen_end=None):
    """Sweep steps in order, each receiving the freshly updated last node of its predecessor.

    Args:
        sweeper: the level's sweeper.
        steps: current iterate (list of StepNodes), used as sweep start.
        y0: block initial value.
        tau: optional FAS corrections per step.
        first: steps before this index are left untouched.
        frozen_end: incoming value for step ``first`` when ``first > 0``.
    """
    out = list(steps)
    for p in range(first, len(steps)):
        u = _incoming(out, p, y0, first, frozen_end)
        try:
            out[p] = sweeper.sweep(steps[p], u, None if tau is None else tau[p])
        except DivergenceError as exc:
            exc.step = p
            raise
    return out


def fine_parallel_pass(sweeper, steps, y0, tau=None, runner=None, first=0, frozen_end=None):
    """Sweep every step independently, each receiving its predecessor's current last node."""
    incoming = [_incoming(steps, p, y0, first, frozen_end) for p in range(len(steps))]

    def one(p):
        if p < first:
            return steps[p]
        try:
            return sweeper.sweep(steps[p], incoming[p], None if tau is None else tau[p])
        except DivergenceError as exc:
            exc.step = p
            raise

    run = runner.map if runner is not None else (lambda f, xs: [f(x) for x in xs])
    return run(one, range(len(steps)))


def burn_in(hier, y0, P, t0=0.0):
    """Predictor: one sequential coarse pass, each step swept from a spread of its incoming value.

    Step ``p`` is initialized with the spread of the value handed on by step
    ``p - 1`` (``y0`` for step 0) and swept once on the coarsest level without
    FAS correction.  The result is prolonged to every finer level.

    Returns:
        Per-level lists of StepNodes (index 0 is the finest level).
    """
    sw = hier.sweepers[-1]
    u = np.asarray(y0, dtype=float)
    coarse = []
    for p in range(P):
        try:
            step = sw.sweep(sw.spread(t0 + p * hier.dt, u), u)
        except DivergenceError as exc:
            exc.step = p
            raise
        coarse.append(step)
        u = step.y[-1]
    levels = [None] * hier.L
    levels[-1] = coarse
    for l in range(hier.L - 2, -1, -1):
        fsw = hier.sweepers[l]
        levels[l] = [fsw.evaluate(s.t0, hier.prolong(l, s.y)) for s in levels[l + 1]]
    return levels


@dataclass
class BlockResult:
    """Outcome of :func:`run_block`.

    Attributes:
        y_end: value at the end of the block.
        iterations: per-step iteration counts ``k_n``.
        residual_trace: relative residuals, shape ``(k, P)`` (``(k, P, instances)``
            for batched systems).
        converged: whether the stopping rule was met (for every instance).
        n_iterations: number of block iterations performed.
        block: the final iterate.
        instance_iterations: per-instance counts for batched systems.
        instance_converged: per-instance convergence flags.
    """

    y_end: np.ndarray
    iterations: np.ndarray
    residual_trace: np.ndarray
    converged: bool
    n_iterations: int
    block: BlockState = field(repr=False, default=None)
    instance_iterations: np.ndarray = None
    instance_converged: np.ndarray = None


def _group_slices(system):
    n = system.instances
    size = system.size
    if size % n:
        raise InvalidArgumentError("state size must be a multiple of the instance count")
    w = size // n
    return n, w


def run_block(system, hier, y0, P, tol, K, t0=0.0, workers=0, frozen_prefix=False,
              strict=True, burn=None):
    """Iterate one block of ``P`` steps (spread start for ``P = 1``, burn-in otherwise).

    Args:
        system: the split system (must be the one ``hier`` was built for).
        hier: level hierarchy.
        y0: initial value.
        P: number of steps in the block.
        tol: relative residual tolerance; 0 runs exactly ``K`` iterations.
        K: iteration cap.
        t0: start time.
        workers: threads for the per-step passes (0 or 1 runs inline).
        frozen_prefix: stop iterating steps once they and all earlier steps have
            converged.
        strict: raise :class:`MaxIterationsError` when the cap is hit unconverged.
        burn: force (True) or suppress (False) the burn-in; default is burn-in
            only for ``P > 1``.

    Returns:
        A :class:`BlockResult`.
    """
    if int(P) != P or P < 1:
        raise InvalidArgumentError(f"number of steps must be a positive integer, got {P!r}")
    if int(K) != K or K < 1:
        raise InvalidArgumentError(f"iteration cap must be a positive integer, got {K!r}")
    if not tol >= 0:
        raise InvalidArgumentError(f"tolerance must be nonnegative, got {tol!r}")
    if hier.system is not system:
        raise InvalidArgumentError("hierarchy was built for a different system")
    P, K = int(P), int(K)
    n_inst, width = _group_slices(system)
    if frozen_prefix and n_inst > 1:
        raise InvalidArgumentError("frozen prefix is not supported for batched systems")

    y0 = np.array(y0, dtype=float)
    dt = hier.dt
    L = hier.L
    sw0 = hier.sweepers[0]
    use_burn = (P > 1) if burn is None else bool(burn)
    if use_burn:
        levels = burn_in(hier, y0, P, t0)
    else:
        levels = [None] * L
        levels[0] = [sw0.spread(t0 + p * dt, y0) for p in range(P)]
    fine = levels[0]
    taus = [None] * L

    runner = _Runner(workers)
    first = 0
    frozen_end = None
    iterations = np.zeros(P, dtype=int)
    trace = []
    inst_done = np.zeros(n_inst, dtype=bool)
    inst_iter = np.zeros(n_inst, dtype=int)
    y_end = np.empty(system.size)
    k = 0
    converged = False
    try:
        while not converged and k < K:
            # downward leg
            starts = [None] * L
            current = fine
            for l in range(1, L):
                csw = hier.sweepers[l]
                restricted = runner.map(
                    lambda p, cur=current, lev=l, csw=csw:
                        csw.evaluate(cur[p].t0, hier.restrict(lev - 1, cur[p].y)),
                    range(P))
                taus[l] = fas_tau(hier, current, restricted, l - 1, taus[l - 1], runner)
                starts[l] = restricted
                if l < L - 1:
                    current = fine_parallel_pass(csw, restricted, y0, taus[l], runner,
                                                 first, frozen_end)
                else:
                    current = coarse_sequential_pass(csw, restricted, y0, taus[l],
                                                     first, frozen_end)
                levels[l] = current
            if L == 1:
                levels[0] = coarse_sequential_pass(sw0, fine, y0, None, first, frozen_end)
            # upward leg
            for l in range(L - 2, -1, -1):
                sw = hier.sweepers[l]
                base = fine if l == 0 else levels[l]
                coarse_new, coarse_start = levels[l + 1], starts[l + 1]

                def corrected(p, base=base, cn=coarse_new, cs=coarse_start, lev=l, sw=sw):
                    if p < first:
                        return base[p]
                    c = hier.prolong(lev, cn[p].y - cs[p].y)
                    c[0] = cn[p].y[0] - cs[p].y[0]
                    return sw.evaluate(base[p].t0, base[p].y + c)

                start = runner.map(corrected, range(P))
                levels[l] = fine_parallel_pass(sw, start, y0, taus[l], runner, first, frozen_end)
            fine = levels[0]
            k += 1

            # composite residual on the finest level
            def res(p):
                u = _incoming(fine, p, y0, 0, None)
                r = sw0.residual(fine[p], u)
                return relative_residual(r, fine[p].y, n_inst)

            rel = np.array(runner.map(res, range(P)))
            trace.append(rel)
            if n_inst == 1:
                if not np.all(np.isfinite(rel)):
                    bad = int(np.flatnonzero(~np.isfinite(rel))[0])
                    raise DivergenceError("block iterate became non-finite", step=bad)
                ok = rel < tol
                ok |= rel == 0.0
                iterations[first:] = k
                if frozen_prefix:
                    while first < P and ok[first]:
                        first += 1
                    frozen_end = fine[first - 1].y[-1] if first > 0 else None
                    converged = first == P
                else:
                    converged = bool(np.all(ok))
            else:
                ok = np.all((rel < tol) | (rel == 0.0), axis=0)
                new = ok & ~inst_done
                end = fine[-1].y[-1]
                for i in np.flatnonzero(new):
                    y_end[i * width:(i + 1) * width] = end[i * width:(i + 1) * width]
                inst_iter[new] = k
                inst_done |= new
                iterations[:] = k
                converged = bool(np.all(inst_done))
    finally:
        runner.close()

    trace = np.array(trace)
    end = fine[-1].y[-1]
    if n_inst > 1:
        rest = ~inst_done
        for i in np.flatnonzero(rest):
            y_end[i * width:(i + 1) * width] = end[i * width:(i + 1) * width]
        inst_iter[rest] = k
    else:
        y_end = end.copy()
    block = BlockState(t0=t0, y0=y0, steps=levels, tau=taus,
                       residuals=trace[-1] if len(trace) else None, iterations=iterations)
    result = BlockResult(y_end=y_end, iterations=iterations, residual_trace=trace,
                         converged=converged, n_iterations=k, block=block,
                         instance_iterations=inst_iter if n_inst > 1 else None,
                         instance_converged=inst_done if n_inst > 1 else None)
    if strict and not converged:
        worst = float(np.max(trace[-1])) if len(trace) else float("nan")
        raise MaxIterationsError(
            f"block not converged after {k} iterations (worst relative residual {worst:.3e})",
            result=result)
    return result


@dataclass
class RunStatistics:
    """Outcome of :func:`run_many_blocks`.

    Attributes:
        y_final: state at the end of the last block.
        times: block end times.
        trajectory: block end states, shape ``(n_blocks, N)``.
        iterations: per-step iteration counts, shape ``(n_blocks, P)``.
        residual_traces: one :attr:`BlockResult.residual_trace` per block.
        converged: per-block convergence flags.
    """

    y_final: np.ndarray
    times: np.ndarray
    trajectory: np.ndarray
    iterations: np.ndarray
    residual_traces: list
    converged: np.ndarray

    @property
    def mean_iterations(self):
        return float(np.mean(self.iterations))

    @property
    def std_iterations(self):
        return float(np.std(self.iterations))


def run_many_blocks(system, hier, y0, P, n_blocks, tol, K, t0=0.0, workers=0,
                    frozen_prefix=False, strict=True, on_block=None):
    """Chain ``n_blocks`` blocks, each starting from the previous block's end value.

    Args:
        on_block: optional callback ``(index, BlockResult)`` invoked after each block.
    """
    if int(n_blocks) != n_blocks or n_blocks < 1:
        raise InvalidArgumentError(f"number of blocks must be a positive integer, got {n_blocks!r}")
    y = np.array(y0, dtype=float)
    t = float(t0)
    times, traj, iters, traces, conv = [], [], [], [], []
    for b in range(int(n_blocks)):
        res = run_block(system, hier, y, P, tol, K, t0=t, workers=workers,
                        frozen_prefix=frozen_prefix, strict=strict)
        y = res.y_end
        t = t0 + (b + 1) * P * hier.dt
        times.append(t)
        traj.append(y.copy())
        iters.append(res.iterations.copy())
        traces.append(res.residual_trace)
        conv.append(res.converged)
        if on_block is not None:
            on_block(b, res)
    return RunStatistics(y_final=y, times=np.array(times), trajectory=np.array(traj),
                         iterations=np.array(iters), residual_traces=traces,
                         converged=np.array(conv))
