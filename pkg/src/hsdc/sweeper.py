"""Single-step hybrid sweeper.

For one step of size ``dt`` starting at ``t0`` the node values
``y_0, ..., y_M`` (``y_0`` being the initial value) are tied together by the
collocation operator

    C_0(y) = y_0,    C_i(y) = y_i - dt sum_j a_ij(dt Lambda_n) g(y_j),

with ``g(y) = f_I(y) + f_E(y) + f_e(y) + Lambda_n (y_0 - y)`` and
``Lambda_n = Lambda(y_0)``.  The preconditioner is

    P_i(y) = y_i - dt sum_{j<=i} d_j (f_I(y_j) + f_E(y_{j-1})
                 + phi_1(d_j dt Lambda_n) (f_e(y_{j-1}) + Lambda_n (y_0 - y_{j-1}))),

an implicit/explicit/exponential Euler chain over the substeps.  A sweep solves
``P(y_new) = (P - C)(y_old) + 1 (x) u + tau`` by forward substitution, where
``u`` is the incoming initial value.
"""

import threading
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from hsdc.collocation import CollocationLevel, phi_functions
from hsdc.errors import (DivergenceError, InvalidArgumentError, NonFiniteInputError,
                         StaleCacheError)

__all__ = [
    "Sweeper",
    "StepNodes",
    "StepCoefficients",
    "SolveResult",
    "eval_g",
    "collocation_residual",
    "sweep",
    "solve_step",
    "relative_residual",
]


@dataclass
class StepCoefficients:
    """Quantities frozen at a step's initial value.

    Attributes:
        lam: ``Lambda(y_0)`` on the exponential block, or None when the sweeper
            is not exponential (or the block is empty).
        phi1: ``phi_1(d_i dt lam)`` for each substep, shape ``(M, n_exp)``.
        em1_cum: ``sum_{j<=i} (exp(d_j dt lam) - 1)``, shape ``(M, n_exp)``.
        em1_c: ``exp(c_i dt lam) - 1``, shape ``(M, n_exp)``.
    """

    lam: np.ndarray
    phi1: np.ndarray
    em1_cum: np.ndarray = None
    em1_c: np.ndarray = None
    _level: CollocationLevel = field(default=None, repr=False)
    _dt: float = field(default=None, repr=False)
    _A: np.ndarray = field(default=None, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @property
    def A(self):
        """Exponential quadrature matrix on the exponential block, ``(M, M, n_exp)``."""
        if self._A is None:
            with self._lock:
                if self._A is None:
                    A = self._level.erk_matrix(self._dt * self.lam)
                    A.setflags(write=False)
                    self._A = A
        return self._A


class StepNodes:
    """Node values of one step together with their right-hand-side evaluations.

    All arrays have shape ``(M + 1, N)`` and are read-only: a new object is
    created whenever node values change, so cached evaluations cannot go stale.
    """

    __slots__ = ("t0", "dt", "y", "fI", "fE", "fe", "coeffs", "_y0")

    def __init__(self, t0, dt, y, fI, fE, fe, coeffs):
        self.t0 = t0
        self.dt = dt
        self.y = y
        self.fI = fI
        self.fE = fE
        self.fe = fe
        self.coeffs = coeffs
        self._y0 = y[0].copy()
        for a in (y, fI, fE, fe):
            a.setflags(write=False)

    @property
    def M(self):
        return self.y.shape[0] - 1

    def check_fresh(self):
        if not np.array_equal(self.y[0], self._y0):
            raise StaleCacheError("initial value changed after Lambda_n was frozen")


class Sweeper:
    """Hybrid sweeper for one collocation level.

    Args:
        system: a :class:`~hsdc.split_system.SplitSystem`.
        level: the node set.
        dt: step size.
        exponential: if False, ``Lambda_n`` is replaced by zero everywhere, which
            gives a semi-implicit SDC sweep that treats ``f_e`` explicitly.
        cache_size: number of frozen-coefficient sets kept.
        coupling: how the terms proportional to ``Lambda_n y_0`` are handled
            when the incoming value differs from the old iterate's ``y_0``
            (this never happens within a single-step iteration, where all
            choices coincide):

            * ``"literal"``: ``P`` exactly as written above, so the old and new
              initial values enter through different weights;
            * ``"dropped"``: these terms are removed from ``P``, so ``C`` keeps
              its dependence on the old ``y_0``;
            * ``"exact"``: ``P`` carries the same ``y_0`` dependence as ``C``,
              ``(exp(c_i dt Lambda_n) - 1) y_0``, evaluated at the new ``y_0``.
    """

    COUPLINGS = ("literal", "dropped", "exact")

    def __init__(self, system, level, dt, exponential=True, cache_size=256,
                 coupling="exact"):
        if coupling not in self.COUPLINGS:
            raise InvalidArgumentError(f"coupling must be one of {self.COUPLINGS}, got {coupling!r}")
        self.coupling = coupling
        if not dt > 0:
            raise InvalidArgumentError(f"step size must be positive, got {dt!r}")
        self.system = system
        self.level = level
        self.dt = float(dt)
        self.exponential = bool(exponential)
        self._exp = system.exp_slice
        n_exp = len(range(system.size)[self._exp])
        self._has_exp = self.exponential and n_exp > 0
        self._cache = OrderedDict()
        self._cache_size = cache_size
        self._lock = threading.Lock()
        self.times_rel = np.concatenate(([0.0], level.nodes))

    @property
    def M(self):
        return self.level.M

    # -- frozen coefficients ---------------------------------------------

    def coefficients(self, y0):
        if not self._has_exp:
            return StepCoefficients(lam=None, phi1=None, _level=self.level, _dt=self.dt)
        lam, _ = self.system.gating(y0)
        lam = np.ascontiguousarray(lam, dtype=float)
        key = lam.tobytes()
        with self._lock:
            hit = self._cache.get(key)
            if hit is not None:
                self._cache.move_to_end(key)
                return hit
        z = self.dt * self.level.deltas[:, None] * lam[None, :]
        phi1 = phi_functions(z, 1)[0]
        em1_cum = np.cumsum(np.expm1(z), axis=0)
        em1_c = np.expm1(self.dt * self.level.nodes[:, None] * lam[None, :])
        for a in (phi1, lam, em1_cum, em1_c):
            a.setflags(write=False)
        coeffs = StepCoefficients(lam=lam, phi1=phi1, em1_cum=em1_cum, em1_c=em1_c,
                                  _level=self.level, _dt=self.dt)
        with self._lock:
            self._cache[key] = coeffs
            while len(self._cache) > self._cache_size:
                self._cache.popitem(last=False)
        return coeffs

    # -- node evaluation --------------------------------------------------

    def _times(self, t0):
        return t0 + self.dt * self.times_rel

    def evaluate(self, t0, nodes, coeffs=None):
        """Build a :class:`StepNodes` by evaluating all terms at every node."""
        sys = self.system
        y = np.array(nodes, dtype=float)
        if y.shape != (self.M + 1, sys.size):
            raise InvalidArgumentError(
                f"node array has shape {y.shape}, expected {(self.M + 1, sys.size)}")
        ts = self._times(t0)
        fI = np.empty_like(y)
        fE = np.empty_like(y)
        fe = np.empty_like(y)
        for j in range(self.M + 1):
            fI[j] = sys.f_I(ts[j], y[j])
            fE[j] = sys.f_E(ts[j], y[j])
            fe[j] = sys.f_e(y[j])
        if coeffs is None:
            coeffs = self.coefficients(y[0])
        return StepNodes(t0, self.dt, y, fI, fE, fe, coeffs)

    def spread(self, t0, y0):
        """Spread initial guess ``y_i = y_0`` for all nodes."""
        y0 = np.asarray(y0, dtype=float)
        return self.evaluate(t0, np.broadcast_to(y0, (self.M + 1, y0.size)))

    # -- operators ---------------------------------------------------------

    def g(self, step):
        """``g(y_j)`` for all nodes, shape ``(M + 1, N)``."""
        step.check_fresh()
        G = step.fI + step.fE + step.fe
        lam = step.coeffs.lam
        if lam is not None:
            s = self._exp
            G[:, s] += lam * (step.y[0, s] - step.y[:, s])
        return G

    def _quad(self, step, G):
        """``sum_j a_ij G_j`` for ``i = 1..M``, shape ``(M, N)``."""
        Gn = G[1:]
        out = self.level.quad @ Gn
        if step.coeffs.lam is not None:
            s = self._exp
            out[:, s] = np.einsum("ijn,jn->in", step.coeffs.A, Gn[:, s])
        return out

    def _explicit_terms(self, step):
        """``FX_j`` for ``j = 0..M-1`` (explicit and exponential part of substep j+1)."""
        FX = np.array(step.fE[:-1])
        lam = step.coeffs.lam
        s = self._exp
        if lam is not None:
            FX[:, s] += step.coeffs.phi1 * (step.fe[:-1, s] + lam * (step.y[0, s] - step.y[:-1, s]))
        else:
            FX[:, s] += step.fe[:-1, s]
        return FX

    def collocation_op(self, step):
        """``C(y)`` for all nodes, shape ``(M + 1, N)``."""
        out = np.empty_like(step.y)
        out[0] = step.y[0]
        out[1:] = step.y[1:] - self.dt * self._quad(step, self.g(step))
        return out

    def precond_op(self, step):
        """``P(y)`` for all nodes, shape ``(M + 1, N)``."""
        step.check_fresh()
        FX = self._explicit_terms(step)
        incr = self.level.deltas[:, None] * (step.fI[1:] + FX)
        out = np.empty_like(step.y)
        out[0] = step.y[0]
        out[1:] = step.y[1:] - self.dt * np.cumsum(incr, axis=0)
        return out

    def residual(self, step, u=None):
        """Defect ``u - C(y)`` for all nodes (row 0 is ``u - y_0``)."""
        u = step.y[0] if u is None else np.asarray(u, dtype=float)
        return u[None, :] - self.collocation_op(step)

    def sweep(self, old, u, tau=None, t0=None):
        """One preconditioned Picard update.

        Args:
            old: current iterate.
            u: incoming initial value (becomes node 0 of the result).
            tau: optional FAS shift, shape ``(M + 1, N)``.
            t0: start time; defaults to that of ``old``.

        Returns:
            A new :class:`StepNodes`.
        """
        sys = self.system
        dt = self.dt
        t0 = old.t0 if t0 is None else t0
        u = np.asarray(u, dtype=float)

        # right-hand side (P - C)(old) + u + tau, rows 1..M
        FX_old = self._explicit_terms(old)
        S_old = np.cumsum(self.level.deltas[:, None] * (old.fI[1:] + FX_old), axis=0)
        rhs = u[None, :] + dt * (self._quad(old, self.g(old)) - S_old)
        y0 = u.copy()
        if tau is not None:
            rhs += tau[1:]
            y0 = y0 + tau[0]

        M = self.M
        N = sys.size
        ts = self._times(t0)
        y = np.empty((M + 1, N))
        fI = np.empty_like(y)
        fE = np.empty_like(y)
        fe = np.empty_like(y)
        y[0] = y0
        fI[0] = sys.f_I(ts[0], y0)
        fE[0] = sys.f_E(ts[0], y0)
        fe[0] = sys.f_e(y0)
        coeffs = self.coefficients(y0)
        lam = coeffs.lam
        s = self._exp
        check = sys.instances == 1
        if (lam is not None and self.coupling != "literal"
                and (old.coeffs is not coeffs or not np.array_equal(old.y[0], y0))):
            oc = old.coeffs
            y_old, y_new = old.y[0, s], y0[s]
            corr = oc.em1_cum * y_old - coeffs.em1_cum * y_new
            if self.coupling == "exact":
                corr += coeffs.em1_c * y_new - oc.em1_c * y_old
            rhs[:, s] += corr

        acc = np.zeros(N)
        deltas = self.level.deltas
        for i in range(1, M + 1):
            FX = fE[i - 1].copy()
            if lam is not None:
                FX[s] += coeffs.phi1[i - 1] * (fe[i - 1, s] + lam * (y0[s] - y[i - 1, s]))
            else:
                FX[s] += fe[i - 1, s]
            b = rhs[i - 1] + dt * acc + (dt * deltas[i - 1]) * FX
            try:
                yi = sys.implicit_solve(dt * deltas[i - 1], b)
            except NonFiniteInputError:
                raise DivergenceError("sweep produced non-finite values", node=i) from None
            if check and not np.all(np.isfinite(yi)):
                raise DivergenceError("sweep produced non-finite values", node=i)
            y[i] = yi
            fI[i] = sys.f_I(ts[i], yi)
            fE[i] = sys.f_E(ts[i], yi)
            fe[i] = sys.f_e(yi)
            acc += deltas[i - 1] * (fI[i] + FX)
        return StepNodes(t0, dt, y, fI, fE, fe, coeffs)


def relative_residual(residual, nodes, instances=1):
    """Infinity-norm defect relative to the infinity norm of the node values.

    With ``instances > 1`` the state is split into that many equal contiguous
    groups and one ratio per group is returned.  A zero defect counts as zero
    even when the node values vanish.
    """
    r = np.abs(np.asarray(residual))
    y = np.abs(np.asarray(nodes))
    if instances == 1:
        rn = float(r.max()) if r.size else 0.0
        yn = float(y.max()) if y.size else 0.0
        if rn == 0.0:
            return 0.0
        return rn / yn if yn > 0 else np.inf
    shape = (r.shape[0], instances, -1)
    rn = r.reshape(shape).max(axis=(0, 2))
    yn = y.reshape(shape).max(axis=(0, 2))
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(rn == 0.0, 0.0, rn / yn)
    return np.where(np.isnan(out), np.inf, out)


def eval_g(sweeper, step, j):
    """``g(y_j) = f_I + f_E + f_e + Lambda_n (y_0 - y_j)`` at node ``j``."""
    if int(j) != j or not 0 <= j <= step.M:
        raise InvalidArgumentError(f"node index {j!r} outside 0..{step.M}")
    return sweeper.g(step)[int(j)]


def collocation_residual(sweeper, step, u=None):
    """Per-node defect rows ``1..M`` and its infinity norm.

    Returns:
        ``(residual, norm, relative)`` where ``residual`` has shape ``(M, N)``.
    """
    r = sweeper.residual(step, u)
    norm = float(np.abs(r).max())
    return r[1:], norm, relative_residual(r, step.y)


def sweep(sweeper, step, rhs_shift=None, u=None):
    """Functional form of :meth:`Sweeper.sweep`; ``u`` defaults to the step's ``y_0``."""
    u = step.y[0] if u is None else u
    return sweeper.sweep(step, u, rhs_shift)


@dataclass
class SolveResult:
    step: StepNodes
    iterations: int
    residual: float
    trace: list

    @property
    def y_end(self):
        return self.step.y[-1].copy()


def solve_step(system, level, y0, dt, tol, K, t0=0.0, exponential=True, sweeper=None,
               divergence_factor=1e6):
    """Iterate sweeps from the spread guess until the relative residual drops below ``tol``.

    At least one sweep is always performed; at most ``K``.  ``tol = 0`` runs
    exactly ``K`` sweeps.

    Raises:
        DivergenceError: the residual grows beyond ``divergence_factor`` times its
            initial value or becomes non-finite.
    """
    if not tol >= 0:
        raise InvalidArgumentError(f"tolerance must be nonnegative, got {tol!r}")
    if int(K) != K or K < 1:
        raise InvalidArgumentError(f"iteration cap must be a positive integer, got {K!r}")
    if isinstance(level, int):
        level = CollocationLevel.radau(level)
    sw = sweeper if sweeper is not None else Sweeper(system, level, dt, exponential)
    y0 = np.asarray(y0, dtype=float)
    step = sw.spread(t0, y0)
    r0 = relative_residual(sw.residual(step, y0), step.y)
    trace = []
    rel = r0
    k = 0
    while k < K:
        step = sw.sweep(step, y0)
        k += 1
        rel = relative_residual(sw.residual(step, y0), step.y)
        trace.append(rel)
        if not np.isfinite(rel) or (r0 > 0 and rel > divergence_factor * r0):
            raise DivergenceError(f"residual grew to {rel:.3e}", node=None, step=0)
        if rel == 0.0 or rel < tol:
            break
    return SolveResult(step=step, iterations=k, residual=rel, trace=trace)
