"""Problem contract for the three-way split ODE and the scalar test systems.

A right-hand side is split as ``y' = f_I(t, y) + f_E(t, y) + f_e(y)`` with

* ``f_I`` linear and stiff, integrated implicitly,
* ``f_E`` nonstiff, integrated explicitly,
* ``f_e(y) = Lambda(y) * (y - y_inf(y))`` with diagonal ``Lambda``, integrated
  exponentially.

States are plain 1D float arrays.  Their partition into the ``(V, w_a, w_g)``
blocks is described by a :class:`Layout` attached to the system; the exponential
coefficient ``Lambda`` may only be nonzero on the ``w_g`` block.
"""

from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np

from hsdc.errors import InvalidArgumentError, LayoutError, NonFiniteInputError

__all__ = [
    "Layout",
    "SplitSystem",
    "DahlquistSystem",
    "LinearGatingSystem",
    "eval_f_e",
    "make_dahlquist",
    "make_linear_gating",
]


@dataclass(frozen=True)
class Layout:
    """Block sizes of a state vector ``y = (V, w_a, w_g)``.

    Any block may be empty.  Blocks are stored contiguously in that order.
    """

    n_V: int
    n_wa: int
    n_wg: int

    def __post_init__(self):
        for name in ("n_V", "n_wa", "n_wg"):
            value = getattr(self, name)
            if int(value) != value or value < 0:
                raise InvalidArgumentError(f"block size {name} must be a nonnegative integer")

    @property
    def size(self):
        return self.n_V + self.n_wa + self.n_wg

    @property
    def V(self):
        return slice(0, self.n_V)

    @property
    def wa(self):
        return slice(self.n_V, self.n_V + self.n_wa)

    @property
    def wg(self):
        return slice(self.n_V + self.n_wa, self.size)

    def check(self, y, finite=False):
        """Validate the shape (and optionally finiteness) of a state."""
        y = np.asarray(y)
        if y.shape != (self.size,):
            raise LayoutError(f"state has shape {y.shape}, layout expects ({self.size},)")
        if finite and not np.all(np.isfinite(y)):
            raise NonFiniteInputError("state contains non-finite entries")
        return y


class SplitSystem(ABC):
    """Contract for problems treated by the hybrid sweeper.

    Subclasses set ``layout`` and implement the abstract methods.  ``lambda_diag``
    and ``y_inf`` return full-length vectors that vanish outside ``exp_slice``.

    Attributes:
        layout: block layout of the state.
        instances: number of mutually independent subproblems stacked in one
            state (1 for an ordinary problem).  Convergence is judged per
            instance when this exceeds 1; see :mod:`hsdc.pfasst`.
        debug: validate layouts and finiteness on every evaluation.
    """

    layout: Layout
    instances = 1
    debug = False

    @property
    def size(self):
        return self.layout.size

    @property
    def exp_slice(self):
        """Entries where ``Lambda`` may be nonzero."""
        return self.layout.wg

    @abstractmethod
    def f_I(self, t, y):
        """Linear stiff term ``J_I y``."""

    @abstractmethod
    def f_E(self, t, y):
        """Nonstiff explicit term."""

    @abstractmethod
    def lambda_diag(self, y):
        """Diagonal of ``Lambda(y)`` as a full-length vector."""

    @abstractmethod
    def y_inf(self, y):
        """Steady-state vector ``y_inf(y)``; only the ``exp_slice`` entries matter."""

    @abstractmethod
    def implicit_solve(self, alpha, b):
        """Solve ``(Id - alpha J_I) x = b``."""

    def gating(self, y):
        """``(Lambda(y), y_inf(y))`` restricted to ``exp_slice``.

        Override when both are cheaper to compute together.
        """
        s = self.exp_slice
        return self.lambda_diag(y)[s], self.y_inf(y)[s]

    def f_e(self, y):
        """Exponential term as a full-length vector."""
        return eval_f_e(self, y)

    def exact_reference(self, t, y0):
        """Exact solution at time ``t`` from ``y0`` at time 0, or None if unknown."""
        return None

    def initial_state(self):
        """A default initial value, if the problem has one."""
        raise NotImplementedError(f"{type(self).__name__} has no default initial state")

    def rhs(self, t, y):
        """Full right-hand side ``f_I + f_E + f_e``."""
        return self.f_I(t, y) + self.f_E(t, y) + self.f_e(y)


def eval_f_e(sys, y):
    """``Lambda(y) * (y - y_inf(y))``, zero outside the exponential block."""
    y = sys.layout.check(y, finite=sys.debug)
    out = np.zeros_like(y, dtype=float)
    s = sys.exp_slice
    lam, yinf = sys.gating(y)
    out[s] = lam * (y[s] - yinf)
    return out


def _as_rates(*values):
    arrs = [np.atleast_1d(np.asarray(v, dtype=float)) for v in values]
    try:
        arrs = np.broadcast_arrays(*arrs)
    except ValueError:
        raise InvalidArgumentError("rate arrays must have broadcastable shapes") from None
    if arrs[0].ndim != 1:
        raise InvalidArgumentError("rates must be scalars or 1D arrays")
    for a in arrs:
        if not np.all(np.isfinite(a)):
            raise NonFiniteInputError("rates must be finite")
    return [np.array(a) for a in arrs]


class DahlquistSystem(SplitSystem):
    """``y' = lam_I y + lam_E y + lam_e y`` with ``y_inf = 0``.

    With array-valued rates this is a batch of independent scalar problems, one
    per entry; each entry is its own instance.
    """

    def __init__(self, lam_I, lam_E, lam_e):
        self.lam_I, self.lam_E, self.lam_e = _as_rates(lam_I, lam_E, lam_e)
        n = self.lam_I.size
        self.layout = Layout(0, 0, n)
        self.instances = n
        self._zero = np.zeros(n)

    def f_I(self, t, y):
        return self.lam_I * y

    def f_E(self, t, y):
        return self.lam_E * y

    def lambda_diag(self, y):
        return self.lam_e.copy()

    def y_inf(self, y):
        return self._zero.copy()

    def gating(self, y):
        return self.lam_e, self._zero

    def implicit_solve(self, alpha, b):
        return b / (1.0 - alpha * self.lam_I)

    def exact_reference(self, t, y0=1.0):
        rate = self.lam_I + self.lam_E + self.lam_e
        return np.asarray(y0, dtype=float) * np.exp(rate * t)

    def initial_state(self):
        return np.ones(self.size)


class LinearGatingSystem(SplitSystem):
    """Pure gating relaxation ``w' = lam (w - w_inf)`` (possibly batched)."""

    def __init__(self, lam, w_inf):
        self.lam, self.w_inf = _as_rates(lam, w_inf)
        n = self.lam.size
        self.layout = Layout(0, 0, n)
        self._zero = np.zeros(n)

    def f_I(self, t, y):
        return self._zero.copy()

    def f_E(self, t, y):
        return self._zero.copy()

    def lambda_diag(self, y):
        return self.lam.copy()

    def y_inf(self, y):
        return self.w_inf.copy()

    def gating(self, y):
        return self.lam, self.w_inf

    def implicit_solve(self, alpha, b):
        return np.array(b, dtype=float)

    def exact_reference(self, t, y0):
        y0 = np.asarray(y0, dtype=float)
        return self.w_inf + np.exp(self.lam * t) * (y0 - self.w_inf)

    def initial_state(self):
        return np.ones(self.size)


def make_dahlquist(lam_I, lam_E, lam_e):
    """Three-rate scalar test equation (or a batch of them)."""
    return DahlquistSystem(lam_I, lam_E, lam_e)


def make_linear_gating(lam, w_inf):
    """Single gating variable relaxing to ``w_inf`` at rate ``lam``."""
    return LinearGatingSystem(lam, w_inf)
