"""Collocation nodes, Lagrange/Fornberg machinery and exponential quadrature weights.

All node sets live on the unit interval: a node ``c`` stands for the time
``t_n + c * dt``.  The left endpoint ``c_0 = 0`` is never stored; it carries
the step's initial value and is handled by the sweepers.

The exponential weights are

    a_ij(z) = int_0^{c_i} exp((c_i - s) z) l_j(s) ds,

evaluated through the Taylor form of the Lagrange basis

    a_ij(z) = sum_{k=1}^{M} c_i^k w_j^{k-1} phi_k(c_i z),

where ``w^{k}_j`` are Fornberg weights for the k-th derivative at ``s = 0``.
This never evaluates the oscillatory ``l_j`` inside an integral.
"""

from dataclasses import dataclass, field
from math import ceil, factorial

import numpy as np

from hsdc.errors import DegenerateNodesError, InvalidArgumentError, NonFiniteInputError

__all__ = [
    "CollocationLevel",
    "radau_nodes",
    "fornberg_weights",
    "phi_k",
    "phi_functions",
    "erk_weight_row",
    "erk_matrix",
    "interp_matrix",
]

# Gauss-Legendre rule mapped to [0, 1]; applied piecewise, see phi_functions.
_GL_POINTS = 16
_GL_X, _GL_W = np.polynomial.legendre.leggauss(_GL_POINTS)
_GL_X = 0.5 * (_GL_X + 1.0)
_GL_W = 0.5 * _GL_W
# Extended precision for the Taylor-form sums: the monomial expansion of the
# Lagrange basis cancels heavily for large |z| and M >= 6.
_XP = np.longdouble

# exp(-60) ~ 1e-26: beyond this decay length the integrand is invisible.
_DECAY_CUTOFF = 60.0
# each panel spans at most this many decay lengths
_PANEL_WIDTH = 10.0
# below this |z| the Taylor series replaces the quadrature (22 terms: < 1e-28)
_TAYLOR_RADIUS = 0.5
_TAYLOR_TERMS = 22


def radau_nodes(M):
    """Right Radau IIA nodes on (0, 1].

    Roots of ``P_M(x) - P_{M-1}(x)`` on [-1, 1] mapped to (0, 1], obtained by
    Newton's method from Chebyshev-Radau initial guesses.  The last node is
    exactly 1.
    """
    if int(M) != M or M < 1:
        raise InvalidArgumentError(f"number of nodes must be a positive integer, got {M!r}")
    M = int(M)
    if M == 1:
        return np.array([1.0])

    leg = np.polynomial.legendre
    coef = np.zeros(M + 1)
    coef[M] = 1.0
    coef[M - 1] = -1.0
    dcoef = leg.legder(coef)

    # interior roots only; x = 1 is a known root
    j = np.arange(1, M)
    x = np.cos(2.0 * np.pi * j / (2 * M - 1))
    for _ in range(100):
        # deflate the known root at x = 1: f(x) / (x - 1)
        f = leg.legval(x, coef)
        df = leg.legval(x, dcoef)
        step = f / (df - f / (x - 1.0))
        x = x - step
        if np.max(np.abs(step)) < 1e-15:
            break
    x = np.sort(x)
    nodes = np.empty(M)
    nodes[:-1] = 0.5 * (x + 1.0)
    nodes[-1] = 1.0
    return nodes


def _check_nodes(nodes, allow_zero=True):
    nodes = np.asarray(nodes, dtype=float)
    if nodes.ndim != 1 or nodes.size == 0:
        raise InvalidArgumentError("nodes must be a non-empty 1D sequence")
    if not np.all(np.isfinite(nodes)):
        raise NonFiniteInputError("nodes must be finite")
    if np.unique(nodes).size != nodes.size:
        raise DegenerateNodesError(f"duplicate nodes in {nodes.tolist()}")
    if not allow_zero and np.any(nodes == 0.0):
        raise DegenerateNodesError("nodes must be nonzero")
    return nodes


def fornberg_weights(nodes, x0=0.0, dtype=np.float64):
    """Finite-difference weights expressing ``p^(k)(x0)`` through ``p(nodes)``.

    Classical recursive algorithm of Fornberg (1988).

    Returns:
        Array ``W`` of shape (M, M) with ``p^(k)(x0) = sum_l W[k, l] p(nodes[l])``
        for every polynomial of degree <= M - 1.
    """
    x = _check_nodes(nodes, allow_zero=False).astype(dtype)
    x0 = dtype(x0)
    n = x.size
    m = n - 1
    C = np.zeros((n, m + 1), dtype=dtype)
    C[0, 0] = 1
    c1 = dtype(1)
    c4 = x[0] - x0
    for i in range(1, n):
        mn = min(i, m)
        c2 = dtype(1)
        c5 = c4
        c4 = x[i] - x0
        for j in range(i):
            c3 = x[i] - x[j]
            c2 *= c3
            if j == i - 1:
                for k in range(mn, 0, -1):
                    C[i, k] = c1 * (k * C[i - 1, k - 1] - c5 * C[i - 1, k]) / c2
                C[i, 0] = -c1 * c5 * C[i - 1, 0] / c2
            for k in range(mn, 0, -1):
                C[j, k] = (c4 * C[j, k] - k * C[j, k - 1]) / c3
            C[j, 0] = c4 * C[j, 0] / c3
        c1 = c2
    return C.T.copy()


def phi_functions(z, kmax, dtype=np.float64):
    """Evaluate ``phi_1(z), ..., phi_kmax(z)`` entrywise.

    ``phi_k(z) = 1/(k-1)! * int_0^1 exp((1 - r) z) r^(k-1) dr``.  The integral is
    computed with a composite 16-point Gauss-Legendre rule over ``s = 1 - r``
    (panels at most ten decay lengths wide); for strongly negative ``z`` the
    panels are confined to the region where the integrand has not decayed
    below ``exp(-60)``.  Entries with ``|z| < 1/2`` use the Taylor series
    instead, which is exact to working precision (including ``z = 0``).

    Args:
        z: array-like of finite reals.
        kmax: highest index requested (>= 1).
        dtype: working and output float type.

    Returns:
        Array of shape ``(kmax,) + z.shape``.
    """
    if int(kmax) != kmax or kmax < 1:
        raise InvalidArgumentError(f"phi index must be >= 1, got {kmax!r}")
    kmax = int(kmax)
    z = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(z)):
        raise NonFiniteInputError("phi-function argument contains non-finite values")
    shape = z.shape
    zf = z.ravel()
    out = np.empty((kmax, zf.size), dtype=dtype)
    if zf.size == 0:
        return out.reshape((kmax,) + shape)

    zf = zf.astype(dtype)
    length = np.ones_like(zf)
    far = zf < -_DECAY_CUTOFF
    length[far] = _DECAY_CUTOFF / -zf[far]
    zmax = max(float(zf.max()), 0.0)
    panels = max(ceil(_DECAY_CUTOFF / _PANEL_WIDTH), ceil(zmax / _PANEL_WIDTH))

    gx = _GL_X.astype(dtype)
    t = ((np.arange(panels, dtype=dtype)[:, None] + gx[None, :]) / panels).ravel()
    w = np.tile(_GL_W.astype(dtype), panels) / panels
    s = length[:, None] * t[None, :]
    integrand = np.exp(s * zf[:, None]) * (w[None, :] * length[:, None])
    one_minus_s = 1 - s
    fact = 1
    for k in range(1, kmax + 1):
        out[k - 1] = integrand.sum(axis=1) / fact
        if k < kmax:
            integrand *= one_minus_s
            fact *= k
    # near 0 the series sum_m z^m / (m + k)! is exact to working precision
    small = np.abs(zf) < _TAYLOR_RADIUS
    if np.any(small):
        zs = zf[small]
        for k in range(1, kmax + 1):
            acc = np.zeros_like(zs)
            for m in range(_TAYLOR_TERMS - 1, -1, -1):
                acc = acc * zs + dtype(1) / dtype(factorial(m + k))
            out[k - 1, small] = acc
    return out.reshape((kmax,) + shape)


def phi_k(z, k):
    """Single phi-function ``phi_k`` evaluated entrywise (scalar in, scalar out)."""
    if int(k) != k or k < 1:
        raise InvalidArgumentError(f"phi index must be >= 1, got {k!r}")
    res = phi_functions(z, int(k))[int(k) - 1]
    return float(res) if np.ndim(z) == 0 else res


def interp_matrix(from_nodes, to_nodes):
    """Lagrange interpolation matrix between two node sets.

    Row ``r`` holds ``l_j(to_nodes[r])`` for the Lagrange basis on ``from_nodes``.
    """
    xs = _check_nodes(from_nodes)
    ts = np.atleast_1d(np.asarray(to_nodes, dtype=float))
    n = xs.size
    out = np.ones((ts.size, n))
    for j in range(n):
        for k in range(n):
            if k != j:
                out[:, j] *= (ts - xs[k]) / (xs[j] - xs[k])
    return out


def _freeze(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class CollocationLevel:
    """Radau IIA node set for one level of the hierarchy.

    Attributes:
        M: number of nodes.
        nodes: ``c_1 < ... < c_M = 1``.
        deltas: substep gaps ``d_i = c_i - c_{i-1}`` (with ``c_0 = 0``).
        fornberg: ``fornberg[k, l]`` is the weight of ``p(c_l)`` in ``p^(k)(0)``.
        quad: collocation matrix ``a_ij(0) = int_0^{c_i} l_j``.
        scaled_fornberg: extended-precision ``c_i^k W[k-1, j]``, indexed
            ``[i, k - 1, j]``; the working array for the exponential weights.
    """

    M: int
    nodes: np.ndarray
    deltas: np.ndarray = field(repr=False)
    fornberg: np.ndarray = field(repr=False)
    quad: np.ndarray = field(repr=False)
    scaled_fornberg: np.ndarray = field(repr=False, compare=False, default=None)

    @classmethod
    def radau(cls, M):
        nodes = radau_nodes(M)
        return cls.from_nodes(nodes)

    @classmethod
    def from_nodes(cls, nodes):
        nodes = _check_nodes(nodes, allow_zero=False)
        if np.any(np.diff(nodes) <= 0) or nodes[0] <= 0:
            raise InvalidArgumentError("nodes must be strictly increasing in (0, 1]")
        W = fornberg_weights(nodes)
        M = nodes.size
        # a_ij(0) = sum_k c_i^k W[k-1, j] / k!
        k = np.arange(1, M + 1)
        inv_fact = np.array([1.0 / factorial(int(kk)) for kk in k])
        powers = nodes[:, None] ** k[None, :]
        quad = (powers * inv_fact[None, :]) @ W
        deltas = np.diff(np.concatenate(([0.0], nodes)))
        Wx = fornberg_weights(nodes, dtype=_XP)
        cx = nodes.astype(_XP)
        scaled = (cx[:, None] ** k[None, :].astype(_XP))[:, :, None] * Wx[None, :, :]
        scaled.setflags(write=False)
        return cls(M=M, nodes=_freeze(nodes), deltas=_freeze(deltas),
                   fornberg=_freeze(W), quad=_freeze(quad), scaled_fornberg=scaled)

    def erk_weight_row(self, i, z):
        return erk_weight_row(self, i, z)

    def erk_matrix(self, z):
        return erk_matrix(self, z)


def erk_weight_row(level, i, z):
    """Row ``i`` (1-based) of the exponential quadrature matrix.

    Args:
        level: the node set.
        i: row index, ``1 <= i <= M``.
        z: array (or scalar) holding the diagonal of ``dt * Lambda``; the
            scaling by ``c_i`` is applied here.

    Returns:
        Array of shape ``(M,) + z.shape`` whose entry ``j - 1`` is ``a_ij(z)``.
    """
    if int(i) != i or not 1 <= i <= level.M:
        raise InvalidArgumentError(f"row index {i!r} outside 1..{level.M}")
    z = np.asarray(z, dtype=float)
    i = int(i)
    ci = level.nodes[i - 1]
    phis = phi_functions(ci * z, level.M, dtype=_XP)
    row = np.tensordot(level.scaled_fornberg[i - 1].T, phis, axes=(1, 0))
    return row.astype(np.float64)


def erk_matrix(level, z):
    """All rows of the exponential quadrature matrix, shape ``(M, M) + z.shape``."""
    z = np.asarray(z, dtype=float)
    return np.stack([erk_weight_row(level, i, z) for i in range(1, level.M + 1)])
