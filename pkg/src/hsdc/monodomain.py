"""Finite-difference monodomain problem on 1D/2D rectangles.

The potential obeys

    C_m dV/dt = chi^{-1} div(sigma grad V) + I_stim - I_ion(V, w_a, w_g)

with zero-flux boundaries.  Space is discretized on a cell-centred grid
``x_i = (i + 1/2) dx`` with the fourth-order stencil
``(-1/12, 4/3, -5/2, 4/3, -1/12) / dx^2`` per dimension and mirror extension
across the boundary.  This operator is diagonalized exactly by the orthonormal
DCT-II, which gives the implicit solves.
"""

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import fft

from hsdc.errors import (
    InvalidArgumentError,
    LayoutError,
    MeshMismatchError,
    NonFiniteInputError,
    StateFormatError,
    VersionMismatchError,
)
from hsdc.ionic import MEMBRANE_CAPACITANCE, IonicModel
from hsdc.split_system import Layout, SplitSystem

__all__ = [
    "Stimulus",
    "MonodomainProblem",
    "laplacian_apply",
    "implicit_solve",
    "planar_front_initial_state",
    "save_state",
    "load_state",
    "STATE_MAGIC",
    "STATE_VERSION",
]

SIGMA_I = 0.17  # mS/mm
SIGMA_E = 0.62  # mS/mm
CHI = 140.0  # 1/mm

_STENCIL = (-1.0 / 12.0, 4.0 / 3.0, -5.0 / 2.0, 4.0 / 3.0, -1.0 / 12.0)


@dataclass(frozen=True)
class Stimulus:
    """Box-shaped current injection.

    Args:
        amplitude: current density in uA/mm^2.
        lower: lower corner of the box (mm), one entry per dimension.
        upper: upper corner (mm).
        t_start: onset (ms).
        duration: length of the pulse (ms).
    """

    amplitude: float
    lower: tuple
    upper: tuple
    t_start: float = 0.0
    duration: float = 1.0

    def active(self, t):
        return self.t_start <= t < self.t_start + self.duration


class MonodomainProblem(SplitSystem):
    """Semi-discrete monodomain equation on ``[0, L_1] x ... x [0, L_d]``.

    Args:
        ionic: the membrane model.
        lengths: domain side lengths in mm (1 or 2 entries).
        counts: mesh cells per dimension (each >= 8).
        sigma_i, sigma_e: intra- and extracellular conductivities (mS/mm).
        chi: surface-to-volume ratio (1/mm).
        Cm: membrane capacitance (uF/mm^2).
        stimulus: optional :class:`Stimulus`; off by default.
        v_peak: potential behind a planar front; defaults to the model's peak.
    """

    def __init__(self, ionic, lengths, counts, sigma_i=SIGMA_I, sigma_e=SIGMA_E,
                 chi=CHI, Cm=MEMBRANE_CAPACITANCE, stimulus=None, v_peak=None):
        if not isinstance(ionic, IonicModel):
            raise InvalidArgumentError("ionic must be an IonicModel")
        lengths = tuple(float(v) for v in np.atleast_1d(lengths))
        counts = tuple(int(v) for v in np.atleast_1d(counts))
        if len(lengths) not in (1, 2) or len(lengths) != len(counts):
            raise InvalidArgumentError("lengths and counts must both have 1 or 2 entries")
        if any(n < 8 for n in counts):
            raise InvalidArgumentError(f"need at least 8 cells per dimension, got {counts}")
        if any(not L > 0 for L in lengths):
            raise InvalidArgumentError("domain lengths must be positive")
        if not (sigma_i > 0 and sigma_e > 0 and chi > 0 and Cm > 0):
            raise InvalidArgumentError("physical parameters must be positive")

        self.ionic = ionic
        self.lengths = lengths
        self.counts = counts
        self.ndim = len(counts)
        self.dx = tuple(L / n for L, n in zip(lengths, counts))
        self.sigma = sigma_i * sigma_e / (sigma_i + sigma_e)
        self.chi = chi
        self.Cm = Cm
        self.diffusion = self.sigma / (chi * Cm)
        self.stimulus = stimulus
        self.v_peak = ionic.v_peak if v_peak is None else float(v_peak)

        self.ndof = int(np.prod(counts))
        self.layout = Layout(self.ndof, ionic.m1 * self.ndof, ionic.m2 * self.ndof)
        self._symbol = self._laplacian_symbol()
        self._stim_mask = None if stimulus is None else self._box_mask(stimulus)

    # -- geometry ---------------------------------------------------------

    def coordinates(self):
        """Cell-centre coordinates, one array per dimension (grid-shaped)."""
        axes = [(np.arange(n) + 0.5) * h for n, h in zip(self.counts, self.dx)]
        return np.meshgrid(*axes, indexing="ij")

    def _box_mask(self, stim):
        lo = np.atleast_1d(stim.lower)
        hi = np.atleast_1d(stim.upper)
        if lo.size != self.ndim or hi.size != self.ndim:
            raise InvalidArgumentError("stimulus box dimension does not match the mesh")
        mask = np.ones(self.counts, dtype=bool)
        for X, a, b in zip(self.coordinates(), lo, hi):
            mask &= (X >= a) & (X <= b)
        return mask.ravel()

    def _laplacian_symbol(self):
        symbol = np.zeros(self.counts)
        for axis, (n, h) in enumerate(zip(self.counts, self.dx)):
            theta = np.pi * np.arange(n) / n
            c = _STENCIL
            lam = (c[2] + 2.0 * c[1] * np.cos(theta) + 2.0 * c[0] * np.cos(2.0 * theta)) / h**2
            shape = [1] * self.ndim
            shape[axis] = n
            symbol = symbol + lam.reshape(shape)
        return symbol

    @property
    def laplacian_eigenvalues(self):
        """Eigenvalues of the discrete Laplacian indexed by DCT mode (grid-shaped)."""
        return self._symbol.copy()

    # -- operators --------------------------------------------------------

    def _grid(self, field):
        field = np.asarray(field, dtype=float)
        if field.size != self.ndof:
            raise LayoutError(f"field has {field.size} entries, mesh has {self.ndof}")
        return field.reshape(self.counts)

    def laplacian_apply(self, field):
        """Fourth-order Laplacian with mirror boundaries.  Returns a flat array."""
        u = self._grid(field)
        out = np.zeros_like(u)
        for axis, h in enumerate(self.dx):
            pad = [(0, 0)] * self.ndim
            pad[axis] = (2, 2)
            ext = np.pad(u, pad, mode="symmetric")
            n = u.shape[axis]
            acc = np.zeros_like(u)
            for offset, c in enumerate(_STENCIL):
                acc += c * np.take(ext, np.arange(offset, offset + n), axis=axis)
            out += acc / h**2
        return out.ravel()

    def solve_diffusion(self, alpha, b):
        """Solve ``(Id - alpha D Lap) x = b`` on the potential block."""
        if alpha < 0:
            raise InvalidArgumentError(f"alpha must be nonnegative, got {alpha}")
        b = self._grid(b)
        if not np.all(np.isfinite(b)):
            raise NonFiniteInputError("right-hand side contains non-finite entries")
        if alpha == 0:
            return b.ravel().copy()
        bh = fft.dctn(b, type=2, norm="ortho")
        bh /= 1.0 - alpha * self.diffusion * self._symbol
        return fft.idctn(bh, type=2, norm="ortho").ravel()

    # -- split-system contract -------------------------------------------

    def split(self, y):
        """Views ``(V, w_a, w_g)`` with ``w_a``, ``w_g`` shaped ``(m, ndof)``."""
        L = self.layout
        return (y[L.V], y[L.wa].reshape(self.ionic.m1, self.ndof),
                y[L.wg].reshape(self.ionic.m2, self.ndof))

    def join(self, V, w_a, w_g):
        return np.concatenate([np.ravel(V), np.ravel(w_a), np.ravel(w_g)])

    def stimulus_current(self, t):
        out = np.zeros(self.ndof)
        if self.stimulus is not None and self.stimulus.active(t):
            out[self._stim_mask] = self.stimulus.amplitude
        return out

    def f_I(self, t, y):
        out = np.zeros(self.size)
        out[self.layout.V] = self.diffusion * self.laplacian_apply(y[self.layout.V])
        return out

    def f_E(self, t, y):
        V, wa, wg = self.split(y)
        L = self.layout
        out = np.zeros(self.size)
        current = -self.ionic.i_ion(V, wa, wg)
        if self.stimulus is not None:
            current = current + self.stimulus_current(t)
        out[L.V] = current / self.Cm
        if self.ionic.m1:
            out[L.wa] = self.ionic.h_a(V, wa, wg).ravel()
        return out

    def gating(self, y):
        lam, winf = self.ionic.gating_coeffs(y[self.layout.V])
        return lam.ravel(), winf.ravel()

    def lambda_diag(self, y):
        out = np.zeros(self.size)
        out[self.exp_slice] = self.gating(y)[0]
        return out

    def y_inf(self, y):
        out = np.zeros(self.size)
        out[self.exp_slice] = self.gating(y)[1]
        return out

    def implicit_solve(self, alpha, b):
        b = np.asarray(b, dtype=float)
        x = b.copy()
        x[self.layout.V] = self.solve_diffusion(alpha, b[self.layout.V])
        return x

    # -- initial values ---------------------------------------------------

    def rest_state(self):
        v, wa, wg = self.ionic.rest_state()
        ones = np.ones(self.ndof)
        return self.join(v * ones, np.outer(wa, ones), np.outer(wg, ones))

    def planar_front_initial_state(self, front_position=None, width=1.0, v_peak=None,
                                   gates="steady"):
        """Tanh front along the first axis, excited on the left.

        Args:
            front_position: location (mm) of the midpoint level; defaults to 15% of
                the first side length.
            width: front width (mm); may be ``inf`` for a uniform midpoint state.
            v_peak: potential far behind the front; defaults to ``self.v_peak``.
            gates: ``"steady"`` puts every gate at ``w_inf(V(x))``; ``"rest"`` keeps
                the resting gate values, i.e. freshly depolarized tissue, which
                fires and launches a travelling wave (with steady gates an HH
                front is already inactivated and decays).
        """
        if gates not in ("steady", "rest"):
            raise InvalidArgumentError(f"gates must be 'steady' or 'rest', got {gates!r}")
        L = self.lengths[0]
        if front_position is None:
            front_position = 0.15 * L
        if not 0 < front_position < L:
            raise InvalidArgumentError(f"front position {front_position} outside (0, {L})")
        if not width > 0:
            raise InvalidArgumentError("front width must be positive")
        v_peak = self.v_peak if v_peak is None else float(v_peak)
        v_rest, wa_rest, wg_rest = self.ionic.rest_state()
        X = self.coordinates()[0].ravel()
        profile = 0.5 * (1.0 - np.tanh((X - front_position) / width))
        V = v_rest + (v_peak - v_rest) * profile
        ones = np.ones(self.ndof)
        if gates == "steady":
            _, wg = self.ionic.gating_coeffs(V)
        else:
            wg = np.outer(wg_rest, ones)
        return self.join(V, np.outer(wa_rest, ones), wg)

    def initial_state(self):
        """A travelling wave: planar front with resting gates."""
        return self.planar_front_initial_state(gates="rest")

    def mesh_metadata(self):
        nx = self.counts[0]
        ny = self.counts[1] if self.ndim == 2 else 1
        Lx = self.lengths[0]
        Ly = self.lengths[1] if self.ndim == 2 else 0.0
        return dict(ndim=self.ndim, nx=nx, ny=ny, n_V=self.layout.n_V,
                    n_wa=self.layout.n_wa, n_wg=self.layout.n_wg, Lx=Lx, Ly=Ly)


def laplacian_apply(problem, field):
    return problem.laplacian_apply(field)


def implicit_solve(problem, alpha, b):
    """Solve ``(Id - alpha (chi C_m)^{-1} sigma Lap) x = b`` for nodal values ``b``."""
    return problem.solve_diffusion(alpha, b)


def planar_front_initial_state(problem, front_position, width, gates="steady"):
    return problem.planar_front_initial_state(front_position, width, gates=gates)


# -- state files ---------------------------------------------------------------

STATE_MAGIC = b"HSDCSTAT"
STATE_VERSION = 1
# magic, version, ndim, nx, ny, n_V, n_wa, n_wg, Lx, Ly, t, count
_HEADER = struct.Struct("<8sIIIIQQQdddQ")


def save_state(path, y, problem=None, t=0.0, meta=None):
    """Write a state with its mesh metadata to a little-endian binary file.

    Args:
        path: destination.
        y: flat state vector.
        problem: a :class:`MonodomainProblem` supplying mesh metadata; without it
            the file records a single block of ``len(y)`` entries.
        t: simulation time stored with the state.
        meta: explicit metadata dictionary overriding ``problem``.
    """
    y = np.ascontiguousarray(y, dtype="<f8")
    if meta is None:
        if problem is not None:
            meta = problem.mesh_metadata()
        else:
            meta = dict(ndim=0, nx=0, ny=0, n_V=0, n_wa=0, n_wg=y.size, Lx=0.0, Ly=0.0)
    if meta["n_V"] + meta["n_wa"] + meta["n_wg"] != y.size:
        raise LayoutError("state length disagrees with block sizes")
    header = _HEADER.pack(STATE_MAGIC, STATE_VERSION, meta["ndim"], meta["nx"], meta["ny"],
                          meta["n_V"], meta["n_wa"], meta["n_wg"], float(meta["Lx"]),
                          float(meta["Ly"]), float(t), y.size)
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(y.tobytes())
    return path


def load_state(path, problem=None):
    """Read a state file.

    Returns:
        ``(y, t, meta)``.

    Raises:
        StateFormatError: bad magic or truncated payload.
        VersionMismatchError: unsupported format version.
        MeshMismatchError: metadata disagrees with ``problem``.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise StateFormatError(f"{path}: file too short for a state header")
    (magic, version, ndim, nx, ny, n_V, n_wa, n_wg, Lx, Ly, t,
     count) = _HEADER.unpack_from(raw)
    if magic != STATE_MAGIC:
        raise StateFormatError(f"{path}: not a state file (bad magic {magic!r})")
    if version != STATE_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {STATE_VERSION}")
    if n_V + n_wa + n_wg != count:
        raise StateFormatError(f"{path}: block sizes do not add up to the entry count")
    payload = raw[_HEADER.size:]
    if len(payload) != 8 * count:
        raise StateFormatError(f"{path}: payload has {len(payload)} bytes, expected {8 * count}")
    y = np.frombuffer(payload, dtype="<f8").astype(float)
    meta = dict(ndim=ndim, nx=nx, ny=ny, n_V=n_V, n_wa=n_wa, n_wg=n_wg, Lx=Lx, Ly=Ly)
    if problem is not None:
        expected = problem.mesh_metadata()
        diff = [k for k in ("ndim", "nx", "ny", "n_V", "n_wa", "n_wg") if expected[k] != meta[k]]
        if diff or not np.allclose([Lx, Ly], [expected["Lx"], expected["Ly"]], rtol=1e-12):
            detail = ", ".join(f"{k}={meta[k]} (problem {expected[k]})" for k in diff)
            raise MeshMismatchError(f"{path}: state mesh does not match the problem: {detail or 'lengths'}")
    return y, t, meta
