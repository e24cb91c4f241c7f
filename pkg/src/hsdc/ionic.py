"""Ionic membrane models.

Each model supplies the transmembrane current ``I_ion`` (uA/mm^2), the
auxiliary-variable derivatives ``h_a`` and the gating coefficients
``Lambda_g(V) = -(alpha + beta)`` and ``w_inf(V) = alpha / (alpha + beta)``.

Array conventions: ``V`` has shape ``(n,)``, ``w_a`` has shape ``(m1, n)`` and
``w_g`` has shape ``(m2, n)``.  Voltages are in mV, time in ms.
"""

from abc import ABC, abstractmethod
from functools import cached_property

import numpy as np
from scipy.optimize import brentq

from hsdc.errors import InvalidArgumentError, NonFiniteInputError

__all__ = [
    "MEMBRANE_CAPACITANCE",
    "IonicModel",
    "HodgkinHuxley",
    "SyntheticStiffModel",
    "hh_model",
    "synthetic_stiff_model",
    "cell_jacobian_spectral_radius",
]

# uF/mm^2; the HH model is written per 1 uF/cm^2 = 0.01 uF/mm^2
MEMBRANE_CAPACITANCE = 0.01


def _vtrap(x):
    """``x / (1 - exp(-x))`` with the removable singularity at 0 filled in."""
    x = np.asarray(x, dtype=float)
    out = np.ones_like(x)
    nz = np.abs(x) > 1e-12
    out[nz] = x[nz] / -np.expm1(-x[nz])
    return out


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


class IonicModel(ABC):
    """Contract for a membrane model with ``m1`` auxiliary and ``m2`` gating variables."""

    m1: int
    m2: int
    name = "ionic"
    v_peak = 30.0
    # bracket for the resting potential search
    rest_bracket = (-100.0, -40.0)

    @abstractmethod
    def i_ion(self, V, w_a, w_g):
        """Ionic current density in uA/mm^2."""

    def h_a(self, V, w_a, w_g):
        """Auxiliary derivatives, shape ``(m1, n)``."""
        return np.zeros((self.m1, np.size(V)))

    @abstractmethod
    def rates(self, V):
        """Opening and closing rates ``(alpha, beta)``, each of shape ``(m2, n)``."""

    def gating_coeffs(self, V):
        """``(Lambda_g(V), w_inf(V))``, each of shape ``(m2, n)``."""
        alpha, beta = self.rates(np.atleast_1d(np.asarray(V, dtype=float)))
        total = alpha + beta
        return -total, alpha / total

    def aux_equilibrium(self, V):
        """Auxiliary variables at equilibrium for a clamped ``V``, shape ``(m1, n)``."""
        return np.zeros((self.m1, np.size(V)))

    def cell_rhs(self, V, w_a, w_g):
        """Single-cell right-hand side without stimulus or diffusion."""
        V = np.atleast_1d(np.asarray(V, dtype=float))
        lam, winf = self.gating_coeffs(V)
        dV = -self.i_ion(V, w_a, w_g) / MEMBRANE_CAPACITANCE
        return dV, self.h_a(V, w_a, w_g), lam * (w_g - winf)

    @cached_property
    def _rest(self):
        def current(v):
            V = np.array([v])
            _, winf = self.gating_coeffs(V)
            return float(self.i_ion(V, self.aux_equilibrium(V), winf)[0])

        v = brentq(current, *self.rest_bracket, xtol=1e-14, rtol=1e-15, maxiter=200)
        V = np.array([v])
        _, winf = self.gating_coeffs(V)
        return v, self.aux_equilibrium(V)[:, 0], winf[:, 0]

    def rest_state(self):
        """``(V_rest, w_a_rest, w_g_rest)`` with ``w_a_rest`` of shape ``(m1,)``."""
        v, wa, wg = self._rest
        return v, wa.copy(), wg.copy()


class HodgkinHuxley(IonicModel):
    """Squid-axon model in the modern convention (rest near -65 mV).

    Gates ``(m, h, n)``; no auxiliary variables.
    """

    m1 = 0
    m2 = 3
    name = "hh"

    g_Na = 120.0
    g_K = 36.0
    g_L = 0.3
    E_Na = 50.0
    E_K = -77.0
    E_L = -54.387

    def rates(self, V):
        V = np.asarray(V, dtype=float)
        a_m = _vtrap((V + 40.0) / 10.0)
        b_m = 4.0 * np.exp(-(V + 65.0) / 18.0)
        a_h = 0.07 * np.exp(-(V + 65.0) / 20.0)
        b_h = 1.0 / (1.0 + np.exp(-(V + 35.0) / 10.0))
        a_n = 0.1 * _vtrap((V + 55.0) / 10.0)
        b_n = 0.125 * np.exp(-(V + 65.0) / 80.0)
        return np.stack([a_m, a_h, a_n]), np.stack([b_m, b_h, b_n])

    def i_ion(self, V, w_a, w_g):
        m, h, n = w_g
        i = (self.g_Na * m**3 * h * (V - self.E_Na)
             + self.g_K * n**4 * (V - self.E_K)
             + self.g_L * (V - self.E_L))
        # uA/cm^2 -> uA/mm^2
        return 0.01 * i


class SyntheticStiffModel(IonicModel):
    """Excitable cubic model with one recovery variable and two gates.

    The potential is scaled as ``u = (V + 85) / 115``.  The membrane current is

        -I_ion / C_m = 115 (k u (u - a)(1 - u) - u r) + G w1 w2 (E_f - V),

    the recovery variable obeys ``r' = b (u - d r)`` and the gates relax to
    sigmoidal steady states.  The fast activation gate ``w1`` has rate
    ``rho (0.92 + 0.08 exp(-((V + 20) / 30)^2))``, so ``max |Lambda_g| = rho``
    (attained at -20 mV); the inactivation gate ``w2`` is slow.
    """

    m1 = 1
    m2 = 2
    name = "synthetic"

    V_lo = -85.0
    V_span = 115.0
    k = 1.0
    a = 0.13
    b = 0.01
    d = 1.0
    G = 0.5
    E_f = 40.0
    kappa2 = 0.2

    def __init__(self, rho):
        if not np.isfinite(rho) or rho <= 0:
            raise InvalidArgumentError(f"target spectral radius must be positive, got {rho!r}")
        self.rho = float(rho)

    def _u(self, V):
        return (np.asarray(V, dtype=float) - self.V_lo) / self.V_span

    def rates(self, V):
        V = np.asarray(V, dtype=float)
        w1_inf = _sigmoid((V + 45.0) / 6.0)
        w2_inf = _sigmoid(-(V + 60.0) / 7.0)
        kappa1 = self.rho * (0.92 + 0.08 * np.exp(-(((V + 20.0) / 30.0) ** 2)))
        kappa2 = np.full_like(V, self.kappa2)
        alpha = np.stack([kappa1 * w1_inf, kappa2 * w2_inf])
        beta = np.stack([kappa1 * (1.0 - w1_inf), kappa2 * (1.0 - w2_inf)])
        return alpha, beta

    def gating_coeffs(self, V):
        # direct form avoids the round trip through alpha / (alpha + beta)
        V = np.atleast_1d(np.asarray(V, dtype=float))
        w1_inf = _sigmoid((V + 45.0) / 6.0)
        w2_inf = _sigmoid(-(V + 60.0) / 7.0)
        kappa1 = self.rho * (0.92 + 0.08 * np.exp(-(((V + 20.0) / 30.0) ** 2)))
        lam = np.stack([-kappa1, np.full_like(V, -self.kappa2)])
        return lam, np.stack([w1_inf, w2_inf])

    def i_ion(self, V, w_a, w_g):
        u = self._u(V)
        r = w_a[0]
        w1, w2 = w_g
        dv = self.V_span * (self.k * u * (u - self.a) * (1.0 - u) - u * r)
        dv = dv + self.G * w1 * w2 * (self.E_f - V)
        return -MEMBRANE_CAPACITANCE * dv

    def h_a(self, V, w_a, w_g):
        u = self._u(V)
        return (self.b * (u - self.d * w_a[0]))[None, :]

    def aux_equilibrium(self, V):
        return (self._u(V) / self.d)[None, :]


def hh_model():
    """The Hodgkin-Huxley model."""
    return HodgkinHuxley()


def synthetic_stiff_model(rho_target):
    """Synthetic excitable model whose gating stiffness peaks at ``rho_target``."""
    return SyntheticStiffModel(rho_target)


def cell_jacobian_spectral_radius(model, V, w_a, w_g):
    """Spectral radius of the central-difference Jacobian of one cell.

    Args:
        model: the ionic model.
        V: scalar potential.
        w_a: auxiliary variables, length ``m1``.
        w_g: gating variables, length ``m2``.
    """
    x0 = np.concatenate([np.atleast_1d(np.asarray(V, dtype=float)),
                         np.asarray(w_a, dtype=float).ravel(),
                         np.asarray(w_g, dtype=float).ravel()])
    if x0.size != 1 + model.m1 + model.m2:
        raise InvalidArgumentError("state size does not match the model")
    if not np.all(np.isfinite(x0)):
        raise NonFiniteInputError("cell state must be finite")

    def f(x):
        V = x[:1]
        wa = x[1:1 + model.m1].reshape(model.m1, 1)
        wg = x[1 + model.m1:].reshape(model.m2, 1)
        dV, dwa, dwg = model.cell_rhs(V, wa, wg)
        return np.concatenate([dV, dwa.ravel(), dwg.ravel()])

    n = x0.size
    J = np.empty((n, n))
    for j in range(n):
        h = 1e-6 * max(1.0, abs(x0[j]))
        e = np.zeros(n)
        e[j] = h
        J[:, j] = (f(x0 + e) - f(x0 - e)) / (2.0 * h)
    return float(np.max(np.abs(np.linalg.eigvals(J))))
