"""Seven-parameter diffusion likelihood.

The first-passage kernel is integrated over a normal across-trial drift
distribution in closed form, leaving a two-dimensional integral over the
uniform start-point and non-decision-time supports that is evaluated with
tensorized Gauss-Legendre quadrature. Gradients are exact derivatives of
the quadrature approximation: nodes are expressed as affine functions of
the support endpoints, so differentiating under the (finite) sum also
captures the boundary contributions that appear when the integration
limits move with a parameter.

Scalar operations here are pure numpy. Batch evaluation over trials, the
hot path of the samplers, goes through numba kernels that are tested for
parity against the numpy route.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from numba import njit

from .errors import ConfigError, DomainError, NumericFailure
from .wfpt import (
    DENSITY_FLOOR,
    KAPPA_CAP,
    Boundary,
    Representation,
    SeriesPlan,
    choose_representation,
    truncation_diagnostics,
)

# Reaction times closer than this to the lower support edge are treated as
# outside the support (numerical guard for the t_d -> 0 singularity).
SUPPORT_EDGE = 1e-9

PARAM_ORDER = ("mu_v", "s_v", "a", "mu_z", "s_z", "mu_tau", "s_tau")


# --------------------------------------------------------------------- #
# domain types
# --------------------------------------------------------------------- #

@dataclass(frozen=True)
class DdmParams:
    """Natural parameters of the full diffusion model.

    mu_v, s_v  : mean and SD of the normal across-trial drift distribution
    a          : boundary separation
    mu_z, s_z  : centre and width of the uniform start-point distribution
    mu_tau, s_tau : centre and width of the uniform non-decision time
    """

    mu_v: float
    s_v: float
    a: float
    mu_z: float
    s_z: float
    mu_tau: float
    s_tau: float

    def __post_init__(self):
        if not (self.a > 0 and math.isfinite(self.a)):
            raise DomainError(f"boundary separation must be positive, got {self.a}")
        for name in ("s_v", "s_z", "s_tau"):
            val = getattr(self, name)
            if not (val > 0 and math.isfinite(val)):
                raise DomainError(f"{name} must be positive, got {val}")
        if not self.mu_z - 0.5 * self.s_z > 0:
            raise DomainError(
                f"start-point support must stay above zero: "
                f"mu_z={self.mu_z}, s_z={self.s_z}"
            )
        if not self.a > self.mu_z + 0.5 * self.s_z:
            raise DomainError(
                f"start-point support must stay below the boundary: "
                f"a={self.a}, mu_z={self.mu_z}, s_z={self.s_z}"
            )
        if not self.mu_tau - 0.5 * self.s_tau > 0:
            raise DomainError(
                f"non-decision-time support must stay above zero: "
                f"mu_tau={self.mu_tau}, s_tau={self.s_tau}"
            )

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.mu_v, self.s_v, self.a, self.mu_z, self.s_z,
             self.mu_tau, self.s_tau]
        )

    @classmethod
    def from_array(cls, vec) -> "DdmParams":
        vec = np.asarray(vec, dtype=float)
        return cls(*[float(x) for x in vec])


@dataclass(frozen=True)
class QuadratureRule:
    """Gauss-Legendre tables for the start-point / non-decision integrals.

    Abscissae are stored on the unit interval with weights summing to one;
    `mapped` rescales them to an arbitrary uniform support so the weights
    sum to the interval length.
    """

    nodes_z: int
    nodes_tau: int
    xi: np.ndarray
    wz: np.ndarray
    eta: np.ndarray
    wt: np.ndarray

    def __post_init__(self):
        if self.nodes_z < 2 or self.nodes_tau < 2:
            raise ConfigError(
                f"quadrature needs at least 2 nodes per dimension, "
                f"got ({self.nodes_z}, {self.nodes_tau})"
            )

    @classmethod
    def gauss_legendre(cls, nodes_z: int = 32,
                       nodes_tau: Optional[int] = None) -> "QuadratureRule":
        if nodes_tau is None:
            nodes_tau = nodes_z
        xz, wz = np.polynomial.legendre.leggauss(nodes_z)
        xt, wt = np.polynomial.legendre.leggauss(nodes_tau)
        return cls(
            nodes_z=nodes_z,
            nodes_tau=nodes_tau,
            xi=(xz + 1.0) / 2.0,
            wz=wz / 2.0,
            eta=(xt + 1.0) / 2.0,
            wt=wt / 2.0,
        )

    @staticmethod
    def mapped(unit_nodes: np.ndarray, unit_weights: np.ndarray,
               lo: float, hi: float) -> Tuple[np.ndarray, np.ndarray]:
        width = hi - lo
        return lo + width * unit_nodes, width * unit_weights


_DEFAULT_QUAD = QuadratureRule.gauss_legendre(32)


def _resolve_quad(quad: Optional[QuadratureRule]) -> QuadratureRule:
    return _DEFAULT_QUAD if quad is None else quad


# --------------------------------------------------------------------- #
# drift-marginalized integrand, vectorized over start points
# --------------------------------------------------------------------- #

def _drift_terms(z, t_d, mu_v, u):
    """Denominator and log-scale factor of the closed-form drift integral."""
    big_d = 1.0 + t_d * u
    expo = -(mu_v * mu_v * t_d + 2.0 * mu_v * z - z * z * u) / (2.0 * big_d)
    return big_d, expo


def _column_values(representation, kappa, z, t_d, mu_v, u, a):
    """Integrand values at fixed decision time, vectorized over z."""
    big_d, expo = _drift_terms(z, t_d, mu_v, u)
    if representation is Representation.LARGE_TIME:
        k = np.arange(1.0, kappa + 1.0)[:, None]
        series = (
            k * np.sin(k * np.pi * z / a)
            * np.exp(-k * k * np.pi ** 2 * t_d / (2.0 * a * a))
        ).sum(axis=0)
        vals = np.pi / (a * a * np.sqrt(big_d)) * np.exp(expo) * series
    else:
        lo = -((kappa - 1) // 2)
        hi = kappa // 2
        k = np.arange(lo, hi + 1.0)[:, None]
        b = z + 2.0 * k * a
        series = ((b / a) * np.exp(-b * b / (2.0 * t_d))).sum(axis=0)
        vals = (
            a * t_d ** -1.5 / np.sqrt(2.0 * np.pi * big_d)
            * np.exp(expo) * series
        )
    return np.maximum(vals, 0.0)


def _column_values_grads(representation, kappa, z, t_d, mu_v, u, a):
    """Integrand values and the five partials, vectorized over z.

    Returns (g, d_mu_v, d_u, d_a, d_z, d_tau) where u is the drift
    variance s_v**2 and tau enters through t_d = rt - tau.
    """
    big_d, expo = _drift_terms(z, t_d, mu_v, u)
    e_fac = np.exp(expo)
    if representation is Representation.LARGE_TIME:
        k = np.arange(1.0, kappa + 1.0)[:, None]
        ang = k * np.pi * z / a
        decay = np.exp(-k * k * np.pi ** 2 * t_d / (2.0 * a * a))
        sin_t = np.sin(ang) * decay
        cos_t = np.cos(ang) * decay
        s0 = (k * sin_t).sum(axis=0)
        pref = np.pi / (a * a * np.sqrt(big_d)) * e_fac
        g = pref * s0
        # boundary separation: prefactor 1/a**2 plus z/a and t_d/a**2 in
        # the series terms
        d_a = (
            -2.0 / a * g
            + pref * (
                -(np.pi * z / (a * a)) * (k * k * cos_t).sum(axis=0)
                + (np.pi ** 2 * t_d / a ** 3) * (k ** 3 * sin_t).sum(axis=0)
            )
        )
        series_dz = (np.pi / a) * pref * (k * k * cos_t).sum(axis=0)
        series_dtau = (np.pi ** 2 / (2.0 * a * a)) * pref * (k ** 3 * sin_t).sum(axis=0)
        extra_tau = 0.0
    else:
        lo = -((kappa - 1) // 2)
        hi = kappa // 2
        k = np.arange(lo, hi + 1.0)[:, None]
        b = z + 2.0 * k * a
        q = np.exp(-b * b / (2.0 * t_d))
        s0 = ((b / a) * q).sum(axis=0)
        pref = a * t_d ** -1.5 / np.sqrt(2.0 * np.pi * big_d) * e_fac
        g = pref * s0
        d_a = (
            g / a
            - pref * ((z * t_d + 2.0 * k * a * b * b) * q).sum(axis=0)
            / (a * a * t_d)
        )
        series_dz = pref * ((t_d - b * b) * q).sum(axis=0) / (a * t_d)
        series_dtau = -pref * ((b / a) * q * b * b).sum(axis=0) / (2.0 * t_d ** 2)
        extra_tau = 3.0 / (2.0 * t_d) * g
    d_mu_v = -g * (mu_v * t_d + z) / big_d
    zmu = z + mu_v * t_d
    d_u = g * (zmu * zmu - t_d * big_d) / (2.0 * big_d * big_d)
    d_z = g * (z * u - mu_v) / big_d + series_dz
    vzu = mu_v - z * u
    d_tau = (
        extra_tau
        + g * (u / (2.0 * big_d) + vzu * vzu / (2.0 * big_d * big_d))
        + series_dtau
    )
    return g, d_mu_v, d_u, d_a, d_z, d_tau


# --------------------------------------------------------------------- #
# public scalar operations
# --------------------------------------------------------------------- #

def ddm_integrand(rep, z: float, tau: float, rt: float, p: DdmParams,
                  plan: SeriesPlan) -> float:
    """Drift-marginalized first-passage integrand at one (z, tau) node.

    `rep` selects the series representation; the truncation length comes
    from `plan` so cross-representation checks can share a kappa.
    Decision times at or below zero return 0 (outside the support).
    """
    rep = Representation(rep)
    t_d = rt - tau
    if t_d <= 0.0:
        return 0.0
    val = _column_values(
        rep, plan.kappa, np.array([z]), t_d, p.mu_v, p.s_v ** 2, p.a
    )[0]
    return float(val)


def ddm_integrand_grad(rep, z: float, tau: float, rt: float, p: DdmParams,
                       plan: SeriesPlan) -> np.ndarray:
    """Partials of the integrand over (mu_v, s_v**2, a, z, tau).

    The series are truncated at the same kappa as the value computation.
    Outside the support (rt <= tau) every partial is zero.
    """
    rep = Representation(rep)
    t_d = rt - tau
    if t_d <= 0.0:
        return np.zeros(5)
    out = _column_values_grads(
        rep, plan.kappa, np.array([z]), t_d, p.mu_v, p.s_v ** 2, p.a
    )
    return np.array([out[1][0], out[2][0], out[3][0], out[4][0], out[5][0]])


def _reflect(choice: Boundary, p: DdmParams) -> Tuple[float, float]:
    """Effective (mu_v, mu_z) after mapping Upper to the lower boundary."""
    if choice is Boundary.UPPER:
        return -p.mu_v, p.a - p.mu_z
    return p.mu_v, p.mu_z


def ddm_density(choice, rt: float, p: DdmParams,
                quad: Optional[QuadratureRule] = None,
                epsilon: float = 1e-10) -> float:
    """Defective density of (choice, rt) under the seven-parameter model."""
    choice = Boundary(choice)
    quad = _resolve_quad(quad)
    mu_v, mu_z = _reflect(choice, p)
    if rt - (p.mu_tau - 0.5 * p.s_tau) <= SUPPORT_EDGE:
        return 0.0
    u = p.s_v ** 2
    z_nodes = mu_z + p.s_z * (quad.xi - 0.5)
    tau_nodes = p.mu_tau + p.s_tau * (quad.eta - 0.5)
    total = 0.0
    for tau_j, wt_j in zip(tau_nodes, quad.wt):
        t_d = rt - tau_j
        if t_d <= SUPPORT_EDGE:
            continue
        plan = choose_representation(t_d / p.a ** 2, epsilon)
        col = _column_values(
            plan.representation, plan.kappa, z_nodes, t_d, mu_v, u, p.a
        )
        total += wt_j * float(quad.wz @ col)
    return total if total > DENSITY_FLOOR else 0.0


def ddm_density_grad(choice, rt: float, p: DdmParams,
                     quad: Optional[QuadratureRule] = None,
                     epsilon: float = 1e-10) -> Tuple[float, np.ndarray]:
    """Density and its gradient over the seven natural parameters.

    The gradient is the exact derivative of the quadrature value: start
    and non-decision nodes are affine in (mu_z, s_z) and (mu_tau, s_tau),
    so endpoint motion is differentiated analytically instead of by
    moving nodes numerically.
    """
    choice = Boundary(choice)
    quad = _resolve_quad(quad)
    mu_v, mu_z = _reflect(choice, p)
    if rt - (p.mu_tau - 0.5 * p.s_tau) <= SUPPORT_EDGE:
        return 0.0, np.zeros(7)
    u = p.s_v ** 2
    z_nodes = mu_z + p.s_z * (quad.xi - 0.5)
    z_shift = quad.xi - 0.5
    tau_nodes = p.mu_tau + p.s_tau * (quad.eta - 0.5)
    val = 0.0
    d_mu_v = d_u = d_a = d_mu_z = d_s_z = d_mu_tau = d_s_tau = 0.0
    for tau_j, wt_j, eta_j in zip(tau_nodes, quad.wt, quad.eta):
        t_d = rt - tau_j
        if t_d <= SUPPORT_EDGE:
            continue
        plan = choose_representation(t_d / p.a ** 2, epsilon)
        g, gmv, gu, ga, gz, gtau = _column_values_grads(
            plan.representation, plan.kappa, z_nodes, t_d, mu_v, u, p.a
        )
        wz = quad.wz
        val += wt_j * float(wz @ g)
        d_mu_v += wt_j * float(wz @ gmv)
        d_u += wt_j * float(wz @ gu)
        d_a += wt_j * float(wz @ ga)
        d_mu_z += wt_j * float(wz @ gz)
        d_s_z += wt_j * float(wz @ (gz * z_shift))
        d_mu_tau += wt_j * float(wz @ gtau)
        d_s_tau += wt_j * (eta_j - 0.5) * float(wz @ gtau)
    if choice is Boundary.UPPER:
        # chain rule through mu_v' = -mu_v and mu_z' = a - mu_z
        d_a = d_a + d_mu_z
        d_mu_v = -d_mu_v
        d_mu_z = -d_mu_z
    grad = np.array(
        [d_mu_v, 2.0 * p.s_v * d_u, d_a, d_mu_z, d_s_z, d_mu_tau, d_s_tau]
    )
    return val, grad


def ddm_loglik_grad(trial, p: DdmParams,
                    quad: Optional[QuadratureRule] = None,
                    epsilon: float = 1e-10) -> np.ndarray:
    """Gradient of the log density at one trial over all 7 parameters.

    `trial` carries `choice` and `rt` attributes (and optionally `index`
    for error reporting). Raises NumericFailure when the density
    underflows to zero; callers mix in the contaminant floor first.
    """
    val, grad = ddm_density_grad(trial.choice, trial.rt, p, quad, epsilon)
    if val <= 0.0:
        idx = getattr(trial, "index", None)
        where = f" at trial {idx}" if idx is not None else ""
        raise NumericFailure(
            f"zero diffusion density{where}: rt={trial.rt}, "
            f"choice={trial.choice}"
        )
    return grad / val


# --------------------------------------------------------------------- #
# numba kernels: batch evaluation over trials
# --------------------------------------------------------------------- #

@njit(cache=True)
def _plan_nb(t_s, eps):
    """Series choice for scaled time: (is_large, kappa, cap_hit)."""
    arg_small = -2.0 * t_s * np.log(2.0 * eps * np.sqrt(2.0 * np.pi * t_s))
    arg_large = -2.0 * np.log(np.pi * t_s * eps) / (np.pi ** 2 * t_s)
    s_small = np.sqrt(arg_small) if arg_small > 0.0 else 0.0
    s_large = np.sqrt(arg_large) if arg_large > 0.0 else 0.0
    indicator = 2.0 + s_small - s_large
    cap_hit = False
    if indicator >= 0.0:
        raw = max(s_large, 1.0 / (np.pi * np.sqrt(t_s)))
        kappa = max(1, int(np.ceil(raw)))
        if kappa > KAPPA_CAP:
            kappa = KAPPA_CAP
            cap_hit = True
        return True, kappa, cap_hit
    raw = max(2.0 + s_small, 1.0 + np.sqrt(t_s))
    kappa = max(1, int(np.ceil(raw)))
    if kappa > KAPPA_CAP:
        kappa = KAPPA_CAP
        cap_hit = True
    return False, kappa, cap_hit


@njit(cache=True, fastmath=True)
def _node_value_nb(is_large, kappa, z, t_d, mu_v, u, a):
    big_d = 1.0 + t_d * u
    expo = -(mu_v * mu_v * t_d + 2.0 * mu_v * z - z * z * u) / (2.0 * big_d)
    e_fac = np.exp(expo)
    if is_large:
        s0 = 0.0
        for k in range(1, kappa + 1):
            s0 += k * np.sin(k * np.pi * z / a) * np.exp(
                -k * k * np.pi ** 2 * t_d / (2.0 * a * a)
            )
        val = np.pi / (a * a * np.sqrt(big_d)) * e_fac * s0
    else:
        lo = -((kappa - 1) // 2)
        hi = kappa // 2
        s0 = 0.0
        for k in range(lo, hi + 1):
            b = z + 2.0 * k * a
            s0 += (b / a) * np.exp(-b * b / (2.0 * t_d))
        val = a * t_d ** -1.5 / np.sqrt(2.0 * np.pi * big_d) * e_fac * s0
    return val if val > 0.0 else 0.0


@njit(cache=True, fastmath=True)
def _node_value_grad_nb(is_large, kappa, z, t_d, mu_v, u, a, out):
    """Fills out[0:6] with (g, d_mu_v, d_u, d_a, d_z, d_tau)."""
    big_d = 1.0 + t_d * u
    expo = -(mu_v * mu_v * t_d + 2.0 * mu_v * z - z * z * u) / (2.0 * big_d)
    e_fac = np.exp(expo)
    if is_large:
        s0 = 0.0
        s_cos2 = 0.0
        s_sin3 = 0.0
        for k in range(1, kappa + 1):
            ang = k * np.pi * z / a
            decay = np.exp(-k * k * np.pi ** 2 * t_d / (2.0 * a * a))
            sin_t = np.sin(ang) * decay
            cos_t = np.cos(ang) * decay
            s0 += k * sin_t
            s_cos2 += k * k * cos_t
            s_sin3 += k ** 3 * sin_t
        pref = np.pi / (a * a * np.sqrt(big_d)) * e_fac
        g = pref * s0
        d_a = (
            -2.0 / a * g
            + pref * (
                -(np.pi * z / (a * a)) * s_cos2
                + (np.pi ** 2 * t_d / a ** 3) * s_sin3
            )
        )
        series_dz = (np.pi / a) * pref * s_cos2
        series_dtau = (np.pi ** 2 / (2.0 * a * a)) * pref * s_sin3
        extra_tau = 0.0
    else:
        lo = -((kappa - 1) // 2)
        hi = kappa // 2
        s0 = 0.0
        s_da = 0.0
        s_dz = 0.0
        s_dt = 0.0
        for k in range(lo, hi + 1):
            b = z + 2.0 * k * a
            q = np.exp(-b * b / (2.0 * t_d))
            s0 += (b / a) * q
            s_da += (z * t_d + 2.0 * k * a * b * b) * q
            s_dz += (t_d - b * b) * q
            s_dt += (b / a) * q * b * b
        pref = a * t_d ** -1.5 / np.sqrt(2.0 * np.pi * big_d) * e_fac
        g = pref * s0
        d_a = g / a - pref * s_da / (a * a * t_d)
        series_dz = pref * s_dz / (a * t_d)
        series_dtau = -pref * s_dt / (2.0 * t_d ** 2)
        extra_tau = 3.0 / (2.0 * t_d) * g
    d_mu_v = -g * (mu_v * t_d + z) / big_d
    zmu = z + mu_v * t_d
    d_u = g * (zmu * zmu - t_d * big_d) / (2.0 * big_d * big_d)
    d_z = g * (z * u - mu_v) / big_d + series_dz
    vzu = mu_v - z * u
    d_tau = (
        extra_tau
        + g * (u / (2.0 * big_d) + vzu * vzu / (2.0 * big_d * big_d))
        + series_dtau
    )
    out[0] = g
    out[1] = d_mu_v
    out[2] = d_u
    out[3] = d_a
    out[4] = d_z
    out[5] = d_tau


@njit(cache=True)
def _batch_density_nb(rts, upper, params, xi, wz, eta, wt, eps):
    n = rts.shape[0]
    dens = np.zeros(n)
    cap_hits = 0
    mu_v0, s_v, a = params[0], params[1], params[2]
    mu_z0, s_z, mu_tau, s_tau = params[3], params[4], params[5], params[6]
    u = s_v * s_v
    lower_edge = mu_tau - 0.5 * s_tau
    nz = xi.shape[0]
    nt = eta.shape[0]
    for i in range(n):
        rt = rts[i]
        if rt - lower_edge <= SUPPORT_EDGE:
            continue
        if upper[i]:
            mu_v = -mu_v0
            mu_z = a - mu_z0
        else:
            mu_v = mu_v0
            mu_z = mu_z0
        total = 0.0
        for jt in range(nt):
            tau_j = mu_tau + s_tau * (eta[jt] - 0.5)
            t_d = rt - tau_j
            if t_d <= SUPPORT_EDGE:
                continue
            is_large, kappa, hit = _plan_nb(t_d / (a * a), eps)
            if hit:
                cap_hits += 1
            col = 0.0
            for jz in range(nz):
                z = mu_z + s_z * (xi[jz] - 0.5)
                col += wz[jz] * _node_value_nb(
                    is_large, kappa, z, t_d, mu_v, u, a
                )
            total += wt[jt] * col
        dens[i] = total if total > DENSITY_FLOOR else 0.0
    return dens, cap_hits


@njit(cache=True)
def _batch_density_grad_nb(rts, upper, params, xi, wz, eta, wt, eps):
    n = rts.shape[0]
    dens = np.zeros(n)
    grads = np.zeros((n, 7))
    cap_hits = 0
    mu_v0, s_v, a = params[0], params[1], params[2]
    mu_z0, s_z, mu_tau, s_tau = params[3], params[4], params[5], params[6]
    u = s_v * s_v
    lower_edge = mu_tau - 0.5 * s_tau
    nz = xi.shape[0]
    nt = eta.shape[0]
    node = np.zeros(6)
    for i in range(n):
        rt = rts[i]
        if rt - lower_edge <= SUPPORT_EDGE:
            continue
        if upper[i]:
            mu_v = -mu_v0
            mu_z = a - mu_z0
        else:
            mu_v = mu_v0
            mu_z = mu_z0
        val = 0.0
        d_mu_v = 0.0
        d_u = 0.0
        d_a = 0.0
        d_mu_z = 0.0
        d_s_z = 0.0
        d_mu_tau = 0.0
        d_s_tau = 0.0
        for jt in range(nt):
            tau_j = mu_tau + s_tau * (eta[jt] - 0.5)
            t_d = rt - tau_j
            if t_d <= SUPPORT_EDGE:
                continue
            is_large, kappa, hit = _plan_nb(t_d / (a * a), eps)
            if hit:
                cap_hits += 1
            cg = 0.0
            cmv = 0.0
            cu = 0.0
            ca = 0.0
            cz = 0.0
            csz = 0.0
            ctau = 0.0
            for jz in range(nz):
                shift = xi[jz] - 0.5
                z = mu_z + s_z * shift
                _node_value_grad_nb(is_large, kappa, z, t_d, mu_v, u, a, node)
                w = wz[jz]
                cg += w * node[0]
                cmv += w * node[1]
                cu += w * node[2]
                ca += w * node[3]
                cz += w * node[4]
                csz += w * node[4] * shift
                ctau += w * node[5]
            val += wt[jt] * cg
            d_mu_v += wt[jt] * cmv
            d_u += wt[jt] * cu
            d_a += wt[jt] * ca
            d_mu_z += wt[jt] * cz
            d_s_z += wt[jt] * csz
            d_mu_tau += wt[jt] * ctau
            d_s_tau += wt[jt] * (eta[jt] - 0.5) * ctau
        if upper[i]:
            d_a = d_a + d_mu_z
            d_mu_v = -d_mu_v
            d_mu_z = -d_mu_z
        dens[i] = val
        grads[i, 0] = d_mu_v
        grads[i, 1] = 2.0 * s_v * d_u
        grads[i, 2] = d_a
        grads[i, 3] = d_mu_z
        grads[i, 4] = d_s_z
        grads[i, 5] = d_mu_tau
        grads[i, 6] = d_s_tau
    return dens, grads, cap_hits


def _choices_to_upper(choices) -> np.ndarray:
    if isinstance(choices, np.ndarray) and choices.dtype == np.bool_:
        return choices
    return np.array([Boundary(c) is Boundary.UPPER for c in choices])


def ddm_density_batch(rts, choices, p: DdmParams,
                      quad: Optional[QuadratureRule] = None,
                      epsilon: float = 1e-10) -> np.ndarray:
    """Per-trial defective densities via the numba kernel.

    `choices` is a boolean upper-boundary mask or a sequence of boundary
    labels. Zero-density trials stay zero; the caller decides whether to
    contaminate or fail.
    """
    quad = _resolve_quad(quad)
    rts = np.ascontiguousarray(rts, dtype=float)
    upper = _choices_to_upper(choices)
    dens, cap_hits = _batch_density_nb(
        rts, upper, p.as_array(), quad.xi, quad.wz, quad.eta, quad.wt,
        epsilon,
    )
    if cap_hits:
        truncation_diagnostics.record_cap_hit(cap_hits)
    return dens


def ddm_density_grad_batch(rts, choices, p: DdmParams,
                           quad: Optional[QuadratureRule] = None,
                           epsilon: float = 1e-10
                           ) -> Tuple[np.ndarray, np.ndarray]:
    """Per-trial densities and density gradients (n, 7) via numba."""
    quad = _resolve_quad(quad)
    rts = np.ascontiguousarray(rts, dtype=float)
    upper = _choices_to_upper(choices)
    dens, grads, cap_hits = _batch_density_grad_nb(
        rts, upper, p.as_array(), quad.xi, quad.wz, quad.eta, quad.wt,
        epsilon,
    )
    if cap_hits:
        truncation_diagnostics.record_cap_hit(cap_hits)
    return dens, grads
