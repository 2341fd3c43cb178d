"""Linear ballistic accumulator race: closed-form defective density,
per-accumulator CDF, and analytic gradients.

Each accumulator starts at k ~ U(0, A), accumulates at a rate drawn once
per trial from N(v_c, 1), and finishes when it reaches the threshold b.
The observed response is the first accumulator to finish; trials where
every sampled rate is negative never finish, so the race is defective
with total mass 1 - prod_c Phi(-v_c). No renormalization is applied; the
contaminant mixture at the model level absorbs stray mass.

Survival factors are computed directly from complementary normal CDFs
rather than as 1 - F to avoid cancellation in the tails.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from scipy.special import ndtr

from .errors import DomainError, NumericFailure

_SQRT_2PI = math.sqrt(2.0 * math.pi)


def _npdf(x):
    return np.exp(-0.5 * x * x) / _SQRT_2PI


# --------------------------------------------------------------------- #
# domain type
# --------------------------------------------------------------------- #

@dataclass(frozen=True)
class LbaParams:
    """Race parameters: threshold b, start-point range A, drift means v
    (one per accumulator), common drift SD s (fixed at 1 for
    identifiability), and non-decision time tau."""

    b: float
    A: float
    v: Tuple[float, ...]
    tau: float
    s: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "v", tuple(float(x) for x in self.v))
        if not (self.A > 0 and math.isfinite(self.A)):
            raise DomainError(f"start-point range must be positive, got {self.A}")
        if not self.b > self.A:
            raise DomainError(
                f"threshold must exceed the start-point range: "
                f"b={self.b}, A={self.A}"
            )
        if not (self.tau > 0 and math.isfinite(self.tau)):
            raise DomainError(f"non-decision time must be positive, got {self.tau}")
        if len(self.v) < 2:
            raise DomainError("a race needs at least 2 accumulators")
        if self.s != 1.0:
            raise DomainError("drift SD is fixed at 1 for identifiability")

    @property
    def n_accumulators(self) -> int:
        return len(self.v)


def race_defect_mass(p: LbaParams) -> float:
    """Probability that no accumulator ever finishes."""
    return float(np.prod(ndtr(-np.asarray(p.v))))


# --------------------------------------------------------------------- #
# single-accumulator pieces (vectorized over decision time r = t - tau)
# --------------------------------------------------------------------- #

def _pieces(r, b, A, v):
    """Standardized arguments and normal terms shared by f, F and S."""
    g = (b - A - r * v) / r
    h = (b - r * v) / r
    return g, h, ndtr(g), ndtr(h), _npdf(g), _npdf(h)


def _f_single(r, b, A, v):
    g, h, cg, ch, pg, ph = _pieces(r, b, A, v)
    return np.maximum((-v * cg + pg + v * ch - ph) / A, 0.0)


def _survival_single(r, b, A, v):
    _, _, cg, ch, pg, ph = _pieces(r, b, A, v)
    c_g = (b - A - r * v) / A
    c_h = (b - r * v) / A
    return np.clip(-c_g * cg + c_h * ch - (r / A) * (pg - ph), 0.0, 1.0)


def _f_grad_single(r, b, A, v):
    """Partials of the finishing-time density over (b, A, v, tau)."""
    g, h, cg, ch, pg, ph = _pieces(r, b, A, v)
    f = (-v * cg + pg + v * ch - ph) / A
    d_b = (-(v + g) * pg + (v + h) * ph) / (A * r)
    d_a = -f / A + (v + g) * pg / (A * r)
    d_v = (ch - cg + v * (pg - ph) + g * pg - h * ph) / A
    d_tau = ((b - A) * (-(v + g) * pg) + b * (v + h) * ph) / (A * r * r)
    return f, d_b, d_a, d_v, d_tau


def _cdf_grad_single(r, b, A, v):
    """Partials of the finishing-time CDF over (b, A, v, tau)."""
    g, h, cg, ch, pg, ph = _pieces(r, b, A, v)
    c_h = (b - r * v) / A
    d_b = (cg - ch) / A
    d_a = c_h * (ch - cg) / A - r * (pg - ph) / (A * A)
    d_v = r * (ch - cg) / A
    d_tau = v * (cg - ch) / A + (ph - pg) / A
    return d_b, d_a, d_v, d_tau


# --------------------------------------------------------------------- #
# public operations
# --------------------------------------------------------------------- #

def lba_cdf_single(t: float, p: LbaParams, accumulator: int) -> float:
    """Defective finishing-time CDF of one accumulator, clamped to [0,1]."""
    r = t - p.tau
    if r <= 0.0:
        return 0.0
    return float(1.0 - _survival_single(r, p.b, p.A, p.v[accumulator]))


def lba_survival_single(t: float, p: LbaParams, accumulator: int) -> float:
    """Complement of lba_cdf_single, computed directly (no cancellation)."""
    r = t - p.tau
    if r <= 0.0:
        return 1.0
    return float(_survival_single(r, p.b, p.A, p.v[accumulator]))


def lba_density(choice: int, rt: float, p: LbaParams) -> float:
    """Defective joint density of (choice, rt): the chosen accumulator
    finishes at rt while every other accumulator is still running."""
    r = rt - p.tau
    if r <= 0.0:
        return 0.0
    val = _f_single(r, p.b, p.A, p.v[choice])
    for k, vk in enumerate(p.v):
        if k != choice:
            val *= _survival_single(r, p.b, p.A, vk)
    return float(val)


def lba_density_grad(choice: int, rt: float, p: LbaParams,
                     trial_index: Optional[int] = None) -> np.ndarray:
    """Gradient of the race density over (b, A, v_1..v_C, tau).

    Zero below the support; a zero density above the support raises
    NumericFailure (callers contaminate first).
    """
    n = p.n_accumulators
    r = rt - p.tau
    if r <= 0.0:
        return np.zeros(n + 3)
    dens = lba_density(choice, rt, p)
    if dens <= 0.0:
        where = f" at trial {trial_index}" if trial_index is not None else ""
        raise NumericFailure(
            f"zero race density{where}: choice={choice}, rt={rt}"
        )
    surv = np.array([_survival_single(r, p.b, p.A, vk) for vk in p.v])
    f_c, fb, fa, fv, ftau = _f_grad_single(r, p.b, p.A, p.v[choice])

    others = [k for k in range(n) if k != choice]

    def prod_excluding(skip):
        acc = 1.0
        for k in others:
            if k != skip:
                acc *= surv[k]
        return acc

    prod_all = prod_excluding(-1)
    grad = np.zeros(n + 3)
    grad[0] = fb * prod_all
    grad[1] = fa * prod_all
    grad[2 + choice] = fv * prod_all
    grad[n + 2] = ftau * prod_all
    for k in others:
        kb, ka, kv, ktau = _cdf_grad_single(r, p.b, p.A, p.v[k])
        partial = f_c * prod_excluding(k)
        grad[0] -= kb * partial
        grad[1] -= ka * partial
        grad[2 + k] -= kv * partial
        grad[n + 2] -= ktau * partial
    return grad


# --------------------------------------------------------------------- #
# batch evaluation over trials
# --------------------------------------------------------------------- #

def lba_density_batch(rts, choices, p: LbaParams) -> np.ndarray:
    """Per-trial race densities, vectorized over trials."""
    rts = np.asarray(rts, dtype=float)
    choices = np.asarray(choices, dtype=int)
    r = rts - p.tau
    ok = r > 0.0
    dens = np.zeros_like(rts)
    if not ok.any():
        return dens
    rr = r[ok]
    f_all = np.stack([_f_single(rr, p.b, p.A, vk) for vk in p.v])
    s_all = np.stack([_survival_single(rr, p.b, p.A, vk) for vk in p.v])
    ch = choices[ok]
    cols = np.arange(rr.size)
    f_c = f_all[ch, cols]
    s_prod = s_all.prod(axis=0)
    s_c = s_all[ch, cols]
    with np.errstate(divide="ignore", invalid="ignore"):
        others = np.where(s_c > 0.0, s_prod / s_c, 0.0)
    # recompute exactly where the chosen survival underflowed
    bad = (s_c == 0.0).nonzero()[0]
    for i in bad:
        mask = np.ones(len(p.v), dtype=bool)
        mask[ch[i]] = False
        others[i] = s_all[mask, i].prod()
    dens[ok] = f_c * others
    return dens


def lba_density_matrix(rts, choices, b, A, v, tau) -> np.ndarray:
    """Race densities for many parameter rows against one trial block.

    rts, choices are (n,) trial arrays; b, A, tau are (m,) rows of
    natural parameters and v is (m, C). Returns an (m, n) array of raw
    densities with zeros below the support; zero densities above the
    support stay zero (callers decide what that means).
    """
    rts = np.asarray(rts, dtype=float)
    choices = np.asarray(choices, dtype=int)
    b = np.asarray(b, dtype=float)[:, None]
    A = np.asarray(A, dtype=float)[:, None]
    tau = np.asarray(tau, dtype=float)[:, None]
    v = np.asarray(v, dtype=float)
    n_acc = v.shape[1]
    r = rts[None, :] - tau
    ok = r > 0.0
    rr = np.where(ok, r, 1.0)
    s_all = np.stack([_survival_single(rr, b, A, v[:, k:k + 1])
                      for k in range(n_acc)])
    f_all = np.stack([_f_single(rr, b, A, v[:, k:k + 1])
                      for k in range(n_acc)])
    dens = np.zeros(ok.shape)
    for k in range(n_acc):
        cols = choices == k
        if not cols.any():
            continue
        others = np.ones((v.shape[0], int(cols.sum())))
        for j in range(n_acc):
            if j != k:
                others *= s_all[j][:, cols]
        dens[:, cols] = f_all[k][:, cols] * others
    dens[~ok] = 0.0
    return dens


def lba_density_elementwise(rts, choices, b, A, v, tau) -> np.ndarray:
    """Race densities where every evaluation point carries its own
    parameter row: all arguments are (k,) arrays except v, which is
    (k, C). Returns (k,) raw densities, zero below the support.
    """
    rts = np.asarray(rts, dtype=float)
    choices = np.asarray(choices, dtype=int)
    b = np.asarray(b, dtype=float)
    A = np.asarray(A, dtype=float)
    tau = np.asarray(tau, dtype=float)
    v = np.asarray(v, dtype=float)
    n_acc = v.shape[1]
    r = rts - tau
    ok = r > 0.0
    rr = np.where(ok, r, 1.0)
    dens = np.zeros(rts.shape)
    surv = np.empty((n_acc, rts.size))
    for k in range(n_acc):
        surv[k] = _survival_single(rr, b, A, v[:, k])
    for k in range(n_acc):
        sel = choices == k
        if not sel.any():
            continue
        f = _f_single(rr[sel], b[sel], A[sel], v[sel, k])
        others = np.ones(int(sel.sum()))
        for j in range(n_acc):
            if j != k:
                others = others * surv[j][sel]
        dens[sel] = f * others
    dens[~ok] = 0.0
    return dens


def lba_density_grad_batch(rts, choices, p: LbaParams
                           ) -> Tuple[np.ndarray, np.ndarray]:
    """Per-trial densities and density gradients (n, C+3), vectorized.

    Rows below the support are all zero; zero densities above the
    support stay zero here (callers decide whether to fail).
    """
    rts = np.asarray(rts, dtype=float)
    choices = np.asarray(choices, dtype=int)
    n_trials = rts.size
    n = p.n_accumulators
    dens = np.zeros(n_trials)
    grads = np.zeros((n_trials, n + 3))
    r = rts - p.tau
    ok = r > 0.0
    if not ok.any():
        return dens, grads
    rr = r[ok]
    m = rr.size
    cols = np.arange(m)
    ch = choices[ok]

    f_all = np.empty((n, m))
    fg = np.empty((4, n, m))
    s_all = np.empty((n, m))
    sg = np.empty((4, n, m))
    for k, vk in enumerate(p.v):
        f_all[k], fg[0, k], fg[1, k], fg[2, k], fg[3, k] = _f_grad_single(
            rr, p.b, p.A, vk)
        s_all[k] = _survival_single(rr, p.b, p.A, vk)
        sg[0, k], sg[1, k], sg[2, k], sg[3, k] = _cdf_grad_single(
            rr, p.b, p.A, vk)

    f_c = np.maximum(f_all[ch, cols], 0.0)

    # product of survivals over non-chosen accumulators, and the same
    # with one more accumulator left out (for the CDF-derivative terms)
    prod_except = np.empty((n, m))
    for k in range(n):
        mask = np.ones(n, dtype=bool)
        mask[k] = False
        prod_except[k] = s_all[mask].prod(axis=0)
    prod_others = prod_except[ch, cols]

    out = np.zeros((m, n + 3))
    out[:, 0] = fg[0, ch, cols] * prod_others
    out[:, 1] = fg[1, ch, cols] * prod_others
    out[cols, 2 + ch] = fg[2, ch, cols] * prod_others
    out[:, n + 2] = fg[3, ch, cols] * prod_others
    for k in range(n):
        sel = ch != k
        if not sel.any():
            continue
        idx = cols[sel]
        # survivals excluding both the chosen accumulator and k
        with np.errstate(divide="ignore", invalid="ignore"):
            pair = np.where(
                s_all[k, idx] > 0.0,
                prod_except[ch[sel], idx] / s_all[k, idx],
                0.0,
            )
        bad = idx[s_all[k, idx] == 0.0]
        for i in bad:
            mask = np.ones(n, dtype=bool)
            mask[k] = False
            mask[ch[i]] = False
            pair[np.searchsorted(idx, i)] = s_all[mask, i].prod()
        partial = f_c[sel] * pair
        out[idx, 0] -= sg[0, k, idx] * partial
        out[idx, 1] -= sg[1, k, idx] * partial
        out[idx, 2 + k] -= sg[2, k, idx] * partial
        out[idx, n + 2] -= sg[3, k, idx] * partial

    dens[ok] = f_c * prod_others
    grads[ok] = out
    return dens, grads
