"""Fixed-form Gaussian variational fits for the hierarchical model.

The variational family pairs a factor-parameterized Gaussian over the
flat effect block (subject effects, regression weights, group mean and,
under Huang-Wand, log mixing scales) with the exact inverse-Wishart
conditional for the group covariance. Because the covariance factor is
the exact conditional, its contribution cancels from the bound draw by
draw, and the matching gradient term acts as a control variate.

Two factorizations are supported: a single joint Gaussian over the
whole block ("vb") and a product of per-subject Gaussians plus one
shared block for the remaining coordinates ("vbl"), whose per-iteration
cost grows linearly with the number of subjects.

Optimization is stochastic gradient ascent on the evidence lower bound
with reparameterized draws (ADAM by default, ADADELTA behind a flag)
and a moving-average stopping rule.
"""

from __future__ import annotations

import csv
import json
import math
import time
import warnings
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional, Tuple

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .data import Dataset
from .errors import ConfigError, DomainError, NumericFailure
from .model import (
    HierState,
    ModelSpec,
    PriorSpec,
    Theta1Layout,
    _effects_on_natural_scale,
    conditional_sigma_params,
    grad_log_joint_theta1,
    inv_wishart_logpdf,
    log_prior,
    make_layout,
    subject_loglik,
)
from .pmwg import diagnose_initial_state, inv_wishart_rvs
from .transforms import tau_slot_log_jacobian

__all__ = [
    "GaussianFactor",
    "VariationalState",
    "VbConfig",
    "OptimizerState",
    "StoppingRule",
    "VbResult",
    "joint_state",
    "layered_state",
    "initial_state",
    "woodbury_inverse_apply",
    "woodbury_logdet",
    "sample_q",
    "elbo_estimate",
    "elbo_grad_estimate",
    "make_optimizer",
    "optimizer_step",
    "run_vb",
    "save_variational",
    "load_variational",
    "save_elbo_trace",
]

_LOG_2PI = math.log(2.0 * math.pi)


# --------------------------------------------------------------------- #
# low-rank plus diagonal Gaussian algebra
# --------------------------------------------------------------------- #

def _core_factor(b_factor, scaled, ridge: float):
    """Cholesky factor of the r-by-r core I + Bᵀ D⁻² B, with a ridge
    repair (and warning) if it is numerically singular."""
    core = np.eye(b_factor.shape[1]) + b_factor.T @ scaled
    try:
        return cho_factor(core, lower=True)
    except np.linalg.LinAlgError:
        warnings.warn("singular low-rank core repaired with a ridge",
                      RuntimeWarning)
        return cho_factor(core + ridge * np.eye(core.shape[0]), lower=True)


def woodbury_inverse_apply(b_factor, d_diag, x, ridge: float = 1e-10
                           ) -> np.ndarray:
    """Apply the inverse of (B Bᵀ + D²) to a vector without ever forming
    the p-by-p matrix: cost O(p r²) for r factor columns.

    An empty or all-zero B reduces to the diagonal solve. A numerically
    singular r-by-r core is repaired with a small ridge and a warning.
    """
    d2 = np.square(np.asarray(d_diag, dtype=float))
    if np.any(d2 == 0.0):
        raise DomainError("the diagonal perturbation must be nonzero "
                          "everywhere")
    x = np.asarray(x, dtype=float)
    base = x / d2
    if b_factor is None:
        return base
    b_factor = np.asarray(b_factor, dtype=float)
    if b_factor.size == 0 or not b_factor.any():
        return base
    scaled = b_factor / d2[:, None]
    cf = _core_factor(b_factor, scaled, ridge)
    return base - scaled @ cho_solve(cf, b_factor.T @ base)


def woodbury_logdet(b_factor, d_diag) -> float:
    """log det(B Bᵀ + D²) via the matrix determinant lemma."""
    d2 = np.square(np.asarray(d_diag, dtype=float))
    if np.any(d2 == 0.0):
        raise DomainError("the diagonal perturbation must be nonzero "
                          "everywhere")
    total = float(np.log(d2).sum())
    if b_factor is None:
        return total
    b_factor = np.asarray(b_factor, dtype=float)
    if b_factor.size == 0:
        return total
    core = np.eye(b_factor.shape[1]) + b_factor.T @ (b_factor / d2[:, None])
    sign, logdet = np.linalg.slogdet(core)
    if sign <= 0:
        raise DomainError("low-rank core is not positive definite")
    return total + float(logdet)


@dataclass(frozen=True)
class GaussianFactor:
    """One Gaussian block N(mean, B Bᵀ + diag(d)²) with p-by-r factor B.

    The diagonal entries enter squared, so their sign carries no
    meaning; B is unconstrained because only B Bᵀ is identified.
    """

    mean: np.ndarray
    b_factor: np.ndarray
    d_diag: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        b = np.asarray(self.b_factor, dtype=float)
        d = np.asarray(self.d_diag, dtype=float)
        if b.ndim != 2 or b.shape[0] != mean.size or d.shape != mean.shape:
            raise ConfigError(
                f"factor block shapes disagree: mean {mean.shape}, "
                f"B {b.shape}, d {d.shape}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "b_factor", b)
        object.__setattr__(self, "d_diag", d)

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def n_factors(self) -> int:
        return self.b_factor.shape[1]

    @property
    def n_params(self) -> int:
        return self.dim * (2 + self.n_factors)

    def draw_eps(self, rng) -> Tuple[np.ndarray, np.ndarray]:
        return (rng.standard_normal(self.n_factors),
                rng.standard_normal(self.dim))

    def value(self, z, eta) -> np.ndarray:
        return self.mean + self.b_factor @ z + self.d_diag * eta

    def covariance(self) -> np.ndarray:
        return (self.b_factor @ self.b_factor.T
                + np.diag(np.square(self.d_diag)))

    def logpdf(self, x) -> float:
        dev = np.asarray(x, dtype=float) - self.mean
        quad = dev @ woodbury_inverse_apply(self.b_factor, self.d_diag, dev)
        return float(-0.5 * (self.dim * _LOG_2PI
                             + woodbury_logdet(self.b_factor, self.d_diag)
                             + quad))

    def score(self, x) -> np.ndarray:
        """Gradient of the log density over the point."""
        dev = np.asarray(x, dtype=float) - self.mean
        return -woodbury_inverse_apply(self.b_factor, self.d_diag, dev)

    def param_score(self, dev) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Gradient of -log density over (mean, B, d) at a fixed point
        mean + dev. Every piece has zero expectation under the block
        itself, so adding it to the path terms leaves gradient
        estimators unbiased while making them the exact derivative of a
        fixed-noise draw. Closed forms, with s = (B Bᵀ + D²)⁻¹ dev:
        mean picks up -s, B picks up W⁻¹B - s sᵀ B, d picks up
        d∘diag(W⁻¹) - d∘s².
        """
        dev = np.asarray(dev, dtype=float)
        d2 = np.square(self.d_diag)
        if np.any(d2 == 0.0):
            raise DomainError("the diagonal perturbation must be nonzero "
                              "everywhere")
        b = self.b_factor
        if b.size == 0 or not b.any():
            s = dev / d2
            winv_b = np.zeros_like(b)
            diag_winv = 1.0 / d2
        else:
            scaled = b / d2[:, None]
            cf = _core_factor(b, scaled, 1e-10)
            s = dev / d2 - scaled @ cho_solve(cf, b.T @ (dev / d2))
            winv_b = cho_solve(cf, scaled.T).T
            diag_winv = 1.0 / d2 - np.einsum("ij,ij->i", winv_b, scaled)
        g_mean = -s
        g_b = winv_b - np.outer(s, s @ b)
        g_d = self.d_diag * (diag_winv - s * s)
        return g_mean, g_b, g_d


# --------------------------------------------------------------------- #
# variational state
# --------------------------------------------------------------------- #

@dataclass(frozen=True)
class VariationalState:
    """The Gaussian part of the variational family: one block ("vb") or
    per-subject blocks plus a shared tail block ("vbl"), each block a
    GaussianFactor over a contiguous slice of the flat effect vector."""

    structure: str
    blocks: Tuple[GaussianFactor, ...]
    offsets: Tuple[int, ...]

    def __post_init__(self):
        if self.structure not in ("vb", "vbl"):
            raise ConfigError(f"unknown structure '{self.structure}'")
        if len(self.offsets) != len(self.blocks):
            raise ConfigError("one offset per block required")
        pos = 0
        for off, blk in zip(self.offsets, self.blocks):
            if off != pos:
                raise ConfigError("blocks must tile the effect vector "
                                  "contiguously")
            pos += blk.dim

    @property
    def dim(self) -> int:
        return sum(blk.dim for blk in self.blocks)

    @property
    def n_params(self) -> int:
        return sum(blk.n_params for blk in self.blocks)

    def slices(self) -> List[slice]:
        return [slice(off, off + blk.dim)
                for off, blk in zip(self.offsets, self.blocks)]

    # -- sampling and densities ---------------------------------------- #

    def draw_eps(self, rng) -> List[Tuple[np.ndarray, np.ndarray]]:
        return [blk.draw_eps(rng) for blk in self.blocks]

    def value(self, eps) -> np.ndarray:
        out = np.empty(self.dim)
        for blk, sl, (z, eta) in zip(self.blocks, self.slices(), eps):
            out[sl] = blk.value(z, eta)
        return out

    def sample(self, rng) -> Tuple[np.ndarray, list]:
        eps = self.draw_eps(rng)
        return self.value(eps), eps

    def mean_vector(self) -> np.ndarray:
        return np.concatenate([blk.mean for blk in self.blocks])

    def logpdf(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return sum(blk.logpdf(x[sl])
                   for blk, sl in zip(self.blocks, self.slices()))

    def score(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.empty(self.dim)
        for blk, sl in zip(self.blocks, self.slices()):
            out[sl] = blk.score(x[sl])
        return out

    # -- flat parameter vector for the optimizer ----------------------- #

    def to_vector(self) -> np.ndarray:
        parts = []
        for blk in self.blocks:
            parts.extend((blk.mean, blk.b_factor.ravel(), blk.d_diag))
        return np.concatenate(parts)

    def from_vector(self, vec) -> "VariationalState":
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.n_params,):
            raise ConfigError(f"parameter vector has shape {vec.shape}, "
                              f"state needs ({self.n_params},)")
        blocks = []
        pos = 0
        for blk in self.blocks:
            p, r = blk.dim, blk.n_factors
            mean = vec[pos:pos + p]
            pos += p
            b = vec[pos:pos + p * r].reshape(p, r)
            pos += p * r
            d = vec[pos:pos + p]
            pos += p
            blocks.append(GaussianFactor(mean, b, d))
        return VariationalState(self.structure, tuple(blocks), self.offsets)

    def step_scales(self, step_mean: float, step_other: float) -> np.ndarray:
        parts = []
        for blk in self.blocks:
            parts.append(np.full(blk.dim, step_mean))
            parts.append(np.full(blk.dim * blk.n_factors, step_other))
            parts.append(np.full(blk.dim, step_other))
        return np.concatenate(parts)

    def lambda_grad(self, g, eps) -> np.ndarray:
        """Parameter gradient of one reparameterized bound draw: path
        terms from chaining the effect-space gradient g through the draw
        (mean picks up g, factor g zᵀ, diagonal g∘η), completed by each
        block's zero-mean parameter score so the result is the exact
        gradient of the fixed-noise estimate and matches
        common-random-number finite differences pointwise."""
        g = np.asarray(g, dtype=float)
        parts = []
        for blk, sl, (z, eta) in zip(self.blocks, self.slices(), eps):
            gb = g[sl]
            dev = blk.b_factor @ z + blk.d_diag * eta
            s_mean, s_b, s_d = blk.param_score(dev)
            parts.extend((gb + s_mean, (np.outer(gb, z) + s_b).ravel(),
                          gb * eta + s_d))
        return np.concatenate(parts)


def joint_state(mean, n_factors: int = 40, b_init: float = 0.01,
                d_init: float = 0.01) -> VariationalState:
    """Single-block state over the whole effect vector."""
    mean = np.asarray(mean, dtype=float)
    block = GaussianFactor(mean,
                           np.full((mean.size, n_factors), b_init),
                           np.full(mean.size, d_init))
    return VariationalState("vb", (block,), (0,))


def layered_state(layout: Theta1Layout, mean, subject_factors: int = 2,
                  shared_factors: int = 10, b_init: float = 0.01,
                  d_init: float = 0.01) -> VariationalState:
    """Per-subject blocks plus one shared block over the regression
    weights, the group mean and the log mixing scales."""
    mean = np.asarray(mean, dtype=float)
    if mean.shape != (layout.size,):
        raise ConfigError(f"mean has shape {mean.shape}, layout needs "
                          f"({layout.size},)")
    blocks = []
    offsets = []
    for j in range(layout.n_subjects):
        sl = layout.alpha_slice(j)
        blocks.append(GaussianFactor(
            mean[sl],
            np.full((layout.n_effects, subject_factors), b_init),
            np.full(layout.n_effects, d_init)))
        offsets.append(sl.start)
    tail = slice(layout.n_subjects * layout.n_effects, layout.size)
    tail_dim = tail.stop - tail.start
    blocks.append(GaussianFactor(
        mean[tail],
        np.full((tail_dim, shared_factors), b_init),
        np.full(tail_dim, d_init)))
    offsets.append(tail.start)
    return VariationalState("vbl", tuple(blocks), tuple(offsets))


# --------------------------------------------------------------------- #
# configuration
# --------------------------------------------------------------------- #

@dataclass(frozen=True)
class VbConfig:
    structure: str = "vb"
    n_factors: int = 40
    subject_factors: int = 2
    shared_factors: int = 10
    n_samples: Optional[int] = None
    optimizer: str = "adam"
    step_mean: float = 0.01
    step_other: float = 0.001
    adam_beta1: float = 0.9
    adam_beta2: float = 0.99
    adam_eps: float = 1e-8
    adadelta_decay: float = 0.95
    adadelta_xi: float = 1e-7
    window: int = 100
    patience: int = 50
    max_iters: int = 10_000
    seed: int = 0

    def __post_init__(self):
        if self.structure not in ("vb", "vbl"):
            raise ConfigError(f"unknown structure '{self.structure}'")
        if self.optimizer not in ("adam", "adadelta"):
            raise ConfigError(f"unknown optimizer '{self.optimizer}'")
        for name in ("n_factors", "subject_factors", "shared_factors",
                     "window", "patience", "max_iters"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        if self.n_samples is not None and self.n_samples < 1:
            raise ConfigError("n_samples must be at least 1")

    @property
    def samples_per_iter(self) -> int:
        if self.n_samples is not None:
            return self.n_samples
        return 10 if self.structure == "vb" else 1


def initial_state(layout: Theta1Layout, mean,
                  config: VbConfig) -> VariationalState:
    if config.structure == "vb":
        return joint_state(mean, n_factors=config.n_factors)
    return layered_state(layout, mean,
                         subject_factors=config.subject_factors,
                         shared_factors=config.shared_factors)


# --------------------------------------------------------------------- #
# bound and gradient estimators
# --------------------------------------------------------------------- #

def _conditional_sigma_draw(theta1, dataset, model, prior, layout, rng,
                            ridge: float = 1e-8):
    """Draw the group covariance from its exact conditional given the
    effect block; a non-positive-definite conditional scale is repaired
    with a ridge and a warning."""
    alpha_t, _, mu, a_mix = layout.unpack(theta1)
    alpha_nat, _ = _effects_on_natural_scale(alpha_t, dataset, model)
    nu, psi = conditional_sigma_params(alpha_nat, mu, a_mix, prior)
    try:
        sigma = inv_wishart_rvs(nu, psi, rng)
    except np.linalg.LinAlgError:
        warnings.warn("conditional covariance scale repaired with a ridge",
                      RuntimeWarning)
        psi = psi + ridge * max(1.0, float(np.trace(psi))) * np.eye(
            psi.shape[0])
        sigma = inv_wishart_rvs(nu, psi, rng)
    return sigma, nu, psi


def sample_q(state: VariationalState, dataset: Dataset, model: ModelSpec,
             prior: PriorSpec, rng, layout: Optional[Theta1Layout] = None
             ) -> Tuple[np.ndarray, np.ndarray]:
    """One reparameterized draw of the effect block together with a
    matching draw of the group covariance from its exact conditional."""
    layout = layout or make_layout(dataset, model, prior)
    theta1, _ = state.sample(rng)
    sigma, _, _ = _conditional_sigma_draw(theta1, dataset, model, prior,
                                          layout, rng)
    return theta1, sigma


def _theta1_log_joint(theta1, sigma, dataset, model, prior, layout) -> float:
    """Joint log density in flat effect coordinates, covariance fixed,
    including the per-subject rewrite Jacobians for the data-dependent
    non-decision transform."""
    alpha_t, beta, mu, a_mix = layout.unpack(theta1)
    alpha_nat, chain = _effects_on_natural_scale(alpha_t, dataset, model)
    value = 0.0
    for j, subject in enumerate(dataset.subjects):
        value += subject_loglik(subject, alpha_t[j], beta, model)
    state = HierState(alpha=alpha_nat, mu=mu, sigma=np.asarray(sigma),
                      beta=beta, a_mix=a_mix)
    value += log_prior(state, prior)
    if chain is not None:
        slot, _ = chain
        for j in range(layout.n_subjects):
            value += float(tau_slot_log_jacobian(alpha_t[j, slot]))
    return float(value)


def elbo_estimate(state: VariationalState, dataset, model, prior,
                  n_samples: int, rng,
                  layout: Optional[Theta1Layout] = None,
                  log_joint_fn: Optional[Callable] = None) -> float:
    """Monte Carlo estimate of the evidence lower bound from n_samples
    reparameterized draws.

    With the product model, every draw pairs the effect block with a
    covariance draw from the exact conditional, whose density cancels
    the conditional's contribution to the joint; the estimate is
    therefore invariant to the covariance draw. log_joint_fn(theta1)
    replaces the model entirely (testing hook).
    """
    if n_samples < 1:
        raise ConfigError("n_samples must be at least 1")
    if log_joint_fn is None:
        layout = layout or make_layout(dataset, model, prior)
    total = 0.0
    for _ in range(n_samples):
        theta1, _ = state.sample(rng)
        if log_joint_fn is not None:
            total += float(log_joint_fn(theta1)) - state.logpdf(theta1)
            continue
        sigma, nu, psi = _conditional_sigma_draw(theta1, dataset, model,
                                                 prior, layout, rng)
        value = _theta1_log_joint(theta1, sigma, dataset, model, prior,
                                  layout)
        total += (value - state.logpdf(theta1)
                  - inv_wishart_logpdf(sigma, nu, psi))
    return total / n_samples


@dataclass(frozen=True)
class GradEstimate:
    """Gradient over the flat variational parameter vector, with the
    bound estimate from the same draws."""

    grad: np.ndarray
    elbo: float


def elbo_grad_estimate(state: VariationalState, dataset, model, prior,
                       n_samples: int, rng,
                       layout: Optional[Theta1Layout] = None,
                       include_control_variate: bool = True,
                       log_joint_fn: Optional[Callable] = None,
                       grad_fn: Optional[Callable] = None) -> GradEstimate:
    """Reparameterization-trick gradient of the bound over the
    variational parameters, averaged over n_samples draws.

    The effect-space gradient per draw is the joint gradient (minus the
    control-variate block, which removes all dependence on the
    covariance draw) minus the Gaussian score of the draw; the chain
    rule maps it to the blocks' means, factors and diagonals, and each
    block's zero-mean parameter score completes the path terms to the
    exact derivative of the fixed-noise estimate. The bound estimate
    from the same draws comes along for free.
    """
    if n_samples < 1:
        raise ConfigError("n_samples must be at least 1")
    if log_joint_fn is not None and grad_fn is None:
        raise ConfigError("a joint-density override needs a matching "
                          "gradient override")
    if log_joint_fn is None:
        layout = layout or make_layout(dataset, model, prior)
    grad_total = np.zeros(state.n_params)
    elbo_total = 0.0
    for _ in range(n_samples):
        theta1, eps = state.sample(rng)
        if log_joint_fn is not None:
            value = float(log_joint_fn(theta1))
            joint_grad = np.asarray(grad_fn(theta1), dtype=float)
            elbo_total += value - state.logpdf(theta1)
        else:
            sigma, nu, psi = _conditional_sigma_draw(theta1, dataset, model,
                                                     prior, layout, rng)
            value, joint_grad = grad_log_joint_theta1(
                theta1, sigma, dataset, model, prior, layout,
                include_control_variate=include_control_variate)
            elbo_total += (value - state.logpdf(theta1)
                           - inv_wishart_logpdf(sigma, nu, psi))
        g = joint_grad - state.score(theta1)
        grad_total += state.lambda_grad(g, eps)
    return GradEstimate(grad=grad_total / n_samples,
                        elbo=elbo_total / n_samples)


# --------------------------------------------------------------------- #
# optimizers
# --------------------------------------------------------------------- #

@dataclass
class OptimizerState:
    """Per-coordinate moment accumulators for ADAM or ADADELTA. For
    ADAM the two arrays are the first and second moment estimates; for
    ADADELTA they are the decayed squared-gradient and squared-step
    averages (both start at zero)."""

    method: str
    scales: np.ndarray
    first: np.ndarray
    second: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    decay: float = 0.95
    xi: float = 1e-7


def make_optimizer(config: VbConfig, scales) -> OptimizerState:
    scales = np.asarray(scales, dtype=float)
    zeros = np.zeros_like(scales)
    return OptimizerState(method=config.optimizer, scales=scales,
                          first=zeros.copy(), second=zeros.copy(),
                          beta1=config.adam_beta1, beta2=config.adam_beta2,
                          eps=config.adam_eps, decay=config.adadelta_decay,
                          xi=config.adadelta_xi)


def optimizer_step(opt: OptimizerState, lam, grad
                   ) -> Tuple[np.ndarray, OptimizerState]:
    """One ascent update of the flat parameter vector."""
    lam = np.asarray(lam, dtype=float)
    grad = np.asarray(grad, dtype=float)
    if grad.shape != lam.shape or lam.shape != opt.first.shape:
        raise ConfigError("optimizer state, parameters and gradient must "
                          "share one shape")
    opt.step += 1
    if opt.method == "adam":
        opt.first = opt.beta1 * opt.first + (1.0 - opt.beta1) * grad
        opt.second = opt.beta2 * opt.second + (1.0 - opt.beta2) * grad ** 2
        m_hat = opt.first / (1.0 - opt.beta1 ** opt.step)
        v_hat = opt.second / (1.0 - opt.beta2 ** opt.step)
        update = opt.scales * m_hat / (np.sqrt(v_hat) + opt.eps)
    else:
        opt.first = opt.decay * opt.first + (1.0 - opt.decay) * grad ** 2
        rate = np.sqrt(opt.second + opt.xi) / np.sqrt(opt.first + opt.xi)
        update = rate * grad
        opt.second = opt.decay * opt.second + (1.0 - opt.decay) * update ** 2
    return lam + update, opt


# --------------------------------------------------------------------- #
# stopping rule and run loop
# --------------------------------------------------------------------- #

class StoppingRule:
    """Stop once the moving average of the raw bound values over the
    last `window` iterations has failed to improve for `patience`
    consecutive iterations. On a flat stream this fires after exactly
    window + patience updates."""

    def __init__(self, window: int = 100, patience: int = 50):
        if window < 1 or patience < 1:
            raise ConfigError("window and patience must be at least 1")
        self.window = window
        self.patience = patience
        self._recent: deque = deque(maxlen=window)
        self._best = -math.inf
        self._stall = 0

    @property
    def smoothed(self) -> float:
        """Moving average over the available history (partial windows
        allowed, so the trace has a value from the first iteration)."""
        if not self._recent:
            return math.nan
        return float(sum(self._recent) / len(self._recent))

    def update(self, elbo: float) -> bool:
        self._recent.append(float(elbo))
        if len(self._recent) < self.window:
            return False
        smoothed = self.smoothed
        if smoothed > self._best:
            self._best = smoothed
            self._stall = 0
        else:
            self._stall += 1
        return self._stall >= self.patience


@dataclass(frozen=True)
class VbResult:
    state: VariationalState
    final_state: VariationalState
    trace: np.ndarray
    n_iters: int
    best_iteration: int
    stopped_early: bool
    seed: int
    wall_clock: float

    def trace_rows(self) -> List[Tuple[int, float, float]]:
        return [(int(row[0]), float(row[1]), float(row[2]))
                for row in self.trace]


def _diagnose_start(state, dataset, model, prior, layout,
                    elbo0: float) -> str:
    lines = [f"evidence bound is not finite at the starting point "
             f"(got {elbo0!r})"]
    vec = state.to_vector()
    if not np.all(np.isfinite(vec)):
        lines.append("the variational parameters contain non-finite "
                     "entries")
    if model is not None and np.all(np.isfinite(vec)):
        mean = state.mean_vector()
        alpha_t, beta, mu, a_mix = layout.unpack(mean)
        alpha_nat, _ = _effects_on_natural_scale(alpha_t, dataset, model)
        nu, psi = conditional_sigma_params(alpha_nat, mu, a_mix, prior)
        sigma = psi / max(nu - mean.size - 1.0, 1.0)
        hier = HierState(alpha=alpha_nat, mu=mu, sigma=sigma, beta=beta,
                         a_mix=a_mix)
        lines.extend(diagnose_initial_state(dataset, hier, model))
    return "; ".join(lines)


def run_vb(dataset, model, prior, config: VbConfig,
           state0: VariationalState,
           layout: Optional[Theta1Layout] = None,
           log_joint_fn: Optional[Callable] = None,
           grad_fn: Optional[Callable] = None) -> VbResult:
    """Stochastic-gradient ascent on the bound from the given starting
    state.

    Deterministic given config.seed: iteration t consumes the dedicated
    substream (seed, t). Returns the best state seen, judged by the
    smoothed bound, along with the full trace (iteration, raw bound,
    moving average). A non-finite bound at the start aborts with a
    diagnosis of the starting point.
    """
    if log_joint_fn is None:
        layout = layout or make_layout(dataset, model, prior)
        if state0.dim != layout.size:
            raise ConfigError(f"state covers {state0.dim} coordinates, "
                              f"layout needs {layout.size}")
    n_samples = config.samples_per_iter
    lam = state0.to_vector()
    if not np.all(np.isfinite(lam)):
        raise NumericFailure(_diagnose_start(state0, dataset, model, prior,
                                             layout, math.nan))
    opt = make_optimizer(config, state0.step_scales(config.step_mean,
                                                    config.step_other))
    rule = StoppingRule(window=config.window, patience=config.patience)
    state = state0
    best_state = state0
    best_smoothed = -math.inf
    best_iteration = 0
    trace = []
    stopped_early = False
    started = time.perf_counter()
    for t in range(config.max_iters):
        rng = np.random.default_rng([config.seed, t])
        est = elbo_grad_estimate(state, dataset, model, prior, n_samples,
                                 rng, layout=layout,
                                 log_joint_fn=log_joint_fn, grad_fn=grad_fn)
        if not math.isfinite(est.elbo):
            if t == 0:
                raise NumericFailure(_diagnose_start(
                    state0, dataset, model, prior, layout, est.elbo))
            warnings.warn(f"non-finite bound at iteration {t}; keeping the "
                          "previous parameters", RuntimeWarning)
            trace.append((t, est.elbo, rule.smoothed))
            continue
        stop = rule.update(est.elbo)
        trace.append((t, est.elbo, rule.smoothed))
        if rule.smoothed > best_smoothed:
            best_smoothed = rule.smoothed
            best_state = state
            best_iteration = t
        if stop:
            stopped_early = True
            break
        lam, opt = optimizer_step(opt, lam, est.grad)
        state = state.from_vector(lam)
    wall = time.perf_counter() - started
    return VbResult(state=best_state, final_state=state,
                    trace=np.array(trace, dtype=float),
                    n_iters=len(trace), best_iteration=best_iteration,
                    stopped_early=stopped_early, seed=config.seed,
                    wall_clock=wall)


# --------------------------------------------------------------------- #
# persistence
# --------------------------------------------------------------------- #

def save_variational(state: VariationalState, path) -> None:
    doc = {
        "structure": state.structure,
        "blocks": [
            {
                "offset": int(off),
                "mean": [float(v) for v in blk.mean],
                "factors": [[float(v) for v in row] for row in blk.b_factor],
                "diag": [float(v) for v in blk.d_diag],
            }
            for off, blk in zip(state.offsets, state.blocks)
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=1))


def load_variational(path) -> VariationalState:
    doc = json.loads(Path(path).read_text())
    try:
        blocks = tuple(
            GaussianFactor(np.asarray(blk["mean"], dtype=float),
                           np.asarray(blk["factors"], dtype=float),
                           np.asarray(blk["diag"], dtype=float))
            for blk in doc["blocks"])
        offsets = tuple(int(blk["offset"]) for blk in doc["blocks"])
        return VariationalState(doc["structure"], blocks, offsets)
    except KeyError as err:
        raise ConfigError(f"variational state file {path} is missing "
                          f"field {err}") from err


def save_elbo_trace(trace, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "elbo", "smoothed"])
        for row in np.asarray(trace, dtype=float):
            writer.writerow([int(row[0]), repr(float(row[1])),
                             repr(float(row[2]))])
