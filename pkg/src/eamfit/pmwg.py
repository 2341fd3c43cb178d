"""Particle Metropolis-within-Gibbs: exact Gibbs draws for the group
mean, covariance, and mixing scales, conditional Monte Carlo updates for
the subject effects and the regression block, and a three-stage adaptive
proposal scheme.

Random-number discipline: every block draws from its own substream keyed
by (seed, iteration, block, subject label), so reruns are bit-identical
and per-subject updates do not depend on iteration order.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.special import logsumexp

from .data import Dataset, SubjectData
from .errors import ConfigError, NumericFailure
from .model import (
    HierState,
    ModelSpec,
    PriorSpec,
    conditional_sigma_params,
    subject_loglik,
    subject_loglik_beta_particles,
    subject_loglik_particles,
)

# block tags for substream keys
_BLOCK_ALPHA = 0
_BLOCK_BETA = 1
_BLOCK_GIBBS = 2


def subject_stream_key(label: str) -> int:
    """Stable 63-bit stream key for a subject label."""
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def block_rng(seed: int, iteration: int, block: int, sub_key: int = 0):
    return np.random.default_rng([seed, iteration, block, sub_key])


# --------------------------------------------------------------------- #
# schedule and config
# --------------------------------------------------------------------- #

@dataclass(frozen=True)
class StageSchedule:
    """Iteration counts for the three phases plus the proposal refresh
    cadence (refresh ticks count from the end of burn-in)."""

    burn_in: int = 500
    adaptation: int = 1500
    sampling: int = 2000
    refresh_every: int = 20
    refresh_stop: int = 5000

    def __post_init__(self):
        for name in ("burn_in", "adaptation", "sampling", "refresh_every",
                     "refresh_stop"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.refresh_every > self.adaptation + self.sampling:
            raise ConfigError("refresh period exceeds the adaptive part "
                              "of the schedule")

    @property
    def total(self) -> int:
        return self.burn_in + self.adaptation + self.sampling

    def stage_of(self, t: int) -> int:
        if t < self.burn_in:
            return 1
        if t < self.burn_in + self.adaptation:
            return 2
        return 3


@dataclass(frozen=True)
class PmwgConfig:
    schedule: StageSchedule = field(default_factory=StageSchedule)
    n_particles_alpha: int = 100
    n_particles_beta: int = 500
    mix_weight: float = 0.5
    stage3_weights: Tuple[float, float, float] = (0.65, 0.30, 0.05)
    epsilon: float = 0.5
    min_history: int = 200
    ridge: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.n_particles_alpha < 1 or self.n_particles_beta < 1:
            raise ConfigError("particle counts must be at least 1")
        if not 0.0 < self.mix_weight < 1.0:
            raise ConfigError("the stage 1-2 mixture weight must be in "
                              "(0, 1)")
        w = np.asarray(self.stage3_weights, dtype=float)
        if w.size != 3 or (w <= 0).any() or abs(w.sum() - 1.0) > 1e-12:
            raise ConfigError("stage-3 weights must be three positive "
                              "numbers summing to 1")
        if not 0.0 < self.epsilon < 1.0:
            raise ConfigError("the random-walk scale must be in (0, 1)")


# --------------------------------------------------------------------- #
# exact Gibbs conditionals
# --------------------------------------------------------------------- #

def _chol(mat: np.ndarray, what: str) -> np.ndarray:
    try:
        return np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        raise NumericFailure(f"{what} is not positive definite")


def mu_conditional_params(alpha: np.ndarray, sigma: np.ndarray,
                          prior: PriorSpec
                          ) -> Tuple[np.ndarray, np.ndarray]:
    """Posterior mean and covariance of the group mean given effects."""
    alpha = np.atleast_2d(np.asarray(alpha, dtype=float))
    n_subj, dim = alpha.shape
    chol = _chol(sigma, "the group covariance")
    eye = np.eye(dim)
    sigma_inv = np.linalg.solve(chol.T, np.linalg.solve(chol, eye))
    prec = n_subj * sigma_inv + eye / prior.mu_alpha_var
    cov = np.linalg.inv(prec)
    cov = 0.5 * (cov + cov.T)
    lean = sigma_inv @ alpha.sum(axis=0) + \
        prior.mu_alpha_mean / prior.mu_alpha_var
    return cov @ lean, cov


def gibbs_mu(alpha: np.ndarray, sigma: np.ndarray, prior: PriorSpec,
             rng) -> np.ndarray:
    mean, cov = mu_conditional_params(alpha, sigma, prior)
    return mean + _chol(cov, "the group-mean conditional covariance") @ \
        rng.standard_normal(mean.size)


def inv_wishart_rvs(df: float, scale: np.ndarray, rng) -> np.ndarray:
    """One inverse-Wishart draw via the Bartlett factorization."""
    scale = np.asarray(scale, dtype=float)
    dim = scale.shape[0]
    if df <= dim - 1:
        raise ConfigError(f"inverse-Wishart df {df} needs to exceed "
                          f"{dim - 1}")
    lower = _chol(scale, "the inverse-Wishart scale")
    bart = np.zeros((dim, dim))
    for i in range(dim):
        bart[i, i] = np.sqrt(rng.chisquare(df - i))
        for k in range(i):
            bart[i, k] = rng.standard_normal()
    # sigma = L A^{-T} A^{-1} L^T where A A^T ~ Wishart(df, I)
    ct = solve_triangular(bart, lower.T, lower=True)
    return ct.T @ ct


def gibbs_sigma(alpha: np.ndarray, mu: np.ndarray, a_mix, prior: PriorSpec,
                rng) -> np.ndarray:
    """Group-covariance draw from its exact inverse-Wishart conditional."""
    nu, psi = conditional_sigma_params(np.atleast_2d(alpha), mu, a_mix,
                                       prior)
    return inv_wishart_rvs(nu, psi, rng)


def a_conditional_params(sigma: np.ndarray, prior: PriorSpec
                         ) -> Tuple[float, np.ndarray]:
    """Shape and per-dimension rates of the mixing-scale conditional."""
    if not prior.huang_wand:
        raise ConfigError("mixing scales exist only under the hierarchical "
                          "covariance prior")
    hw = prior.sigma
    dim = sigma.shape[0]
    chol = _chol(sigma, "the group covariance")
    inv_diag = np.square(np.linalg.inv(chol)).sum(axis=0)
    shape = 0.5 * (hw.mix_df + dim)
    rate = hw.mix_df * inv_diag + 1.0 / hw.scale ** 2
    return shape, rate


def gibbs_a(sigma: np.ndarray, prior: PriorSpec, rng) -> np.ndarray:
    shape, rate = a_conditional_params(sigma, prior)
    return rate / rng.gamma(shape, size=rate.size)


# --------------------------------------------------------------------- #
# proposal machinery
# --------------------------------------------------------------------- #

class GaussianMixture:
    """Small fixed mixture of Gaussians given by means and Cholesky
    factors; supports sampling and joint log-density evaluation."""

    def __init__(self, means: Sequence[np.ndarray],
                 chols: Sequence[np.ndarray], weights: Sequence[float]):
        self.means = [np.asarray(m, dtype=float) for m in means]
        self.chols = [np.asarray(c, dtype=float) for c in chols]
        self.weights = np.asarray(weights, dtype=float)
        if abs(self.weights.sum() - 1.0) > 1e-9:
            raise ConfigError("mixture weights must sum to 1")
        self.dim = self.means[0].size

    def sample(self, rng, n: int) -> np.ndarray:
        comps = rng.choice(len(self.weights), size=n, p=self.weights)
        noise = rng.standard_normal((n, self.dim))
        out = np.empty((n, self.dim))
        for k in range(len(self.weights)):
            mask = comps == k
            if mask.any():
                out[mask] = self.means[k] + noise[mask] @ self.chols[k].T
        return out

    def logpdf(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        parts = np.empty((len(self.weights), x.shape[0]))
        const = self.dim * np.log(2.0 * np.pi)
        for k, (m, c) in enumerate(zip(self.means, self.chols)):
            white = solve_triangular(c, (x - m).T, lower=True)
            logdet = 2.0 * np.log(np.diag(c)).sum()
            parts[k] = np.log(self.weights[k]) - 0.5 * (
                const + logdet + np.square(white).sum(axis=0))
        return logsumexp(parts, axis=0)


@dataclass(frozen=True)
class ConditionalGaussian:
    """A Gaussian conditional: mean = intercept + gain @ conditioners."""

    intercept: np.ndarray
    gain: np.ndarray
    chol: np.ndarray

    def mean(self, cond_vec: np.ndarray) -> np.ndarray:
        return self.intercept + self.gain @ cond_vec


@dataclass(frozen=True)
class ProposalState:
    """Refreshable part of the proposals: the conditional Gaussians
    fitted to post-burn-in history (None until stage 3 engages)."""

    stage: int
    alpha_cond: Optional[List[ConditionalGaussian]] = None
    beta_cond: Optional[ConditionalGaussian] = None


def _safe_chol(mat: np.ndarray, ridge: float, what: str) -> np.ndarray:
    try:
        return np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        warnings.warn(f"{what} was singular; repaired with a "
                      f"{ridge:g} ridge", RuntimeWarning)
        return np.linalg.cholesky(mat + ridge *
                                  np.eye(mat.shape[0]))


def fit_conditional_gaussian(draws: np.ndarray, n_target: int,
                             ridge: float) -> ConditionalGaussian:
    """Fit a joint Gaussian to draws of (target, conditioners) and return
    the conditional of the first n_target coordinates given the rest."""
    draws = np.asarray(draws, dtype=float)
    mean = draws.mean(axis=0)
    cov = np.cov(draws, rowvar=False)
    cov = np.atleast_2d(cov)
    taa = cov[:n_target, :n_target]
    tac = cov[:n_target, n_target:]
    tcc = cov[n_target:, n_target:]
    chol_cc = _safe_chol(tcc, ridge, "the conditioning covariance block")
    gain = cho_solve((chol_cc, True), tac.T).T
    cond_cov = taa - gain @ tac.T
    cond_cov = 0.5 * (cond_cov + cond_cov.T)
    chol = _safe_chol(cond_cov, ridge, "the conditional covariance")
    intercept = mean[:n_target] - gain @ mean[n_target:]
    return ConditionalGaussian(intercept=intercept, gain=gain, chol=chol)


class ChainHistory:
    """Post-burn-in draws used for fitting adaptive proposals."""

    def __init__(self):
        self.alpha: List[np.ndarray] = []
        self.mu: List[np.ndarray] = []
        self.beta: List[np.ndarray] = []

    def __len__(self):
        return len(self.alpha)

    def append(self, alpha, mu, beta_vec):
        self.alpha.append(np.array(alpha, copy=True))
        self.mu.append(np.array(mu, copy=True))
        if beta_vec is not None:
            self.beta.append(np.array(beta_vec, copy=True))


def build_proposal(stage: int, history: ChainHistory, config: PmwgConfig,
                   n_subjects: int) -> ProposalState:
    """Assemble the refreshable proposal state for the given stage.

    Stages 1 and 2 carry no fitted parts. Stage 3 fits, per subject, a
    joint Gaussian over (effects, group mean, regression coefficients)
    and conditions on the latter two; the regression proposal conditions
    its own Gaussian on the group mean.
    """
    if stage < 3:
        return ProposalState(stage=stage)
    if len(history) < config.min_history:
        raise ConfigError(
            f"stage-3 proposals need at least {config.min_history} stored "
            f"draws, have {len(history)}")
    mu_hist = np.stack(history.mu)
    beta_hist = np.stack(history.beta) if history.beta else None
    cond_block = mu_hist if beta_hist is None else \
        np.concatenate([mu_hist, beta_hist], axis=1)
    alpha_hist = np.stack(history.alpha)
    dim = alpha_hist.shape[2]
    conds = []
    for j in range(n_subjects):
        joint = np.concatenate([alpha_hist[:, j, :], cond_block], axis=1)
        conds.append(fit_conditional_gaussian(joint, dim, config.ridge))
    beta_cond = None
    if beta_hist is not None:
        joint = np.concatenate([beta_hist, mu_hist], axis=1)
        beta_cond = fit_conditional_gaussian(joint, beta_hist.shape[1],
                                             config.ridge)
    return ProposalState(stage=3, alpha_cond=conds, beta_cond=beta_cond)


def stage12_mixture(center: np.ndarray, prior_mean: np.ndarray,
                    prior_chol: np.ndarray, config: PmwgConfig
                    ) -> GaussianMixture:
    """Random-walk around the current value plus the group prior."""
    walk_chol = np.sqrt(config.epsilon) * prior_chol
    return GaussianMixture(
        means=[center, prior_mean], chols=[walk_chol, prior_chol],
        weights=[config.mix_weight, 1.0 - config.mix_weight])


def stage3_mixture(cond: ConditionalGaussian, cond_vec: np.ndarray,
                   current: np.ndarray, prior_mean: np.ndarray,
                   prior_chol: np.ndarray, config: PmwgConfig
                   ) -> GaussianMixture:
    """Conditional Gaussian, random walk with its covariance, and the
    group prior as a defensive tail component."""
    return GaussianMixture(
        means=[cond.mean(cond_vec), current, prior_mean],
        chols=[cond.chol, cond.chol, prior_chol],
        weights=list(config.stage3_weights))


def beta_walk_chol(dataset: Dataset, n_rows: int, ridge: float
                   ) -> np.ndarray:
    """Cholesky factor of the block-diagonal walk covariance for the
    regression block: one (X'X)^{-1} block per coefficient row, with X
    the covariates stacked over all subjects and trials."""
    if any(s.covariates is None for s in dataset.subjects):
        raise ConfigError("regression updates need covariates on every "
                          "subject")
    x = np.concatenate([s.covariates for s in dataset.subjects], axis=0)
    xtx = x.T @ x
    try:
        xtx_inv = np.linalg.inv(xtx)
    except np.linalg.LinAlgError:
        warnings.warn("X'X was singular; repaired with a ridge",
                      RuntimeWarning)
        xtx_inv = np.linalg.inv(xtx + ridge * np.eye(xtx.shape[0]))
    block = _safe_chol(0.5 * (xtx_inv + xtx_inv.T), ridge,
                       "the (X'X)^{-1} walk block")
    d = x.shape[1]
    out = np.zeros((n_rows * d, n_rows * d))
    for i in range(n_rows):
        out[i * d:(i + 1) * d, i * d:(i + 1) * d] = block
    return out


# --------------------------------------------------------------------- #
# conditional Monte Carlo
# --------------------------------------------------------------------- #

@dataclass(frozen=True)
class CmcResult:
    value: np.ndarray
    weights: np.ndarray
    index: int
    degenerate: bool

    @property
    def moved(self) -> bool:
        return self.index != 0

    @property
    def ess(self) -> float:
        return float(1.0 / np.square(self.weights).sum())


def _mvn_logpdf_chol(x: np.ndarray, mean: np.ndarray, chol: np.ndarray
                     ) -> np.ndarray:
    x = np.atleast_2d(x)
    white = solve_triangular(chol, (x - mean).T, lower=True)
    logdet = 2.0 * np.log(np.diag(chol)).sum()
    return -0.5 * (mean.size * np.log(2.0 * np.pi) + logdet
                   + np.square(white).sum(axis=0))


def _select_particle(particles: np.ndarray, logw: np.ndarray, rng
                     ) -> CmcResult:
    shift = logw.max()
    if not np.isfinite(shift):
        n = logw.size
        return CmcResult(value=particles[0],
                         weights=np.full(n, 1.0 / n), index=0,
                         degenerate=True)
    w = np.exp(logw - shift)
    w /= w.sum()
    index = int(rng.choice(w.size, p=w))
    return CmcResult(value=particles[index], weights=w, index=index,
                     degenerate=False)


def cmc_alpha(subject: Optional[SubjectData], alpha_current: np.ndarray,
              beta, mu: np.ndarray, sigma_chol: np.ndarray,
              mixture: GaussianMixture, n_particles: int, rng,
              model: Optional[ModelSpec] = None,
              loglik_fn: Optional[Callable] = None) -> CmcResult:
    """One conditional Monte Carlo update of a subject's effect vector.

    Particle 1 is pinned to the retained value; the rest come from the
    mixture. Weights are likelihood times group prior over the proposal.
    A custom loglik_fn(particles) -> (R,) replaces the model likelihood
    (used by the stub-based sampler tests).
    """
    alpha_current = np.asarray(alpha_current, dtype=float)
    particles = np.empty((n_particles, alpha_current.size))
    particles[0] = alpha_current
    if n_particles > 1:
        particles[1:] = mixture.sample(rng, n_particles - 1)
    if loglik_fn is not None:
        loglik = np.asarray(loglik_fn(particles), dtype=float)
    else:
        loglik = subject_loglik_particles(subject, particles, beta, model)
    logw = loglik + _mvn_logpdf_chol(particles, mu, sigma_chol) \
        - mixture.logpdf(particles)
    return _select_particle(particles, logw, rng)


def cmc_beta(dataset: Dataset, alpha: np.ndarray, beta_vec: np.ndarray,
             beta_shape: Tuple[int, int], prior: PriorSpec,
             mixture: GaussianMixture, n_particles: int, rng,
             model: Optional[ModelSpec] = None,
             loglik_fn: Optional[Callable] = None) -> CmcResult:
    """One conditional Monte Carlo update of the regression block
    (vectorized coefficients)."""
    beta_vec = np.asarray(beta_vec, dtype=float)
    particles = np.empty((n_particles, beta_vec.size))
    particles[0] = beta_vec
    if n_particles > 1:
        particles[1:] = mixture.sample(rng, n_particles - 1)
    if loglik_fn is not None:
        loglik = np.asarray(loglik_fn(particles), dtype=float)
    else:
        betas = particles.reshape(n_particles, *beta_shape)
        loglik = np.zeros(n_particles)
        for j, subject in enumerate(dataset.subjects):
            loglik += subject_loglik_beta_particles(subject, alpha[j],
                                                    betas, model)
    logprior = -0.5 * (beta_vec.size * np.log(2.0 * np.pi *
                                              prior.beta_var)
                       + np.square(particles).sum(axis=1) / prior.beta_var)
    logw = loglik + logprior - mixture.logpdf(particles)
    return _select_particle(particles, logw, rng)


# --------------------------------------------------------------------- #
# the full sampler
# --------------------------------------------------------------------- #

@dataclass
class ChainOutput:
    alpha: np.ndarray                 # (T, J, D)
    mu: np.ndarray                    # (T, D)
    sigma: np.ndarray                 # (T, D, D)
    a_mix: Optional[np.ndarray]       # (T, D) under the hierarchical prior
    beta: Optional[np.ndarray]        # (T, rows, d)
    stages: np.ndarray                # (T,)
    move_alpha: np.ndarray            # (T, J) particle index moved
    ess_alpha: np.ndarray             # (T, J)
    move_beta: Optional[np.ndarray]
    ess_beta: Optional[np.ndarray]
    schedule: StageSchedule
    seed: int
    subject_ids: Tuple[str, ...]
    effect_names: Tuple[str, ...]
    beta_labels: Tuple[str, ...]
    wall_clock: float = 0.0

    @property
    def sampling_slice(self) -> slice:
        start = self.schedule.burn_in + self.schedule.adaptation
        return slice(start, self.schedule.total)

    def states(self, thin: int = 1):
        """Iterate stage-3 draws as hierarchical states (for predictive
        simulation)."""
        sl = self.sampling_slice
        for t in range(sl.start, sl.stop, thin):
            yield HierState(
                alpha=self.alpha[t], mu=self.mu[t], sigma=self.sigma[t],
                beta=None if self.beta is None else self.beta[t],
                a_mix=None if self.a_mix is None else self.a_mix[t])


def diagnose_initial_state(dataset: Dataset, state: HierState,
                           model: ModelSpec) -> List[str]:
    """Human-readable report of subjects whose initial log-likelihood is
    not finite, down to the offending trials."""
    from .model import contaminated_density
    from .transforms import link_trial
    problems = []
    for j, subject in enumerate(dataset.subjects):
        ll = subject_loglik(subject, state.alpha[j],
                            state.beta, model)
        if np.isfinite(ll):
            continue
        min_rt = subject.min_rt if model.needs_min_rt else None
        bad = []
        for i, trial in enumerate(subject.trials):
            x = subject.covariates[i] if subject.covariates is not None \
                else None
            try:
                natural = link_trial(state.alpha[j], state.beta, x,
                                     trial.attrs, model.design,
                                     model.trial_spec, min_rt=min_rt)
                val = contaminated_density(trial, natural, model)
            except Exception as exc:
                bad.append(f"trial {i} (rt={trial.rt:.4f}): {exc}")
                continue
            if not np.isfinite(val):
                bad.append(f"trial {i} (rt={trial.rt:.4f}): density {val}")
        head = "; ".join(bad[:5]) or "no single trial pinpointed"
        problems.append(f"subject {subject.subject}: log-likelihood {ll} "
                        f"({head})")
    return problems


def run_pmwg(dataset: Dataset, model: Optional[ModelSpec],
             prior: PriorSpec, config: PmwgConfig, init: HierState,
             loglik_override: Optional[Callable] = None) -> ChainOutput:
    """Run the full sampler over the schedule.

    loglik_override(subject_index, particles) -> (R,), when given,
    replaces the model likelihood everywhere (stub-based tests); the
    regression block is then skipped and model may be None.
    """
    sched = config.schedule
    n_subj = dataset.n_subjects
    if loglik_override is None:
        dim = model.n_effects
        use_beta = model.design.n_beta_rows > 0
    else:
        dim = init.alpha.shape[1]
        use_beta = False
    if init.alpha.shape != (n_subj, dim):
        raise ConfigError(f"initial effects have shape {init.alpha.shape}, "
                          f"expected ({n_subj}, {dim})")
    if use_beta and init.beta is None:
        raise ConfigError("the design has covariate rows; supply initial "
                          "regression coefficients")
    if prior.huang_wand and init.a_mix is None:
        raise ConfigError("the hierarchical covariance prior needs initial "
                          "mixing scales")

    # fail fast on a bad starting point
    bad_subjects = [dataset.subjects[j].subject
                    for j in range(n_subj)
                    if not np.all(np.isfinite(init.alpha[j]))]
    broken = ["non-finite initial effects for subject(s) "
              + ", ".join(bad_subjects)] if bad_subjects else []
    for name in ("mu", "sigma", "beta", "a_mix"):
        arr = getattr(init, name)
        if arr is not None and not np.all(np.isfinite(arr)):
            broken.append(f"non-finite initial {name}")
    if broken:
        raise NumericFailure("; ".join(broken))
    if loglik_override is None:
        report = diagnose_initial_state(dataset, init, model)
        if report:
            raise NumericFailure(
                "non-finite log-likelihood at initialization:\n  "
                + "\n  ".join(report))

    alpha = np.array(init.alpha, dtype=float)
    mu = np.array(init.mu, dtype=float)
    sigma = np.array(init.sigma, dtype=float)
    a_mix = None if init.a_mix is None else np.array(init.a_mix,
                                                     dtype=float)
    beta = np.array(init.beta, dtype=float) if use_beta else None
    beta_shape = beta.shape if use_beta else None

    total = sched.total
    out_alpha = np.empty((total, n_subj, dim))
    out_mu = np.empty((total, dim))
    out_sigma = np.empty((total, dim, dim))
    out_a = np.empty((total, dim)) if prior.huang_wand else None
    out_beta = np.empty((total,) + beta_shape) if use_beta else None
    stages = np.empty(total, dtype=np.int64)
    move_alpha = np.zeros((total, n_subj), dtype=bool)
    ess_alpha = np.empty((total, n_subj))
    move_beta = np.zeros(total, dtype=bool) if use_beta else None
    ess_beta = np.empty(total) if use_beta else None

    sub_keys = [subject_stream_key(s.subject) for s in dataset.subjects]
    walk0 = beta_walk_chol(dataset, beta_shape[0], config.ridge) \
        if use_beta else None
    beta_prior_chol = np.sqrt(prior.beta_var) * \
        np.eye(beta.size) if use_beta else None

    history = ChainHistory()
    proposal = ProposalState(stage=1)
    start = time.perf_counter()

    for t in range(total):
        stage = sched.stage_of(t)
        rng_g = block_rng(config.seed, t, _BLOCK_GIBBS)
        mu = gibbs_mu(alpha, sigma, prior, rng_g)
        sigma = gibbs_sigma(alpha, mu, a_mix, prior, rng_g)
        if prior.huang_wand:
            a_mix = gibbs_a(sigma, prior, rng_g)
        sigma_chol = _chol(sigma, "the group covariance draw")

        if stage == 3:
            since_burn = t - sched.burn_in
            due = (proposal.stage < 3
                   or since_burn % sched.refresh_every == 0)
            if due and since_burn < sched.refresh_stop \
                    and len(history) >= config.min_history:
                proposal = build_proposal(3, history, config, n_subj)

        beta_vec = beta.ravel() if use_beta else None
        cond_vec = None
        if proposal.stage == 3 and proposal.alpha_cond is not None:
            cond_vec = mu if beta_vec is None else \
                np.concatenate([mu, beta_vec])

        for j in range(n_subj):
            rng_j = block_rng(config.seed, t, _BLOCK_ALPHA, sub_keys[j])
            if cond_vec is not None:
                mix = stage3_mixture(proposal.alpha_cond[j], cond_vec,
                                     alpha[j], mu, sigma_chol, config)
            else:
                mix = stage12_mixture(alpha[j], mu, sigma_chol, config)
            fn = None if loglik_override is None else \
                (lambda particles, _j=j: loglik_override(_j, particles))
            res = cmc_alpha(dataset.subjects[j], alpha[j], beta, mu,
                            sigma_chol, mix, config.n_particles_alpha,
                            rng_j, model=model, loglik_fn=fn)
            alpha[j] = res.value
            move_alpha[t, j] = res.moved
            ess_alpha[t, j] = res.ess

        if use_beta:
            rng_b = block_rng(config.seed, t, _BLOCK_BETA)
            if cond_vec is not None and proposal.beta_cond is not None:
                mix = stage3_mixture(proposal.beta_cond, mu, beta_vec,
                                     np.zeros(beta_vec.size),
                                     beta_prior_chol, config)
            else:
                mix = GaussianMixture(
                    means=[beta_vec, np.zeros(beta_vec.size)],
                    chols=[np.sqrt(config.epsilon) * walk0,
                           beta_prior_chol],
                    weights=[config.mix_weight, 1.0 - config.mix_weight])
            res = cmc_beta(dataset, alpha, beta_vec, beta_shape, prior,
                           mix, config.n_particles_beta, rng_b,
                           model=model)
            beta = res.value.reshape(beta_shape)
            move_beta[t] = res.moved
            ess_beta[t] = res.ess

        out_alpha[t] = alpha
        out_mu[t] = mu
        out_sigma[t] = sigma
        if out_a is not None:
            out_a[t] = a_mix
        if use_beta:
            out_beta[t] = beta
        stages[t] = stage
        if t >= sched.burn_in:
            history.append(alpha, mu, beta.ravel() if use_beta else None)

    labels = beta_label_names(model, dataset) if use_beta else ()
    names = tuple(model.design.alpha_names) if model is not None else \
        tuple(f"effect{d}" for d in range(dim))
    return ChainOutput(
        alpha=out_alpha, mu=out_mu, sigma=out_sigma, a_mix=out_a,
        beta=out_beta, stages=stages, move_alpha=move_alpha,
        ess_alpha=ess_alpha, move_beta=move_beta, ess_beta=ess_beta,
        schedule=sched, seed=config.seed,
        subject_ids=tuple(s.subject for s in dataset.subjects),
        effect_names=names, beta_labels=labels,
        wall_clock=time.perf_counter() - start)


def beta_label_names(model: ModelSpec, dataset: Dataset
                     ) -> Tuple[str, ...]:
    rows = model.design.beta_rows
    covs = dataset.covariate_names or tuple(
        f"x{k}" for k in range(dataset.n_covariates))
    return tuple(f"{r}:{c}" for r in rows for c in covs)


# --------------------------------------------------------------------- #
# persistence
# --------------------------------------------------------------------- #

def _write_csv(path: str, header: List[str], matrix: np.ndarray,
               stages: np.ndarray):
    import csv
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "stage"] + header)
        for i in range(matrix.shape[0]):
            writer.writerow([i, int(stages[i])] +
                            [repr(float(v)) for v in matrix[i]])


def save_chain(output: ChainOutput, out_dir: str,
               config: Optional[PmwgConfig] = None) -> dict:
    """Write one CSV per parameter group plus a JSON run manifest.
    Returns the manifest dict."""
    os.makedirs(out_dir, exist_ok=True)
    t_total = output.alpha.shape[0]
    n_subj = len(output.subject_ids)
    names = list(output.effect_names)

    alpha_cols = [f"{s}:{n}" for s in output.subject_ids for n in names]
    _write_csv(os.path.join(out_dir, "alpha.csv"), alpha_cols,
               output.alpha.reshape(t_total, -1), output.stages)
    _write_csv(os.path.join(out_dir, "mu.csv"), names, output.mu,
               output.stages)
    sig_cols = [f"{a}:{b}" for a in names for b in names]
    _write_csv(os.path.join(out_dir, "sigma.csv"), sig_cols,
               output.sigma.reshape(t_total, -1), output.stages)
    if output.a_mix is not None:
        _write_csv(os.path.join(out_dir, "a.csv"), names, output.a_mix,
                   output.stages)
    if output.beta is not None:
        _write_csv(os.path.join(out_dir, "beta.csv"),
                   list(output.beta_labels),
                   output.beta.reshape(t_total, -1), output.stages)

    sl = output.sampling_slice
    manifest = {
        "seed": output.seed,
        "subjects": n_subj,
        "stage_boundaries": {
            "burn_in": [0, output.schedule.burn_in],
            "adaptation": [output.schedule.burn_in, sl.start],
            "sampling": [sl.start, sl.stop],
        },
        "wall_clock_seconds": output.wall_clock,
        "movement_rates": {
            "alpha": float(output.move_alpha[sl].mean()),
            "beta": (float(output.move_beta[sl].mean())
                     if output.move_beta is not None else None),
        },
        "mean_particle_ess": {
            "alpha": float(output.ess_alpha[sl].mean()),
            "beta": (float(output.ess_beta[sl].mean())
                     if output.ess_beta is not None else None),
        },
    }
    if config is not None:
        blob = json.dumps({
            "schedule": [config.schedule.burn_in,
                         config.schedule.adaptation,
                         config.schedule.sampling],
            "particles": [config.n_particles_alpha,
                          config.n_particles_beta],
            "epsilon": config.epsilon,
            "stage3_weights": list(config.stage3_weights),
            "seed": config.seed,
        }, sort_keys=True)
        manifest["config"] = json.loads(blob)
        manifest["config_hash"] = hashlib.sha256(
            blob.encode()).hexdigest()[:16]
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)
    return manifest
