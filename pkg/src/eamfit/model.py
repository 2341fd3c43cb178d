"""Hierarchical joint density: contaminated trial likelihoods, subject
log-likelihoods, priors over group-level quantities, the full log-joint,
and the gradients over the Gaussian block needed by variational fitting.

The free coordinates are theta1 = (alpha_1..alpha_J, vec beta, mu_alpha,
log a) with the group covariance handled separately (its exact
conditional is inverse-Wishart). All densities over the mixing scales
`a` are expressed in the log-a coordinate system, so the log-joint
carries the corresponding Jacobian term.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple, Union

import numpy as np
from scipy.special import gammaln, multigammaln

from .data import Dataset, SubjectData, Trial
from .ddm import DdmParams, QuadratureRule, ddm_density, ddm_density_batch, \
    ddm_density_grad_batch
from .errors import ConfigError, DomainError
from .lba import LbaParams, lba_density, lba_density_grad_batch, \
    lba_density_elementwise, lba_density_matrix
from .transforms import LinkingDesign, TransformSpec, ddm_transform_spec, \
    elementwise_design, from_unconstrained, from_unconstrained_batch, \
    jacobian_natural_wrt_unconstrained, lba_transform_spec, \
    tau_slot_log_jacobian, tau_slot_log_jacobian_grad, \
    tau_transform_data_inverse

LOG_FLOOR = -690.0


# --------------------------------------------------------------------- #
# specs
# --------------------------------------------------------------------- #

@dataclass(frozen=True)
class ContaminationSpec:
    """Uniform outcome mixture guarding against stray responses."""

    weight: float = 1e-4
    rt_window: Tuple[float, float] = (0.0, 2.0)

    def __post_init__(self):
        if not 0.0 <= self.weight < 1.0:
            raise ConfigError(f"contamination weight must be in [0, 1), "
                              f"got {self.weight}")
        lo, hi = self.rt_window
        if not (0.0 <= lo < hi):
            raise ConfigError(f"bad contamination window {self.rt_window}")

    def outcome_density(self, rt: float, n_choices: int) -> float:
        lo, hi = self.rt_window
        if lo < rt < hi:
            return 1.0 / (n_choices * (hi - lo))
        return 0.0


@dataclass(frozen=True)
class HuangWandPrior:
    """Marginally noninformative covariance prior: IW mixed over
    per-dimension inverse-gamma scales."""

    mix_df: float = 2.0
    scale: float = 1.0

    def prior_df(self, dim: int) -> float:
        return self.mix_df + dim - 1.0


@dataclass(frozen=True)
class FixedWishartPrior:
    """Plain inverse-Wishart prior with a fixed scale matrix."""

    df: float = 20.0
    scale: Optional[np.ndarray] = None

    def scale_matrix(self, dim: int) -> np.ndarray:
        if self.scale is None:
            return np.eye(dim)
        s = np.asarray(self.scale, dtype=float)
        if s.shape != (dim, dim):
            raise ConfigError(f"covariance prior scale has shape {s.shape}, "
                              f"expected ({dim}, {dim})")
        return s


SigmaPrior = Union[HuangWandPrior, FixedWishartPrior]


@dataclass(frozen=True)
class PriorSpec:
    mu_alpha_mean: float = 0.0
    mu_alpha_var: float = 3.0
    beta_var: float = 9.0
    sigma: SigmaPrior = field(default_factory=HuangWandPrior)

    def __post_init__(self):
        if self.mu_alpha_var <= 0 or self.beta_var <= 0:
            raise ConfigError("prior variances must be positive")

    @property
    def huang_wand(self) -> bool:
        return isinstance(self.sigma, HuangWandPrior)


@dataclass(frozen=True)
class ModelSpec:
    """Everything needed to turn effects into trial densities."""

    family: str
    trial_spec: TransformSpec
    design: LinkingDesign
    n_choices: int
    contamination: ContaminationSpec = field(default_factory=ContaminationSpec)
    quad: Optional[QuadratureRule] = None

    def __post_init__(self):
        if self.family not in ("lba", "ddm"):
            raise ConfigError(f"unknown model family {self.family!r}")
        if self.family == "lba":
            expected = lba_transform_spec(self.n_choices).names
        else:
            if self.n_choices != 2:
                raise ConfigError("the diffusion model is a two-boundary "
                                  "model; n_choices must be 2")
            expected = ddm_transform_spec().names
        if self.trial_spec.names != expected:
            raise ConfigError(
                f"trial spec slots {self.trial_spec.names} do not match the "
                f"{self.family} layout {expected}")
        self.design.validate_against(self.trial_spec)
        object.__setattr__(self, "_group_cache", {})

    @property
    def n_effects(self) -> int:
        return self.design.n_effects

    @property
    def needs_min_rt(self) -> bool:
        return self.trial_spec.needs_min_rt


def lba_model(n_choices: int = 2, design: Optional[LinkingDesign] = None,
              covariate_rows: Optional[List[str]] = None,
              contamination: Optional[ContaminationSpec] = None) -> ModelSpec:
    spec = lba_transform_spec(n_choices)
    if design is None:
        design = elementwise_design(spec.names, covariate_rows)
    return ModelSpec(family="lba", trial_spec=spec, design=design,
                     n_choices=n_choices,
                     contamination=contamination or ContaminationSpec())


def ddm_model(design: Optional[LinkingDesign] = None,
              covariate_rows: Optional[List[str]] = None,
              data_dependent_tau: bool = False,
              quad: Optional[QuadratureRule] = None,
              contamination: Optional[ContaminationSpec] = None) -> ModelSpec:
    spec = ddm_transform_spec(data_dependent_tau)
    if design is None:
        design = elementwise_design(spec.names, covariate_rows)
    return ModelSpec(family="ddm", trial_spec=spec, design=design,
                     n_choices=2, quad=quad,
                     contamination=contamination or ContaminationSpec())


# --------------------------------------------------------------------- #
# state
# --------------------------------------------------------------------- #

@dataclass
class HierState:
    alpha: np.ndarray                 # (J, D)
    mu: np.ndarray                    # (D,)
    sigma: np.ndarray                 # (D, D)
    beta: Optional[np.ndarray] = None  # (rows, d)
    a_mix: Optional[np.ndarray] = None  # (D,)

    def __post_init__(self):
        self.alpha = np.atleast_2d(np.asarray(self.alpha, dtype=float))
        self.mu = np.asarray(self.mu, dtype=float)
        self.sigma = np.asarray(self.sigma, dtype=float)
        d = self.mu.size
        if self.alpha.shape[1] != d or self.sigma.shape != (d, d):
            raise ConfigError("inconsistent state shapes")
        if not np.allclose(self.sigma, self.sigma.T, atol=1e-10):
            raise DomainError("group covariance is not symmetric")
        try:
            np.linalg.cholesky(self.sigma)
        except np.linalg.LinAlgError:
            raise DomainError("group covariance is not positive definite")
        if self.beta is not None:
            self.beta = np.atleast_2d(np.asarray(self.beta, dtype=float))
        if self.a_mix is not None:
            self.a_mix = np.asarray(self.a_mix, dtype=float)
            if np.any(self.a_mix <= 0):
                raise DomainError("mixing scales must be positive")

    @property
    def n_subjects(self) -> int:
        return self.alpha.shape[0]


# --------------------------------------------------------------------- #
# trial-level densities
# --------------------------------------------------------------------- #

def _natural_to_lba(natural) -> LbaParams:
    return LbaParams(b=float(natural[0]), A=float(natural[1]),
                     v=tuple(float(x) for x in natural[2:-1]),
                     tau=float(natural[-1]))


def raw_trial_density(trial: Trial, natural, model: ModelSpec) -> float:
    """Model density of one trial at natural trial-level parameters."""
    if model.family == "lba":
        return lba_density(trial.choice, trial.rt, _natural_to_lba(natural))
    p = DdmParams.from_array(np.asarray(natural, dtype=float))
    label = "upper" if trial.choice == 1 else "lower"
    return ddm_density(label, trial.rt, p, quad=model.quad)


def contaminated_density(trial: Trial, natural, model: ModelSpec) -> float:
    """Mixture of the model density with the uniform outcome density."""
    w = model.contamination.weight
    raw = raw_trial_density(trial, natural, model)
    return (1.0 - w) * raw + w * model.contamination.outcome_density(
        trial.rt, model.n_choices)


# --------------------------------------------------------------------- #
# per-subject evaluation over condition groups
# --------------------------------------------------------------------- #

@dataclass
class _TrialGroup:
    link_l: np.ndarray        # (P, D)
    link_r: np.ndarray        # (P, rows)
    x_row: Optional[np.ndarray]
    rts: np.ndarray
    choices: np.ndarray
    upper: np.ndarray         # boolean mask, ddm only
    p0: np.ndarray            # contaminant outcome density per trial


def _compile_subject(subject: SubjectData, model: ModelSpec
                     ) -> List[_TrialGroup]:
    """Group a subject's trials by identical link matrices and covariate
    row, so each group shares one set of natural parameters."""
    cache = model._group_cache
    key = id(subject)
    hit = cache.get(key)
    if hit is not None and hit[0] is subject:
        return hit[1]
    groups = {}
    order = []
    for i, t in enumerate(subject.trials):
        big_l, big_r = model.design.link_matrices(t.attrs, model.trial_spec)
        x = None if subject.covariates is None else subject.covariates[i]
        gkey = (big_l.tobytes(), big_r.tobytes(),
                None if x is None else x.tobytes())
        if gkey not in groups:
            groups[gkey] = (big_l, big_r, x, [], [])
            order.append(gkey)
        groups[gkey][3].append(t.rt)
        groups[gkey][4].append(t.choice)
    out = []
    for gkey in order:
        big_l, big_r, x, rts, chs = groups[gkey]
        rts = np.asarray(rts, dtype=float)
        chs = np.asarray(chs, dtype=int)
        p0 = np.array([model.contamination.outcome_density(rt,
                                                           model.n_choices)
                       for rt in rts])
        out.append(_TrialGroup(link_l=big_l, link_r=big_r, x_row=x,
                               rts=rts, choices=chs, upper=chs == 1, p0=p0))
    cache[key] = (subject, out)
    return out


def _group_omega(group: _TrialGroup, alpha, beta) -> np.ndarray:
    omega = group.link_l @ alpha
    if beta is not None and group.link_r.shape[1]:
        if group.x_row is None:
            raise ConfigError("design declares covariate rows but the "
                              "dataset carries no covariates")
        omega = omega + group.link_r @ (beta @ group.x_row)
    return omega


def subject_loglik(subject: SubjectData, alpha_j, beta,
                   model: ModelSpec) -> float:
    """Sum of log contaminated trial densities for one subject."""
    if not subject.trials:
        return 0.0
    lls = subject_loglik_particles(subject, np.asarray(alpha_j,
                                                       dtype=float)[None, :],
                                   beta, model)
    return float(lls[0])


def _group_loglik(group: _TrialGroup, omegas: np.ndarray, model: ModelSpec,
                  min_rt) -> np.ndarray:
    """Log-likelihood contribution of one trial group for each row of
    unconstrained natural-parameter vectors."""
    n_rows = omegas.shape[0]
    w = model.contamination.weight
    naturals = from_unconstrained_batch(omegas, model.trial_spec,
                                        min_rt=min_rt)
    if model.family == "lba":
        dens = lba_density_matrix(
            group.rts, group.choices,
            b=naturals[:, 0], A=naturals[:, 1],
            v=naturals[:, 2:2 + model.n_choices],
            tau=naturals[:, -1])
    else:
        dens = np.empty((n_rows, group.rts.size))
        for m in range(n_rows):
            p = DdmParams.from_array(naturals[m])
            dens[m] = ddm_density_batch(group.rts, group.upper, p,
                                        quad=model.quad)
    mixed = (1.0 - w) * dens + w * group.p0[None, :]
    return np.sum(np.maximum(np.log(np.maximum(mixed, 1e-300)), LOG_FLOOR),
                  axis=1)


def _elementwise_loglik(groups: List[_TrialGroup], omegas: np.ndarray,
                        model: ModelSpec, min_rt) -> np.ndarray:
    """Race-model log-likelihood when trials mostly carry their own
    parameters (per-trial covariates shred the grouping): one density
    call over every (trial, particle) pair instead of a call per group.
    omegas is (groups, particles, dim), in group order."""
    n_groups, n_rows, dim = omegas.shape
    w = model.contamination.weight
    naturals = from_unconstrained_batch(omegas.reshape(-1, dim),
                                        model.trial_spec, min_rt=min_rt)
    naturals = naturals.reshape(n_groups, n_rows, -1)
    sizes = [g.rts.size for g in groups]
    nat_trial = np.repeat(naturals, sizes, axis=0)
    rts = np.concatenate([g.rts for g in groups])
    choices = np.concatenate([g.choices for g in groups])
    p0 = np.concatenate([g.p0 for g in groups])
    flat = nat_trial.reshape(rts.size * n_rows, -1)
    dens = lba_density_elementwise(
        np.repeat(rts, n_rows), np.repeat(choices, n_rows),
        b=flat[:, 0], A=flat[:, 1], v=flat[:, 2:2 + model.n_choices],
        tau=flat[:, -1]).reshape(rts.size, n_rows)
    mixed = (1.0 - w) * dens + w * p0[:, None]
    return np.sum(np.maximum(np.log(np.maximum(mixed, 1e-300)), LOG_FLOOR),
                  axis=0)


def subject_loglik_particles(subject: SubjectData, alphas, beta,
                             model: ModelSpec) -> np.ndarray:
    """Vectorized subject_loglik over rows of effect vectors.

    This is the sampler's hot path: one call evaluates every particle
    against every trial of the subject.
    """
    alphas = np.atleast_2d(np.asarray(alphas, dtype=float))
    n_rows = alphas.shape[0]
    total = np.zeros(n_rows)
    if not subject.trials:
        return total
    min_rt = subject.min_rt if model.needs_min_rt else None
    groups = _compile_subject(subject, model)

    def group_omega(group):
        omega = alphas @ group.link_l.T
        if group.link_r.shape[1]:
            if beta is None or group.x_row is None:
                raise ConfigError("design declares covariate rows but beta "
                                  "or the covariates are missing")
            omega = omega + group.link_r @ (beta @ group.x_row)
        return omega

    if model.family == "lba" and len(groups) > 8:
        return _elementwise_loglik(
            groups, np.stack([group_omega(g) for g in groups]), model,
            min_rt)
    for group in groups:
        total += _group_loglik(group, group_omega(group), model, min_rt)
    return total


def subject_loglik_beta_particles(subject: SubjectData, alpha_j, betas,
                                  model: ModelSpec) -> np.ndarray:
    """Subject log-likelihood over rows of regression matrices, with the
    effect vector held fixed. betas has shape (rows of particles,
    coefficient rows, covariates)."""
    betas = np.asarray(betas, dtype=float)
    total = np.zeros(betas.shape[0])
    if not subject.trials:
        return total
    alpha_j = np.asarray(alpha_j, dtype=float)
    min_rt = subject.min_rt if model.needs_min_rt else None
    groups = _compile_subject(subject, model)

    def group_omega(group):
        if group.x_row is None:
            raise ConfigError("design declares covariate rows but the "
                              "dataset carries no covariates")
        base = group.link_l @ alpha_j
        bx = betas @ group.x_row
        return base[None, :] + bx @ group.link_r.T

    if model.family == "lba" and len(groups) > 8:
        return _elementwise_loglik(
            groups, np.stack([group_omega(g) for g in groups]), model,
            min_rt)
    for group in groups:
        total += _group_loglik(group, group_omega(group), model, min_rt)
    return total


def subject_loglik_grad(subject: SubjectData, alpha_j, beta,
                        model: ModelSpec
                        ) -> Tuple[float, np.ndarray, Optional[np.ndarray]]:
    """Subject log-likelihood with gradients over (alpha_j, beta).

    Gradients flow from the trial densities through the slot transforms
    and the linking matrices. Floored trials contribute zero gradient.
    """
    alpha_j = np.asarray(alpha_j, dtype=float)
    w = model.contamination.weight
    min_rt = subject.min_rt if model.needs_min_rt else None
    ll = 0.0
    d_alpha = np.zeros(model.n_effects)
    d_beta = (np.zeros_like(beta) if beta is not None
              and model.design.n_beta_rows else None)
    for group in _compile_subject(subject, model):
        omega = _group_omega(group, alpha_j, beta)
        natural = from_unconstrained(omega, model.trial_spec, min_rt=min_rt)
        if model.family == "lba":
            dens, grads = lba_density_grad_batch(
                group.rts, group.choices, _natural_to_lba(natural))
        else:
            dens, grads = ddm_density_grad_batch(
                group.rts, group.upper, DdmParams.from_array(natural),
                quad=model.quad)
        mixed = (1.0 - w) * dens + w * group.p0
        logp = np.maximum(np.log(np.maximum(mixed, 1e-300)), LOG_FLOOR)
        ll += float(logp.sum())
        live = logp > LOG_FLOOR
        if not live.any():
            continue
        weights = np.where(live, (1.0 - w) / np.maximum(mixed, 1e-300), 0.0)
        g_nat = grads.T @ weights
        jac = jacobian_natural_wrt_unconstrained(omega, model.trial_spec,
                                                 min_rt=min_rt)
        g_omega = jac.T @ g_nat
        d_alpha += group.link_l.T @ g_omega
        if d_beta is not None and group.link_r.shape[1]:
            d_beta += np.outer(group.link_r.T @ g_omega, group.x_row)
    return ll, d_alpha, d_beta


def dataset_loglik(dataset: Dataset, state: HierState,
                   model: ModelSpec) -> float:
    return sum(subject_loglik(s, state.alpha[j], state.beta, model)
               for j, s in enumerate(dataset.subjects))


# --------------------------------------------------------------------- #
# prior evaluators
# --------------------------------------------------------------------- #

def mvn_logpdf(x, mean, cov) -> float:
    x = np.asarray(x, dtype=float)
    dev = x - np.asarray(mean, dtype=float)
    chol = np.linalg.cholesky(np.asarray(cov, dtype=float))
    sol = np.linalg.solve(chol, dev)
    return float(-0.5 * (x.size * math.log(2 * math.pi) + sol @ sol)
                 - np.log(np.diag(chol)).sum())


def inv_wishart_logpdf(sigma, df: float, scale) -> float:
    sigma = np.asarray(sigma, dtype=float)
    scale = np.asarray(scale, dtype=float)
    d = sigma.shape[0]
    if df <= d - 1:
        raise DomainError(f"inverse-Wishart df {df} too small for "
                          f"dimension {d}")
    sign_s, logdet_scale = np.linalg.slogdet(scale)
    sign_v, logdet_sigma = np.linalg.slogdet(sigma)
    if sign_s <= 0 or sign_v <= 0:
        raise DomainError("inverse-Wishart arguments must be SPD")
    trace = np.trace(np.linalg.solve(sigma, scale))
    return float(0.5 * df * logdet_scale
                 - 0.5 * df * d * math.log(2.0)
                 - multigammaln(0.5 * df, d)
                 - 0.5 * (df + d + 1) * logdet_sigma
                 - 0.5 * trace)


def inv_gamma_logpdf(x: float, shape: float, rate: float) -> float:
    """Density of 1/Gamma(shape, rate): mean rate/(shape-1)."""
    if x <= 0:
        raise DomainError("inverse-gamma variate must be positive")
    return float(shape * math.log(rate) - gammaln(shape)
                 - (shape + 1.0) * math.log(x) - rate / x)


def conditional_sigma_params(alpha, mu, a_mix, prior: PriorSpec
                             ) -> Tuple[float, np.ndarray]:
    """Exact inverse-Wishart conditional of the group covariance given
    the effects, the group mean, and (Huang-Wand) the mixing scales."""
    alpha = np.atleast_2d(np.asarray(alpha, dtype=float))
    dev = alpha - np.asarray(mu, dtype=float)
    outer = dev.T @ dev
    n_sub, dim = alpha.shape
    if isinstance(prior.sigma, HuangWandPrior):
        if a_mix is None:
            raise ConfigError("Huang-Wand prior needs mixing scales")
        nu = prior.sigma.prior_df(dim) + n_sub
        psi = outer + 2.0 * prior.sigma.mix_df * np.diag(1.0 / a_mix)
    else:
        nu = prior.sigma.df + n_sub
        psi = outer + prior.sigma.scale_matrix(dim)
    return float(nu), psi


def log_prior(state: HierState, prior: PriorSpec) -> float:
    """Log density of all non-likelihood terms, including the effects'
    Gaussian and, under Huang-Wand, the log-a Jacobian."""
    d = state.mu.size
    total = 0.0
    if state.beta is not None and state.beta.size:
        total += mvn_logpdf(state.beta.ravel(),
                            np.zeros(state.beta.size),
                            prior.beta_var * np.eye(state.beta.size))
    total += mvn_logpdf(state.mu, np.full(d, prior.mu_alpha_mean),
                        prior.mu_alpha_var * np.eye(d))
    if isinstance(prior.sigma, HuangWandPrior):
        if state.a_mix is None:
            raise ConfigError("Huang-Wand prior needs mixing scales")
        hw = prior.sigma
        total += inv_wishart_logpdf(
            state.sigma, hw.prior_df(d),
            2.0 * hw.mix_df * np.diag(1.0 / state.a_mix))
        for a_d in state.a_mix:
            total += inv_gamma_logpdf(a_d, 0.5, 1.0 / hw.scale ** 2)
            total += math.log(a_d)   # log-a coordinate Jacobian
    else:
        total += inv_wishart_logpdf(state.sigma, prior.sigma.df,
                                    prior.sigma.scale_matrix(d))
    chol = np.linalg.cholesky(state.sigma)
    logdet = 2.0 * np.log(np.diag(chol)).sum()
    dev = state.alpha - state.mu
    sol = np.linalg.solve(chol, dev.T)
    total += -0.5 * (state.n_subjects * (d * math.log(2 * math.pi) + logdet)
                     + np.sum(sol * sol))
    return float(total)


def log_joint(state: HierState, dataset: Dataset, model: ModelSpec,
              prior: PriorSpec) -> float:
    if state.n_subjects != dataset.n_subjects:
        raise ConfigError(f"state has {state.n_subjects} subjects, dataset "
                          f"has {dataset.n_subjects}")
    return log_prior(state, prior) + dataset_loglik(dataset, state, model)


# --------------------------------------------------------------------- #
# theta1 layout and gradient
# --------------------------------------------------------------------- #

@dataclass(frozen=True)
class Theta1Layout:
    """Flat layout of the Gaussian block: subjects' effects, vec beta,
    group mean, and (Huang-Wand) log mixing scales."""

    n_subjects: int
    n_effects: int
    n_beta_rows: int
    n_covariates: int
    huang_wand: bool

    @property
    def beta_size(self) -> int:
        return self.n_beta_rows * self.n_covariates

    @property
    def size(self) -> int:
        d = self.n_subjects * self.n_effects + self.beta_size
        d += self.n_effects
        if self.huang_wand:
            d += self.n_effects
        return d

    def alpha_slice(self, j: int) -> slice:
        return slice(j * self.n_effects, (j + 1) * self.n_effects)

    @property
    def beta_slice(self) -> slice:
        base = self.n_subjects * self.n_effects
        return slice(base, base + self.beta_size)

    @property
    def mu_slice(self) -> slice:
        base = self.n_subjects * self.n_effects + self.beta_size
        return slice(base, base + self.n_effects)

    @property
    def log_a_slice(self) -> slice:
        base = (self.n_subjects * self.n_effects + self.beta_size
                + self.n_effects)
        return slice(base, base + (self.n_effects if self.huang_wand else 0))

    def pack(self, alpha, beta, mu, a_mix) -> np.ndarray:
        out = np.empty(self.size)
        out[:self.n_subjects * self.n_effects] = np.asarray(alpha).ravel()
        if self.beta_size:
            out[self.beta_slice] = np.asarray(beta).ravel()
        out[self.mu_slice] = mu
        if self.huang_wand:
            out[self.log_a_slice] = np.log(a_mix)
        return out

    def unpack(self, theta1):
        theta1 = np.asarray(theta1, dtype=float)
        if theta1.shape != (self.size,):
            raise ConfigError(f"theta1 has shape {theta1.shape}, layout "
                              f"needs ({self.size},)")
        alpha = theta1[:self.n_subjects * self.n_effects].reshape(
            self.n_subjects, self.n_effects)
        beta = (theta1[self.beta_slice].reshape(self.n_beta_rows,
                                                self.n_covariates)
                if self.beta_size else None)
        mu = theta1[self.mu_slice]
        a_mix = (np.exp(theta1[self.log_a_slice]) if self.huang_wand
                 else None)
        return alpha, beta, mu, a_mix


def make_layout(dataset: Dataset, model: ModelSpec,
                prior: PriorSpec) -> Theta1Layout:
    if model.design.n_beta_rows and dataset.n_covariates == 0:
        raise ConfigError("design declares covariate rows but the dataset "
                          "has no covariate columns")
    return Theta1Layout(
        n_subjects=dataset.n_subjects,
        n_effects=model.n_effects,
        n_beta_rows=model.design.n_beta_rows,
        n_covariates=dataset.n_covariates,
        huang_wand=prior.huang_wand,
    )


def _data_tau_effect_slot(model: ModelSpec) -> int:
    """Index (in the effects vector) of the slot feeding the
    data-dependent non-decision parameter; requires a plain single-slot
    recipe for that parameter."""
    tau_param = None
    for s in model.trial_spec.slots:
        if s.kind.value == "data-dependent-tau":
            tau_param = s.name
    recipe = model.design.recipes[tau_param]
    if (len(recipe.terms) != 1 or recipe.terms[0].select_map is not None
            or recipe.terms[0].attribute is not None
            or recipe.terms[0].coefficient != 1.0
            or recipe.beta_row is not None):
        raise ConfigError(
            "the data-dependent non-decision transform needs a plain "
            "one-slot recipe for the lower-bound parameter")
    return model.design.alpha_names.index(recipe.terms[0].slot)


def control_variate_grad(theta1, sigma, dataset: Dataset, model: ModelSpec,
                         prior: PriorSpec, layout: Theta1Layout
                         ) -> np.ndarray:
    """Gradient over theta1 of the log exact conditional of the group
    covariance. Its expectation under that conditional is zero, so
    subtracting it from the joint gradient acts as a control variate.

    Under the data-dependent non-decision rewrite the effects enter on
    the rewritten scale; the chain factor is applied to the relevant
    slot.
    """
    alpha_t, _, mu, a_mix = layout.unpack(theta1)
    alpha_nat, chain = _effects_on_natural_scale(alpha_t, dataset, model)
    nu, psi = conditional_sigma_params(alpha_nat, mu, a_mix, prior)
    psi_inv = np.linalg.inv(psi)
    sigma_inv = np.linalg.inv(sigma)
    core = nu * psi_inv - sigma_inv
    grad = np.zeros(layout.size)
    dev = alpha_nat - mu
    per_subject = dev @ core.T
    for j in range(layout.n_subjects):
        g = per_subject[j].copy()
        if chain is not None:
            slot, factors = chain
            g[slot] *= factors[j]
        grad[layout.alpha_slice(j)] = g
    grad[layout.mu_slice] = -per_subject.sum(axis=0)
    if layout.huang_wand:
        hw = prior.sigma
        grad[layout.log_a_slice] = (hw.mix_df / a_mix) * (
            np.diag(sigma_inv) - nu * np.diag(psi_inv))
    return grad


def _effects_on_natural_scale(alpha_t, dataset, model
                              ) -> Tuple[np.ndarray, Optional[tuple]]:
    """Map effect vectors from the (possibly rewritten) working scale to
    the scale the hierarchical Gaussian lives on. Returns the mapped
    matrix and, when a rewrite is active, (slot, d alpha/d tilde per
    subject)."""
    if not model.needs_min_rt:
        return alpha_t, None
    slot = _data_tau_effect_slot(model)
    alpha = np.array(alpha_t, dtype=float)
    factors = np.empty(alpha.shape[0])
    for j, subject in enumerate(dataset.subjects):
        tilde = alpha_t[j, slot]
        alpha[j] = tau_transform_data_inverse(alpha_t[j], subject.min_rt,
                                              slot=slot)
        # d alpha6 / d tilde = -sigmoid(tilde)
        factors[j] = -1.0 / (1.0 + math.exp(-tilde))
    return alpha, (slot, factors)


def grad_log_joint_theta1(theta1, sigma, dataset: Dataset, model: ModelSpec,
                          prior: PriorSpec, layout: Theta1Layout,
                          include_control_variate: bool = True
                          ) -> Tuple[float, np.ndarray]:
    """Log joint (in theta1 coordinates, group covariance fixed) and its
    gradient over theta1.

    The value is the full log joint including the covariance prior
    terms; the gradient additionally subtracts the control-variate block
    unless disabled. When the model uses the data-dependent non-decision
    transform, the subject effects in theta1 are taken on the rewritten
    scale and the value includes the per-subject log-Jacobians.
    """
    theta1 = np.asarray(theta1, dtype=float)
    alpha_t, beta, mu, a_mix = layout.unpack(theta1)
    alpha_nat, chain = _effects_on_natural_scale(alpha_t, dataset, model)
    d = layout.n_effects
    grad = np.zeros(layout.size)

    # likelihood, evaluated on the working scale
    value = 0.0
    for j, subject in enumerate(dataset.subjects):
        ll, d_alpha, d_beta = subject_loglik_grad(subject, alpha_t[j], beta,
                                                  model)
        value += ll
        grad[layout.alpha_slice(j)] += d_alpha
        if d_beta is not None:
            grad[layout.beta_slice] += d_beta.ravel()

    # hierarchical Gaussian over the effects
    sigma = np.asarray(sigma, dtype=float)
    sigma_inv = np.linalg.inv(sigma)
    dev = alpha_nat - mu
    state = HierState(alpha=alpha_nat, mu=mu, sigma=sigma, beta=beta,
                      a_mix=a_mix)
    value += log_prior(state, prior)
    prior_alpha = -dev @ sigma_inv.T
    for j in range(layout.n_subjects):
        g = prior_alpha[j].copy()
        if chain is not None:
            slot, factors = chain
            g[slot] *= factors[j]
            tilde = alpha_t[j, slot]
            value += float(tau_slot_log_jacobian(tilde))
            g[slot] += float(tau_slot_log_jacobian_grad(tilde))
        grad[layout.alpha_slice(j)] += g
    if layout.beta_size:
        grad[layout.beta_slice] += -theta1[layout.beta_slice] / prior.beta_var
    grad[layout.mu_slice] += (sigma_inv @ dev.sum(axis=0)
                              - (mu - prior.mu_alpha_mean)
                              / prior.mu_alpha_var)
    if layout.huang_wand:
        hw = prior.sigma
        nu0 = hw.prior_df(d)
        grad[layout.log_a_slice] += (
            -0.5 * nu0 - 0.5
            + (1.0 / hw.scale ** 2 + hw.mix_df * np.diag(sigma_inv)) / a_mix)

    if include_control_variate:
        grad -= control_variate_grad(theta1, sigma, dataset, model, prior,
                                     layout)
    return value, grad
