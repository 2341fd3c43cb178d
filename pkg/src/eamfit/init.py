"""Starting values for the variational search and the particle sampler.

Three routes, in increasing order of cost:

* heuristic_start draws trial-level parameters from plausible ranges
  keyed to the data's fastest response, satisfying every domain
  constraint by construction. It seeds everything else and is the
  fallback whenever an optimizer start turns out non-finite.
* map_init fits each subject separately by regularized maximum a
  posteriori (ridge-style independent normal priors, distinct from the
  model priors) and assembles the variational mean from the per-subject
  estimates: subject blocks from the fits, group mean from their
  average, regression weights from the average of the per-subject
  weights, log mixing scales at zero.
* pmwg_init runs a short particle chain and averages the tail draws.

Both init routes fill every factor-loading and diagonal entry of the
variational state with 0.01 and verify that the assembled start yields
a finite bound estimate before returning.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np

from .data import Dataset, SubjectData
from .errors import ConfigError, NumericFailure
from .model import (
    HierState,
    ModelSpec,
    PriorSpec,
    Theta1Layout,
    make_layout,
    subject_loglik_grad,
)
from .pmwg import ChainOutput, PmwgConfig, StageSchedule, run_pmwg, \
    subject_stream_key
from .transforms import to_unconstrained
from .vb import VariationalState, VbConfig, elbo_estimate, initial_state, \
    make_optimizer, optimizer_step

# regularizer variance for the per-subject fits; wide on the
# unconstrained scale, present only to keep the search bounded
RIDGE_VAR = 10.0

MAX_START_RETRIES = 10


# --------------------------------------------------------------------- #
# domain-knowledge draws
# --------------------------------------------------------------------- #

def _min_rt_of(data) -> float:
    if isinstance(data, Dataset):
        rts = [s.min_rt for s in data.subjects if s.n_trials]
        if not rts:
            raise ConfigError("no trials anywhere; the fastest response "
                              "is undefined")
        return min(rts)
    return data.min_rt


def heuristic_start(model: ModelSpec, data, rng=None) -> np.ndarray:
    """Natural-scale trial-parameter draw from plausible ranges.

    `data` is a SubjectData or Dataset; only its fastest response is
    used, to keep the non-decision support strictly inside the observed
    response times. Every draw satisfies the slot constraints (positive
    scales, threshold above the start-point range, non-decision lower
    bound under the fastest response), so mapping through
    to_unconstrained never raises.
    """
    rng = np.random.default_rng() if rng is None else rng
    min_rt = _min_rt_of(data)
    spec = model.trial_spec
    draw = np.empty(spec.dim)
    if model.family == "ddm":
        a = rng.uniform(0.5, 2.0)
        draw[spec.index("a")] = a
        draw[spec.index("mu_z")] = a / 2.0
        draw[spec.index("s_z")] = a * rng.uniform(0.05, 0.45)
        draw[spec.index("mu_v")] = rng.uniform(1.0, 2.0)
        draw[spec.index("s_v")] = rng.uniform(0.1, 2.0)
        s_tau = rng.uniform(0.01, 0.1)
        lower = min_rt * rng.uniform(0.8, 0.95)
        draw[spec.index("s_tau")] = s_tau
        draw[spec.index("mu_tau")] = lower + 0.5 * s_tau
    else:
        start_range = rng.uniform(0.5, 1.5)
        draw[spec.index("A")] = start_range
        draw[spec.index("b")] = start_range + rng.uniform(0.2, 0.8)
        for i in range(model.n_choices):
            lo, hi = (2.5, 3.5) if i == 0 else (0.8, 1.8)
            draw[spec.index(f"v{i}")] = rng.uniform(lo, hi)
        draw[spec.index("tau")] = min_rt * rng.uniform(0.6, 0.9)
    return draw


def _effect_start(subject: SubjectData, model: ModelSpec,
                  omega0: np.ndarray) -> np.ndarray:
    """Unconstrained effect vector that best reproduces the target
    trial parameters across the subject's observed trial attributes.

    Stacks the linking matrices of the distinct attribute combinations
    and solves the least-squares problem L alpha = omega0 (exact for
    the elementwise design, sensible for condition-selected slots).
    """
    mats = {}
    for t in subject.trials:
        key = tuple(sorted((k, str(v)) for k, v in t.attrs.items()))
        if key not in mats:
            big_l, _ = model.design.link_matrices(t.attrs, model.trial_spec)
            mats[key] = big_l
    if not mats:
        try:
            big_l, _ = model.design.link_matrices({}, model.trial_spec)
            mats["<none>"] = big_l
        except ConfigError:
            return np.zeros(model.n_effects)
    stacked = np.vstack(list(mats.values()))
    target = np.tile(omega0, len(mats))
    sol, *_ = np.linalg.lstsq(stacked, target, rcond=None)
    return sol


# --------------------------------------------------------------------- #
# per-subject regularized MAP
# --------------------------------------------------------------------- #

@dataclass(frozen=True)
class SubjectFit:
    """One subject's regularized MAP estimate and how it was reached."""

    subject: str
    alpha: np.ndarray
    beta: Optional[np.ndarray]
    converged: bool
    n_steps: int
    objective: float
    retries: int


@dataclass(frozen=True)
class InitResult:
    method: str
    state: VariationalState
    fits: Tuple[SubjectFit, ...] = ()

    @property
    def mean(self) -> np.ndarray:
        return self.state.mean_vector()


def _covariates_vary(subject: SubjectData) -> bool:
    cov = subject.covariates
    if cov is None or cov.shape[0] < 2:
        return False
    return float(np.ptp(cov, axis=0).max()) > 0.0


def fit_subject_map(subject: SubjectData, model: ModelSpec,
                    fit_beta: Optional[bool] = None,
                    steps: int = 2000, grad_tol: float = 1e-5,
                    step_size: float = 0.01, rng=None,
                    loglik_fn: Optional[Callable] = None) -> SubjectFit:
    """Regularized MAP fit of one subject's effects (and, when the
    covariates vary within the subject, a private copy of the
    regression weights).

    The objective is the subject log-likelihood plus independent
    normal log-priors with variance RIDGE_VAR on every coordinate;
    those priors only regularize this search and are unrelated to the
    model's. Ascent uses ADAM until the gradient norm drops under
    grad_tol or the step budget runs out. A non-finite objective at
    the heuristic start is retried from a fresh draw, up to
    MAX_START_RETRIES times.

    loglik_fn(alpha, beta) -> (value, grad_alpha, grad_beta) replaces
    the model likelihood (testing hook).
    """
    rng = np.random.default_rng() if rng is None else rng
    n_rows = model.design.n_beta_rows
    n_cov = 0 if subject.covariates is None else subject.covariates.shape[1]
    if fit_beta is None:
        fit_beta = n_rows > 0 and _covariates_vary(subject)
    if fit_beta and n_cov == 0:
        raise ConfigError(f"subject {subject.subject} has no covariate "
                          "columns to fit regression weights against")
    beta_shape = (n_rows, n_cov)
    # beta stays pinned at zero when not fitted so that designs with
    # covariate rows still evaluate (the contribution is then null)
    beta_fixed = np.zeros(beta_shape) if n_rows and n_cov else None

    if loglik_fn is None:
        def loglik_fn(alpha, beta):
            return subject_loglik_grad(subject, alpha, beta, model)

    n_eff = model.n_effects

    def objective(theta):
        alpha = theta[:n_eff]
        if fit_beta:
            beta = theta[n_eff:].reshape(beta_shape)
        else:
            beta = beta_fixed
        val, g_alpha, g_beta = loglik_fn(alpha, beta)
        val -= 0.5 * float(theta @ theta) / RIDGE_VAR
        grad = np.empty_like(theta)
        grad[:n_eff] = g_alpha
        if fit_beta:
            grad[n_eff:] = np.asarray(g_beta).ravel()
        grad -= theta / RIDGE_VAR
        return val, grad

    dim = n_eff + (n_rows * n_cov if fit_beta else 0)
    retries = 0
    while True:
        theta = np.zeros(dim)
        if subject.n_trials:
            natural = heuristic_start(model, subject, rng)
            min_rt = subject.min_rt if model.needs_min_rt else None
            omega0 = to_unconstrained(natural, model.trial_spec,
                                      min_rt=min_rt)
            theta[:n_eff] = _effect_start(subject, model, omega0)
        val, grad = objective(theta)
        if np.isfinite(val) and np.all(np.isfinite(grad)):
            break
        retries += 1
        if retries > MAX_START_RETRIES:
            raise NumericFailure(
                f"subject {subject.subject}: objective stayed non-finite "
                f"after {MAX_START_RETRIES} fresh starts")

    opt = make_optimizer(VbConfig(), np.full(dim, step_size))
    converged = False
    n_steps = 0
    for n_steps in range(1, steps + 1):
        theta, opt = optimizer_step(opt, theta, grad)
        val, grad = objective(theta)
        if float(np.linalg.norm(grad)) < grad_tol:
            converged = True
            break

    alpha_hat = theta[:n_eff].copy()
    beta_hat = theta[n_eff:].reshape(beta_shape).copy() if fit_beta else None
    return SubjectFit(subject=subject.subject, alpha=alpha_hat,
                      beta=beta_hat, converged=converged, n_steps=n_steps,
                      objective=float(val), retries=retries)


# --------------------------------------------------------------------- #
# assembly
# --------------------------------------------------------------------- #

def _check_finite_bound(state: VariationalState, dataset: Dataset,
                        model: ModelSpec, prior: PriorSpec,
                        layout: Theta1Layout, seed: int, method: str):
    try:
        probe = elbo_estimate(state, dataset, model, prior, n_samples=1,
                              rng=np.random.default_rng([seed, 1 << 20]),
                              layout=layout)
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise NumericFailure(f"{method} start yields a non-finite bound "
                             f"estimate; the fits likely diverged "
                             f"({exc})") from exc
    if not np.isfinite(probe):
        raise NumericFailure(f"{method} start yields a non-finite bound "
                             "estimate; the fits likely diverged")


def map_init(dataset: Dataset, model: ModelSpec, prior: PriorSpec,
             config: Optional[VbConfig] = None, seed: int = 0,
             steps: int = 2000, grad_tol: float = 1e-5) -> InitResult:
    """Assemble starting variational parameters from independent
    per-subject regularized MAP fits.

    Subject blocks take the fitted effects, the group-mean block their
    arithmetic average, the regression block the average of the
    per-subject weights, and the log mixing scales zero. Subjects whose
    covariates never vary within the subject cannot identify private
    regression weights; they are fitted with the weights pinned at zero
    and excluded from the regression average (all-zero block when that
    holds for everyone).
    """
    config = VbConfig() if config is None else config
    layout = make_layout(dataset, model, prior)
    fits = []
    for subject in dataset.subjects:
        rng = np.random.default_rng([seed, subject_stream_key(
            subject.subject)])
        fits.append(fit_subject_map(subject, model, steps=steps,
                                    grad_tol=grad_tol,
                                    step_size=config.step_mean, rng=rng))
    alpha_hat = np.stack([f.alpha for f in fits])
    beta_hat = None
    if layout.beta_size:
        fitted = [f.beta for f in fits if f.beta is not None]
        beta_hat = (np.mean(fitted, axis=0) if fitted
                    else np.zeros((layout.n_beta_rows, layout.n_covariates)))
    mean = layout.pack(alpha_hat, beta_hat, alpha_hat.mean(axis=0),
                       np.ones(layout.n_effects))
    state = initial_state(layout, mean, config)
    _check_finite_bound(state, dataset, model, prior, layout, seed, "MAP")
    return InitResult(method="map", state=state, fits=tuple(fits))


# --------------------------------------------------------------------- #
# short-chain route
# --------------------------------------------------------------------- #

def hier_start(dataset: Dataset, model: ModelSpec, prior: PriorSpec,
               seed: int = 0, group_var: float = 0.1) -> HierState:
    """Heuristic hierarchical state for starting the particle sampler:
    per-subject domain-knowledge draws, their average as the group
    mean, an isotropic group covariance, zero regression weights and
    unit mixing scales."""
    alpha = np.empty((dataset.n_subjects, model.n_effects))
    for j, subject in enumerate(dataset.subjects):
        rng = np.random.default_rng([seed, subject_stream_key(
            subject.subject)])
        natural = heuristic_start(model, subject, rng)
        min_rt = subject.min_rt if model.needs_min_rt else None
        omega0 = to_unconstrained(natural, model.trial_spec, min_rt=min_rt)
        alpha[j] = _effect_start(subject, model, omega0)
    beta = (np.zeros((model.design.n_beta_rows, dataset.n_covariates))
            if model.design.n_beta_rows else None)
    a_mix = np.ones(model.n_effects) if prior.huang_wand else None
    return HierState(alpha=alpha, mu=alpha.mean(axis=0),
                     sigma=group_var * np.eye(model.n_effects),
                     beta=beta, a_mix=a_mix)


def state_from_chain(chain: ChainOutput, layout: Theta1Layout,
                     config: VbConfig, window: int = 100
                     ) -> VariationalState:
    """Variational start whose mean averages the chain's trailing
    `window` draws blockwise (log mixing scales average on the log
    scale)."""
    total = chain.alpha.shape[0]
    w = min(window, total)
    alpha_mean = chain.alpha[-w:].mean(axis=0)
    mu_mean = chain.mu[-w:].mean(axis=0)
    beta_mean = None
    if layout.beta_size:
        if chain.beta is None:
            raise ConfigError("the layout expects regression weights but "
                              "the chain recorded none")
        beta_mean = chain.beta[-w:].mean(axis=0)
    if layout.huang_wand:
        if chain.a_mix is None:
            raise ConfigError("the layout expects mixing scales but the "
                              "chain recorded none")
        a_for_pack = np.exp(np.log(chain.a_mix[-w:]).mean(axis=0))
    else:
        a_for_pack = np.ones(layout.n_effects)
    mean = layout.pack(alpha_mean, beta_mean, mu_mean, a_for_pack)
    return initial_state(layout, mean, config)


def pmwg_init(dataset: Dataset, model: ModelSpec, prior: PriorSpec,
              config: Optional[VbConfig] = None,
              pmwg_config: Optional[PmwgConfig] = None,
              seed: int = 0, window: int = 100) -> InitResult:
    """Assemble starting variational parameters by running a short
    particle chain from the heuristic state and averaging its trailing
    draws. Slower than map_init but shares its machinery with the
    exact sampler."""
    config = VbConfig() if config is None else config
    if pmwg_config is None:
        pmwg_config = PmwgConfig(
            schedule=StageSchedule(burn_in=100, adaptation=50, sampling=50,
                                   refresh_every=20),
            seed=seed)
    layout = make_layout(dataset, model, prior)
    start = hier_start(dataset, model, prior, seed=seed)
    chain = run_pmwg(dataset, model, prior, pmwg_config, start)
    state = state_from_chain(chain, layout, config, window=window)
    _check_finite_bound(state, dataset, model, prior, layout, seed,
                        "short-chain")
    return InitResult(method="pmwg", state=state)
