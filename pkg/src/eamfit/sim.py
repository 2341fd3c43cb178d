"""Forward simulation: single trials for both model families, synthetic
hierarchical datasets with covariate designs, and posterior-predictive
summary tables.

The LBA race is simulated exactly. The diffusion process has no exact
sampler here; trials follow an Euler-Maruyama walk with a sqrt(dt) noise
scale, a 20 s wall after which the trial is redrawn, and an optional
finer step for oracle work.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from numba import njit

from .data import Dataset, SubjectData, Trial
from .ddm import DdmParams
from .errors import ConfigError
from .lba import LbaParams
from .model import ModelSpec
from .transforms import link_trial

DDM_TIME_CAP = 20.0


class _RedrawDiagnostics:
    """Counts trials that had to be thrown away and drawn again."""

    def __init__(self):
        self._lock = threading.Lock()
        self.lba_no_finisher = 0
        self.ddm_cap_hits = 0

    def record_no_finisher(self, count: int = 1):
        with self._lock:
            self.lba_no_finisher += count

    def record_ddm_cap(self, count: int = 1):
        with self._lock:
            self.ddm_cap_hits += count

    def reset(self):
        with self._lock:
            self.lba_no_finisher = 0
            self.ddm_cap_hits = 0


redraw_diagnostics = _RedrawDiagnostics()


# --------------------------------------------------------------------- #
# LBA trials
# --------------------------------------------------------------------- #

def simulate_lba_trials(p: LbaParams, n: int, rng) -> Tuple[np.ndarray,
                                                            np.ndarray]:
    """Exact race simulation, vectorized. Returns (choices, rts).

    Start points are uniform on [0, A], drift draws are unit-variance
    normals around v. An accumulator whose drift draw is not positive
    never reaches threshold; a trial where no accumulator finishes is
    redrawn (and counted).
    """
    v = np.asarray(p.v, dtype=float)
    c = v.size
    choices = np.empty(n, dtype=np.int64)
    rts = np.empty(n)
    pending = np.arange(n)
    while pending.size:
        m = pending.size
        starts = rng.uniform(0.0, p.A, size=(m, c))
        drifts = rng.normal(loc=v, scale=1.0, size=(m, c))
        with np.errstate(divide="ignore", invalid="ignore"):
            times = np.where(drifts > 0.0, (p.b - starts) / drifts, np.inf)
        winner = times.argmin(axis=1)
        best = times[np.arange(m), winner]
        done = np.isfinite(best)
        idx = pending[done]
        choices[idx] = winner[done]
        rts[idx] = p.tau + best[done]
        n_redraw = m - done.sum()
        if n_redraw:
            redraw_diagnostics.record_no_finisher(int(n_redraw))
        pending = pending[~done]
    return choices, rts


def simulate_lba_trial(p: LbaParams, rng) -> Tuple[int, float]:
    choices, rts = simulate_lba_trials(p, 1, rng)
    return int(choices[0]), float(rts[0])


# --------------------------------------------------------------------- #
# DDM trials
# --------------------------------------------------------------------- #

@njit(cache=True)
def _euler_paths(v, a, z, dt, cap, seed):
    """Walk each trial to absorption. Returns (upper flags, decision
    times); a time of -1 marks a trial that hit the cap."""
    np.random.seed(seed)
    n = v.size
    upper = np.zeros(n, dtype=np.int64)
    times = np.empty(n)
    sd = math.sqrt(dt)
    for i in range(n):
        x = z[i]
        t = 0.0
        while 0.0 < x < a[i]:
            x += v[i] * dt + sd * np.random.normal()
            t += dt
            if t >= cap:
                break
        if t >= cap and 0.0 < x < a[i]:
            times[i] = -1.0
        else:
            upper[i] = 1 if x >= a[i] else 0
            times[i] = t
    return upper, times


def simulate_ddm_trials(p: DdmParams, n: int, rng, dt: float = 1e-4
                        ) -> Tuple[np.ndarray, np.ndarray]:
    """Euler-Maruyama diffusion trials. Returns (choices, rts) with
    choice 1 for the upper boundary.

    Trial-level variability is drawn first (drift normal, start point
    and non-decision time uniform), then the path runs until absorption.
    Paths alive after 20 s are redrawn with fresh variability draws.
    """
    if dt <= 0:
        raise ConfigError(f"step size must be positive, got {dt}")
    choices = np.empty(n, dtype=np.int64)
    rts = np.empty(n)
    pending = np.arange(n)
    while pending.size:
        m = pending.size
        v = rng.normal(p.mu_v, p.s_v, size=m) if p.s_v > 0 else \
            np.full(m, p.mu_v)
        z = rng.uniform(p.mu_z - 0.5 * p.s_z, p.mu_z + 0.5 * p.s_z, size=m) \
            if p.s_z > 0 else np.full(m, p.mu_z)
        tau = rng.uniform(p.mu_tau - 0.5 * p.s_tau,
                          p.mu_tau + 0.5 * p.s_tau, size=m) \
            if p.s_tau > 0 else np.full(m, p.mu_tau)
        seed = int(rng.integers(0, 2 ** 31 - 1))
        upper, times = _euler_paths(v, np.full(m, p.a), z, dt, DDM_TIME_CAP,
                                    seed)
        done = times >= 0.0
        idx = pending[done]
        choices[idx] = upper[done]
        rts[idx] = tau[done] + times[done]
        n_redraw = m - int(done.sum())
        if n_redraw:
            redraw_diagnostics.record_ddm_cap(n_redraw)
        pending = pending[~done]
    return choices, rts


def simulate_ddm_trial(p: DdmParams, rng, dt: float = 1e-4
                       ) -> Tuple[int, float]:
    choices, rts = simulate_ddm_trials(p, 1, rng, dt)
    return int(choices[0]), float(rts[0])


# --------------------------------------------------------------------- #
# synthetic datasets
# --------------------------------------------------------------------- #

@dataclass(frozen=True)
class GroupTruth:
    """Group-level generating values on the unconstrained scale."""

    mu: np.ndarray
    sigma: np.ndarray
    beta: Optional[np.ndarray] = None

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=float)
        sigma = np.asarray(self.sigma, dtype=float)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)
        if sigma.shape != (mu.size, mu.size):
            raise ConfigError(f"truth covariance shape {sigma.shape} does "
                              f"not match {mu.size} effects")
        if self.beta is not None:
            object.__setattr__(self, "beta",
                               np.asarray(self.beta, dtype=float))


@dataclass(frozen=True)
class TruthRecord:
    """Everything needed to score a recovery study later."""

    truth: GroupTruth
    alpha: np.ndarray
    seed: int

    def to_dict(self) -> dict:
        out = {"mu": self.truth.mu.tolist(),
               "sigma": self.truth.sigma.tolist(),
               "alpha": self.alpha.tolist(),
               "seed": self.seed}
        if self.truth.beta is not None:
            out["beta"] = self.truth.beta.tolist()
        return out


TrialPlan = Sequence[Tuple[Dict[str, object], int]]


def _default_covariates(rng, n: int, d: int) -> np.ndarray:
    return rng.normal(0.0, 0.001, size=(n, d))


def simulate_dataset(truth: GroupTruth, model: ModelSpec, plan: TrialPlan,
                     n_subjects: int, seed: int,
                     covariate_gen: Optional[Callable] = None,
                     dt: float = 1e-4) -> Tuple[Dataset, TruthRecord]:
    """Draw effects for each subject, then trials per the plan.

    `plan` lists (attrs, count) blocks shared by all subjects. Covariates
    come from `covariate_gen(rng, n, d)` (default: tight normals around
    zero). One RNG substream per subject keyed by (seed, subject) makes
    regeneration bit-identical.
    """
    if model.needs_min_rt:
        raise ConfigError("cannot simulate from a model whose non-decision "
                          "slot is rewritten around the observed fastest "
                          "response; simulate with the plain layout")
    if model.design.beta_rows and truth.beta is None:
        raise ConfigError("the design carries covariate rows but the truth "
                          "record has no beta")
    d_cov = truth.beta.shape[1] if model.design.beta_rows else 0
    gen = covariate_gen or _default_covariates
    n_trials = sum(count for _, count in plan)
    chol = np.linalg.cholesky(truth.sigma) if truth.sigma.any() else None
    alpha = np.empty((n_subjects, truth.mu.size))
    subjects = []
    for j in range(n_subjects):
        rng = np.random.default_rng([seed, j])
        alpha[j] = truth.mu if chol is None else \
            truth.mu + chol @ rng.standard_normal(truth.mu.size)
        cov = gen(rng, n_trials, d_cov) if d_cov else None
        trials = []
        i = 0
        for attrs, count in plan:
            for _ in range(count):
                x = cov[i] if cov is not None else None
                natural = link_trial(alpha[j], truth.beta, x, attrs,
                                     model.design, model.trial_spec)
                if model.family == "lba":
                    c = model.n_choices
                    p = LbaParams(b=natural[0], A=natural[1],
                                  v=natural[2:2 + c], tau=natural[-1])
                    choice, rt = simulate_lba_trial(p, rng)
                else:
                    p = DdmParams.from_array(natural)
                    choice, rt = simulate_ddm_trial(p, rng, dt)
                trials.append(Trial(choice=choice, rt=rt, attrs=dict(attrs),
                                    index=i))
                i += 1
        subjects.append(SubjectData(subject=f"s{j}", trials=tuple(trials),
                                    covariates=cov))
    names = tuple(f"x{k}" for k in range(d_cov))
    data = Dataset(subjects=tuple(subjects), n_choices=model.n_choices,
                   covariate_names=names)
    return data, TruthRecord(truth=truth, alpha=alpha, seed=seed)


# --------------------------------------------------------------------- #
# posterior predictive
# --------------------------------------------------------------------- #

PPC_QUANTILES = (2.5, 25.0, 50.0, 75.0, 97.5)


@dataclass(frozen=True)
class PpcCell:
    block: str
    condition: str
    statistic: str
    quantiles: Tuple[float, ...]
    observed: float

    def covered(self) -> bool:
        return self.quantiles[0] <= self.observed <= self.quantiles[-1]


def _cell_stats(subjects_stats: List[Dict[str, Dict[str, float]]]
                ) -> Dict[str, Dict[str, float]]:
    """Average each per-subject per-condition statistic over subjects."""
    out: Dict[str, Dict[str, float]] = {}
    conditions = sorted({c for s in subjects_stats for c in s})
    for cond in conditions:
        rows = [s[cond] for s in subjects_stats if cond in s]
        out[cond] = {
            "median_rt": float(np.mean([r["median_rt"] for r in rows])),
            "accuracy": float(np.mean([r["accuracy"] for r in rows])),
        }
    return out


def _summarize_dataset(data: Dataset, condition_key: str, correct_key: str
                       ) -> Dict[str, Dict[str, float]]:
    per_subject = []
    for s in data.subjects:
        groups: Dict[str, List[Trial]] = {}
        for t in s.trials:
            cond = str(t.attrs.get(condition_key, "all"))
            groups.setdefault(cond, []).append(t)
        stats = {}
        for cond, trials in groups.items():
            rts = np.array([t.rt for t in trials])
            correct = np.array([
                t.choice == int(t.attrs.get(correct_key, 0))
                for t in trials])
            stats[cond] = {"median_rt": float(np.median(rts)),
                           "accuracy": float(correct.mean())}
        per_subject.append(stats)
    return _cell_stats(per_subject)


def _replicate_dataset(state_alpha: np.ndarray, beta: Optional[np.ndarray],
                       data: Dataset, model: ModelSpec, rng,
                       dt: float) -> Dataset:
    """Simulate one dataset with the observed design (same subjects,
    trial attributes, and covariates)."""
    subjects = []
    for j, s in enumerate(data.subjects):
        min_rt = s.min_rt if model.needs_min_rt else None
        trials = []
        for i, t in enumerate(s.trials):
            x = s.covariates[i] if s.covariates is not None else None
            natural = link_trial(state_alpha[j], beta, x, t.attrs,
                                 model.design, model.trial_spec,
                                 min_rt=min_rt)
            if model.family == "lba":
                c = model.n_choices
                p = LbaParams(b=natural[0], A=natural[1], v=natural[2:2 + c],
                              tau=natural[-1])
                choice, rt = simulate_lba_trial(p, rng)
            else:
                p = DdmParams.from_array(natural)
                choice, rt = simulate_ddm_trial(p, rng, dt)
            trials.append(Trial(choice=choice, rt=rt, attrs=t.attrs,
                                index=i))
        subjects.append(SubjectData(subject=s.subject, trials=tuple(trials),
                                    covariates=s.covariates))
    return Dataset(subjects=tuple(subjects), n_choices=data.n_choices,
                   covariate_names=data.covariate_names)


def posterior_predictive(states: Iterable, data: Dataset, model: ModelSpec,
                         seed: int = 0, condition_key: str = "condition",
                         correct_key: str = "correct",
                         dt: float = 1e-4) -> List[PpcCell]:
    """Simulate one replicate per posterior draw and tabulate band
    quantiles for the per-condition summary statistics.

    `states` yields objects with .alpha (J, D) and .beta attributes (a
    HierState works, as does any draw container). Statistics: median RT
    per condition per subject averaged over subjects, and mean accuracy
    against the trial's `correct_key` attribute (default: response 0 is
    scored correct). Returns one cell per (condition, statistic).
    """
    observed = _summarize_dataset(data, condition_key, correct_key)
    sims: Dict[Tuple[str, str], List[float]] = {}
    n_draws = 0
    for t, state in enumerate(states):
        rng = np.random.default_rng([seed, t])
        rep = _replicate_dataset(np.asarray(state.alpha),
                                 getattr(state, "beta", None), data, model,
                                 rng, dt)
        stats = _summarize_dataset(rep, condition_key, correct_key)
        for cond, row in stats.items():
            for name, value in row.items():
                sims.setdefault((cond, name), []).append(value)
        n_draws += 1
    if n_draws == 0:
        raise ConfigError("posterior predictive needs at least one draw")
    cells = []
    for cond in sorted(observed):
        for name in ("median_rt", "accuracy"):
            values = np.array(sims[(cond, name)])
            qs = tuple(float(q) for q in
                       np.percentile(values, PPC_QUANTILES))
            cells.append(PpcCell(block="group", condition=cond,
                                 statistic=name, quantiles=qs,
                                 observed=observed[cond][name]))
    return cells


def ppc_table_rows(cells: Sequence[PpcCell]) -> List[dict]:
    """Rows for the CSV writer: one dict per cell."""
    rows = []
    for c in cells:
        row = {"block": c.block, "condition": c.condition,
               "statistic": c.statistic}
        for q, v in zip(PPC_QUANTILES, c.quantiles):
            row[f"q{q:g}"] = v
        row["observed"] = c.observed
        rows.append(row)
    return rows
