"""Bijections between natural model parameters and unconstrained vectors,
their Jacobians, and the per-trial linking of random effects, regression
coefficients, and covariates.

A TransformSpec maps each natural parameter slot through one of four
kinds: Identity, plain Log, LogGap (log of the distance to an affine
combination of other slots, e.g. log(a - mu_z - 0.5 s_z)), or the
data-dependent non-decision transform that re-expresses the lower
non-decision bound relative to a subject's fastest response. LogGap
references are resolved on the natural scale, earliest-declared first;
cyclic references are rejected at construction.

A LinkingDesign describes, per trial-level parameter, an affine recipe
over random-effect slots (optionally scaled by trial attributes or
selected by condition) plus an optional covariate row. Recipes act on the
unconstrained scale; the result is pushed through the TransformSpec.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from .errors import ConfigError, DomainError


def _softplus(x):
    return np.logaddexp(0.0, x)


# --------------------------------------------------------------------- #
# transform spec
# --------------------------------------------------------------------- #

class TransformKind(enum.Enum):
    IDENTITY = "identity"
    LOG = "log"
    LOG_GAP = "log-gap"
    DATA_DEPENDENT_TAU = "data-dependent-tau"


@dataclass(frozen=True)
class SlotTransform:
    """One natural-parameter slot: its name, transform kind, and (for gap
    kinds) the referenced slots with coefficients."""

    name: str
    kind: TransformKind
    refs: Tuple[Tuple[str, float], ...] = ()


@dataclass(frozen=True)
class TransformSpec:
    slots: Tuple[SlotTransform, ...]

    def __post_init__(self):
        names = [s.name for s in self.slots]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate slot names in transform spec: {names}")
        index = {n: i for i, n in enumerate(names)}
        for s in self.slots:
            if s.refs and s.kind in (TransformKind.IDENTITY, TransformKind.LOG):
                raise ConfigError(f"slot '{s.name}' of kind {s.kind.value} "
                                  f"cannot reference other slots")
            for ref, _ in s.refs:
                if ref not in index:
                    raise ConfigError(
                        f"slot '{s.name}' references unknown slot '{ref}'")
                if ref == s.name:
                    raise ConfigError(f"slot '{s.name}' references itself")
        object.__setattr__(self, "_index", index)
        object.__setattr__(self, "_order", self._resolution_order())

    def _resolution_order(self):
        deps = {s.name: {r for r, _ in s.refs} for s in self.slots}
        order, placed = [], set()
        while len(order) < len(self.slots):
            progressed = False
            for s in self.slots:
                if s.name in placed:
                    continue
                if deps[s.name] <= placed:
                    order.append(self._index[s.name])
                    placed.add(s.name)
                    progressed = True
            if not progressed:
                cyc = [s.name for s in self.slots if s.name not in placed]
                raise ConfigError(f"cyclic slot references: {cyc}")
        return tuple(order)

    @property
    def names(self) -> Tuple[str, ...]:
        return tuple(s.name for s in self.slots)

    @property
    def dim(self) -> int:
        return len(self.slots)

    def index(self, name: str) -> int:
        return self._index[name]

    @property
    def needs_min_rt(self) -> bool:
        return any(s.kind is TransformKind.DATA_DEPENDENT_TAU
                   for s in self.slots)


def ddm_transform_spec(data_dependent_tau: bool = False) -> TransformSpec:
    """The canonical seven-slot diffusion spec (order matches DdmParams)."""
    tau_kind = (TransformKind.DATA_DEPENDENT_TAU if data_dependent_tau
                else TransformKind.LOG_GAP)
    return TransformSpec((
        SlotTransform("mu_v", TransformKind.IDENTITY),
        SlotTransform("s_v", TransformKind.LOG),
        SlotTransform("a", TransformKind.LOG_GAP,
                      (("mu_z", 1.0), ("s_z", 0.5))),
        SlotTransform("mu_z", TransformKind.LOG_GAP, (("s_z", 0.5),)),
        SlotTransform("s_z", TransformKind.LOG),
        SlotTransform("mu_tau", tau_kind, (("s_tau", 0.5),)),
        SlotTransform("s_tau", TransformKind.LOG),
    ))


def lba_transform_spec(n_accumulators: int = 2) -> TransformSpec:
    """Race spec: threshold as a gap above the start-point range, drifts
    unconstrained (order matches the lba gradient layout)."""
    slots = [
        SlotTransform("b", TransformKind.LOG_GAP, (("A", 1.0),)),
        SlotTransform("A", TransformKind.LOG),
    ]
    slots += [SlotTransform(f"v{i}", TransformKind.IDENTITY)
              for i in range(n_accumulators)]
    slots.append(SlotTransform("tau", TransformKind.LOG))
    return TransformSpec(tuple(slots))


# --------------------------------------------------------------------- #
# forward / inverse / jacobian
# --------------------------------------------------------------------- #

def _gap_of(slot: SlotTransform, natural, index) -> float:
    val = natural[index[slot.name]]
    for ref, coef in slot.refs:
        val -= coef * natural[index[ref]]
    return val


def to_unconstrained(natural, spec: TransformSpec,
                     min_rt: Optional[float] = None) -> np.ndarray:
    """Map natural parameters (in slot order) to the unconstrained scale."""
    natural = np.asarray(natural, dtype=float)
    if natural.shape != (spec.dim,):
        raise ConfigError(f"expected {spec.dim} natural values, "
                          f"got shape {natural.shape}")
    index = spec._index
    alpha = np.empty(spec.dim)
    for i, s in enumerate(spec.slots):
        if s.kind is TransformKind.IDENTITY:
            alpha[i] = natural[i]
        elif s.kind is TransformKind.LOG:
            if natural[i] <= 0:
                raise DomainError(f"slot '{s.name}' must be positive, "
                                  f"got {natural[i]}")
            alpha[i] = math.log(natural[i])
        elif s.kind is TransformKind.LOG_GAP:
            gap = _gap_of(s, natural, index)
            if gap <= 0:
                raise DomainError(f"slot '{s.name}' violates its gap "
                                  f"constraint (gap={gap})")
            alpha[i] = math.log(gap)
        else:
            if min_rt is None:
                raise ConfigError("transform spec contains a data-dependent "
                                  "slot but no min_rt was provided")
            gap = _gap_of(s, natural, index)
            if gap <= 0:
                raise DomainError(f"slot '{s.name}' violates its gap "
                                  f"constraint (gap={gap})")
            if gap >= min_rt:
                raise DomainError(
                    f"lower non-decision bound {gap} must stay below the "
                    f"fastest response {min_rt}")
            alpha[i] = math.log((min_rt - gap) / gap)
    return alpha


def from_unconstrained(alpha, spec: TransformSpec,
                       min_rt: Optional[float] = None) -> np.ndarray:
    """Inverse of to_unconstrained; never emits invariant-violating values."""
    alpha = np.asarray(alpha, dtype=float)
    if alpha.shape != (spec.dim,):
        raise ConfigError(f"expected {spec.dim} unconstrained values, "
                          f"got shape {alpha.shape}")
    index = spec._index
    natural = np.empty(spec.dim)
    for i in spec._order:
        s = spec.slots[i]
        if s.kind is TransformKind.IDENTITY:
            natural[i] = alpha[i]
        elif s.kind is TransformKind.LOG:
            natural[i] = math.exp(alpha[i])
        elif s.kind is TransformKind.LOG_GAP:
            natural[i] = math.exp(alpha[i])
            for ref, coef in s.refs:
                natural[i] += coef * natural[index[ref]]
        else:
            if min_rt is None:
                raise ConfigError("transform spec contains a data-dependent "
                                  "slot but no min_rt was provided")
            natural[i] = min_rt * expit(-alpha[i])
            for ref, coef in s.refs:
                natural[i] += coef * natural[index[ref]]
    return natural


def from_unconstrained_batch(alpha, spec: TransformSpec,
                             min_rt: Optional[float] = None) -> np.ndarray:
    """Row-wise from_unconstrained for an (n, dim) matrix of vectors."""
    alpha = np.atleast_2d(np.asarray(alpha, dtype=float))
    if alpha.shape[1] != spec.dim:
        raise ConfigError(f"expected columns for {spec.dim} slots, "
                          f"got shape {alpha.shape}")
    index = spec._index
    natural = np.empty_like(alpha)
    for i in spec._order:
        s = spec.slots[i]
        if s.kind is TransformKind.IDENTITY:
            natural[:, i] = alpha[:, i]
        elif s.kind is TransformKind.LOG:
            natural[:, i] = np.exp(alpha[:, i])
        elif s.kind is TransformKind.LOG_GAP:
            natural[:, i] = np.exp(alpha[:, i])
            for ref, coef in s.refs:
                natural[:, i] += coef * natural[:, index[ref]]
        else:
            if min_rt is None:
                raise ConfigError("transform spec contains a data-dependent "
                                  "slot but no min_rt was provided")
            natural[:, i] = min_rt * expit(-alpha[:, i])
            for ref, coef in s.refs:
                natural[:, i] += coef * natural[:, index[ref]]
    return natural


def jacobian_natural_wrt_unconstrained(alpha, spec: TransformSpec,
                                       min_rt: Optional[float] = None
                                       ) -> np.ndarray:
    """Full Jacobian d natural / d alpha (triangular in resolution order)."""
    alpha = np.asarray(alpha, dtype=float)
    index = spec._index
    jac = np.zeros((spec.dim, spec.dim))
    for i in spec._order:
        s = spec.slots[i]
        if s.kind is TransformKind.IDENTITY:
            jac[i, i] = 1.0
            continue
        if s.kind is TransformKind.LOG or s.kind is TransformKind.LOG_GAP:
            jac[i, i] = math.exp(alpha[i])
        else:
            if min_rt is None:
                raise ConfigError("transform spec contains a data-dependent "
                                  "slot but no min_rt was provided")
            jac[i, i] = -min_rt * expit(alpha[i]) * expit(-alpha[i])
        for ref, coef in s.refs:
            jac[i] += coef * jac[index[ref]]
    return jac


def log_abs_det_jacobian(alpha, spec: TransformSpec,
                         min_rt: Optional[float] = None) -> float:
    """log |det d natural / d alpha| (the triangular determinant)."""
    alpha = np.asarray(alpha, dtype=float)
    total = 0.0
    for i, s in enumerate(spec.slots):
        if s.kind is TransformKind.IDENTITY:
            continue
        if s.kind is TransformKind.LOG or s.kind is TransformKind.LOG_GAP:
            total += alpha[i]
        else:
            if min_rt is None:
                raise ConfigError("transform spec contains a data-dependent "
                                  "slot but no min_rt was provided")
            total += (math.log(min_rt) - _softplus(alpha[i])
                      - _softplus(-alpha[i]))
    return float(total)


# --------------------------------------------------------------------- #
# data-dependent non-decision slot, as a vector-level rewrite
# --------------------------------------------------------------------- #

def tau_transform_data(alpha, min_rt: float, slot: int = 5
                       ) -> Tuple[np.ndarray, float]:
    """Rewrite the log-lower-bound slot of an effects vector relative to
    the subject's fastest response.

    Input slot value is log(mu_tau - 0.5 s_tau); output is
    log((min_rt - bound)/bound), unconstrained. Returns the rewritten
    vector and the log-Jacobian of this forward map.
    """
    alpha = np.asarray(alpha, dtype=float).copy()
    bound = math.exp(alpha[slot])
    if bound >= min_rt:
        raise DomainError(
            f"lower non-decision bound {bound} must stay below the fastest "
            f"response {min_rt} (the likelihood would be zero)")
    alpha[slot] = math.log(min_rt - bound) - math.log(bound)
    log_jac = math.log(min_rt) - math.log(min_rt - bound)
    return alpha, log_jac


def tau_transform_data_inverse(alpha_tilde, min_rt: float, slot: int = 5
                               ) -> np.ndarray:
    """Undo tau_transform_data exactly."""
    alpha = np.asarray(alpha_tilde, dtype=float).copy()
    alpha[slot] = math.log(min_rt) - _softplus(alpha[slot])
    return alpha


def tau_slot_log_jacobian(alpha_tilde_slot):
    """log |d alpha_slot / d alpha_tilde_slot| for the data-dependent slot."""
    return -_softplus(-np.asarray(alpha_tilde_slot, dtype=float))


def tau_slot_log_jacobian_grad(alpha_tilde_slot):
    """Derivative of tau_slot_log_jacobian in the rewritten coordinate."""
    return expit(-np.asarray(alpha_tilde_slot, dtype=float))


# --------------------------------------------------------------------- #
# linking design
# --------------------------------------------------------------------- #

@dataclass(frozen=True)
class RecipeTerm:
    """One affine contribution: coefficient * attribute * alpha[slot].

    When select_map is given the slot is chosen per trial by looking up
    attrs[select_by] in the map; otherwise `slot` is used directly.
    `attribute` names a numeric trial attribute used as a multiplier
    (None means 1).
    """

    slot: Optional[str] = None
    attribute: Optional[str] = None
    coefficient: float = 1.0
    select_by: Optional[str] = None
    select_map: Optional[Mapping[str, str]] = None

    def __post_init__(self):
        if (self.slot is None) == (self.select_map is None):
            raise ConfigError(
                "a recipe term needs exactly one of 'slot' or 'select_map'")
        if (self.select_map is None) != (self.select_by is None):
            raise ConfigError(
                "'select_by' and 'select_map' must be given together")

    def slots_mentioned(self):
        if self.select_map is not None:
            return tuple(self.select_map.values())
        return (self.slot,)


@dataclass(frozen=True)
class Recipe:
    terms: Tuple[RecipeTerm, ...]
    beta_row: Optional[str] = None


@dataclass(frozen=True)
class LinkingDesign:
    """Per trial-parameter recipes, the random-effect slot layout, and the
    declared covariate rows."""

    alpha_names: Tuple[str, ...]
    recipes: Mapping[str, Recipe]
    beta_rows: Tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "alpha_names", tuple(self.alpha_names))
        object.__setattr__(self, "recipes", dict(self.recipes))
        if len(set(self.alpha_names)) != len(self.alpha_names):
            raise ConfigError(
                f"duplicate random-effect slots: {self.alpha_names}")
        rows = tuple(self.beta_rows)
        if len(set(rows)) != len(rows):
            raise ConfigError(f"duplicate covariate rows declared: {rows}")
        object.__setattr__(self, "beta_rows", rows)
        used_rows = {r.beta_row for r in self.recipes.values()
                     if r.beta_row is not None}
        undeclared = used_rows - set(rows)
        if undeclared:
            raise ConfigError(
                f"covariate rows used but not declared: {sorted(undeclared)}")
        unused = set(rows) - used_rows
        if unused:
            raise ConfigError(
                f"covariate rows declared but never used: {sorted(unused)}")
        names = set(self.alpha_names)
        used_slots = set()
        for pname, recipe in self.recipes.items():
            for term in recipe.terms:
                for slot in term.slots_mentioned():
                    if slot not in names:
                        raise ConfigError(
                            f"recipe '{pname}' references unknown "
                            f"random-effect slot '{slot}'")
                    used_slots.add(slot)
        idle = names - used_slots
        if idle:
            raise ConfigError(
                f"random-effect slots never used by any recipe: {sorted(idle)}")

    @property
    def n_beta_rows(self) -> int:
        return len(self.beta_rows)

    @property
    def n_effects(self) -> int:
        return len(self.alpha_names)

    def validate_against(self, trial_spec: TransformSpec) -> None:
        """Refuse designs that do not cover the trial parameters exactly."""
        missing = [n for n in trial_spec.names if n not in self.recipes]
        if missing:
            raise ConfigError(f"no recipe for trial parameters: {missing}")
        extra = [n for n in self.recipes if n not in trial_spec.names]
        if extra:
            raise ConfigError(f"recipes for unknown trial parameters: {extra}")

    def link_matrices(self, attrs: Mapping, trial_spec: TransformSpec
                      ) -> Tuple[np.ndarray, np.ndarray]:
        """Matrices (L, R) with omega = L @ alpha + R @ (beta @ x)."""
        a_index = {n: i for i, n in enumerate(self.alpha_names)}
        r_index = {n: i for i, n in enumerate(self.beta_rows)}
        big_l = np.zeros((trial_spec.dim, self.n_effects))
        big_r = np.zeros((trial_spec.dim, len(self.beta_rows)))
        for p, pname in enumerate(trial_spec.names):
            recipe = self.recipes[pname]
            for term in recipe.terms:
                if term.select_map is not None:
                    if term.select_by not in attrs:
                        raise ConfigError(
                            f"trial attribute '{term.select_by}' required by "
                            f"recipe '{pname}' is missing")
                    key = attrs[term.select_by]
                    if key not in term.select_map:
                        raise ConfigError(
                            f"recipe '{pname}' has no slot for "
                            f"{term.select_by}={key!r}")
                    slot = term.select_map[key]
                else:
                    slot = term.slot
                mult = term.coefficient
                if term.attribute is not None:
                    if term.attribute not in attrs:
                        raise ConfigError(
                            f"trial attribute '{term.attribute}' required by "
                            f"recipe '{pname}' is missing")
                    mult *= float(attrs[term.attribute])
                big_l[p, a_index[slot]] += mult
            if recipe.beta_row is not None:
                big_r[p, r_index[recipe.beta_row]] = 1.0
        return big_l, big_r


def elementwise_design(names: Sequence[str],
                       covariate_rows: Optional[Sequence[str]] = None
                       ) -> LinkingDesign:
    """The identity linking used by the plain hierarchical model:
    omega = alpha (+ beta X on the slots named in covariate_rows)."""
    covariate_rows = tuple(covariate_rows or ())
    recipes = {}
    for n in names:
        recipes[n] = Recipe(
            terms=(RecipeTerm(slot=n),),
            beta_row=n if n in covariate_rows else None,
        )
    return LinkingDesign(alpha_names=tuple(names), recipes=recipes,
                         beta_rows=covariate_rows)


def link_trial(alpha_j, beta, x_ij, attrs: Mapping, design: LinkingDesign,
               spec: TransformSpec,
               min_rt: Optional[float] = None) -> np.ndarray:
    """Natural trial-level parameters for one trial.

    Applies the affine recipes on the unconstrained scale, then inverts
    the per-slot transforms. `beta` is a (n_beta_rows, d) matrix and
    `x_ij` the trial's covariate vector; both may be None when the
    design declares no covariate rows.
    """
    alpha_j = np.asarray(alpha_j, dtype=float)
    if alpha_j.shape != (design.n_effects,):
        raise ConfigError(f"effects vector has shape {alpha_j.shape}, design "
                          f"declares {design.n_effects} slots")
    big_l, big_r = design.link_matrices(attrs, spec)
    omega = big_l @ alpha_j
    if design.n_beta_rows:
        if beta is None or x_ij is None:
            raise ConfigError("design declares covariate rows but beta or "
                              "the covariate vector is missing")
        beta = np.asarray(beta, dtype=float)
        if beta.shape[0] != design.n_beta_rows:
            raise ConfigError(
                f"beta has {beta.shape[0]} rows, design declares "
                f"{design.n_beta_rows}")
        omega = omega + big_r @ (beta @ np.asarray(x_ij, dtype=float))
    return from_unconstrained(omega, spec, min_rt)
