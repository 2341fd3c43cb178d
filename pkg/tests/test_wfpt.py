"""Tests for the simple-diffusion first-passage density and its series rules.

Frozen reference numbers were computed with mpmath at 50 significant digits
(series summed symbolically from the formulas, not through the package);
the generating snippets live in tests/oracles/high_precision_notes.md.
"""

import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from eamfit.errors import DomainError
from eamfit.wfpt import (
    KAPPA_CAP,
    Boundary,
    Representation,
    SeriesPlan,
    SimpleDiffusionParams,
    choose_representation,
    kappa_large_time,
    kappa_small_time,
    switching_indicator,
    truncation_diagnostics,
    wfpt_density,
    wfpt_unit_density,
)

FIXTURES = Path(__file__).parent / "fixtures"

# mpmath (dps=50) evaluations of the switching rule and the two series.
LAMBDA_SMALL_CASE = -13.1991426949      # t_scaled=0.02, eps=1e-10
LAMBDA_LARGE_CASE = 15.4494404544       # t_scaled=5.0,  eps=1e-10
KAPPA_SMALL_CASE = 3                    # t_scaled=0.02, eps=1e-10, small-time rule
KAPPA_LARGE_CASE = 1                    # t_scaled=5.0,  eps=1e-10, large-time rule
UNIT_DENSITY_T05_W05 = 0.2664226763648635   # both series, kappa=50
DENSITY_V1_A2_W03_T04 = 0.2710823116680828  # lower boundary, kappa=200 reference


def _plan(rep, kappa, eps=1e-10):
    return SeriesPlan(rep, kappa, eps)


# --------------------------------------------------------------------------- #
# representation switching rule
# --------------------------------------------------------------------------- #

class TestChooseRepresentation:
    """Automatic small-time / large-time selection and truncation lengths."""

    def test_small_time_example(self):
        plan = choose_representation(0.02, 1e-10)
        assert plan.representation is Representation.SMALL_TIME
        assert plan.kappa == KAPPA_SMALL_CASE, f"kappa {plan.kappa} != frozen {KAPPA_SMALL_CASE}"
        assert switching_indicator(0.02, 1e-10) == pytest.approx(LAMBDA_SMALL_CASE, rel=1e-9)

    def test_large_time_example(self):
        plan = choose_representation(5.0, 1e-10)
        assert plan.representation is Representation.LARGE_TIME
        assert plan.kappa == KAPPA_LARGE_CASE
        assert switching_indicator(5.0, 1e-10) == pytest.approx(LAMBDA_LARGE_CASE, rel=1e-9)

    @pytest.mark.parametrize("t", [0.01, 0.1, 0.5, 1.0, 4.0])
    @pytest.mark.parametrize("eps", [1e-6, 1e-10, 0.01])
    def test_kappa_floors(self, t, eps):
        assert kappa_small_time(t, eps) >= math.ceil(1 + math.sqrt(t))
        assert kappa_large_time(t, eps) >= math.ceil(1 / (math.pi * math.sqrt(t)))

    @pytest.mark.parametrize("t,eps", [(0.0, 1e-10), (-1.0, 1e-10), (0.5, 0.0), (0.5, 0.02), (0.5, -1e-3)])
    def test_domain_errors(self, t, eps):
        with pytest.raises(DomainError):
            choose_representation(t, eps)

    def test_negative_sqrt_arguments_treated_as_zero(self):
        # At eps=0.01 and very large t both square-root arguments go negative;
        # the indicator degrades to the bare constant and stays finite.
        assert switching_indicator(500.0, 0.01) == pytest.approx(2.0)
        plan = choose_representation(500.0, 0.01)
        assert plan.representation is Representation.LARGE_TIME
        assert plan.kappa == 1

    def test_kappa_cap_counter(self):
        truncation_diagnostics.reset()
        # tiny t with tiny eps drives the small-time length over the cap
        k = kappa_small_time(1e9, 1e-10)
        assert k == KAPPA_CAP
        assert truncation_diagnostics.kappa_cap_hits == 1
        truncation_diagnostics.reset()


# --------------------------------------------------------------------------- #
# unit-scale density series
# --------------------------------------------------------------------------- #

class TestUnitDensity:
    """Truncated series values on the unit scale."""

    def test_cross_representation_frozen_value(self):
        fl = wfpt_unit_density(0.5, 0.5, _plan(Representation.LARGE_TIME, 50))
        fs = wfpt_unit_density(0.5, 0.5, _plan(Representation.SMALL_TIME, 50))
        assert abs(fl - fs) <= 1e-9, f"series disagree: {fl} vs {fs}"
        assert fl == pytest.approx(UNIT_DENSITY_T05_W05, abs=1e-12)

    @pytest.mark.parametrize("t", [0.1, 0.3, 0.8, 2.0])
    def test_symmetry_at_half(self, t):
        plan = choose_representation(t, 1e-10)
        w = 0.5
        assert wfpt_unit_density(t, w, plan) == wfpt_unit_density(t, 1.0 - w, plan)

    def test_decay_beyond_mode(self):
        # against a kappa=200 large-time reference on an increasing tail grid
        ref_plan = _plan(Representation.LARGE_TIME, 200)
        ts = np.linspace(1.0, 6.0, 25)
        vals = [wfpt_unit_density(t, 0.35, ref_plan) for t in ts]
        assert all(a > b for a, b in zip(vals, vals[1:])), "tail is not monotone decreasing"
        auto = [wfpt_unit_density(t, 0.35, choose_representation(t, 1e-10)) for t in ts]
        np.testing.assert_allclose(auto, vals, atol=1e-12)

    def test_negative_truncation_artifact_clamped(self):
        # one large-time term at w where sin is negative gives a negative sum
        val = wfpt_unit_density(1e-3, 0.9, _plan(Representation.LARGE_TIME, 2))
        assert val == 0.0

    @given(
        t=st.floats(0.05, 3.0),
        w=st.floats(0.1, 0.9),
        eps=st.floats(1e-12, 0.01),
    )
    @settings(max_examples=200, deadline=None)
    def test_rule_matches_high_kappa_reference(self, t, w, eps):
        plan = choose_representation(t, eps)
        val = wfpt_unit_density(t, w, plan)
        ref = wfpt_unit_density(t, w, _plan(plan.representation, 200))
        assert abs(val - ref) <= 10 * eps, f"truncation error {abs(val - ref)} above 10*eps at t={t}, w={w}"


# --------------------------------------------------------------------------- #
# full density
# --------------------------------------------------------------------------- #

class TestWfptDensity:
    """Scaled density, reflection, floors, and oracle comparisons."""

    def test_frozen_reference_value(self):
        p = SimpleDiffusionParams(v=1.0, a=2.0, w=0.3, t_d=0.4)
        assert wfpt_density(Boundary.LOWER, p) == pytest.approx(DENSITY_V1_A2_W03_T04, rel=1e-10)

    @pytest.mark.parametrize("t", [0.1, 0.4, 1.0, 2.5])
    def test_reflection_symmetry_driftless(self, t):
        p = SimpleDiffusionParams(v=0.0, a=1.0, w=0.5, t_d=t)
        assert wfpt_density(Boundary.LOWER, p) == wfpt_density(Boundary.UPPER, p)

    def test_reflection_identity_exact(self):
        for v, w in [(1.3, 0.25), (-0.7, 0.6), (2.0, 0.8)]:
            p = SimpleDiffusionParams(v=v, a=1.7, w=w, t_d=0.6)
            q = SimpleDiffusionParams(v=-v, a=1.7, w=1.0 - w, t_d=0.6)
            assert wfpt_density(Boundary.UPPER, p) == wfpt_density(Boundary.LOWER, q)

    def test_symmetric_mass_is_half(self):
        mass, err = quad(
            lambda t: wfpt_density(Boundary.LOWER, SimpleDiffusionParams(0.0, 1.0, 0.5, t)),
            1e-9, 30.0, limit=200,
        )
        assert mass == pytest.approx(0.5, abs=1e-4), f"lower mass {mass} (quad err {err})"

    def test_mass_sums_to_one(self):
        p = dict(v=0.8, a=1.5, w=0.4)
        total = 0.0
        for c in (Boundary.LOWER, Boundary.UPPER):
            m, _ = quad(
                lambda t: wfpt_density(c, SimpleDiffusionParams(t_d=t, **p)),
                1e-9, 40.0, limit=300,
            )
            total += m
        assert total == pytest.approx(1.0, abs=1e-4)

    def test_density_floor(self):
        p = SimpleDiffusionParams(v=5.0, a=1.0, w=0.5, t_d=300.0)
        assert wfpt_density(Boundary.LOWER, p) == 0.0

    def test_invalid_params_raise(self):
        with pytest.raises(DomainError):
            SimpleDiffusionParams(v=1.0, a=-1.0, w=0.5, t_d=0.5)
        with pytest.raises(DomainError):
            SimpleDiffusionParams(v=1.0, a=1.0, w=1.5, t_d=0.5)
        with pytest.raises(DomainError):
            SimpleDiffusionParams(v=1.0, a=1.0, w=0.5, t_d=0.0)

    def test_against_euler_path_oracle(self):
        """Density at t_d=0.4 vs the frozen 1e7-path Euler histogram (dt=1e-5).

        Discretely monitored paths overshoot absorbing boundaries: each
        boundary effectively sits 0.5826*sqrt(dt) further out (the
        half-order continuity correction for discrete barrier checks).
        The comparison therefore uses the analytic density with both
        boundaries shifted outward; without the shift the total-mass
        check misses by ~9 SE at this path count.
        """
        fix_path = FIXTURES / "euler_simple_diffusion.json"
        if not fix_path.exists():
            pytest.skip("path-simulation fixture not generated (tests/oracles/euler_simple_diffusion.py)")
        fix = json.loads(fix_path.read_text())
        n = fix["n_paths"]
        width = fix["bin_width"]
        centers = fix["bin_centers"]
        counts = fix["lower_bin_counts"]
        idx = centers.index(0.4)
        p_hat = counts[idx] / n
        se = math.sqrt(p_hat * (1 - p_hat) / n)
        pars = fix["params"]
        shift = 0.5826 * math.sqrt(fix["dt"])
        a_eff = pars["a"] + 2 * shift
        w_eff = (pars["w"] * pars["a"] + shift) / a_eff
        lo, hi = 0.4 - width / 2, 0.4 + width / 2
        mass, _ = quad(
            lambda t: wfpt_density(Boundary.LOWER, SimpleDiffusionParams(pars["v"], a_eff, w_eff, t)),
            lo, hi,
        )
        assert abs(mass - p_hat) <= 3 * se, (
            f"bin mass {mass:.6f} vs simulated {p_hat:.6f} (3 SE = {3 * se:.6f})"
        )
        # secondary check: total lower-boundary mass up to the simulation cap
        cap_mass, _ = quad(
            lambda t: wfpt_density(Boundary.LOWER, SimpleDiffusionParams(pars["v"], a_eff, w_eff, t)),
            1e-9, fix["t_cap"], limit=200,
        )
        p_cap = fix["lower_total_by_cap"] / n
        se_cap = math.sqrt(p_cap * (1 - p_cap) / n)
        assert abs(cap_mass - p_cap) <= 3 * se_cap, (
            f"cap mass {cap_mass:.6f} vs simulated {p_cap:.6f} (3 SE = {3 * se_cap:.6f})"
        )
