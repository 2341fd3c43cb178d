"""Tests for the parameter transforms and the trial-level linking design."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eamfit.errors import ConfigError, DomainError
from eamfit.transforms import (
    LinkingDesign,
    Recipe,
    RecipeTerm,
    SlotTransform,
    TransformKind,
    TransformSpec,
    ddm_transform_spec,
    elementwise_design,
    from_unconstrained,
    jacobian_natural_wrt_unconstrained,
    lba_transform_spec,
    link_trial,
    log_abs_det_jacobian,
    tau_slot_log_jacobian,
    tau_slot_log_jacobian_grad,
    tau_transform_data,
    tau_transform_data_inverse,
    to_unconstrained,
)

DDM_SPEC = ddm_transform_spec()
DDM_DATA_SPEC = ddm_transform_spec(data_dependent_tau=True)
LBA_SPEC = lba_transform_spec(3)


def random_ddm_natural(rng):
    """A valid seven-parameter diffusion vector, built so every gap holds."""
    s_z = rng.uniform(0.05, 0.6)
    mu_z = 0.5 * s_z + rng.uniform(0.05, 1.0)
    a = mu_z + 0.5 * s_z + rng.uniform(0.05, 1.5)
    s_tau = rng.uniform(0.02, 0.3)
    mu_tau = 0.5 * s_tau + rng.uniform(0.05, 0.8)
    return np.array([rng.uniform(-5.0, 5.0), rng.uniform(0.1, 2.5),
                     a, mu_z, s_z, mu_tau, s_tau])


def random_lba_natural(rng):
    start = rng.uniform(0.1, 1.5)
    b = start + rng.uniform(0.05, 1.5)
    return np.array([b, start, rng.uniform(-4, 4), rng.uniform(-4, 4),
                     rng.uniform(-4, 4), rng.uniform(0.05, 0.6)])


# --------------------------------------------------------------------- #
# spec construction
# --------------------------------------------------------------------- #

class TestSpecConstruction:
    """Validation happens at construction, not at first use."""

    def test_duplicate_names_rejected(self):
        with pytest.raises(ConfigError, match="duplicate"):
            TransformSpec((SlotTransform("x", TransformKind.LOG),
                           SlotTransform("x", TransformKind.LOG)))

    def test_unknown_reference_rejected(self):
        with pytest.raises(ConfigError, match="unknown slot"):
            TransformSpec((SlotTransform("x", TransformKind.LOG_GAP,
                                         (("y", 1.0),)),))

    def test_self_reference_rejected(self):
        with pytest.raises(ConfigError, match="references itself"):
            TransformSpec((SlotTransform("x", TransformKind.LOG_GAP,
                                         (("x", 1.0),)),))

    def test_cycle_rejected(self):
        with pytest.raises(ConfigError, match="cyclic"):
            TransformSpec((
                SlotTransform("x", TransformKind.LOG_GAP, (("y", 1.0),)),
                SlotTransform("y", TransformKind.LOG_GAP, (("x", 1.0),)),
            ))

    def test_refs_on_plain_kinds_rejected(self):
        with pytest.raises(ConfigError, match="cannot reference"):
            TransformSpec((
                SlotTransform("y", TransformKind.LOG),
                SlotTransform("x", TransformKind.LOG, (("y", 1.0),)),
            ))

    def test_ddm_spec_layout(self):
        assert DDM_SPEC.names == ("mu_v", "s_v", "a", "mu_z", "s_z",
                                  "mu_tau", "s_tau")
        assert DDM_SPEC.dim == 7
        assert not DDM_SPEC.needs_min_rt
        assert DDM_DATA_SPEC.needs_min_rt

    def test_lba_spec_layout(self):
        assert LBA_SPEC.names == ("b", "A", "v0", "v1", "v2", "tau")


# --------------------------------------------------------------------- #
# forward / inverse
# --------------------------------------------------------------------- #

class TestRoundTrip:
    """to_unconstrained and from_unconstrained are exact inverses."""

    def test_boundary_gap_value(self):
        # a=2, mu_z=1, s_z=0.5 leaves a gap of 0.75 above the start band
        natural = np.array([0.3, 1.0, 2.0, 1.0, 0.5, 0.4, 0.1])
        alpha = to_unconstrained(natural, DDM_SPEC)
        assert math.isclose(alpha[DDM_SPEC.index("a")], math.log(0.75),
                            rel_tol=1e-15), \
            f"boundary slot {alpha[2]} != log(0.75)"
        assert math.isclose(alpha[DDM_SPEC.index("mu_z")], math.log(0.75),
                            rel_tol=1e-15)

    def test_ddm_round_trip_bulk(self):
        rng = np.random.default_rng(7)
        for _ in range(1000):
            natural = random_ddm_natural(rng)
            alpha = to_unconstrained(natural, DDM_SPEC)
            back = from_unconstrained(alpha, DDM_SPEC)
            err = np.max(np.abs(back - natural))
            assert err <= 1e-12, f"round trip error {err} at {natural}"

    def test_ddm_data_tau_round_trip(self):
        rng = np.random.default_rng(8)
        for _ in range(300):
            natural = random_ddm_natural(rng)
            min_rt = (natural[5] - 0.5 * natural[6]) + rng.uniform(0.02, 0.5)
            alpha = to_unconstrained(natural, DDM_DATA_SPEC, min_rt=min_rt)
            back = from_unconstrained(alpha, DDM_DATA_SPEC, min_rt=min_rt)
            assert np.max(np.abs(back - natural)) <= 1e-12

    @given(start=st.floats(0.05, 2.0), gap=st.floats(0.01, 2.0),
           v=st.floats(-6.0, 6.0), tau=st.floats(0.01, 1.0))
    @settings(deadline=None, max_examples=200)
    def test_lba_round_trip_property(self, start, gap, v, tau):
        spec = lba_transform_spec(2)
        natural = np.array([start + gap, start, v, -v, tau])
        alpha = to_unconstrained(natural, spec)
        back = from_unconstrained(alpha, spec)
        assert np.max(np.abs(back - natural)) <= 1e-12

    def test_inverse_respects_invariants(self):
        # arbitrary unconstrained input must always decode to a legal point
        rng = np.random.default_rng(11)
        for _ in range(500):
            alpha = rng.normal(scale=3.0, size=7)
            nat = from_unconstrained(alpha, DDM_SPEC)
            assert nat[4] > 0 and nat[6] > 0 and nat[1] > 0
            assert nat[3] - 0.5 * nat[4] > 0
            assert nat[2] > nat[3] + 0.5 * nat[4]
            assert nat[5] - 0.5 * nat[6] > 0

    def test_data_tau_inverse_bounded_by_fastest_response(self):
        rng = np.random.default_rng(12)
        for _ in range(200):
            alpha = rng.normal(scale=3.0, size=7)
            nat = from_unconstrained(alpha, DDM_DATA_SPEC, min_rt=0.41)
            assert 0.0 < nat[5] - 0.5 * nat[6] < 0.41

    def test_forward_rejects_invalid_naturals(self):
        bad_a = np.array([0.0, 1.0, 1.2, 1.0, 0.5, 0.4, 0.1])
        with pytest.raises(DomainError, match="'a'"):
            to_unconstrained(bad_a, DDM_SPEC)
        bad_sv = np.array([0.0, -1.0, 2.0, 1.0, 0.5, 0.4, 0.1])
        with pytest.raises(DomainError, match="'s_v'"):
            to_unconstrained(bad_sv, DDM_SPEC)

    def test_missing_min_rt_is_a_config_error(self):
        natural = np.array([0.3, 1.0, 2.0, 1.0, 0.5, 0.4, 0.1])
        with pytest.raises(ConfigError, match="min_rt"):
            to_unconstrained(natural, DDM_DATA_SPEC)
        with pytest.raises(ConfigError, match="min_rt"):
            from_unconstrained(np.zeros(7), DDM_DATA_SPEC)

    def test_wrong_length_rejected(self):
        with pytest.raises(ConfigError, match="expected 7"):
            to_unconstrained(np.ones(6), DDM_SPEC)


# --------------------------------------------------------------------- #
# jacobians
# --------------------------------------------------------------------- #

def fd_jacobian(alpha, spec, min_rt=None, h=1e-6):
    dim = spec.dim
    jac = np.zeros((dim, dim))
    for k in range(dim):
        hi = alpha.copy()
        lo = alpha.copy()
        hi[k] += h
        lo[k] -= h
        jac[:, k] = (from_unconstrained(hi, spec, min_rt)
                     - from_unconstrained(lo, spec, min_rt)) / (2 * h)
    return jac


class TestJacobian:
    """Analytic Jacobians against central differences and slogdet."""

    @pytest.mark.parametrize("seed", range(5))
    def test_ddm_jacobian_matches_fd(self, seed):
        rng = np.random.default_rng(100 + seed)
        for _ in range(10):
            alpha = to_unconstrained(random_ddm_natural(rng), DDM_SPEC)
            jac = jacobian_natural_wrt_unconstrained(alpha, DDM_SPEC)
            ref = fd_jacobian(alpha, DDM_SPEC)
            rel = (np.linalg.norm(jac - ref, "fro")
                   / np.linalg.norm(ref, "fro"))
            assert rel <= 1e-7, f"jacobian relative error {rel}"

    def test_data_tau_jacobian_matches_fd(self):
        rng = np.random.default_rng(200)
        for _ in range(20):
            natural = random_ddm_natural(rng)
            min_rt = (natural[5] - 0.5 * natural[6]) + rng.uniform(0.05, 0.4)
            alpha = to_unconstrained(natural, DDM_DATA_SPEC, min_rt=min_rt)
            jac = jacobian_natural_wrt_unconstrained(alpha, DDM_DATA_SPEC,
                                                     min_rt=min_rt)
            ref = fd_jacobian(alpha, DDM_DATA_SPEC, min_rt=min_rt)
            rel = (np.linalg.norm(jac - ref, "fro")
                   / np.linalg.norm(ref, "fro"))
            assert rel <= 1e-7, f"jacobian relative error {rel}"

    def test_lba_jacobian_matches_fd(self):
        rng = np.random.default_rng(300)
        for _ in range(20):
            alpha = to_unconstrained(random_lba_natural(rng), LBA_SPEC)
            jac = jacobian_natural_wrt_unconstrained(alpha, LBA_SPEC)
            ref = fd_jacobian(alpha, LBA_SPEC)
            rel = (np.linalg.norm(jac - ref, "fro")
                   / np.linalg.norm(ref, "fro"))
            assert rel <= 1e-7

    def test_log_det_agrees_with_slogdet(self):
        rng = np.random.default_rng(400)
        for spec, min_rt in ((DDM_SPEC, None), (DDM_DATA_SPEC, 0.5),
                             (LBA_SPEC, None)):
            for _ in range(20):
                alpha = rng.normal(scale=1.5, size=spec.dim)
                jac = jacobian_natural_wrt_unconstrained(alpha, spec,
                                                         min_rt=min_rt)
                _, ref = np.linalg.slogdet(jac)
                val = log_abs_det_jacobian(alpha, spec, min_rt=min_rt)
                assert math.isclose(val, ref, rel_tol=1e-10, abs_tol=1e-12), \
                    f"log|J| {val} vs slogdet {ref}"


# --------------------------------------------------------------------- #
# data-dependent non-decision rewrite
# --------------------------------------------------------------------- #

class TestTauDataRewrite:

    def test_midpoint_maps_to_zero(self):
        min_rt = 0.43
        alpha = np.zeros(7)
        alpha[5] = math.log(min_rt / 2)
        tilde, log_jac = tau_transform_data(alpha, min_rt)
        # exp(log(m/2)) costs an ulp, so exact zero is out of reach
        assert abs(tilde[5]) <= 1e-12, \
            f"midpoint should map to 0, got {tilde[5]}"
        assert math.isclose(log_jac, math.log(2.0), rel_tol=1e-14)
        # untouched slots pass through unchanged
        assert np.all(tilde[:5] == 0.0) and tilde[6] == 0.0

    def test_bound_at_or_above_fastest_response_rejected(self):
        alpha = np.zeros(7)
        alpha[5] = math.log(0.5)
        with pytest.raises(DomainError, match="fastest"):
            tau_transform_data(alpha, 0.5)
        with pytest.raises(DomainError, match="fastest"):
            tau_transform_data(alpha, 0.4)

    def test_inverse_recovers_exactly(self):
        rng = np.random.default_rng(21)
        for _ in range(200):
            min_rt = rng.uniform(0.2, 1.0)
            alpha = rng.normal(size=7)
            alpha[5] = math.log(min_rt * rng.uniform(0.05, 0.95))
            tilde, _ = tau_transform_data(alpha, min_rt)
            back = tau_transform_data_inverse(tilde, min_rt)
            assert np.max(np.abs(back - alpha)) <= 1e-12

    def test_forward_log_jacobian_matches_fd(self):
        min_rt = 0.61
        rng = np.random.default_rng(22)
        h = 1e-7
        for _ in range(50):
            alpha = np.zeros(7)
            alpha[5] = math.log(min_rt * rng.uniform(0.05, 0.95))
            _, log_jac = tau_transform_data(alpha, min_rt)
            hi = alpha.copy()
            lo = alpha.copy()
            hi[5] += h
            lo[5] -= h
            fd = (tau_transform_data(hi, min_rt)[0][5]
                  - tau_transform_data(lo, min_rt)[0][5]) / (2 * h)
            assert math.isclose(math.exp(log_jac), abs(fd), rel_tol=1e-6), \
                f"|d tilde/d alpha| {math.exp(log_jac)} vs fd {fd}"

    def test_slot_log_jacobian_and_grad(self):
        # reverse-direction jacobian of the rewritten coordinate
        tilde = np.linspace(-4, 4, 41)
        min_rt = 0.8
        for t in tilde:
            alpha6 = math.log(min_rt) - math.log1p(math.exp(t))
            _, fwd = tau_transform_data(
                np.array([0, 0, 0, 0, 0, alpha6, 0.0]), min_rt)
            assert math.isclose(tau_slot_log_jacobian(t), -fwd,
                                rel_tol=1e-10, abs_tol=1e-12)
        h = 1e-6
        fd = (tau_slot_log_jacobian(tilde + h)
              - tau_slot_log_jacobian(tilde - h)) / (2 * h)
        assert np.allclose(tau_slot_log_jacobian_grad(tilde), fd, atol=1e-8)

    def test_rewritten_spec_agrees_with_manual_rewrite(self):
        # decoding the rewritten vector under the data-dependent spec equals
        # undoing the rewrite and decoding under the plain spec
        rng = np.random.default_rng(23)
        for _ in range(100):
            min_rt = rng.uniform(0.3, 1.2)
            natural = random_ddm_natural(rng)
            natural[5] = 0.5 * natural[6] + rng.uniform(0.02, 0.9) * min_rt
            alpha = to_unconstrained(natural, DDM_SPEC)
            tilde, _ = tau_transform_data(alpha, min_rt)
            via_spec = from_unconstrained(tilde, DDM_DATA_SPEC, min_rt=min_rt)
            via_plain = from_unconstrained(alpha, DDM_SPEC)
            assert np.max(np.abs(via_spec - via_plain)) <= 1e-12


# --------------------------------------------------------------------- #
# linking design
# --------------------------------------------------------------------- #

class TestLinkingDesign:

    def test_identity_link_without_covariates(self):
        design = elementwise_design(DDM_SPEC.names)
        rng = np.random.default_rng(31)
        alpha = to_unconstrained(random_ddm_natural(rng), DDM_SPEC)
        out = link_trial(alpha, None, None, {}, design, DDM_SPEC)
        ref = from_unconstrained(alpha, DDM_SPEC)
        assert np.array_equal(out, ref)

    def test_zero_beta_equals_identity_link(self):
        design = elementwise_design(DDM_SPEC.names,
                                    covariate_rows=["mu_v", "a"])
        rng = np.random.default_rng(32)
        alpha = to_unconstrained(random_ddm_natural(rng), DDM_SPEC)
        beta = np.zeros((2, 3))
        x = rng.normal(size=3)
        out = link_trial(alpha, beta, x, {}, design, DDM_SPEC)
        assert np.allclose(out, from_unconstrained(alpha, DDM_SPEC),
                           rtol=0, atol=0)

    def test_covariate_shift_on_log_slot(self):
        # beta row (0.5,), covariate (2.0,), slot value 0: exp(0 + 1) = e
        spec = TransformSpec((SlotTransform("scale", TransformKind.LOG),))
        design = elementwise_design(["scale"], covariate_rows=["scale"])
        out = link_trial(np.array([0.0]), np.array([[0.5]]),
                         np.array([2.0]), {}, design, spec)
        assert math.isclose(out[0], math.e, rel_tol=1e-15), \
            f"expected e, got {out[0]}"

    def test_attribute_multiplier_drops_out_at_zero(self):
        spec = TransformSpec((SlotTransform("drift", TransformKind.IDENTITY),))
        design = LinkingDesign(
            alpha_names=("v_base", "v_slope"),
            recipes={"drift": Recipe(terms=(
                RecipeTerm(slot="v_base"),
                RecipeTerm(slot="v_slope", attribute="tilt"),
            ))},
        )
        alpha = np.array([1.3, -0.7])
        out0 = link_trial(alpha, None, None, {"tilt": 0.0}, design, spec)
        assert out0[0] == 1.3, "zero attribute must leave the intercept alone"
        out2 = link_trial(alpha, None, None, {"tilt": 2.5}, design, spec)
        assert math.isclose(out2[0], 1.3 + 2.5 * -0.7, rel_tol=1e-15)

    def test_condition_selected_slots(self):
        spec = lba_transform_spec(2)
        design = LinkingDesign(
            alpha_names=("gap", "start", "v_hf", "v_lf", "v_err", "t0"),
            recipes={
                "b": Recipe(terms=(RecipeTerm(slot="gap"),)),
                "A": Recipe(terms=(RecipeTerm(slot="start"),)),
                "v0": Recipe(terms=(RecipeTerm(
                    select_by="freq",
                    select_map={"hf": "v_hf", "lf": "v_lf"}),)),
                "v1": Recipe(terms=(RecipeTerm(slot="v_err"),)),
                "tau": Recipe(terms=(RecipeTerm(slot="t0"),)),
            },
        )
        design.validate_against(spec)
        alpha = np.array([math.log(0.4), math.log(0.3), 2.2, 1.1, 0.2,
                          math.log(0.2)])
        hf = link_trial(alpha, None, None, {"freq": "hf"}, design, spec)
        lf = link_trial(alpha, None, None, {"freq": "lf"}, design, spec)
        assert hf[2] == 2.2 and lf[2] == 1.1
        assert hf[4] == lf[4] == 0.2
        with pytest.raises(ConfigError, match="freq"):
            link_trial(alpha, None, None, {}, design, spec)
        with pytest.raises(ConfigError, match="vlf"):
            link_trial(alpha, None, None, {"freq": "vlf"}, design, spec)

    def test_missing_attribute_names_the_field(self):
        spec = TransformSpec((SlotTransform("drift", TransformKind.IDENTITY),))
        design = LinkingDesign(
            alpha_names=("v_slope",),
            recipes={"drift": Recipe(terms=(
                RecipeTerm(slot="v_slope", attribute="tilt"),))},
        )
        with pytest.raises(ConfigError, match="tilt"):
            link_trial(np.array([1.0]), None, None, {}, design, spec)

    def test_missing_covariates_rejected(self):
        spec = TransformSpec((SlotTransform("scale", TransformKind.LOG),))
        design = elementwise_design(["scale"], covariate_rows=["scale"])
        with pytest.raises(ConfigError, match="covariate"):
            link_trial(np.array([0.0]), None, None, {}, design, spec)

    def test_unused_effect_slot_rejected(self):
        with pytest.raises(ConfigError, match="never used"):
            LinkingDesign(
                alpha_names=("used", "idle"),
                recipes={"p": Recipe(terms=(RecipeTerm(slot="used"),))},
            )

    def test_beta_row_bookkeeping(self):
        with pytest.raises(ConfigError, match="not declared"):
            LinkingDesign(
                alpha_names=("x",),
                recipes={"p": Recipe(terms=(RecipeTerm(slot="x"),),
                                     beta_row="x")},
            )
        with pytest.raises(ConfigError, match="never used"):
            LinkingDesign(
                alpha_names=("x",),
                recipes={"p": Recipe(terms=(RecipeTerm(slot="x"),))},
                beta_rows=("x",),
            )

    def test_recipe_coverage_checked_against_spec(self):
        design = elementwise_design(["b", "A", "v0", "v1"])
        with pytest.raises(ConfigError, match="tau"):
            design.validate_against(lba_transform_spec(2))
        extra = elementwise_design(list(lba_transform_spec(2).names) + ["z"])
        with pytest.raises(ConfigError, match="'z'"):
            extra.validate_against(lba_transform_spec(2))

    def test_term_constructor_guards(self):
        with pytest.raises(ConfigError, match="exactly one"):
            RecipeTerm()
        with pytest.raises(ConfigError, match="exactly one"):
            RecipeTerm(slot="a", select_map={"c": "a"}, select_by="k")
        with pytest.raises(ConfigError, match="together"):
            RecipeTerm(select_map={"c": "a"})

    @given(scale=st.floats(-2.0, 2.0), x=st.floats(-3.0, 3.0),
           b=st.floats(-1.0, 1.0))
    @settings(deadline=None, max_examples=100)
    def test_link_is_affine_on_unconstrained_scale(self, scale, x, b):
        spec = TransformSpec((SlotTransform("scale", TransformKind.LOG),))
        design = elementwise_design(["scale"], covariate_rows=["scale"])
        out = link_trial(np.array([scale]), np.array([[b]]),
                         np.array([x]), {}, design, spec)
        assert math.isclose(out[0], math.exp(scale + b * x), rel_tol=1e-12)
