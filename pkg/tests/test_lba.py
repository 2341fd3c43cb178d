"""Tests for the LBA race likelihood.

Oracles: chunked vectorized simulation of the race (rates drawn from
N(v,1), start points from U(0,A), crossing time (b-k)/rate), central
finite differences for gradients, and closed-form limits.
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate
from scipy.special import ndtr

from eamfit.errors import DomainError, NumericFailure
from eamfit.lba import (
    LbaParams,
    lba_cdf_single,
    lba_density,
    lba_density_batch,
    lba_density_matrix,
    lba_density_grad,
    lba_density_grad_batch,
    lba_survival_single,
    race_defect_mass,
)

CHUNK = 1_000_000


def _simulate_crossing_counts(n_total, b, A, v, tau, probes, seed):
    """How many of n_total single-accumulator crossing times land at or
    below each probe. Rates <= 0 never cross."""
    rng = np.random.default_rng(seed)
    counts = np.zeros(len(probes), dtype=np.int64)
    done = 0
    while done < n_total:
        m = min(CHUNK, n_total - done)
        rate = rng.normal(v, 1.0, m)
        start = rng.uniform(0.0, A, m)
        t = np.where(rate > 0.0, tau + (b - start) / rate, np.inf)
        for i, probe in enumerate(probes):
            counts[i] += int((t <= probe).sum())
        done += m
    return counts


def _simulate_race_histogram(n_total, p, bins, seed):
    """Histogram of winning times per accumulator plus never-finished count."""
    rng = np.random.default_rng(seed)
    n_acc = p.n_accumulators
    hists = np.zeros((n_acc, len(bins) - 1), dtype=np.int64)
    never = 0
    v = np.asarray(p.v)
    done = 0
    while done < n_total:
        m = min(CHUNK, n_total - done)
        rate = rng.normal(v, 1.0, (m, n_acc))
        start = rng.uniform(0.0, p.A, (m, n_acc))
        with np.errstate(divide="ignore"):
            t = np.where(rate > 0.0, p.tau + (p.b - start) / rate, np.inf)
        winner = t.argmin(axis=1)
        rt = t.min(axis=1)
        finished = np.isfinite(rt)
        never += int(m - finished.sum())
        for c in range(n_acc):
            sel = finished & (winner == c)
            hists[c] += np.histogram(rt[sel], bins=bins)[0]
        done += m
    return hists, never


def random_params(rng, n_acc=None):
    if n_acc is None:
        n_acc = rng.integers(2, 5)
    b = rng.uniform(0.8, 2.0)
    return LbaParams(
        b=b,
        A=rng.uniform(0.2, b - 0.25),
        v=tuple(rng.uniform(-1.5, 3.5, n_acc)),
        tau=rng.uniform(0.15, 0.5),
    )


class TestLbaParams:
    @pytest.mark.parametrize("kw", [
        dict(b=0.5, A=0.6, v=(1.0, 2.0), tau=0.2),
        dict(b=1.0, A=1.0, v=(1.0, 2.0), tau=0.2),
        dict(b=1.0, A=-0.1, v=(1.0, 2.0), tau=0.2),
        dict(b=1.0, A=0.5, v=(1.0, 2.0), tau=0.0),
        dict(b=1.0, A=0.5, v=(1.0,), tau=0.2),
        dict(b=1.0, A=0.5, v=(1.0, 2.0), tau=0.2, s=2.0),
    ])
    def test_invalid_params_rejected(self, kw):
        with pytest.raises(DomainError):
            LbaParams(**kw)

    def test_defect_mass_closed_form(self):
        p = LbaParams(b=1.0, A=0.5, v=(0.5, -0.5), tau=0.2)
        expected = ndtr(-0.5) * ndtr(0.5)
        assert race_defect_mass(p) == pytest.approx(expected, rel=1e-12)


class TestCdf:
    def test_zero_at_or_below_non_decision_time(self):
        p = LbaParams(b=1.0, A=0.5, v=(2.0, 1.0), tau=0.2)
        assert lba_cdf_single(0.2, p, 0) == 0.0
        assert lba_cdf_single(0.05, p, 0) == 0.0

    def test_approaches_one_for_strongly_positive_drift(self):
        p = LbaParams(b=1.0, A=0.5, v=(9.0, 1.0), tau=0.2)
        assert lba_cdf_single(1e6, p, 0) == pytest.approx(1.0, abs=1e-9)

    def test_limit_is_the_finishing_probability(self):
        # an accumulator with rate <= 0 never finishes, so the CDF
        # saturates at P(rate > 0)
        p = LbaParams(b=1.0, A=0.5, v=(2.0, 1.0), tau=0.2)
        # convergence to the limit is O(1/t)
        assert lba_cdf_single(1e6, p, 0) == pytest.approx(ndtr(2.0), rel=1e-6)

    def test_survival_complements_cdf(self):
        p = LbaParams(b=1.3, A=0.4, v=(1.5, 0.5), tau=0.25)
        for t in (0.4, 0.8, 2.0, 10.0):
            total = lba_cdf_single(t, p, 1) + lba_survival_single(t, p, 1)
            assert total == pytest.approx(1.0, abs=1e-12)

    @given(
        b=st.floats(0.7, 2.0),
        a_frac=st.floats(0.1, 0.9),
        v0=st.floats(-2.0, 4.0),
        tau=st.floats(0.1, 0.5),
    )
    @settings(max_examples=100, deadline=None)
    def test_monotone_in_time(self, b, a_frac, v0, tau):
        p = LbaParams(b=b, A=a_frac * b * 0.9, v=(v0, 1.0), tau=tau)
        ts = tau + np.geomspace(1e-3, 50.0, 60)
        vals = [lba_cdf_single(t, p, 0) for t in ts]
        assert all(x2 >= x1 - 1e-12 for x1, x2 in zip(vals, vals[1:]))
        assert all(0.0 <= x <= 1.0 for x in vals)

    def test_time_derivative_is_the_finishing_density(self):
        p = LbaParams(b=1.1, A=0.6, v=(1.8, 0.7), tau=0.2)
        for t in (0.5, 0.9, 1.8):
            h = 1e-5
            fd = (lba_cdf_single(t + h, p, 0) - lba_cdf_single(t - h, p, 0)) / (2 * h)
            f0 = lba_density(0, t, p) / lba_survival_single(t, p, 1)
            assert fd == pytest.approx(f0, rel=1e-6)

    def test_against_simulated_crossing_times(self):
        b, A, v, tau = 1.2, 0.6, 1.2, 0.25
        p = LbaParams(b=b, A=A, v=(v, 1.0), tau=tau)
        n = 10_000_000
        probes = [0.5, 0.7, 1.0, 1.6, 3.0, 8.0]
        counts = _simulate_crossing_counts(n, b, A, v, tau, probes, seed=2024)
        for probe, count in zip(probes, counts):
            emp = count / n
            se = math.sqrt(max(emp * (1 - emp), 1e-12) / n)
            got = lba_cdf_single(probe, p, 0)
            assert abs(got - emp) <= 3 * se, (
                f"t={probe}: closed form {got:.6f} vs simulated {emp:.6f} "
                f"(3se={3 * se:.2e})"
            )


class TestDensity:
    def test_zero_at_or_below_non_decision_time(self):
        p = LbaParams(b=1.0, A=0.5, v=(2.0, 1.0), tau=0.2)
        assert lba_density(0, 0.2, p) == 0.0
        assert lba_density(1, 0.1, p) == 0.0

    def test_identical_accumulators_split_mass_evenly(self):
        p = LbaParams(b=1.0, A=0.5, v=(3.0, 3.0), tau=0.2)
        mass, _ = integrate.quad(
            lambda t: lba_density(0, t, p), p.tau, p.tau + 500.0,
            points=[p.tau + 0.1, p.tau + 1.0, p.tau + 10.0], limit=400,
        )
        assert mass == pytest.approx(0.5, abs=1e-4)

    @pytest.mark.parametrize("v", [(2.0, 1.0), (0.5, -0.5), (1.5, 1.0, 0.2)])
    def test_race_mass_matches_defect_closed_form(self, v):
        # slow-drift races have O(1/t) survival tails, so integrate on a
        # log time scale where the tail decays exponentially
        p = LbaParams(b=1.0, A=0.5, v=v, tau=0.2)
        total = 0.0
        for c in range(len(v)):
            mass, _ = integrate.quad(
                lambda u: lba_density(c, p.tau + math.exp(u), p) * math.exp(u),
                -14.0, 16.0, limit=400,
            )
            total += mass
        assert total == pytest.approx(1.0 - race_defect_mass(p), abs=1e-4), (
            f"total mass {total} vs 1 - defect {1.0 - race_defect_mass(p)}"
        )

    @given(
        b=st.floats(0.7, 2.0),
        a_frac=st.floats(0.1, 0.9),
        v0=st.floats(-2.0, 4.0),
        v1=st.floats(-2.0, 4.0),
        t=st.floats(0.01, 30.0),
    )
    @settings(max_examples=150, deadline=None)
    def test_nonnegative_everywhere(self, b, a_frac, v0, v1, t):
        p = LbaParams(b=b, A=a_frac * b * 0.9, v=(v0, v1), tau=0.2)
        assert lba_density(0, t, p) >= 0.0
        assert lba_density(1, t, p) >= 0.0

    def test_against_simulated_races(self):
        p = LbaParams(b=1.0, A=0.5, v=(2.0, 1.0), tau=0.2)
        n = 10_000_000
        bins = np.arange(0.2, 1.8001, 0.05)
        hists, _ = _simulate_race_histogram(n, p, bins, seed=515)
        # the example point rt=0.55 lives in bin [0.55, 0.60)
        target_bin = int(np.searchsorted(bins, 0.55, side="right")) - 1
        checked_target = False
        for c in range(2):
            counts = hists[c]
            for i in np.nonzero(counts > 500)[0]:
                lo, hi = bins[i], bins[i + 1]
                prob, _ = integrate.quad(
                    lambda t: lba_density(c, t, p), lo, hi, limit=80)
                emp = counts[i] / n
                se = math.sqrt(emp * (1 - emp) / n)
                assert abs(prob - emp) <= 3 * se, (
                    f"choice {c}, bin [{lo:.2f},{hi:.2f}): model {prob:.6f} "
                    f"vs simulated {emp:.6f} (3se={3 * se:.2e})"
                )
                if c == 0 and i == target_bin:
                    checked_target = True
        assert checked_target, "bin containing rt=0.55 was never compared"


class TestDensityGrad:
    N_POINTS = 100

    def test_partials_match_finite_differences(self):
        rng = np.random.default_rng(77)
        checked = 0
        while checked < self.N_POINTS:
            p = random_params(rng)
            n = p.n_accumulators
            choice = int(rng.integers(n))
            rt = p.tau + rng.uniform(0.05, 1.5)
            dens = lba_density(choice, rt, p)
            if dens < 1e-8:
                continue
            grad = lba_density_grad(choice, rt, p)
            vec = [p.b, p.A, *p.v, p.tau]

            def dens_at(params):
                q = LbaParams(b=params[0], A=params[1],
                              v=tuple(params[2:2 + n]), tau=params[2 + n])
                return lba_density(choice, rt, q)

            def central(i, h):
                hi, lo = list(vec), list(vec)
                hi[i] += h
                lo[i] -= h
                return (dens_at(hi) - dens_at(lo)) / (2 * h)

            for i in range(n + 3):
                # h balances truncation against the roundoff floor of the
                # cancellation-prone closed form
                fd = central(i, 1e-5 * max(1.0, abs(vec[i])))
                denom = max(abs(grad[i]), dens, 1e-8)
                assert abs(grad[i] - fd) / denom <= 1e-5, (
                    f"point {checked}, partial {i}: analytic {grad[i]} vs fd {fd}"
                )
            checked += 1

    def test_relabeling_symmetry(self):
        p = LbaParams(b=1.2, A=0.5, v=(1.5, 1.5), tau=0.25)
        rt = 0.8
        g0 = lba_density_grad(0, rt, p)
        g1 = lba_density_grad(1, rt, p)
        assert g0[2] == pytest.approx(g1[3], rel=1e-12)
        assert g0[3] == pytest.approx(g1[2], rel=1e-12)

    def test_zero_vector_below_support(self):
        p = LbaParams(b=1.0, A=0.5, v=(2.0, 1.0), tau=0.2)
        assert np.all(lba_density_grad(0, 0.15, p) == 0.0)

    def test_zero_density_raises_with_trial_index(self):
        p = LbaParams(b=1.0, A=0.5, v=(-30.0, -30.0), tau=0.2)
        with pytest.raises(NumericFailure, match="trial 5"):
            lba_density_grad(0, 10.0, p, trial_index=5)


class TestBatch:
    def test_density_matrix_matches_scalar_route(self):
        rng = np.random.default_rng(77)
        rows = [random_params(rng, n_acc=3) for _ in range(8)]
        rts = 0.2 + rng.uniform(-0.15, 1.8, 40)
        choices = rng.integers(0, 3, 40)
        mat = lba_density_matrix(
            rts, choices,
            b=np.array([p.b for p in rows]),
            A=np.array([p.A for p in rows]),
            v=np.array([p.v for p in rows]),
            tau=np.array([p.tau for p in rows]))
        assert mat.shape == (8, 40)
        for m, p in enumerate(rows):
            ref = lba_density_batch(rts, choices, p)
            assert np.allclose(mat[m], ref, rtol=1e-12, atol=0.0), \
                f"row {m} diverges from the single-parameter batch"

    def test_density_batch_matches_scalar_route(self):
        rng = np.random.default_rng(31)
        p = random_params(rng, n_acc=3)
        rts = p.tau + rng.uniform(-0.1, 2.0, 60)
        choices = rng.integers(0, 3, 60)
        batch = lba_density_batch(rts, choices, p)
        for i, (rt, c) in enumerate(zip(rts, choices)):
            assert batch[i] == pytest.approx(
                lba_density(int(c), rt, p), rel=1e-12, abs=1e-300
            ), f"trial {i}"

    def test_gradient_batch_matches_scalar_route(self):
        rng = np.random.default_rng(32)
        p = random_params(rng, n_acc=3)
        rts = p.tau + rng.uniform(0.02, 2.0, 40)
        choices = rng.integers(0, 3, 40)
        dens, grads = lba_density_grad_batch(rts, choices, p)
        for i, (rt, c) in enumerate(zip(rts, choices)):
            try:
                ref = lba_density_grad(int(c), rt, p)
            except NumericFailure:
                # underflowed density; the batch route reports 0 and
                # leaves failing to the caller
                assert dens[i] == 0.0
                continue
            np.testing.assert_allclose(
                grads[i], ref, rtol=1e-9, atol=1e-14,
                err_msg=f"trial {i} (rt={rt:.3f}, choice={c})",
            )
            assert dens[i] == pytest.approx(lba_density(int(c), rt, p),
                                            rel=1e-12, abs=1e-300)

    def test_below_support_rows_are_zero(self):
        p = LbaParams(b=1.0, A=0.5, v=(2.0, 1.0), tau=0.3)
        dens, grads = lba_density_grad_batch(
            np.array([0.1, 0.3, 0.9]), np.array([0, 1, 0]), p)
        assert dens[0] == 0.0 and dens[1] == 0.0
        assert np.all(grads[:2] == 0.0)
        assert dens[2] > 0.0

    def test_underflowed_survival_handled(self):
        # the first accumulator is essentially certain to have finished
        # long before rt, so its survival underflows to zero
        p = LbaParams(b=1.0, A=0.5, v=(9.0, 0.5), tau=0.2)
        rts = np.array([80.0, 0.5])
        choices = np.array([1, 0])
        batch = lba_density_batch(rts, choices, p)
        assert batch[0] == lba_density(1, 80.0, p)
        assert batch[1] == pytest.approx(lba_density(0, 0.5, p), rel=1e-12)
        _, grads = lba_density_grad_batch(rts, choices, p)
        np.testing.assert_allclose(
            grads[0], lba_density_grad(1, 80.0, p), rtol=1e-9, atol=1e-300)
