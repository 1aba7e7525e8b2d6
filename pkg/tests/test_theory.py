"""Closed-form bounds: spot values, brute-force agreement, suite health."""
import math

import numpy as np
import pytest

from gapelab.numerics import make_rng, stable_softmax_row
from gapelab.theory import (SUITES, TheoremConfig, effective_context_length,
                            eviction_horizons, hallucination_min_gate,
                            niah_retrieval_threshold, partition_growth_bound,
                            reports_to_csv, run_suites,
                            unprotected_mass_bound,
                            unprotected_mass_bound_simplified)

CFG = TheoremConfig(S_max=1.0, Gamma=2.0, g=0.5, T=100, epsilon=0.25)


class TestClosedForms:
    def test_decay_rate(self):
        assert CFG.decay_rate == pytest.approx(0.01, abs=0)

    def test_mass_bound_value(self):
        # e^2 * (e^-0.01 + e^-0.05)
        want = math.exp(2.0) * (math.exp(-0.01) + math.exp(-0.05))
        assert unprotected_mass_bound(CFG, [1, 5]) == pytest.approx(want, rel=1e-15)

    def test_simplified_dominates_exact(self):
        gaps = [3, 7, 19]
        exact = unprotected_mass_bound(CFG, gaps)
        coarse = unprotected_mass_bound_simplified(CFG, len(gaps), min(gaps))
        assert coarse >= exact

    def test_mass_bound_actually_bounds_softmax_mass(self):
        # adversarial instance: protected key at the diagonal with logit
        # -S_max, unprotected keys with +S_max at the given gaps
        rng = make_rng(0, "massbound")
        i = 60
        gaps = sorted(rng.choice(np.arange(1, i), size=10, replace=False))
        logits = np.full(i + 1, -np.inf)
        logits[i] = -CFG.S_max
        for gap in gaps:
            logits[i - gap] = CFG.S_max - CFG.decay_rate * gap
        finite = np.isfinite(logits)
        probs = stable_softmax_row(logits[finite])
        unprotected_mass = probs[:-1].sum()
        assert unprotected_mass <= unprotected_mass_bound(CFG, gaps) + 1e-12

    def test_effective_context_closes_the_bound(self):
        n_u, p = 12, 0.05
        gap = effective_context_length(CFG, n_u, p)
        # rounding the gap up can only shrink the bound below p
        at_gap = unprotected_mass_bound_simplified(CFG, n_u, math.ceil(gap))
        beyond = unprotected_mass_bound_simplified(CFG, n_u, math.ceil(gap) + 50)
        assert at_gap <= p + 1e-12
        assert beyond < at_gap

    def test_growth_bound_value(self):
        want = math.exp(1.0 + 0.01 * 40) * (3 + 1.0 / math.expm1(2.0 * 0.25 / 100))
        assert partition_growth_bound(CFG, 40, 3) == pytest.approx(want, rel=1e-12)

    def test_growth_bound_needs_epsilon(self):
        cfg = TheoremConfig(S_max=1.0, Gamma=1.0, g=1.0, T=10)
        with pytest.raises(ValueError):
            partition_growth_bound(cfg, 5, 1)

    def test_min_gate_flip(self):
        # exactly above the threshold the protected key wins the two-key race
        gap = 25
        g_min = hallucination_min_gate(CFG, gap)
        assert g_min == pytest.approx(2.0 * 1.0 * 100 / (2.0 * gap), rel=1e-15)
        for factor, wins in ((1.01, True), (0.99, False)):
            g = factor * g_min
            protected = -CFG.S_max  # landmark 1, no distance penalty
            unprotected = CFG.S_max - CFG.Gamma * g * gap / CFG.T
            assert (protected > unprotected) == wins

    def test_retrieval_threshold_matches_mask_difference(self):
        i, rho, l_k = 200, 0.25, 0.3
        k = int(rho * i)
        want = CFG.decay_rate * (i - k) * (1.0 - l_k)
        got = niah_retrieval_threshold(CFG, i, k / i, l_k)
        assert got == pytest.approx(want, rel=1e-12)

    def test_eviction_horizons_values(self):
        hz = eviction_horizons(CFG, i=500, rho=0.2, l_k=0.5)
        two_s_t = 2.0 * CFG.S_max * CFG.T
        assert hz.delta_elim == pytest.approx(two_s_t / (CFG.Gamma * 0.25 * 0.5))
        assert hz.i_fail == pytest.approx(two_s_t / (CFG.Gamma * CFG.g * 0.8))
        assert hz.l_star == pytest.approx(1.0 - two_s_t / (CFG.Gamma * CFG.g * 500 * 0.8))

    def test_eviction_lstar_clamps_at_zero(self):
        # short context: retrieval survives even without a landmark
        hz = eviction_horizons(CFG, i=10, rho=0.0, l_k=0.0)
        assert hz.l_star == 0.0

    def test_validation(self):
        with pytest.raises(ValueError):
            TheoremConfig(S_max=-1.0, Gamma=1.0, g=1.0, T=10)
        with pytest.raises(ValueError):
            TheoremConfig(S_max=1.0, Gamma=1.0, g=1.0, T=10, epsilon=2.0)
        with pytest.raises(ValueError):
            unprotected_mass_bound(CFG, [0])
        with pytest.raises(ValueError):
            effective_context_length(CFG, 1, 1.0)
        with pytest.raises(ValueError):
            niah_retrieval_threshold(CFG, 10, 1.0, 0.5)
        with pytest.raises(ValueError):
            eviction_horizons(CFG, 10, 0.5, 1.0)


class TestSuites:
    @pytest.mark.parametrize("name", sorted(SUITES))
    def test_suite_clean_at_small_trial_count(self, name):
        for report in SUITES[name](40, 123, 1):
            assert report.passed, (
                f"{report.suite}/{report.check}: {report.violations} violations, "
                f"worst excess {report.worst_excess:.3e}"
            )

    def test_run_suites_unknown_name(self):
        with pytest.raises(ValueError):
            run_suites(["renormalization"], 5, 0)

    def test_run_suites_collects_all(self):
        reports = run_suites(list(SUITES), 5, 7, threads=2)
        assert {r.suite for r in reports} == set(SUITES)

    def test_reports_are_seed_deterministic(self):
        a = reports_to_csv(run_suites(["thm1"], 25, 9))
        b = reports_to_csv(run_suites(["thm1"], 25, 9))
        assert a == b

    def test_csv_shape(self):
        text = reports_to_csv(run_suites(["equivalence"], 5, 0))
        lines = text.strip().splitlines()
        assert lines[0] == "suite,check,trials,violations,worst_excess,tolerance,status"
        assert all(line.endswith(",pass") for line in lines[1:])
