"""Gate computation and the three equivalent mask forms."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gapelab.gape import (GateParams, GateValues, augment_qk, compute_gates,
                          landmark_dominance_threshold, mask_gape,
                          mask_gape_matrix, mask_hat, mask_hat_matrix,
                          partition_context)
from gapelab.numerics import make_rng, softplus


def random_gates(seed: int, length: int = 8, dim: int = 6,
                 T: int = 64) -> GateValues:
    rng = make_rng(seed, "gates")
    params = GateParams.random(dim, rng)
    q = rng.normal(size=(length, dim))
    k = rng.normal(size=(length, dim))
    return compute_gates(q, k, params, T)


class TestGateParams:
    def test_fresh_defaults(self):
        p = GateParams.fresh(4)
        assert (p.w_l == 0).all() and (p.w_g == 0).all()
        assert p.b_g == -3.0 and p.b_l == 0.0
        # raw value chosen so the amplitude starts at about 1
        assert softplus(p.gamma_raw) == pytest.approx(1.0, abs=1e-4)

    def test_rejects_mismatched_widths(self):
        with pytest.raises(ValueError):
            GateParams(w_l=np.zeros(3), b_l=0.0, w_g=np.zeros(4), b_g=0.0,
                       gamma_raw=0.0)

    def test_rejects_matrix_projection(self):
        with pytest.raises(ValueError):
            GateParams(w_l=np.zeros((2, 2)), b_l=0.0, w_g=np.zeros((2, 2)),
                       b_g=0.0, gamma_raw=0.0)


class TestGateValues:
    @given(st.integers(min_value=0, max_value=5000))
    @settings(max_examples=30, deadline=None)
    def test_computed_gates_in_range(self, seed):
        gates = random_gates(seed)
        assert ((gates.l >= 0.0) & (gates.l <= 1.0)).all()
        assert (gates.g >= 0.0).all()
        assert gates.Gamma > 0.0
        assert gates.T == 64

    def test_validation(self):
        ok = dict(l=np.array([0.5]), g=np.array([1.0]), Gamma=1.0, T=4)
        GateValues(**ok)
        with pytest.raises(ValueError):
            GateValues(**{**ok, "l": np.array([1.5])})
        with pytest.raises(ValueError):
            GateValues(**{**ok, "g": np.array([-0.1])})
        with pytest.raises(ValueError):
            GateValues(**{**ok, "Gamma": 0.0})
        with pytest.raises(ValueError):
            GateValues(**{**ok, "T": 0})
        with pytest.raises(ValueError):
            GateValues(**{**ok, "T": 4.0})

    def test_closed_query_gate_is_exactly_zero(self):
        params = GateParams.fresh(3, b_g=-1e6)
        gates = compute_gates(np.ones((2, 3)), np.ones((2, 3)), params, 8)
        assert (gates.g == 0.0).all()


class TestMaskEntries:
    def test_relative_form_sign_and_diagonal(self):
        gates = random_gates(1)
        n = len(gates)
        for i in range(n):
            assert mask_hat(i, i, gates) == 0.0
            for j in range(i):
                assert mask_hat(i, j, gates) <= 0.0

    def test_forms_differ_by_row_constant(self):
        gates = random_gates(2)
        n = len(gates)
        for i in range(n):
            expected = gates.Gamma * gates.g[i] * i / gates.T
            for j in range(i + 1):
                diff = mask_gape(i, j, gates) - mask_hat(i, j, gates)
                assert diff == pytest.approx(expected, abs=1e-12)

    def test_matrices_match_entries(self):
        gates = random_gates(3)
        n = len(gates)
        m_hat = mask_hat_matrix(gates)
        m_abs = mask_gape_matrix(gates)
        for i in range(n):
            for j in range(i + 1):
                assert m_hat[i, j] == pytest.approx(mask_hat(i, j, gates), abs=1e-14)
                assert m_abs[i, j] == pytest.approx(mask_gape(i, j, gates), abs=1e-14)
        assert np.triu(m_hat, k=1).sum() == 0.0
        assert np.triu(m_abs, k=1).sum() == 0.0

    def test_causal_bounds_enforced(self):
        gates = random_gates(4)
        with pytest.raises(ValueError):
            mask_hat(2, 3, gates)
        with pytest.raises(ValueError):
            mask_gape(len(gates), 0, gates)

    def test_landmark_one_disables_distance_penalty(self):
        gates = GateValues(l=np.ones(5), g=np.full(5, 2.0), Gamma=1.5, T=10)
        m = mask_hat_matrix(gates)
        assert np.abs(m).sum() == 0.0


class TestFusedForm:
    @given(st.integers(min_value=0, max_value=5000))
    @settings(max_examples=40, deadline=None)
    def test_augmented_product_equals_logits_plus_mask(self, seed):
        rng = make_rng(seed, "fused")
        length, dim = 7, 6
        params = GateParams.random(dim, rng)
        q = rng.normal(size=(length, dim))
        k = rng.normal(size=(length, dim))
        gates = compute_gates(q, k, params, 32)
        q_aug, k_aug = augment_qk(q, k, gates)
        full_dim = dim + 2
        got = (q_aug @ k_aug.T) / np.sqrt(full_dim)
        want = q @ k.T / np.sqrt(full_dim) + mask_gape_matrix(gates)
        # the identity is exact except for dot-product roundoff
        np.testing.assert_allclose(np.tril(got), np.tril(want), atol=1e-12)

    def test_custom_positions_respected(self):
        gates = random_gates(5, length=4)
        pos = np.array([3, 10, 11, 40])
        q = make_rng(6).normal(size=(4, 6))
        k = make_rng(7).normal(size=(4, 6))
        q_aug, k_aug = augment_qk(q, k, gates, positions=pos)
        got = np.tril((q_aug @ k_aug.T) / np.sqrt(8.0))
        want = np.tril(q @ k.T / np.sqrt(8.0) + mask_gape_matrix(gates, positions=pos))
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_augment_rejects_length_mismatch(self):
        gates = random_gates(8, length=4)
        with pytest.raises(ValueError):
            augment_qk(np.zeros((5, 6)), np.zeros((5, 6)), gates)


class TestPartition:
    def test_threshold_splits_context(self):
        gates = GateValues(l=np.array([0.9, 0.1, 0.5, 0.2, 0.7]),
                           g=np.ones(5), Gamma=1.0, T=8)
        parts = partition_context(gates, 4, tau=0.5)
        assert parts.protected == (0, 2, 4)
        assert parts.unprotected == (1, 3)

    def test_query_always_protected(self):
        gates = GateValues(l=np.zeros(3), g=np.ones(3), Gamma=1.0, T=8)
        parts = partition_context(gates, 2, tau=0.9)
        assert 2 in parts.protected

    def test_bounds(self):
        gates = random_gates(9, length=3)
        with pytest.raises(ValueError):
            partition_context(gates, 3, 0.5)
        with pytest.raises(ValueError):
            partition_context(gates, 0, 1.5)


class TestDominanceThreshold:
    def test_flip_behavior_in_mask(self):
        # with equal semantic logits, key a out-ranks key b exactly when
        # l_a exceeds the closed-form threshold
        i, a, b = 20, 3, 11
        l_b = 0.4
        thr = landmark_dominance_threshold(i, a, b, l_b)
        assert 0.0 < thr <= 1.0
        for l_a, wins in ((thr + 0.05, True), (thr - 0.05, False)):
            l = np.zeros(i + 1)
            l[a], l[b] = l_a, l_b
            gates = GateValues(l=l, g=np.ones(i + 1), Gamma=2.0, T=32)
            m = mask_hat_matrix(gates)
            assert (m[i, a] > m[i, b]) == wins

    def test_rejects_bad_ordering(self):
        with pytest.raises(ValueError):
            landmark_dominance_threshold(5, 3, 3, 0.5)
        with pytest.raises(ValueError):
            landmark_dominance_threshold(5, 1, 3, 1.0)
