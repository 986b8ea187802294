import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tdcert.chain import (
    ChainError,
    MarkovRewardProcess,
    cycle_mrp,
    derive_seed,
    generator,
    mrp_from_dict,
    random_mrp,
    sample_trajectory,
    stationary_distribution,
    tv_mixing_profile,
    validate_chain,
)

TWO_STATE = [[0.9, 0.1], [0.2, 0.8]]


def make(P, R=None, gamma=0.5):
    P = np.asarray(P, dtype=float)
    if R is None:
        R = np.arange(P.shape[0], dtype=float)
    return MarkovRewardProcess(P, R, gamma)


class TestConstruction:
    def test_row_sum_error_names_row(self):
        with pytest.raises(ChainError, match="row 1"):
            MarkovRewardProcess([[1.0, 0.0], [0.3, 0.6]], [0, 0], 0.5)

    def test_negative_entry_rejected(self):
        with pytest.raises(ChainError, match="lie in"):
            MarkovRewardProcess([[1.2, -0.2], [0.5, 0.5]], [0, 0], 0.5)

    def test_gamma_strictly_inside_unit_interval(self):
        for gamma in (0.0, 1.0, -0.1, 1.5):
            with pytest.raises(ChainError, match="gamma"):
                MarkovRewardProcess([[1.0]], [1.0], gamma)

    def test_r_bar_is_max_absolute_reward(self):
        mrp = make(TWO_STATE, R=[-3.0, 2.0])
        assert mrp.r_bar == 3.0

    def test_rows_renormalized_to_machine_precision(self):
        P = [[0.9 + 4e-10, 0.1], [0.2, 0.8]]
        mrp = make(P)
        np.testing.assert_allclose(mrp.P.sum(axis=1), 1.0, atol=1e-15)

    def test_immutable_after_construction(self):
        mrp = make(TWO_STATE)
        with pytest.raises(ValueError):
            mrp.P[0, 0] = 0.0


class TestValidateChain:
    def test_single_absorbing_self_loop(self):
        rep = validate_chain(make([[1.0]]))
        assert rep.irreducible and rep.aperiodic

    def test_deterministic_two_cycle_is_periodic(self):
        rep = validate_chain(make([[0.0, 1.0], [1.0, 0.0]]))
        assert rep.irreducible
        assert not rep.aperiodic
        assert rep.period == 2

    def test_two_state_with_self_loops(self):
        rep = validate_chain(make(TWO_STATE))
        assert rep.ok

    def test_reducible_chain_reports_unreachable_states(self):
        rep = validate_chain(make([[1.0, 0.0], [0.5, 0.5]]))
        assert not rep.irreducible
        assert 1 in rep.not_reachable
        assert "unreachable" in rep.describe()


class TestStationary:
    def test_single_state(self):
        st_ = stationary_distribution(make([[1.0]]))
        np.testing.assert_allclose(st_.pi, [1.0])

    def test_symmetric_doubly_stochastic(self):
        st_ = stationary_distribution(make([[0.5, 0.5], [0.5, 0.5]]))
        np.testing.assert_allclose(st_.pi, [0.5, 0.5], atol=1e-14)

    def test_two_state_exact_thirds(self):
        # independent oracle for a 2-state chain: pi_0 = p10 / (p01 + p10)
        p01, p10 = 0.1, 0.2
        expected = np.array([p10, p01]) / (p01 + p10)
        st_ = stationary_distribution(make(TWO_STATE))
        np.testing.assert_allclose(st_.pi, expected, atol=1e-14)
        np.testing.assert_allclose(st_.pi, [2.0 / 3.0, 1.0 / 3.0], atol=1e-14)

    def test_periodic_chain_rejected_with_hint(self):
        with pytest.raises(ChainError, match="validate_chain"):
            stationary_distribution(make([[0.0, 1.0], [1.0, 0.0]]))

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1), st.integers(2, 8))
    def test_random_chain_invariants(self, seed, n):
        mrp = random_mrp(n, 0.8, seed)
        st_ = stationary_distribution(mrp)
        assert np.max(np.abs(st_.pi @ mrp.P - st_.pi)) <= 1e-10
        assert st_.pi.min() > 0.0
        assert abs(st_.pi.sum() - 1.0) <= 1e-12


class TestMixingProfile:
    def test_single_state_reports_rho_zero(self):
        prof = tv_mixing_profile(make([[1.0]]), 10)
        assert prof.rho == 0.0
        np.testing.assert_allclose(prof.tv_curve, 0.0)

    def test_uniform_rows_mix_in_one_step(self):
        prof = tv_mixing_profile(make([[0.5, 0.5], [0.5, 0.5]]), 10)
        np.testing.assert_allclose(prof.tv_curve, 0.0, atol=1e-15)
        assert prof.rho == 0.0

    def test_second_eigenvalue_governs_decay(self):
        # eigendecomposition oracle: eigenvalues of TWO_STATE are {1, 0.7}
        prof = tv_mixing_profile(make(TWO_STATE), 40)
        assert prof.lambda2 == pytest.approx(0.7, abs=1e-12)
        ratios = prof.tv_curve[10:20] / prof.tv_curve[9:19]
        np.testing.assert_allclose(ratios, 0.7, atol=1e-9)

    def test_curve_non_increasing_and_enveloped(self):
        prof = tv_mixing_profile(make(TWO_STATE), 60)
        assert np.all(np.diff(prof.tv_curve) <= 1e-12)
        k = np.arange(1, 61)
        assert np.all(prof.tv_curve <= prof.c0 * prof.rho ** k * (1 + 1e-9) + 1e-300)

    def test_underflow_clamps_and_records_index(self):
        prof = tv_mixing_profile(make(TWO_STATE), 3000)
        assert prof.clamp_index is not None
        assert np.all(prof.tv_curve[prof.clamp_index:] == 0.0)

    def test_horizon_precondition(self):
        with pytest.raises(ChainError, match="horizon"):
            tv_mixing_profile(make(TWO_STATE), 1)


class TestSampling:
    def test_single_state_chain(self):
        mrp = make([[1.0]], R=[1.5])
        tr = sample_trajectory(mrp, 0, 3, seed=7)
        assert tr.tuples() == [(0, 0, 1.5)] * 3

    def test_deterministic_two_cycle(self):
        mrp = make([[0.0, 1.0], [1.0, 0.0]], R=[2.0, 5.0])
        tr = sample_trajectory(mrp, 0, 2, seed=1)
        assert tr.tuples() == [(0, 1, 2.0), (1, 0, 5.0)]

    def test_same_seed_identical(self):
        mrp = make(TWO_STATE)
        a = sample_trajectory(mrp, 0, 500, seed=99)
        b = sample_trajectory(mrp, 0, 500, seed=99)
        assert np.array_equal(a.s, b.s) and np.array_equal(a.s_next, b.s_next)

    def test_tuples_chain_and_rewards_exact(self):
        mrp = make(TWO_STATE, R=[1.0, -2.0])
        tr = sample_trajectory(mrp, 1, 300, seed=5)
        assert np.array_equal(tr.s[1:], tr.s_next[:-1])
        np.testing.assert_array_equal(tr.r, mrp.R[tr.s])

    def test_start_state_out_of_range(self):
        with pytest.raises(ChainError, match="start_state"):
            sample_trajectory(make(TWO_STATE), 2, 5, seed=0)

    def test_occupancy_matches_stationary(self):
        mrp = make(TWO_STATE)
        st_ = stationary_distribution(mrp)
        N = 100_000
        tr = sample_trajectory(mrp, 0, N, seed=2024)
        freq = np.bincount(tr.s, minlength=2) / N
        # autocorrelation inflates the binomial standard error by
        # sqrt((1 + lambda2) / (1 - lambda2)) for this reversible-ish chain
        inflate = np.sqrt((1 + 0.7) / (1 - 0.7))
        se = np.sqrt(st_.pi * (1 - st_.pi) / N) * inflate
        assert np.all(np.abs(freq - st_.pi) <= 3 * se)

    def test_block_draws_match_scalar_draws(self):
        # the batch engine relies on random(n) consuming the stream like
        # n successive scalar draws
        g1 = generator(123)
        g2 = generator(123)
        block = g1.random(64)
        singles = np.array([g2.random() for _ in range(64)])
        assert np.array_equal(block, singles)


class TestGeneratorsAndConfig:
    def test_cycle_is_valid_and_lazy(self):
        mrp = cycle_mrp(6, 0.3)
        assert validate_chain(mrp).ok
        np.testing.assert_allclose(np.diag(mrp.P), 0.3)

    def test_cycle_two_states_accumulates_neighbour_mass(self):
        mrp = cycle_mrp(2, 0.5)
        np.testing.assert_allclose(mrp.P, [[0.5, 0.5], [0.5, 0.5]])

    def test_random_mrp_reproducible(self):
        a = random_mrp(5, 0.7, seed=3)
        b = random_mrp(5, 0.7, seed=3)
        assert np.array_equal(a.P, b.P) and np.array_equal(a.R, b.R)

    def test_explicit_config_roundtrip(self):
        cfg = {"states": 2, "transitions": TWO_STATE, "rewards": [1.0, 0.0],
               "gamma": 0.9}
        mrp = mrp_from_dict(cfg)
        assert mrp.n == 2 and mrp.gamma == 0.9

    def test_config_state_count_mismatch(self):
        with pytest.raises(ChainError, match="transition rows"):
            mrp_from_dict({"states": 3, "transitions": TWO_STATE,
                           "rewards": [1, 0], "gamma": 0.5})

    def test_generator_configs(self):
        assert mrp_from_dict({"kind": "cycle", "n": 4, "epsilon": 0.4}).n == 4
        assert mrp_from_dict({"kind": "random", "n": 3, "density": 1.0,
                              "seed": 1}).n == 3

    def test_derive_seed_changes_with_any_index(self):
        base = derive_seed(7, 0)
        assert derive_seed(7, 1) != base
        assert derive_seed(8, 0) != base
        assert derive_seed(7, 0, 1) != base
