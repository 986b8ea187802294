import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tdcert.chain import MarkovRewardProcess, generator, random_mrp
from tdcert.oracle import (
    CertificationError,
    FeatureError,
    FeatureMatrix,
    build_steady_state,
    constant_features,
    dnorm_contraction_margin,
    envelope_mixing_time,
    group_features,
    identity_features,
    lemma1_margin,
    lipschitz_audit,
    mixing_time,
    oracle_report,
    random_features,
    steady_state_direction,
)
from tdcert.chain import stationary_distribution, tv_mixing_profile

ONE_STATE = MarkovRewardProcess([[1.0]], [1.0], 0.5)
TWO_STATE = MarkovRewardProcess([[0.9, 0.1], [0.2, 0.8]], [1.0, 0.0], 0.9)
TWO_FEATS = FeatureMatrix([[1.0], [0.0]])
UNIFORM = MarkovRewardProcess([[0.5, 0.5], [0.5, 0.5]], [1.0, 0.0], 0.5)


class TestFeatureMatrix:
    def test_rank_deficient_rejected(self):
        with pytest.raises(FeatureError, match="rank"):
            FeatureMatrix([[1.0, 1.0], [0.5, 0.5]])

    def test_oversized_row_rejected(self):
        with pytest.raises(FeatureError, match="squared norm"):
            FeatureMatrix([[1.0, 0.5], [0.0, 1.0]])

    def test_builders_satisfy_invariants(self):
        for feats in (constant_features(5), identity_features(4),
                      group_features(7, 3), random_features(6, 3, seed=1)):
            assert (np.linalg.norm(feats.Phi, axis=1) <= 1 + 1e-12).all()
            sv = np.linalg.svd(feats.Phi, compute_uv=False)
            assert sv.min() > 1e-10


class TestBuildSteadyState:
    def test_one_state_scalar_algebra(self):
        model = build_steady_state(ONE_STATE, constant_features(1))
        assert model.A_bar[0, 0] == pytest.approx(-0.5, abs=1e-15)
        assert model.theta_star[0] == pytest.approx(2.0, abs=1e-12)
        assert model.Sigma[0, 0] == pytest.approx(1.0, abs=1e-15)
        assert model.omega == pytest.approx(1.0, abs=1e-12)
        assert model.sigma_const == pytest.approx(2.0)
        assert model.B == pytest.approx(40.0)  # theta0 = 0

    def test_identity_features_give_gram_equal_to_D(self):
        mrp = MarkovRewardProcess([[0.9, 0.1], [0.2, 0.8]], [1.0, 0.0], 0.5)
        model = build_steady_state(mrp, identity_features(2))
        np.testing.assert_allclose(model.Sigma, np.diag(model.stationary.pi),
                                   atol=1e-14)
        assert model.omega == pytest.approx(model.stationary.pi.min(), abs=1e-12)

    def test_theta_star_matches_projected_bellman_iteration(self):
        # independent oracle: iterate the D-weighted projected Bellman map
        # theta <- Sigma^{-1} Phi^T D (R + gamma P Phi theta), a contraction
        model = build_steady_state(TWO_STATE, TWO_FEATS)
        pi = model.stationary.pi
        Phi = TWO_FEATS.Phi
        Sigma_inv = np.linalg.inv(Phi.T @ (pi[:, None] * Phi))
        theta = np.zeros(1)
        for _ in range(2000):
            target = TWO_STATE.R + TWO_STATE.gamma * TWO_STATE.P @ (Phi @ theta)
            theta = Sigma_inv @ (Phi.T @ (pi * target))
        assert np.max(np.abs(theta - model.theta_star)) <= 1e-8
        # and the closed form for this instance: theta* = (2/3) / (19/150)
        assert model.theta_star[0] == pytest.approx(100.0 / 19.0, abs=1e-12)

    def test_fixed_point_residual(self):
        model = build_steady_state(TWO_STATE, TWO_FEATS)
        resid = model.A_bar @ model.theta_star + model.b_neg
        assert np.linalg.norm(resid) <= 1e-10

    def test_feature_row_count_must_match(self):
        with pytest.raises(FeatureError, match="rows"):
            build_steady_state(TWO_STATE, constant_features(3))


class TestSteadyStateDirection:
    def test_zero_at_fixed_point(self):
        model = build_steady_state(TWO_STATE, TWO_FEATS)
        assert np.linalg.norm(steady_state_direction(model, model.theta_star)) <= 1e-10

    def test_one_state_at_origin(self):
        model = build_steady_state(ONE_STATE, constant_features(1))
        np.testing.assert_allclose(steady_state_direction(model, np.zeros(1)), [1.0])

    def test_monte_carlo_consistency(self):
        # oracle: sample s ~ pi and s' ~ P(s, .) iid, average the sampled
        # TD directions, compare componentwise within 3 standard errors
        from tdcert.sa_core import td0_direction
        model = build_steady_state(TWO_STATE, TWO_FEATS)
        theta = np.array([1.7])
        rng = generator(424242)
        N = 1_000_000
        cum_pi = np.cumsum(model.stationary.pi)
        s = np.minimum((cum_pi[None, :] <= rng.random(N)[:, None]).sum(1), 1)
        sp = np.minimum((TWO_STATE.cum_P[s] <= rng.random(N)[:, None]).sum(1), 1)
        dirs = td0_direction(TWO_FEATS, TWO_STATE.gamma, theta, (s, sp, TWO_STATE.R[s]))
        mc = dirs.mean(axis=0)
        se = dirs.std(axis=0, ddof=1) / np.sqrt(N)
        exact = steady_state_direction(model, theta)
        assert np.all(np.abs(mc - exact) <= 3 * se)

    def test_batch_rows(self):
        model = build_steady_state(TWO_STATE, TWO_FEATS)
        thetas = np.array([[0.0], [1.0], [5.0]])
        batch = steady_state_direction(model, thetas)
        for row, theta in zip(batch, thetas):
            np.testing.assert_allclose(row, steady_state_direction(model, theta))


class TestMixingTime:
    def test_one_state_tau_is_one(self):
        cert = mixing_time(ONE_STATE, constant_features(1), 1e-3)
        assert cert.tau == 1

    def test_uniform_rows_tau_is_two(self):
        # direct enumeration: conditioning fixes s_1 at k=1, while the
        # conditional law equals pi for every k >= 2
        feats = FeatureMatrix([[1.0], [0.0]])
        for eps in (0.1, 0.01):
            cert = mixing_time(UNIFORM, feats, eps)
            assert cert.tau == 2
            assert cert.margin_curve[0] > eps
            np.testing.assert_allclose(cert.margin_curve[1:], 0.0, atol=1e-14)

    def test_certificate_rechecks(self):
        cert = mixing_time(TWO_STATE, TWO_FEATS, 0.01)
        assert cert.recheck()
        assert np.all(cert.margin_curve[cert.tau - 1:] <= 0.01)

    def test_monotone_in_epsilon(self):
        taus = [mixing_time(TWO_STATE, TWO_FEATS, eps).tau
                for eps in (0.1, 0.03, 0.01, 0.003, 0.001)]
        assert all(a <= b for a, b in zip(taus, taus[1:]))

    def test_affine_growth_in_log_precision(self):
        # two-state chains have exactly geometric deviation decay, governed
        # by the known second eigenvalue 0.7
        eps_grid = [1e-1, 1e-2, 1e-3, 1e-4]
        taus = [mixing_time(TWO_STATE, TWO_FEATS, e).tau for e in eps_grid]
        x = np.log(1.0 / np.array(eps_grid))
        slope = np.polyfit(x, np.array(taus, dtype=float), 1)[0]
        target = 1.0 / np.log(1.0 / 0.7)
        assert abs(slope - target) / target <= 0.1
        assert slope <= target * 1.1  # never grows faster than the spectral rate

    def test_epsilon_beyond_horizon_reports_requirement(self):
        with pytest.raises(CertificationError) as exc:
            mixing_time(TWO_STATE, TWO_FEATS, 1e-4, horizon=8)
        assert exc.value.required_horizon > 8

    def test_horizon_auto_extends_for_tiny_epsilon(self):
        slow = MarkovRewardProcess([[0.9, 0.1], [0.2, 0.8]], [1.0, 0.0], 0.5)
        cert = mixing_time(slow, TWO_FEATS, 1e-11)
        assert cert.horizon_checked > 64  # default start is 64
        assert cert.tau > 64 and cert.recheck()

    def test_envelope_fallback_overestimates(self):
        profile = tv_mixing_profile(TWO_STATE, 64)
        stat = stationary_distribution(TWO_STATE)
        exact = mixing_time(TWO_STATE, TWO_FEATS, 0.01)
        env = envelope_mixing_time(profile, stat, lipschitz_scale=2.0, epsilon=0.01)
        assert env.tau >= exact.tau
        assert env.method == "tv-envelope"

    def test_envelope_uniform_chain(self):
        profile = tv_mixing_profile(UNIFORM, 16)
        stat = stationary_distribution(UNIFORM)
        cert = envelope_mixing_time(profile, stat, lipschitz_scale=2.0, epsilon=0.01)
        assert cert.tau == 2  # k=1 deviation positive, zero afterwards

    @settings(max_examples=12, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1))
    def test_envelope_dominates_exact_tau_on_random_chains(self, seed):
        # the fallback uses G = L sigma >= the exact per-step constants and
        # the fitted TV envelope >= the true TV curve, so its tau can only
        # over-estimate (which merely shrinks the admissible step-size)
        mrp = random_mrp(4, 0.9, seed, gamma=0.6)
        model = build_steady_state(mrp, group_features(4, 2))
        profile = tv_mixing_profile(mrp, 64)
        for eps in (0.05, 0.01):
            exact = mixing_time(mrp, model.features, eps)
            env = envelope_mixing_time(profile, model.stationary,
                                       2.0 * model.sigma_const, eps)
            assert env.tau >= exact.tau


class TestLemma1:
    def test_zero_margin_at_fixed_point(self):
        model = build_steady_state(TWO_STATE, TWO_FEATS)
        assert lemma1_margin(model, model.theta_star) == pytest.approx(0.0, abs=1e-12)

    def test_one_state_exactly_tight(self):
        model = build_steady_state(ONE_STATE, constant_features(1))
        assert lemma1_margin(model, np.zeros(1)) == pytest.approx(0.0, abs=1e-12)

    def test_random_ball_nonnegative(self):
        model = build_steady_state(TWO_STATE, TWO_FEATS)
        rng = generator(7)
        raw = rng.normal(size=(10_000, 1))
        radii = 10.0 * rng.random((10_000, 1)) ** (1.0 / model.K)
        thetas = raw / np.linalg.norm(raw, axis=1, keepdims=True) * radii
        margins = lemma1_margin(model, thetas)
        assert margins.min() >= -1e-10

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(-10.0, 10.0, allow_nan=False), min_size=2, max_size=2))
    def test_margin_property_over_parameter_space(self, theta):
        model = build_steady_state(
            MarkovRewardProcess([[0.7, 0.3], [0.4, 0.6]], [0.5, -1.0], 0.6),
            group_features(2, 2))
        assert lemma1_margin(model, np.array(theta)) >= -1e-10


class TestAudits:
    def test_lipschitz_audit_bounds_hold(self):
        audit = lipschitz_audit(TWO_STATE, TWO_FEATS, 100_000, seed=11)
        assert audit.passed
        assert audit.max_direction_ratio <= 2.0 + 1e-9
        assert audit.max_steady_ratio <= 2.0 + 1e-9
        assert audit.max_norm_ratio <= 1.0 + 1e-9

    def test_one_state_lipschitz_constant_is_half(self):
        # g(theta; X) = 1 - 0.5 theta, so the ratio is exactly 0.5
        audit = lipschitz_audit(ONE_STATE, constant_features(1), 1000, seed=3)
        assert audit.max_direction_ratio == pytest.approx(0.5, abs=1e-12)

    def test_identical_parameters_give_identical_directions(self):
        from tdcert.sa_core import td0_direction
        theta = np.array([1.3])
        a = td0_direction(TWO_FEATS, 0.9, theta, (0, 1, 1.0))
        b = td0_direction(TWO_FEATS, 0.9, theta, (0, 1, 1.0))
        assert np.array_equal(a, b) and np.all(a - b == 0.0)

    def test_dnorm_contraction(self):
        stat = stationary_distribution(TWO_STATE)
        margin = dnorm_contraction_margin(TWO_STATE, stat, 10_000, seed=9)
        assert margin <= 1e-12

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1))
    def test_dnorm_contraction_random_chains(self, seed):
        mrp = random_mrp(5, 0.8, seed)
        stat = stationary_distribution(mrp)
        assert dnorm_contraction_margin(mrp, stat, 2000, seed=seed) <= 1e-12


class TestReport:
    def test_report_contains_tau_table(self):
        model = build_steady_state(TWO_STATE, TWO_FEATS, theta0=[0.0])
        doc = oracle_report(model, eps_grid=(0.1, 0.01))
        assert doc["omega"] == pytest.approx(2.0 / 3.0, abs=1e-12)
        assert len(doc["tau_table"]) == 2
        assert doc["tau_table"][1]["tau"] >= doc["tau_table"][0]["tau"]
