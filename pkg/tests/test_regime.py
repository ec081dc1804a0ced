import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import multivariate_normal

from mpcfolio.data import ReturnsPanel, SyntheticMarketSpec, simulate_market
from mpcfolio.errors import DegenerateRegimeError, ValidationError
from mpcfolio.regime import (
    EmConfig,
    ForecastPath,
    RegimeModel,
    filter_update,
    fit_em,
    forecast_path,
    forecast_regime_prob,
    gaussian_logpdf,
    historical_model,
    load_model,
    regularize_covariance,
    save_model,
    with_q,
)

from .conftest import random_spd

probs = st.floats(0.0, 1.0)


def _model(n=2, q=0.7, p_nn=0.95, p_cc=0.85, seed=0):
    rng = np.random.default_rng(seed)
    return RegimeModel(
        mu_normal=rng.normal(0.001, 0.001, n),
        mu_contraction=rng.normal(-0.001, 0.001, n),
        sigma_normal=random_spd(rng, n, 1e-4),
        sigma_contraction=random_spd(rng, n, 4e-4),
        p_nn=p_nn, p_cc=p_cc, q_current=q,
    )


def _separated_spec(T=2000, seed=5):
    return SyntheticMarketSpec(
        n_assets=3,
        mu_normal=[0.004, 0.002, 0.001],
        mu_contraction=[-0.008, -0.004, 0.0],
        sigma_normal=np.diag([1e-4, 5e-5, 2e-5]),
        sigma_contraction=np.array([[9e-4, 3e-4, 0], [3e-4, 4e-4, 0], [0, 0, 1e-4]]),
        p_nn=0.98, p_cc=0.93, horizon=T, seed=seed,
    )


class TestForecastRegimeProb:
    def test_examples(self):
        assert forecast_regime_prob(1.0, 0.9, 0.8) == pytest.approx(0.9)
        assert forecast_regime_prob(0.0, 0.5, 0.7) == pytest.approx(0.3)

    @given(st.floats(0.0, 0.999), st.floats(0.0, 0.999))
    def test_stationary_fixed_point(self, p_nn, p_cc):
        q = (1 - p_cc) / (2 - p_nn - p_cc)
        assert forecast_regime_prob(q, p_nn, p_cc) == pytest.approx(q, abs=1e-12)

    @given(probs, st.floats(0.0, 0.999), st.floats(0.0, 0.999))
    def test_path_approaches_stationary(self, q, p_nn, p_cc):
        q_star = (1 - p_cc) / (2 - p_nn - p_cc)
        dist = [abs(q - q_star)]
        for _ in range(20):
            q = forecast_regime_prob(q, p_nn, p_cc)
            dist.append(abs(q - q_star))
        assert all(b <= a + 1e-12 for a, b in zip(dist, dist[1:]))

    def test_rejects_out_of_range(self):
        with pytest.raises(ValidationError):
            forecast_regime_prob(1.5, 0.9, 0.9)


class TestForecastPath:
    def test_pure_normal(self):
        m = _model(q=1.0, p_nn=1.0)
        fc = forecast_path(m, 4)
        for k in range(4):
            np.testing.assert_allclose(fc.mu_hat[k], m.mu_normal)
            np.testing.assert_allclose(fc.sigma_hat[k], m.sigma_normal)

    def test_mixture_variance_two(self):
        # q_hat = 0.5 * 1 + 0.5 * (1 - 1) = 0.5
        m = RegimeModel([1.0], [-1.0], [[1.0]], [[1.0]], p_nn=1.0, p_cc=1.0, q_current=0.5)
        fc = forecast_path(m, 1)
        assert fc.q_hat[0] == 0.5
        assert fc.mu_hat[0, 0] == pytest.approx(0.0)
        assert fc.sigma_hat[0, 0, 0] == pytest.approx(2.0)

    @given(probs, st.floats(0.5, 1.0), st.floats(0.5, 1.0))
    def test_equal_means(self, q, p_nn, p_cc):
        mu = np.array([0.01, -0.02, 0.0])
        m = RegimeModel(mu, mu, np.eye(3), 2 * np.eye(3), p_nn, p_cc, q)
        np.testing.assert_allclose(forecast_path(m, 6).mu_hat, np.tile(mu, (6, 1)), atol=1e-15)

    @given(probs, st.floats(0.0, 1.0), st.floats(0.0, 1.0), st.integers(0, 1000))
    def test_sigma_hat_spd(self, q, p_nn, p_cc, seed):
        fc = forecast_path(_model(n=4, q=q, p_nn=p_nn, p_cc=p_cc, seed=seed), 5)
        for S in fc.sigma_hat:
            np.testing.assert_allclose(S, S.T)
            assert np.linalg.eigvalsh(S)[0] > 0

    def test_monte_carlo_mixture_moments(self):
        m = _model(n=3, q=0.3, seed=4)
        fc = forecast_path(m, 3)
        rng = np.random.default_rng(99)
        N = 200_000
        for k in range(3):
            z = rng.random(N) < fc.q_hat[k]
            x = np.where(
                z[:, None],
                rng.multivariate_normal(m.mu_normal, m.sigma_normal, N),
                rng.multivariate_normal(m.mu_contraction, m.sigma_contraction, N),
            )
            se = np.sqrt(np.diag(fc.sigma_hat[k]) / N)
            assert np.all(np.abs(x.mean(0) - fc.mu_hat[k]) < 4 * se)

    def test_bad_horizon(self):
        with pytest.raises(ValidationError):
            forecast_path(_model(), 0)

    def test_head_and_round_trip(self):
        fc = forecast_path(_model(), 5)
        back = ForecastPath.from_dict(json.loads(json.dumps(fc.to_dict())))
        np.testing.assert_array_equal(back.sigma_hat, fc.sigma_hat)
        assert fc.head(2).horizon == 2
        with pytest.raises(ValidationError):
            fc.head(6)


class TestFilterUpdate:
    def test_identical_regimes_only_propagate(self):
        m = RegimeModel([0.0, 0.0], [0.0, 0.0], np.eye(2), np.eye(2), 0.9, 0.8, 0.4)
        prior = forecast_regime_prob(0.4, 0.9, 0.8)
        for obs in ([0.0, 0.0], [0.5, -0.3], [-0.9, 0.9]):
            assert filter_update(m, obs) == pytest.approx(prior, abs=1e-14)

    def test_bayes_oracle(self):
        m = _model(n=3, q=0.6, seed=2)
        obs = np.array([0.002, -0.01, 0.005])
        prior = 0.6 * m.p_nn + 0.4 * (1 - m.p_cc)
        ln = prior * multivariate_normal(m.mu_normal, m.sigma_normal).pdf(obs)
        lc = (1 - prior) * multivariate_normal(m.mu_contraction, m.sigma_contraction).pdf(obs)
        assert filter_update(m, obs) == pytest.approx(ln / (ln + lc), rel=1e-10)

    def test_observation_at_tight_normal_mean(self):
        m = RegimeModel([0.01, 0.0], [0.0, 0.0], 1e-8 * np.eye(2), np.eye(2), 0.5, 0.5, 0.5)
        # density ratio contraction/normal = 1e-8 * exp(-0.01**2 / 2)
        expected = 1.0 / (1.0 + 1e-8 * np.exp(-5e-5))
        assert filter_update(m, [0.01, 0.0]) == pytest.approx(expected, rel=1e-12)

    def test_absorbing(self):
        m = RegimeModel([0.0, 0.0], [1.0, 1.0], np.eye(2), np.eye(2), 1.0, 1.0, 1.0)
        assert filter_update(m, [5.0, 5.0]) == 1.0

    def test_wrong_size(self):
        with pytest.raises(ValidationError):
            filter_update(_model(), [0.0, 0.0, 0.0])


class TestFitEm:
    def test_parameter_recovery(self):
        spec = _separated_spec()
        panel, labels = simulate_market(spec)
        m = fit_em(panel, ["A1", "A2"])
        assert abs(m.p_nn - spec.p_nn) <= 0.05
        assert abs(m.p_cc - spec.p_cc) <= 0.05
        for est, true, sig, lab in ((m.mu_normal, spec.mu_normal, spec.sigma_normal, "normal"),
                                   (m.mu_contraction, spec.mu_contraction, spec.sigma_contraction,
                                    "contraction")):
            se = np.sqrt(np.diag(sig) / np.sum(labels == lab))
            assert np.all(np.abs(est - true) < 3 * se)

    def test_loglik_monotone(self):
        panel, _ = simulate_market(_separated_spec(seed=8))
        m = fit_em(panel, [0])
        tr = np.array(m.diagnostics.loglik_trace)
        assert len(tr) >= 2
        assert np.all(np.diff(tr) >= -1e-9 * np.abs(tr[1:]))

    def test_regime_identity_by_first_driving_mean(self):
        panel, _ = simulate_market(_separated_spec(seed=9))
        m = fit_em(panel, [0, 1])
        assert m.diagnostics.hmm_means[0, 0] > m.diagnostics.hmm_means[1, 0]
        assert m.mu_normal[0] > m.mu_contraction[0]

    def test_labels_and_q_from_probabilities(self):
        panel, _ = simulate_market(_separated_spec(seed=10))
        m = fit_em(panel, [0, 1])
        d = m.diagnostics
        lab = d.smoothed_normal >= 0.5
        np.testing.assert_allclose(m.mu_normal, panel.returns[lab].mean(0))
        np.testing.assert_allclose(m.sigma_normal, np.cov(panel.returns[lab], rowvar=False), rtol=1e-9)
        assert m.q_current == pytest.approx(d.filtered_normal[-1])

    def test_raw_matrix_matches_panel(self):
        panel, _ = simulate_market(_separated_spec(T=600, seed=11))
        a = fit_em(panel, ["A1"])
        b = fit_em(panel.returns, [0])
        np.testing.assert_array_equal(a.sigma_normal, b.sigma_normal)
        assert a.p_nn == b.p_nn

    def test_short_window(self):
        panel, _ = simulate_market(_separated_spec(T=10))
        with pytest.raises(ValidationError):
            fit_em(panel, [0])

    def test_bad_driving_column(self):
        panel, _ = simulate_market(_separated_spec(T=300))
        with pytest.raises(ValidationError):
            fit_em(panel, ["nope"])
        with pytest.raises(ValidationError):
            fit_em(panel.returns, ["A1"])

    def test_degenerate_regime(self):
        rng = np.random.default_rng(1)
        r = rng.normal(0, 0.01, (300, 4))
        r[[50, 150, 250], 0] = -0.5  # three crash days form their own state
        with pytest.raises(DegenerateRegimeError):
            fit_em(r, [0], EmConfig(min_obs=250))


def test_gaussian_logpdf_matches_scipy(rng):
    S = random_spd(rng, 4)
    mu = rng.normal(size=4)
    y = rng.normal(size=(7, 4))
    np.testing.assert_allclose(gaussian_logpdf(y, mu, S), multivariate_normal(mu, S).logpdf(y), rtol=1e-12)


class TestRegularize:
    def test_leaves_well_conditioned_alone(self, rng):
        S = random_spd(rng, 5)
        np.testing.assert_array_equal(regularize_covariance(S), S)

    def test_lifts_singular(self):
        v = np.array([1.0, 2.0, 3.0])
        S = regularize_covariance(np.outer(v, v))
        eps = 1e-10 * 14.0 / 3
        assert np.linalg.eigvalsh(S)[0] >= eps - 1e-14

    def test_lifts_negative(self):
        S = regularize_covariance(np.diag([1.0, -0.5]))
        assert np.linalg.eigvalsh(S)[0] > 0


def test_historical_model_is_single_regime(rng):
    r = rng.normal(0, 0.01, (100, 3))
    m = historical_model(r)
    fc = forecast_path(m, 3)
    np.testing.assert_allclose(fc.mu_hat, np.tile(r.mean(0), (3, 1)))
    np.testing.assert_allclose(fc.sigma_hat[2], np.cov(r, rowvar=False))


def test_model_json_round_trip(tmp_path):
    m = with_q(_model(n=3), 0.25)
    save_model(m, tmp_path / "m.json")
    back = load_model(tmp_path / "m.json")
    assert back.to_dict() == m.to_dict()


def test_model_rejects_bad_probability():
    with pytest.raises(ValidationError):
        _model(p_nn=1.5)
