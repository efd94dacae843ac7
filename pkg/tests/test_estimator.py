import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vspfreg.estimator import (
    LinearGaussianModel,
    predicted_error_covariance,
    random_model,
    simulate_estimation_error,
)
from vspfreg.sampling import utilities_from_g


def test_no_data_keeps_prior():
    m = random_model(10, 0)
    assert np.array_equal(predicted_error_covariance(m, np.zeros(10)), m.R_theta)


def test_single_voxel_update():
    g = np.zeros((1, 6))
    g[0, 0] = 1.0
    m = LinearGaussianModel(np.zeros(6), np.eye(6), g, 1.0)
    expected = np.eye(6)
    expected[0, 0] = 0.5
    assert np.allclose(predicted_error_covariance(m, np.ones(1)), expected, atol=1e-15)


def test_prediction_matches_simulation():
    m = random_model(50, 0, g_scale=0.05)
    p = np.random.default_rng(100).random(50)
    analytic = np.trace(predicted_error_covariance(m, p))
    empirical = simulate_estimation_error(m, p, 100_000, seed=0)
    assert abs(empirical - analytic) <= 0.02 * analytic


def test_simulation_without_data():
    m = random_model(20, 1)
    draws = 20_000
    emp = simulate_estimation_error(m, np.zeros(20), draws, seed=3)
    # trace of a Gaussian quadratic form: sd = sqrt(2 tr(R^2) / draws)
    sd = np.sqrt(2 * np.trace(m.R_theta @ m.R_theta) / draws)
    assert abs(emp - np.trace(m.R_theta)) < 5 * sd


def test_data_reduces_error():
    g = 3.0 * np.eye(6)
    m = LinearGaussianModel(np.zeros(6), np.eye(6), g, 1.0)
    emp = simulate_estimation_error(m, np.ones(6), 20_000, seed=1)
    assert emp < np.trace(m.R_theta)
    assert emp == pytest.approx(6 * 0.1, rel=0.05)


def test_error_shrinks_with_draws():
    m = random_model(30, 2, g_scale=0.05)
    p = np.full(30, 0.5)
    target = np.trace(predicted_error_covariance(m, p))
    small = [simulate_estimation_error(m, p, 500, seed=s) - target for s in range(40)]
    large = [simulate_estimation_error(m, p, 1000, seed=100 + s) - target for s in range(40)]
    ratio = np.std(small) / np.std(large)
    assert 1.0 < ratio < 2.2  # sqrt(2) in expectation


def test_full_estimator_is_available():
    m = random_model(15, 4, g_scale=1.0)
    p = np.full(15, 0.5)
    full = simulate_estimation_error(m, p, 2000, seed=1, estimator="full")
    assert 0 < full < np.trace(m.R_theta)
    with pytest.raises(ValueError):
        simulate_estimation_error(m, p, 10, seed=1, estimator="other")


def test_draws_are_seeded():
    m = random_model(10, 5)
    p = np.full(10, 0.3)
    assert simulate_estimation_error(m, p, 500, 9) == simulate_estimation_error(m, p, 500, 9)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_prediction_properties(seed):
    rng = np.random.default_rng(seed)
    m = random_model(25, seed, g_scale=rng.uniform(0.01, 1.0), sigma_xi2=rng.uniform(0.1, 10))
    p = rng.random(25)
    P = predicted_error_covariance(m, p)
    assert np.linalg.eigvalsh(P - m.R_theta).max() <= 1e-10
    u = utilities_from_g(m.g_list, m.R_theta, m.sigma_xi2)
    assert abs(np.trace(P) - (np.trace(m.R_theta) - p @ u)) <= 1e-10 * np.trace(m.R_theta)
    i = rng.integers(25)
    q = p.copy()
    q[i] = min(1.0, q[i] + rng.uniform(0, 1))
    assert np.trace(predicted_error_covariance(m, q)) <= np.trace(P) + 1e-12


def test_model_validation():
    with pytest.raises(ValueError):
        LinearGaussianModel(np.zeros(2), np.array([[1.0, 0.5], [0.0, 1.0]]), np.ones((1, 2)))
    with pytest.raises(ValueError):
        LinearGaussianModel(np.zeros(2), -np.eye(2), np.ones((1, 2)))
    m = random_model(3, 0)
    with pytest.raises(ValueError):
        predicted_error_covariance(m, np.array([0.5, 1.5, 0.0]))
