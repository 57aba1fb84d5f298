import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctrl_diffuse.data_scores import (AnalyticScore, Gaussian, LinearGridScore, Mixture, ScoreMatchingConfig,
                                      dsm_train, forward_marginal, load_score_model, sample_forward, save_score_model,
                                      score_eps_x0_convert, score_from_eps, score_from_x0, score_relative_rmse,
                                      true_score)
from ctrl_diffuse.errors import ConfigError, DomainError, NumericError
from ctrl_diffuse.rng import rng_stream
from ctrl_diffuse.schedule import NoiseSchedule, TimeGrid
from ctrl_diffuse.validate import dsm_errors

ANISO = Gaussian([3.0, 0.0], [4.0, 1.0])


def test_standard_normal_is_fixed_point(linear):
    for t in (0.0, 0.3, 1.0):
        m = forward_marginal(Gaussian([0.0, 0.0], [1.0, 1.0]), linear, t)
        np.testing.assert_allclose(m.mean, 0.0, atol=1e-15)
        np.testing.assert_allclose(m.cov, np.eye(2), atol=1e-14)


def test_marginal_at_zero_is_data(linear):
    m = forward_marginal(ANISO, linear, 0.0)
    np.testing.assert_array_equal(m.mean, ANISO.mean)
    np.testing.assert_array_equal(m.cov, ANISO.cov)


def test_marginal_closed_form_and_monte_carlo(unit_constant):
    e = math.exp(-1.0)
    m = forward_marginal(ANISO, unit_constant, 1.0)
    np.testing.assert_allclose(m.mean, [3.0 * math.exp(-0.5), 0.0], rtol=1e-14)
    np.testing.assert_allclose(np.diag(m.cov), [4.0 * e + 1.0 - e, 1.0], rtol=1e-14)
    n = 100_000
    _, xt = sample_forward(ANISO, unit_constant, 1.0, rng_stream(0, "test-forward", 0), n)
    se = np.sqrt(np.diag(m.cov) / n)
    assert np.all(np.abs(xt.mean(axis=0) - m.mean) < 3 * se)
    var_se = np.diag(m.cov) * math.sqrt(2.0 / n)
    assert np.all(np.abs(xt.var(axis=0) - np.diag(m.cov)) < 3 * var_se)


def test_mixture_marginal_is_componentwise(linear):
    mix = Mixture([0.25, 0.75], (Gaussian([1.0], [0.5]), Gaussian([-1.0], [2.0])))
    m = forward_marginal(mix, linear, 0.4)
    assert isinstance(m, Mixture)
    np.testing.assert_allclose(m.components[1].mean, [-linear.alpha(0.4)])


def test_sample_forward_at_zero_returns_data(linear, rng):
    x0, xt = sample_forward(ANISO, linear, 0.0, rng, 50)
    np.testing.assert_array_equal(x0, xt)


def test_point_mass_forward_samples(linear):
    point = Gaussian([2.0, -1.0], np.zeros((2, 2)))
    t, n = 0.2, 50_000
    _, xt = sample_forward(point, linear, t, rng_stream(0, "test-point", 0), n)
    bound = 3 * linear.sigma(t) / math.sqrt(n)
    assert np.all(np.abs(xt.mean(axis=0) - linear.alpha(t) * point.mean) < bound)


def test_sample_forward_deterministic(linear):
    a = sample_forward(ANISO, linear, 0.5, rng_stream(1, "x", 0), 10)
    b = sample_forward(ANISO, linear, 0.5, rng_stream(1, "x", 0), 10)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])
    single = sample_forward(ANISO, linear, 0.5, rng_stream(1, "x", 0))
    assert single[0].shape == (2,)


def test_true_score_hand_values(linear):
    np.testing.assert_allclose(true_score(Gaussian([0.0, 0.0], [1.0, 1.0]), linear, 0.4, np.array([1.0, 2.0])),
                               [-1.0, -2.0], atol=1e-14)
    sym = Mixture([0.5, 0.5], (Gaussian([1.5, -0.5], [1.0, 2.0]), Gaussian([-1.5, 0.5], [1.0, 2.0])))
    np.testing.assert_allclose(true_score(sym, linear, 0.3, np.zeros(2)), 0.0, atol=1e-14)


def test_true_score_matches_finite_differences(linear):
    t, x, h = 0.3, np.array([1.0, 1.0]), 1e-5
    marg = forward_marginal(ANISO, linear, t)
    fd = np.array([(marg.log_pdf(x + h * e) - marg.log_pdf(x - h * e)) / (2 * h) for e in np.eye(2)])
    np.testing.assert_allclose(true_score(ANISO, linear, t, x), fd, rtol=1e-6, atol=1e-9)


def test_mixture_score_matches_finite_differences(linear, rng):
    mix = Mixture([0.2, 0.5, 0.3], (Gaussian([-3.0, 0.0], [0.4, 0.4]), Gaussian([0.0, 2.0], [1.0, 0.2]),
                                    Gaussian([3.0, -1.0], [0.3, 1.5])))
    h = 1e-5
    for _ in range(50):
        t, x = float(rng.uniform(0.01, 1.0)), rng.normal(size=2) * 3
        marg = forward_marginal(mix, linear, t)
        fd = np.array([(marg.log_pdf(x + h * e) - marg.log_pdf(x - h * e)) / (2 * h) for e in np.eye(2)])
        np.testing.assert_allclose(true_score(mix, linear, t, x), fd, rtol=1e-5, atol=1e-7)


def test_singular_covariance_score_is_numeric_error():
    with pytest.raises(NumericError):
        Gaussian([0.0, 0.0], np.zeros((2, 2))).score(np.ones(2))


def test_gaussian_rejects_bad_shapes():
    with pytest.raises(ConfigError):
        Gaussian([0.0, 0.0], np.eye(3))
    with pytest.raises(ConfigError):
        Gaussian([0.0, 0.0], [[1.0, 0.5], [0.0, 1.0]])


def test_mixture_weights_validated():
    with pytest.raises(ConfigError):
        Mixture([0.5, 0.6], (Gaussian([0.0], [1.0]), Gaussian([1.0], [1.0])))


@settings(max_examples=60, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(0.05, 1.0))
def test_gaussian_score_is_negative_precision_times_offset(x0, x1, t):
    sched = NoiseSchedule.linear()
    x = np.array([x0, x1])
    m = forward_marginal(ANISO, sched, t)
    np.testing.assert_allclose(true_score(ANISO, sched, t, x), -np.linalg.solve(m.cov, x - m.mean), rtol=1e-10,
                               atol=1e-12)


# ---------------------------------------------------------------------------
# parameterization conversions

def test_convert_hand_values():
    sched = NoiseSchedule.constant(1.0, 1.0)
    t = math.log(2.0)  # alpha = sigma = sqrt(0.5)
    x = np.array([0.8, -1.2])
    eps, x0 = score_eps_x0_convert(-x, t, x, sched)
    np.testing.assert_allclose(x0, x / math.sqrt(2.0), rtol=1e-14)
    np.testing.assert_allclose(eps, math.sqrt(0.5) * x, rtol=1e-14)
    eps, x0 = score_eps_x0_convert(np.zeros(2), t, x, sched)
    np.testing.assert_allclose(x0, x / sched.alpha(t), rtol=1e-14)
    np.testing.assert_array_equal(eps, 0.0)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.01, 1.0), st.lists(st.floats(-10, 10), min_size=3, max_size=3),
       st.lists(st.floats(-10, 10), min_size=3, max_size=3))
def test_convert_round_trips(t, x, s):
    sched = NoiseSchedule.linear()
    x, s = np.array(x), np.array(s)
    eps, x0 = score_eps_x0_convert(s, t, x, sched)
    np.testing.assert_allclose(sched.alpha(t) * x0 + sched.sigma(t) * eps, x, atol=1e-12 * (1 + np.abs(x).max()))
    scale = 1 + np.abs(s).max()
    np.testing.assert_allclose(score_from_eps(eps, t, sched), s, atol=1e-12 * scale)
    np.testing.assert_allclose(score_from_x0(x0, t, x, sched), s, atol=1e-9 * scale)


def test_convert_guard_at_zero(linear):
    with pytest.raises(DomainError):
        score_eps_x0_convert(np.ones(1), 0.0, np.ones(1), linear)


# ---------------------------------------------------------------------------
# score models and training

def test_linear_grid_matches_analytic_at_nodes(linear):
    grid = TimeGrid(20, 1.0)
    oracle = AnalyticScore(ANISO, linear)
    lin = oracle.to_linear_grid(grid)
    x = np.array([[1.0, 2.0], [-3.0, 0.5]])
    for i in (1, 7, 20):
        np.testing.assert_allclose(lin(grid.time(i), x), oracle(grid.time(i), x), rtol=1e-12)
    # between nodes the model holds the left node
    np.testing.assert_array_equal(lin(grid.time(3) + 0.3 * grid.dt, x), lin(grid.time(3), x))


def test_mixture_score_is_not_linear(linear):
    mix = Mixture([0.5, 0.5], (Gaussian([1.0], [1.0]), Gaussian([-1.0], [1.0])))
    with pytest.raises(TypeError):
        AnalyticScore(mix, linear).linear_coefficients(0.5)


def test_analytic_score_context_range(linear):
    with pytest.raises(IndexError):
        AnalyticScore(ANISO, linear, contexts=2)(0.5, np.zeros(2), 2)


def test_dsm_recovers_standard_normal_score(linear):
    grid = TimeGrid(10, 1.0)
    model = dsm_train(ScoreMatchingConfig("g_squared", 10_000, 0.0, 0), Gaussian([0.0, 0.0], [1.0, 1.0]), linear, grid)
    assert np.max(np.abs(model.A[1:] + np.eye(2))) < 0.05
    assert np.max(np.abs(model.b[1:])) < 0.05
    np.testing.assert_array_equal(model.A[0], model.A[1])


@pytest.mark.parametrize("antithetic", [True, False])
def test_dsm_matches_oracle_on_coarse_grid(linear, antithetic):
    grid = TimeGrid(10, 1.0)
    cfg = ScoreMatchingConfig("g_squared", 10_000, 0.0, 0, antithetic)
    model = dsm_train(cfg, ANISO, linear, grid)
    rmse = score_relative_rmse(model, AnalyticScore(ANISO, linear), linear, grid, rng_stream(0, "score-test", 0), ANISO)
    assert rmse.shape == (10,)
    # far from the data end both variants are accurate
    assert np.all(rmse[3:] < 0.05)


def test_antithetic_pairs_reduce_small_time_error(linear):
    grid = TimeGrid(20, 1.0)
    oracle = AnalyticScore(ANISO, linear)
    errs = {}
    for anti in (True, False):
        runs = [score_relative_rmse(dsm_train(ScoreMatchingConfig("g_squared", 5_000, 0.0, s, anti), ANISO, linear, grid),
                                    oracle, linear, grid, rng_stream(s, "score-test", 0), ANISO)[0] for s in range(4)]
        errs[anti] = float(np.mean(runs))
    assert errs[True] < 0.5 * errs[False]


def test_dsm_error_decreases_with_samples():
    errs = dsm_errors((1_000, 10_000, 100_000))
    assert all(b <= 1.1 * a for a, b in zip(errs, errs[1:]))


def test_dsm_is_deterministic_and_thread_invariant(linear):
    grid = TimeGrid(8, 1.0)
    cfg = ScoreMatchingConfig("uniform", 500, 0.0, 3)
    a = dsm_train(cfg, ANISO, linear, grid, workers=1)
    b = dsm_train(cfg, ANISO, linear, grid, workers=4)
    np.testing.assert_array_equal(a.A, b.A)
    np.testing.assert_array_equal(a.b, b.b)


def test_dsm_guards(linear):
    with pytest.raises(ConfigError):
        dsm_train(ScoreMatchingConfig("g_squared", 0, 0.0, 0), ANISO, linear, TimeGrid(4, 1.0))
    with pytest.raises(ConfigError):
        ScoreMatchingConfig("fisher", 100, 0.0, 0)
    with pytest.raises(ConfigError):
        ScoreMatchingConfig("g_squared", 100, -1.0, 0)


def test_ridge_shrinks_coefficients(linear):
    grid = TimeGrid(4, 1.0)
    plain = dsm_train(ScoreMatchingConfig("g_squared", 2000, 0.0, 0), ANISO, linear, grid)
    ridge = dsm_train(ScoreMatchingConfig("g_squared", 2000, 10.0, 0), ANISO, linear, grid)
    assert np.linalg.norm(ridge.A[1:]) < np.linalg.norm(plain.A[1:])


def test_score_model_file_round_trip(tmp_path, linear):
    grid = TimeGrid(6, 1.0)
    model = dsm_train(ScoreMatchingConfig("g_squared", 300, 0.0, 0), ANISO, linear, grid, contexts=2)
    path = tmp_path / "score.txt"
    save_score_model(path, model)
    back = load_score_model(path, grid)
    np.testing.assert_array_equal(back.A, model.A)
    np.testing.assert_array_equal(back.b, model.b)
    assert path.read_text().splitlines()[0] == "2 6 2"
    with pytest.raises(ConfigError):
        load_score_model(path, TimeGrid(7, 1.0))


def test_linear_grid_score_shape_checks(grid16):
    with pytest.raises(ValueError):
        LinearGridScore(np.zeros((16, 1, 2, 2)), np.zeros((16, 1, 2)), grid16)
