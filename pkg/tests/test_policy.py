import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import multivariate_normal

from ctrl_diffuse.data_scores import AnalyticScore, Gaussian
from ctrl_diffuse.errors import ConfigError
from ctrl_diffuse.policy import (GaussianPolicy, drift_b_eta, grad_log_prob, grad_log_prob_block, load_policy, log_prob,
                                 policy_mean, sample_action, save_policy)
from ctrl_diffuse.rng import rng_stream
from ctrl_diffuse.schedule import NoiseSchedule, TimeGrid


def random_policy(seed=0, n=5, d=2, contexts=2, var=0.3):
    rng = rng_stream(seed, "policy-test", 0)
    return GaussianPolicy(rng.normal(size=(n, contexts, d, d)), rng.normal(size=(n, contexts, d)), var, TimeGrid(n, 1.0))


def test_mean_hand_values():
    pol = GaussianPolicy.zeros(TimeGrid(2, 1.0), 2)
    pol.A[0, 0] = [[1.0, 2.0], [0.0, -1.0]]
    pol.b[0, 0] = [0.5, 0.5]
    np.testing.assert_allclose(policy_mean(pol, 0.0, [1.0, 1.0]), [3.5, -0.5])
    np.testing.assert_allclose(policy_mean(pol, 0.5, [1.0, 1.0]), [0.0, 0.0])  # node 1 is still zero
    np.testing.assert_allclose(policy_mean(pol, 1.0, [1.0, 1.0]), [0.0, 0.0])  # the horizon maps to the last node


def test_zero_explore_var_rejected():
    with pytest.raises(ConfigError):
        GaussianPolicy.zeros(TimeGrid(2, 1.0), 1, explore_var=0.0)


def test_context_out_of_range():
    with pytest.raises(IndexError):
        policy_mean(random_policy(), 0.0, [0.0, 0.0], 2)


def test_sample_action_moments():
    pol, n = random_policy(var=0.5), 200_000
    x = np.tile([0.3, -0.2], (n, 1))
    a, z = sample_action(pol, 0.1, x, 1, rng_stream(0, "act", 0))
    mu = policy_mean(pol, 0.1, x[0], 1)
    assert np.all(np.abs(a.mean(axis=0) - mu) < 3 * math.sqrt(0.5 / n))
    assert np.all(np.abs(a.var(axis=0) - 0.5) < 3 * 0.5 * math.sqrt(2.0 / n))
    np.testing.assert_allclose(a, mu + math.sqrt(0.5) * z)


def test_small_variance_collapses_to_mean():
    pol = random_policy(var=1e-14)
    a, _ = sample_action(pol, 0.0, [1.0, 2.0], 0, rng_stream(0, "act", 1))
    np.testing.assert_allclose(a, policy_mean(pol, 0.0, [1.0, 2.0]), atol=1e-6)


def test_log_prob_at_mean_with_unit_variance():
    pol = random_policy(var=1.0)
    x = np.array([0.4, 0.1])
    assert log_prob(pol, 0.3, x, 0, policy_mean(pol, 0.3, x)) == pytest.approx(-math.log(2 * math.pi), abs=1e-14)


def test_log_prob_matches_scipy(rng):
    pol = random_policy(var=0.7)
    for _ in range(20):
        t, x, a, c = float(rng.uniform(0, 1)), rng.normal(size=2), rng.normal(size=2), int(rng.integers(2))
        ref = multivariate_normal(policy_mean(pol, t, x, c), 0.7 * np.eye(2)).logpdf(a)
        assert log_prob(pol, t, x, c, a) == pytest.approx(ref, rel=1e-12)


def test_grad_log_prob_matches_finite_differences(rng):
    pol = random_policy(var=0.4)
    t, x, a, c = 0.45, rng.normal(size=2), rng.normal(size=2), 1
    g = grad_log_prob(pol, t, x, c, a)
    theta, h = pol.flatten(), 1e-5
    for _ in range(20):
        v = rng.normal(size=theta.size)
        fd = (log_prob(pol.with_params(theta + h * v), t, x, c, a)
              - log_prob(pol.with_params(theta - h * v), t, x, c, a)) / (2 * h)
        assert g @ v == pytest.approx(fd, rel=1e-6, abs=1e-8)


def test_grad_is_confined_to_active_block():
    pol = random_policy()
    g = grad_log_prob(pol, 0.45, [1.0, 1.0], 1, [0.0, 0.0])
    active = pol.block_slice(2, 1)
    mask = np.ones(g.size, dtype=bool)
    mask[active] = False
    assert np.all(g[mask] == 0.0)
    assert np.any(g[active] != 0.0)


def test_grad_at_origin_has_zero_matrix_block():
    pol = random_policy(d=3)
    blk = grad_log_prob_block(pol, 1, np.zeros(3), 0, np.ones(3))
    assert np.all(blk[:9] == 0.0)
    np.testing.assert_allclose(blk[9:], (np.ones(3) - pol.b[1, 0]) / pol.explore_var)


def test_block_gradient_batches(rng):
    pol = random_policy()
    xs, acts = rng.normal(size=(7, 2)), rng.normal(size=(7, 2))
    batch = grad_log_prob_block(pol, 3, xs, 0, acts)
    for k in range(7):
        full = grad_log_prob(pol, pol.grid.time(3), xs[k], 0, acts[k])
        np.testing.assert_allclose(batch[k], full[pol.block_slice(3, 0)])


def test_drift_identities():
    sched = NoiseSchedule.constant(2.0)
    x, a = np.array([1.0, -1.0]), np.array([0.5, 0.25])
    np.testing.assert_allclose(drift_b_eta(sched, 1.0, 0.3, x, np.zeros(2)), 0.5 * 2.0 * x)
    np.testing.assert_allclose(drift_b_eta(sched, 0.0, 0.3, np.zeros(2), a), 0.5 * 2.0 * a)
    np.testing.assert_allclose(drift_b_eta(sched, 1.0, 0.3, np.zeros(2), a), 2.0 * a)


def test_from_score_reverses_nodes(linear):
    grid = TimeGrid(8, 1.0)
    lin = AnalyticScore(Gaussian([1.0, 0.0], [2.0, 0.5]), linear).to_linear_grid(grid)
    pol = GaussianPolicy.from_score(lin, 0.1, contexts=3)
    assert pol.contexts == 3
    for i in range(8):
        np.testing.assert_array_equal(pol.A[i, 2], lin.A[8 - i, 0])
        np.testing.assert_array_equal(pol.b[i, 0], lin.b[8 - i, 0])
    with pytest.raises(TypeError):
        GaussianPolicy.from_score(AnalyticScore(Gaussian([0.0], [1.0]), linear), 0.1)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 6), d=st.integers(1, 3), contexts=st.integers(1, 3), seed=st.integers(0, 1000))
def test_flatten_round_trip(n, d, contexts, seed):
    pol = random_policy(seed, n, d, contexts)
    theta = pol.flatten()
    assert theta.size == pol.num_params == n * contexts * (d * d + d)
    back = pol.with_params(theta)
    np.testing.assert_array_equal(back.A, pol.A)
    np.testing.assert_array_equal(back.b, pol.b)
    np.testing.assert_array_equal(theta[pol.block_slice(n - 1, contexts - 1)][-d:], pol.b[n - 1, contexts - 1])


def test_with_params_rejects_wrong_length():
    with pytest.raises(ValueError):
        random_policy().with_params(np.zeros(3))


def test_save_load_round_trip(tmp_path):
    pol = random_policy(var=0.123)
    save_policy(tmp_path / "p.txt", pol)
    back = load_policy(tmp_path / "p.txt", pol.grid)
    np.testing.assert_array_equal(back.flatten(), pol.flatten())
    assert back.explore_var == 0.123
    with pytest.raises(ConfigError):
        load_policy(tmp_path / "p.txt", TimeGrid(4, 1.0))
