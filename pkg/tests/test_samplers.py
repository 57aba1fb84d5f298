import math

import numpy as np
import pytest

from ctrl_diffuse.data_scores import AnalyticScore, Gaussian
from ctrl_diffuse.errors import DivergenceError
from ctrl_diffuse.rng import rng_stream
from ctrl_diffuse.samplers import (SamplerSpec, ddim_rollout, ddim_step, ddim_step_eps_form, ddpm_rollout, ddpm_step,
                                   exact_flow_gaussian, prob_flow_rollout, reverse_sde_rollout, rollout, sample_prior,
                                   sampler_report)
from ctrl_diffuse.schedule import NoiseSchedule, TimeGrid
from ctrl_diffuse.validate import ORDER_DATA, loglog_slope, order_errors

STD = Gaussian([0.0, 0.0], [1.0, 1.0])


class ZeroScore:
    def __init__(self, dim):
        self.dim = dim

    def __call__(self, t, x, c=0):
        return np.zeros_like(np.asarray(x, dtype=float))


class HugeScore(ZeroScore):
    def __call__(self, t, x, c=0):
        return 1e8 * np.ones_like(np.asarray(x, dtype=float))


def test_prior_draws():
    a = sample_prior(3, rng_stream(0, "prior", 0), 100_000)
    assert np.all(np.abs(a.mean(axis=0)) < 3 / math.sqrt(100_000))
    np.testing.assert_array_equal(a, sample_prior(3, rng_stream(0, "prior", 0), 100_000))
    assert sample_prior(1, rng_stream(0, "prior", 1)).shape == (1,)


def test_reverse_sde_preserves_standard_normal(linear):
    n = 10_000
    traj = reverse_sde_rollout(AnalyticScore(STD, linear), linear, SamplerSpec("reverse_sde", TimeGrid(500, 1.0), 1.0),
                               rng_stream(0, "test-sde", 0), n)
    xT = traj.terminal
    assert traj.states.shape == (n, 501, 2)
    assert traj.noises.shape == (n, 500, 2)
    assert np.all(np.abs(xT.mean(axis=0)) < 3 / math.sqrt(n))
    assert np.all(np.abs(np.cov(xT.T) - np.eye(2)) < 3 * math.sqrt(2.0 / n))


def test_eta_zero_reverse_sde_is_probability_flow(linear):
    grid = TimeGrid(40, 1.0)
    score = AnalyticScore(ORDER_DATA, linear)
    x0 = rng_stream(0, "test-eta0", 0).standard_normal((20, 2))
    sde = reverse_sde_rollout(score, linear, SamplerSpec("reverse_sde", grid, 0.0), x0=x0)
    ode = prob_flow_rollout(score, linear, SamplerSpec("prob_flow", grid), x0=x0)
    assert sde.noises.size == 0
    np.testing.assert_array_equal(sde.states, ode.states)


@pytest.mark.parametrize("eta", [0.5, 1.0])
def test_zero_score_matches_hand_moment_recursion(eta):
    beta, n_steps, n = 0.8, 10, 200_000
    sched, grid = NoiseSchedule.constant(beta, 1.0), TimeGrid(n_steps, 1.0)
    dt = grid.dt
    c = 1.0 + 0.5 * beta * dt
    var = c ** (2 * n_steps) + eta**2 * beta * dt * sum(c ** (2 * k) for k in range(n_steps))
    xT = reverse_sde_rollout(ZeroScore(1), sched, SamplerSpec("reverse_sde", grid, eta), rng_stream(0, "zero", 0), n).terminal
    assert abs(xT.var() - var) < 3 * var * math.sqrt(2.0 / n)
    assert abs(xT.mean()) < 3 * math.sqrt(var / n)


def test_probability_flow_map_is_linear_with_recursion_gain():
    sched, s2 = NoiseSchedule.constant(1.0, 1.0), 0.3
    data = Gaussian([0.0], [s2])
    grid = TimeGrid(64, 1.0)
    gain = 1.0
    for i in range(grid.num_steps):
        tau = 1.0 - grid.time(i)
        ab = sched.alpha_bar(tau)
        gain *= 1.0 + 0.5 * sched.beta(tau) * grid.dt * (1.0 - 1.0 / (ab * s2 + 1.0 - ab))
    x0 = np.array([[-2.0], [0.5], [1.0]])
    out = prob_flow_rollout(AnalyticScore(data, sched), sched, SamplerSpec("prob_flow", grid), x0=x0).terminal
    np.testing.assert_allclose(out, gain * x0, rtol=1e-12)
    np.testing.assert_array_equal(out, prob_flow_rollout(AnalyticScore(data, sched), sched,
                                                         SamplerSpec("prob_flow", grid), x0=x0).terminal)
    # standard normal data makes the flow the identity
    ident = prob_flow_rollout(AnalyticScore(STD, sched), sched, SamplerSpec("prob_flow", grid), x0=np.ones((1, 2)))
    np.testing.assert_allclose(ident.terminal, 1.0, rtol=1e-14)


def _flow_error(kind, n, x0, sched):
    fn = prob_flow_rollout if kind == "prob_flow" else ddim_rollout
    out = fn(AnalyticScore(ORDER_DATA, sched), sched, SamplerSpec(kind, TimeGrid(n, 1.0)), x0=x0).terminal
    return np.linalg.norm(out.mean(axis=0) - exact_flow_gaussian(ORDER_DATA, sched, x0, 1.0, 0.0).mean(axis=0))


@pytest.mark.parametrize("kind", ["prob_flow", "ddim"])
def test_flow_error_halves_when_steps_double(linear, kind):
    ratios = []
    for k in range(10):
        x0 = rng_stream(0, "richardson", k).standard_normal((1, 2))
        ratios.append(_flow_error(kind, 500, x0, linear) / _flow_error(kind, 250, x0, linear))
    assert 0.35 <= float(np.mean(ratios)) <= 0.65


def test_ddpm_single_step_hand_formula():
    x, beta = np.array([[1.0, -2.0]]), 0.04
    np.testing.assert_allclose(ddpm_step(x, np.zeros_like(x), beta, np.zeros_like(x)), x / math.sqrt(1 - beta))
    z = np.array([[0.3, 0.1]])
    np.testing.assert_allclose(ddpm_step(x, np.zeros_like(x), beta, z), x / math.sqrt(1 - beta) + math.sqrt(beta) * z)
    s = np.array([[0.5, 0.5]])
    np.testing.assert_allclose(ddpm_step(x, s, 1e-12, z), x, atol=1e-5)


def test_ddpm_one_step_mean_monte_carlo():
    sched, grid, n = NoiseSchedule.constant(1.0), TimeGrid(10, 1.0), 100_000
    x0 = np.full((n, 1), 2.0)
    beta = sched.discrete_betas(grid)[0]
    traj = ddpm_rollout(ZeroScore(1), sched, SamplerSpec("ddpm", grid), rng_stream(0, "ddpm1", 0), x0=x0)
    x1 = traj.states[:, 1, 0]
    assert abs(x1.mean() - 2.0 / math.sqrt(1 - beta)) < 3 * math.sqrt(beta / n)


def test_ddpm_and_sde_deviation_halves(linear):
    errs = order_errors("ddpm_sde", ns=(250, 500, 1000), num_paths=2000)
    ratios = [b / a for a, b in zip(errs, errs[1:])]
    assert len(ratios) == 2
    assert all(0.35 <= r <= 0.65 for r in ratios)


def test_ddpm_sde_per_step_difference_is_second_order(linear):
    score = AnalyticScore(ORDER_DATA, linear)
    worst = []
    for n in (200, 400):
        grid = TimeGrid(n, 1.0)
        x = rng_stream(0, "local", 0).standard_normal((500, 2))
        z = rng_stream(0, "local", 1).standard_normal((500, 1, 2))
        a = ddpm_rollout(score, linear, SamplerSpec("ddpm", grid), x0=x,
                         noises=np.repeat(z, n, axis=1)).states[:, 1]
        b = reverse_sde_rollout(score, linear, SamplerSpec("reverse_sde", grid, 1.0), x0=x,
                                noises=np.repeat(z, n, axis=1)).states[:, 1]
        worst.append(float(np.max(np.abs(a - b))))
    assert 3.0 <= worst[0] / worst[1] <= 5.0  # halving dt divides a one-step gap by four


def test_ddim_final_step_returns_predicted_x0(linear):
    x, s = np.array([[0.3, -1.0]]), np.array([[-0.2, 0.9]])
    t = 0.05
    x0_hat = (x + linear.sigma(t) ** 2 * s) / linear.alpha(t)
    np.testing.assert_allclose(ddim_step(x, s, t, 0.0, linear), x0_hat, rtol=1e-14)


def test_ddim_update_forms_agree(linear, rng):
    for _ in range(200):
        t = float(rng.uniform(0.02, 1.0))
        s_time = float(rng.uniform(1e-3, t))
        x, s = rng.normal(size=(4, 3)), rng.normal(size=(4, 3)) * 3
        np.testing.assert_allclose(ddim_step(x, s, t, s_time, linear), ddim_step_eps_form(x, s, t, s_time, linear),
                                   rtol=0, atol=1e-12 * (1 + np.abs(x).max() + np.abs(s).max()))


def test_ddim_is_first_order_against_exact_flow():
    assert -1.3 <= loglog_slope((125, 250, 500, 1000), order_errors("ddim_exact", num_paths=500)) <= -0.7


def test_noise_replay_reproduces_states(linear):
    score = AnalyticScore(ORDER_DATA, linear)
    grid = TimeGrid(30, 1.0)
    for spec, fn in ((SamplerSpec("reverse_sde", grid, 0.4), reverse_sde_rollout), (SamplerSpec("ddpm", grid), ddpm_rollout)):
        first = fn(score, linear, spec, rng_stream(0, "replay", 0), num_paths=16)
        again = fn(score, linear, spec, x0=first.states[:, 0], noises=first.noises)
        np.testing.assert_array_equal(first.states, again.states)


def test_divergence_names_the_step(linear):
    with pytest.raises(DivergenceError) as info:
        reverse_sde_rollout(HugeScore(1), linear, SamplerSpec("reverse_sde", TimeGrid(10, 1.0), 1.0),
                            rng_stream(0, "div", 0), 4)
    assert info.value.step == 0


def test_sampler_report_rows(linear):
    grid = TimeGrid(50, 1.0)
    specs = [SamplerSpec("ddpm", grid, 1.0, 5), SamplerSpec("ddpm", grid, 1.0, 5)]
    rows = sampler_report(AnalyticScore(STD, linear), linear, specs, 300, STD)
    np.testing.assert_array_equal(rows[0]["mean"], rows[1]["mean"])
    assert rows[0]["sampler"] == "ddpm"
    assert sampler_report(AnalyticScore(STD, linear), linear, [], 10) == []
    with pytest.raises(ValueError):
        sampler_report(AnalyticScore(STD, linear), linear, [specs[0], SamplerSpec("ddim", TimeGrid(20, 1.0))], 10)


def test_coupled_ddpm_and_sde_means_are_close(linear):
    data = Gaussian([1.0, -1.0], [0.5, 2.0])
    grid = TimeGrid(1000, 1.0)
    specs = [SamplerSpec("ddpm", grid, 1.0, 0), SamplerSpec("reverse_sde", grid, 1.0, 0)]
    rows = sampler_report(AnalyticScore(data, linear), linear, specs, 2000, data)
    assert np.max(np.abs(rows[0]["mean"] - rows[1]["mean"])) < 5 * grid.dt


def test_spec_validation():
    with pytest.raises(ValueError):
        SamplerSpec("heun", TimeGrid(10, 1.0))
    with pytest.raises(ValueError):
        SamplerSpec("reverse_sde", TimeGrid(10, 1.0), eta=-0.5)
    assert SamplerSpec("reverse_sde", TimeGrid(10, 1.0), 0.0).label == "reverse_sde(eta=0)"


def test_generic_rollout_dispatch(linear):
    grid = TimeGrid(40, 1.0)
    for kind in ("reverse_sde", "prob_flow", "ddpm", "ddim"):
        traj = rollout(AnalyticScore(STD, linear), linear, SamplerSpec(kind, grid), num_paths=3)
        assert traj.states.shape == (3, 41, 2)
        assert np.all(np.isfinite(traj.terminal))
