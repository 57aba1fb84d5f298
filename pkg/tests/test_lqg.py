import math

import numpy as np
import pytest

from ctrl_diffuse.errors import NumericError
from ctrl_diffuse.instances import finetune_instance, gradient_instance, perturbed
from ctrl_diffuse.lqg import (exact_gradient, exact_objective, exact_terminal_reward, exact_value, optimal_objective,
                              optimal_policy)
from ctrl_diffuse.rl_env import LinearReward, RolloutConfig, objective_estimate, rollout
from ctrl_diffuse.rng import rng_stream


@pytest.mark.parametrize("eta", [0.0, 0.5, 1.0])
def test_exact_objective_matches_monte_carlo(eta):
    inst = gradient_instance(eta=eta)
    b = rollout(inst.pol, inst.pre, inst.reward, inst.cfg, inst.sched, 0, rng_stream(0, "lqg", 0), 200_000)
    m, se = objective_estimate(b)
    assert abs(m - exact_objective(inst.pol, inst.pre, inst.reward, inst.cfg, inst.sched)) < 4 * se
    tr = b.terminal_reward
    assert abs(tr.mean() - exact_terminal_reward(inst.pol, inst.reward, inst.cfg, inst.sched)) < 4 * tr.std() / math.sqrt(tr.size)


def test_exact_value_from_fixed_start():
    inst = finetune_instance(penalty_beta=0.5)
    pol = perturbed(inst.pre, 0.05, 0)
    vm = exact_value(pol, inst.pre, inst.reward, inst.cfg, inst.sched)
    x0 = np.tile([0.5, -0.5], (100_000, 1))
    noises = {"x0": x0,
              "action": rng_stream(0, "lqg-x", 0).standard_normal((100_000, 16, 2)),
              "brownian": rng_stream(0, "lqg-x", 1).standard_normal((100_000, 16, 2))}
    b = rollout(pol, inst.pre, inst.reward, inst.cfg, inst.sched, 0, noises=noises)
    m, se = objective_estimate(b)
    assert abs(m - vm.value(0, x0[0])) < 4 * se


def test_optimal_policy_is_stationary_and_best():
    inst = gradient_instance(penalty_beta=0.5)
    opt = optimal_policy(inst.pre, inst.reward, inst.cfg, inst.sched)
    g = exact_gradient(opt, inst.pre, inst.reward, inst.cfg, inst.sched)
    assert np.max(np.abs(g)) < 1e-6
    best = optimal_objective(inst.pre, inst.reward, inst.cfg, inst.sched)
    for seed in range(5):
        other = perturbed(opt, 0.1, seed)
        assert exact_objective(other, inst.pre, inst.reward, inst.cfg, inst.sched) < best


def test_large_penalty_pins_optimum_to_pretrained():
    inst = finetune_instance(penalty_beta=1e8)
    opt = optimal_policy(inst.pre, inst.reward, inst.cfg, inst.sched)
    np.testing.assert_allclose(opt.flatten(), inst.pre.flatten(), atol=1e-5)


def test_unpenalized_linear_reward_is_unbounded():
    inst = gradient_instance()
    cfg = RolloutConfig(1.0, 0.0, inst.grid)
    with pytest.raises(NumericError):
        optimal_policy(inst.pre, LinearReward([[1.0]]), cfg, inst.sched)


def test_exact_gradient_vanishes_at_pretrained_for_flat_reward():
    inst = gradient_instance(penalty_beta=1.0)
    g = exact_gradient(inst.pre, inst.pre, LinearReward([[0.0]]), inst.cfg, inst.sched)
    np.testing.assert_allclose(g, 0.0, atol=1e-8)
