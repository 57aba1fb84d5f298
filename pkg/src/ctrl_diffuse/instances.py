"""Small linear-Gaussian problems with exact answers.

Both instances pretrain on a Gaussian data law, so the pretrained policy is
the linearized analytic score and every value, gradient and optimum is
available from the LQG recursions in :mod:`ctrl_diffuse.lqg`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data_scores import AnalyticScore, Gaussian
from .policy import GaussianPolicy
from .rl_env import NegSqDist, RewardModel, RolloutConfig
from .rng import rng_stream
from .schedule import NoiseSchedule, TimeGrid


@dataclass
class Instance:
    sched: NoiseSchedule
    grid: TimeGrid
    data: Gaussian
    pre: GaussianPolicy
    pol: GaussianPolicy
    reward: RewardModel
    cfg: RolloutConfig


def pretrained_policy(data: Gaussian, sched: NoiseSchedule, grid: TimeGrid, explore_var: float,
                      contexts: int = 1) -> GaussianPolicy:
    return GaussianPolicy.from_score(AnalyticScore(data, sched).to_linear_grid(grid), explore_var, contexts)


def perturbed(pol: GaussianPolicy, scale: float, seed: int = 0) -> GaussianPolicy:
    """``pol`` with i.i.d. ``N(0, scale^2)`` added to every parameter (stream ``("perturb", 0)``)."""
    noise = rng_stream(seed, "perturb", 0).standard_normal(pol.num_params)
    return pol.with_params(pol.flatten() + scale * noise)


def gradient_instance(eta: float = 1.0, penalty_beta: float = 0.05, num_paths: int = 100_000,
                      perturb: float = 0.3, seed: int = 0) -> Instance:
    """One-dimensional, four-step problem used to referee the gradient estimators.

    Constant ``beta = 0.25`` keeps the per-step drift small, which keeps the
    left-point value-gradient weight of the CPG estimator close to unbiased.
    The large exploration variance makes the action noise dominate.
    """
    sched = NoiseSchedule.constant(0.25, 1.0)
    grid = TimeGrid(4, 1.0)
    data = Gaussian([0.5], [1.0])
    pre = pretrained_policy(data, sched, grid, explore_var=16.0)
    pol = perturbed(pre, perturb, seed)
    cfg = RolloutConfig(eta, penalty_beta, grid, 1, num_paths, seed)
    return Instance(sched, grid, data, pre, pol, NegSqDist([[1.0]]), cfg)


def finetune_instance(penalty_beta: float = 0.0, explore_var: float = 0.02, seed: int = 0) -> Instance:
    """Two-dimensional, sixteen-step problem that steers samples toward ``(4, 0)``."""
    sched = NoiseSchedule.constant(1.0, 1.0)
    grid = TimeGrid(16, 1.0)
    data = Gaussian([0.0, 0.0], [0.25, 0.25])
    pre = pretrained_policy(data, sched, grid, explore_var)
    cfg = RolloutConfig(1.0, penalty_beta, grid, 1, 4000, seed)
    return Instance(sched, grid, data, pre, pre.copy(), NegSqDist([[4.0, 0.0]]), cfg)


def max_mean_deviation(pol: GaussianPolicy, pre: GaussianPolicy, test_states: np.ndarray) -> float:
    """Largest ``|mu_pol - mu_pre|`` over nodes, contexts and the given states."""
    worst = 0.0
    for i in range(pol.grid.num_steps):
        for c in range(pol.contexts):
            diff = pol.mean_at_node(i, test_states, c) - pre.mean_at_node(i, test_states, c)
            worst = max(worst, float(np.max(np.linalg.norm(diff, axis=1))))
    return worst
