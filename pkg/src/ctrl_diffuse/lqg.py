"""Closed-form linear-quadratic-Gaussian oracles for the discretized control problem.

With linear policies, Gaussian noise and quadratic rewards, the value of the
Euler chain is exactly quadratic at every node. These recursions are the
ground truth that the Monte-Carlo estimators are checked against.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericError
from .policy import GaussianPolicy
from .rl_algo import ValueModel
from .rl_env import RewardModel, RolloutConfig, penalty_coef
from .schedule import NoiseSchedule


def _step(cfg: RolloutConfig, sched: NoiseSchedule, i: int, explore_var: float):
    grid = cfg.grid
    t = grid.time(i)
    beta = sched.beta(grid.horizon - t)
    kdt = cfg.kappa_factor * beta * grid.dt
    noise = kdt**2 * explore_var + cfg.eta**2 * beta * grid.dt
    w = penalty_coef(cfg, sched, t) * grid.dt
    return beta, kdt, noise, w


def exact_value(pol: GaussianPolicy, pre: GaussianPolicy, reward: RewardModel, cfg: RolloutConfig,
                sched: NoiseSchedule) -> ValueModel:
    """Exact value of ``pol`` (including exploration noise) at every node and context."""
    grid = cfg.grid
    N, d, C = grid.num_steps, pol.dim, pol.contexts
    vm = ValueModel.zeros(reward, grid, d, C)
    eye = np.eye(d)
    sig2 = pol.explore_var
    for c in range(C):
        Pn, qn, rn = reward.quadratic(c)
        for i in range(N - 1, -1, -1):
            beta, kdt, noise, w = _step(cfg, sched, i, sig2)
            M = (1.0 + 0.5 * beta * grid.dt) * eye + kdt * pol.A[i, c]
            v = kdt * pol.b[i, c]
            D = pol.A[i, c] - pre.A[i, c]
            e = pol.b[i, c] - pre.b[i, c]
            P = M.T @ Pn @ M - w * D.T @ D
            q = M.T @ (2.0 * Pn @ v + qn) - 2.0 * w * D.T @ e
            r = v @ Pn @ v + qn @ v + noise * np.trace(Pn) + rn - w * (e @ e + d * sig2)
            Pn, qn, rn = 0.5 * (P + P.T), q, r
            vm.P[i, c], vm.q[i, c], vm.r[i, c] = Pn, qn, rn
    return vm


def exact_objective(pol: GaussianPolicy, pre: GaussianPolicy, reward: RewardModel, cfg: RolloutConfig,
                    sched: NoiseSchedule) -> float:
    """Expected return averaged over contexts, with ``X_0 ~ N(0, I)``."""
    vm = exact_value(pol, pre, reward, cfg, sched)
    return float(np.mean([np.trace(vm.P[0, c]) + vm.r[0, c] for c in range(pol.contexts)]))


def exact_terminal_reward(pol: GaussianPolicy, reward: RewardModel, cfg: RolloutConfig, sched: NoiseSchedule) -> float:
    """``E[RM(X_N)]`` under ``pol``, exploration noise included."""
    from .rl_env import propagate_moments

    vals = []
    for c in range(pol.contexts):
        m, S = propagate_moments(pol, cfg.eta, sched, c, include_exploration=True)
        P, q, r = reward.quadratic(c)
        vals.append(m[-1] @ P @ m[-1] + np.trace(P @ S[-1]) + q @ m[-1] + r)
    return float(np.mean(vals))


def exact_gradient(pol, pre, reward, cfg, sched, eps: float = 1e-6) -> np.ndarray:
    """Central differences of :func:`exact_objective` (deterministic)."""
    theta = pol.flatten()
    grad = np.zeros_like(theta)
    for k in range(theta.size):
        h = eps * max(1.0, abs(theta[k]))
        tp, tm = theta.copy(), theta.copy()
        tp[k] += h
        tm[k] -= h
        grad[k] = (exact_objective(pol.with_params(tp), pre, reward, cfg, sched)
                   - exact_objective(pol.with_params(tm), pre, reward, cfg, sched)) / (2 * h)
    return grad


def optimal_policy(pre: GaussianPolicy, reward: RewardModel, cfg: RolloutConfig, sched: NoiseSchedule,
                   explore_var: float | None = None) -> GaussianPolicy:
    """Best linear-mean policy for the fixed exploration level (backward Riccati pass)."""
    grid = cfg.grid
    N, d, C = grid.num_steps, pre.dim, pre.contexts
    sig2 = pre.explore_var if explore_var is None else explore_var
    eye = np.eye(d)
    opt = GaussianPolicy(np.zeros_like(pre.A), np.zeros_like(pre.b), sig2, grid)
    for c in range(C):
        Pn, qn, rn = reward.quadratic(c)
        for i in range(N - 1, -1, -1):
            beta, kdt, noise, w = _step(cfg, sched, i, sig2)
            M0 = (1.0 + 0.5 * beta * grid.dt) * eye
            H = 0.5 * ((w * eye - kdt**2 * Pn) + (w * eye - kdt**2 * Pn).T)
            rhs = np.column_stack([w * pre.A[i, c] + kdt * Pn @ M0, w * pre.b[i, c] + 0.5 * kdt * qn])
            scale = max(1.0, float(np.max(np.abs(H))))
            if np.min(np.linalg.eigvalsh(H)) < -1e-12 * scale:
                raise NumericError(f"control problem is unbounded at node {i}")
            # singular H: the mean action is irrelevant along its null space
            sol = np.linalg.pinv(H, rcond=1e-12, hermitian=True) @ rhs
            if not np.allclose(H @ sol, rhs, atol=1e-9 * max(1.0, float(np.max(np.abs(rhs))))):
                raise NumericError(f"control problem is unbounded at node {i}")
            A, b = sol[:, :d], sol[:, d]
            opt.A[i, c], opt.b[i, c] = A, b
            M = M0 + kdt * A
            v = kdt * b
            D, e = A - pre.A[i, c], b - pre.b[i, c]
            P = M.T @ Pn @ M - w * D.T @ D
            q = M.T @ (2.0 * Pn @ v + qn) - 2.0 * w * D.T @ e
            rn = v @ Pn @ v + qn @ v + noise * np.trace(Pn) + rn - w * (e @ e + d * sig2)
            Pn, qn = 0.5 * (P + P.T), q
    return opt


def optimal_objective(pre, reward, cfg, sched, explore_var=None) -> float:
    opt = optimal_policy(pre, reward, cfg, sched, explore_var)
    return exact_objective(opt, pre, reward, cfg, sched)
