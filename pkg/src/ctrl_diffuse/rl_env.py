"""Exploratory controlled rollouts with the regularized reward, the Girsanov
path-KL functional and its closed-form terminal-KL counterpart.

Rollouts are vectorized: one call produces a :class:`PathBatch` of
``num_paths`` paths for a single context. ``PathBatch[p]`` gives the
individual :class:`PathSample`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError, UnsupportedModeError
from .policy import GaussianPolicy, grad_log_prob_block
from .samplers import check_finite
from .schedule import NoiseSchedule, TimeGrid


@dataclass(frozen=True)
class RolloutConfig:
    eta: float
    penalty_beta: float
    grid: TimeGrid
    contexts: int = 1
    num_paths: int = 1000
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigError("rl.eta must lie in [0, 1]")
        if self.penalty_beta < 0:
            raise ConfigError("rl.penalty_beta must be nonnegative")
        if self.num_paths < 1:
            raise ConfigError("rl.num_paths must be positive")

    @property
    def ode_mode(self) -> bool:
        return self.eta == 0.0

    @property
    def kappa_factor(self) -> float:
        """``(1 + eta^2) / 2``, the score coefficient in the controlled drift."""
        return (1.0 + self.eta**2) / 2.0

    @property
    def girsanov_factor(self) -> float:
        """``((1 + eta^2) / (2 eta))^2``; undefined in ODE mode."""
        if self.ode_mode:
            raise UnsupportedModeError("the path-KL coefficient diverges at eta = 0")
        return ((1.0 + self.eta**2) / (2.0 * self.eta)) ** 2


class RewardModel:
    """Terminal reward ``RM(x, c)``, quadratic in ``x``.

    ``quadratic(c)`` returns ``(P, q, r)`` with ``RM = x'Px + q'x + r``.
    """

    kind = ""

    def value(self, x, c: int = 0) -> np.ndarray:
        P, q, r = self.quadratic(c)
        x = np.asarray(x, dtype=float)
        return np.einsum("...i,ij,...j->...", x, P, x) + x @ q + r

    def grad(self, x, c: int = 0) -> np.ndarray:
        P, q, _ = self.quadratic(c)
        return 2.0 * np.asarray(x, dtype=float) @ P + q

    def quadratic(self, c: int) -> tuple[np.ndarray, np.ndarray, float]:
        raise NotImplementedError


class NegSqDist(RewardModel):
    """``RM(x, c) = -||x - y_c||^2``."""

    kind = "neg_sq_dist"

    def __init__(self, targets):
        self.targets = np.atleast_2d(np.asarray(targets, dtype=float))

    @property
    def contexts(self) -> int:
        return self.targets.shape[0]

    def quadratic(self, c):
        y = self.targets[c]
        return -np.eye(y.size), 2.0 * y, -float(y @ y)


class LinearReward(RewardModel):
    """``RM(x, c) = w_c . x``."""

    kind = "linear"

    def __init__(self, weights):
        self.weights = np.atleast_2d(np.asarray(weights, dtype=float))

    @property
    def contexts(self) -> int:
        return self.weights.shape[0]

    def quadratic(self, c):
        w = self.weights[c]
        return np.zeros((w.size, w.size)), w.copy(), 0.0


@dataclass
class PathSample:
    context: int
    states: np.ndarray
    actions: np.ndarray
    logpi_grads: np.ndarray
    running_rewards: np.ndarray
    terminal_reward: float
    noises: dict


@dataclass
class PathBatch:
    """Rollouts of one context; leading axis indexes paths.

    ``logpi_grads[p, i]`` is the gradient of ``log pi`` at step ``i`` with
    respect to the ``(A, b)`` block of node ``i`` (see
    :func:`grad_log_prob_block`); all other blocks are zero.
    """

    context: int
    dt: float
    states: np.ndarray           # (P, N+1, d)
    actions: np.ndarray          # (P, N, d)
    means: np.ndarray            # (P, N, d) current-policy means
    pre_means: np.ndarray        # (P, N, d)
    logpi_grads: np.ndarray      # (P, N, d*d + d)
    running_rewards: np.ndarray  # (P, N), rate units
    terminal_reward: np.ndarray  # (P,)
    action_noise: np.ndarray     # (P, N, d) standard normals
    brownian: np.ndarray         # (P, N, d); empty last-but-one axis in ODE mode
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.states.shape[0]

    @property
    def num_steps(self) -> int:
        return self.actions.shape[1]

    def __getitem__(self, p: int) -> PathSample:
        return PathSample(self.context, self.states[p], self.actions[p], self.logpi_grads[p],
                          self.running_rewards[p], float(self.terminal_reward[p]),
                          {"x0": self.states[p, 0], "action": self.action_noise[p], "brownian": self.brownian[p]})

    def noises(self) -> dict:
        return {"x0": self.states[:, 0], "action": self.action_noise, "brownian": self.brownian}

    def returns(self) -> np.ndarray:
        return self.running_rewards.sum(axis=1) * self.dt + self.terminal_reward

    def reward_to_go(self) -> np.ndarray:
        """``G[p, i] = sum_{j >= i} r_j dt + terminal``."""
        tail = np.cumsum(self.running_rewards[:, ::-1], axis=1)[:, ::-1] * self.dt
        return tail + self.terminal_reward[:, None]

    def select(self, idx) -> "PathBatch":
        return PathBatch(self.context, self.dt, self.states[idx], self.actions[idx], self.means[idx],
                         self.pre_means[idx], self.logpi_grads[idx], self.running_rewards[idx],
                         self.terminal_reward[idx], self.action_noise[idx], self.brownian[idx], dict(self.meta))

    def split(self) -> tuple["PathBatch", "PathBatch"]:
        h = len(self) // 2
        return self.select(slice(0, h)), self.select(slice(h, 2 * h))

    @staticmethod
    def concat(batches: list) -> "PathBatch":
        first = batches[0]
        cat = lambda name: np.concatenate([getattr(b, name) for b in batches])  # noqa: E731
        return PathBatch(first.context, first.dt, cat("states"), cat("actions"), cat("means"), cat("pre_means"),
                         cat("logpi_grads"), cat("running_rewards"), cat("terminal_reward"),
                         cat("action_noise"), cat("brownian"), dict(first.meta))


def penalty_coef(cfg: RolloutConfig, sched: NoiseSchedule, t: float) -> float:
    """Positive coefficient ``k(t)`` with running reward ``-k(t) ||a - mu_pre||^2``."""
    g2 = sched.g2(sched.horizon - t)
    if cfg.ode_mode:
        return cfg.penalty_beta * g2
    return 0.5 * cfg.penalty_beta * cfg.girsanov_factor * g2


def running_reward(cfg: RolloutConfig, sched: NoiseSchedule, t: float, a, mu_pre) -> np.ndarray:
    diff = np.asarray(a, dtype=float) - np.asarray(mu_pre, dtype=float)
    return -penalty_coef(cfg, sched, t) * np.sum(diff * diff, axis=-1)


def rollout(pol: GaussianPolicy, pre: GaussianPolicy, reward: RewardModel, cfg: RolloutConfig,
            sched: NoiseSchedule, c: int, rng: np.random.Generator | None = None,
            num_paths: int | None = None, noises: dict | None = None) -> PathBatch:
    """Simulate the exploratory dynamics under ``pol`` for context ``c``.

    Draw order from ``rng``: initial states ``(P, d)``, action noise
    ``(N, P, d)``, then Brownian increments ``(N, P, d)`` unless ``eta = 0``.
    Passing ``noises`` (as returned by :meth:`PathBatch.noises`) replays them.
    """
    grid = cfg.grid
    if pol.grid != grid or pre.grid != grid:
        raise ConfigError("policy, pretrained policy and rollout config must share the grid")
    N, dt, T, d = grid.num_steps, grid.dt, grid.horizon, pol.dim
    if noises is None:
        P = num_paths or cfg.num_paths
        x0 = rng.standard_normal((P, d))
        z = np.swapaxes(rng.standard_normal((N, P, d)), 0, 1)
        xi = np.swapaxes(rng.standard_normal((N, P, d)), 0, 1) if not cfg.ode_mode else np.empty((P, 0, d))
    else:
        x0, z, xi = noises["x0"], noises["action"], noises["brownian"]
        P = x0.shape[0]
        if not cfg.ode_mode and xi.shape[1] != N:
            raise ConfigError("replayed noises lack Brownian increments")
    sd = math.sqrt(pol.explore_var)
    states = np.empty((P, N + 1, d))
    actions = np.empty((P, N, d))
    means = np.empty((P, N, d))
    pre_means = np.empty((P, N, d))
    grads = np.empty((P, N, pol.block_size))
    rewards = np.empty((P, N))
    x = np.array(x0, dtype=float)
    states[:, 0] = x
    kf = cfg.kappa_factor
    for i in range(N):
        t = grid.time(i)
        beta = sched.beta(T - t)
        mu = pol.mean_at_node(i, x, c)
        a = mu + sd * z[:, i]
        mp = pre.mean_at_node(i, x, c)
        means[:, i], pre_means[:, i], actions[:, i] = mu, mp, a
        grads[:, i] = grad_log_prob_block(pol, i, x, c, a)
        rewards[:, i] = running_reward(cfg, sched, t, a, mp)
        x = x + (0.5 * beta * x + kf * beta * a) * dt
        if not cfg.ode_mode:
            x = x + cfg.eta * math.sqrt(beta) * math.sqrt(dt) * xi[:, i]
        check_finite(x, i)
        states[:, i + 1] = x
    return PathBatch(c, dt, states, actions, means, pre_means, grads, rewards, reward.value(x, c),
                     np.array(z, dtype=float), np.array(xi, dtype=float))


def objective_estimate(batch: PathBatch, cfg: RolloutConfig | None = None) -> tuple[float, float]:
    """Mean path return and its standard error (population std over sqrt(n))."""
    if len(batch) == 0:
        raise ValueError("objective_estimate needs a nonempty batch")
    ret = batch.returns()
    return float(ret.mean()), float(ret.std() / math.sqrt(ret.size))


def path_kl_terms(pol: GaussianPolicy, pre: GaussianPolicy, cfg: RolloutConfig, sched: NoiseSchedule, c: int,
                  batch: PathBatch) -> np.ndarray:
    """Per-path Riemann sums of the Girsanov integrand, means evaluated on ``pol`` paths."""
    factor = cfg.girsanov_factor
    grid = cfg.grid
    total = np.zeros(len(batch))
    for i in range(grid.num_steps):
        x = batch.states[:, i]
        diff = pol.mean_at_node(i, x, c) - pre.mean_at_node(i, x, c)
        total += np.sum(diff * diff, axis=1) * sched.g2(grid.horizon - grid.time(i)) * grid.dt
    return 0.5 * factor * total


def path_kl_girsanov(pol, pre, cfg, sched, c, batch) -> float:
    return float(path_kl_terms(pol, pre, cfg, sched, c, batch).mean())


def path_kl_stderr(pol, pre, cfg, sched, c, batch) -> tuple[float, float]:
    terms = path_kl_terms(pol, pre, cfg, sched, c, batch)
    return float(terms.mean()), float(terms.std() / math.sqrt(terms.size))


def exploration_floor(pol: GaussianPolicy, cfg: RolloutConfig, sched: NoiseSchedule) -> float:
    """Path-KL integral with sampled actions at ``pol = pre``: ``d * explore_var`` per unit ``g^2 dt``."""
    grid = cfg.grid
    g2dt = sum(sched.g2(grid.horizon - grid.time(i)) for i in range(grid.num_steps)) * grid.dt
    return 0.5 * cfg.girsanov_factor * pol.dim * pol.explore_var * g2dt


def propagate_moments(pol: GaussianPolicy, eta: float, sched: NoiseSchedule, c: int,
                      include_exploration: bool = False):
    """Mean and covariance of the Euler chain under ``pol`` started from ``N(0, I)``.

    Returns arrays ``m (N+1, d)`` and ``S (N+1, d, d)``. Action noise is
    ignored unless ``include_exploration``.
    """
    grid = pol.grid
    N, dt, T, d = grid.num_steps, grid.dt, grid.horizon, pol.dim
    kf = (1.0 + eta**2) / 2.0
    m = np.zeros((N + 1, d))
    S = np.zeros((N + 1, d, d))
    S[0] = np.eye(d)
    eye = np.eye(d)
    for i in range(N):
        beta = sched.beta(T - grid.time(i))
        F = 0.5 * beta * eye + kf * beta * pol.A[i, c]
        u = kf * beta * pol.b[i, c]
        M = eye + F * dt
        m[i + 1] = m[i] + (F @ m[i] + u) * dt
        noise = eta**2 * beta * dt
        if include_exploration:
            noise += (kf * beta * dt) ** 2 * pol.explore_var
        S[i + 1] = M @ S[i] @ M.T + noise * eye
    return m, S


def gaussian_kl(m1, S1, m2, S2) -> float:
    """``KL(N(m1, S1) || N(m2, S2))``."""
    d = len(m1)
    try:
        L2 = np.linalg.cholesky(S2)
        L1 = np.linalg.cholesky(S1)
    except np.linalg.LinAlgError as exc:
        raise NumericError("singular terminal covariance") from exc
    S2inv = np.linalg.inv(S2)
    dm = np.asarray(m2) - np.asarray(m1)
    logdet = 2.0 * (np.sum(np.log(np.diag(L2))) - np.sum(np.log(np.diag(L1))))
    return float(0.5 * (np.trace(S2inv @ S1) + dm @ S2inv @ dm - d + logdet))


def terminal_kl_closed_form(pol: GaussianPolicy, pre: GaussianPolicy, cfg: RolloutConfig, sched: NoiseSchedule,
                            c: int) -> float:
    m1, S1 = propagate_moments(pol, cfg.eta, sched, c)
    m2, S2 = propagate_moments(pre, cfg.eta, sched, c)
    return max(gaussian_kl(m1[-1], S1[-1], m2[-1], S2[-1]), 0.0)
