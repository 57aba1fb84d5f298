"""Gaussian exploratory policies whose mean plays the role of the score.

A policy lives on reverse time: node ``i`` covers ``[t_i, t_{i+1})`` and its
mean is ``A[i, c] x + b[i, c]``. The action covariance is ``explore_var * I``.

Flat parameter order: node, then context, then the ``d*d`` entries of ``A``
(row-major), then the ``d`` entries of ``b``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data_scores import LinearGridScore, read_linear_grid, write_linear_grid
from .errors import ConfigError
from .schedule import NoiseSchedule, TimeGrid


@dataclass
class GaussianPolicy:
    A: np.ndarray  # (N, C, d, d)
    b: np.ndarray  # (N, C, d)
    explore_var: float
    grid: TimeGrid

    def __post_init__(self):
        self.A = np.array(self.A, dtype=float)
        self.b = np.array(self.b, dtype=float)
        if self.A.ndim != 4 or self.b.shape != self.A.shape[:3]:
            raise ValueError("A must be (N, C, d, d) and b (N, C, d)")
        if self.A.shape[0] != self.grid.num_steps:
            raise ValueError(f"expected {self.grid.num_steps} nodes, got {self.A.shape[0]}")
        if not self.explore_var > 0:
            raise ConfigError("policy.explore_var must be positive")

    @property
    def dim(self) -> int:
        return self.A.shape[-1]

    @property
    def contexts(self) -> int:
        return self.A.shape[1]

    @property
    def block_size(self) -> int:
        return self.dim * self.dim + self.dim

    @property
    def num_params(self) -> int:
        return self.grid.num_steps * self.contexts * self.block_size

    @classmethod
    def zeros(cls, grid: TimeGrid, dim: int, contexts: int = 1, explore_var: float = 1.0) -> "GaussianPolicy":
        N = grid.num_steps
        return cls(np.zeros((N, contexts, dim, dim)), np.zeros((N, contexts, dim)), explore_var, grid)

    @classmethod
    def from_score(cls, score, explore_var: float, contexts: int | None = None) -> "GaussianPolicy":
        """Copy a linear score: policy node ``i`` takes score node ``N - i``.

        Accepts a :class:`LinearGridScore`, or an analytic Gaussian score, which
        is linearized exactly on the grid first.
        """
        if not isinstance(score, LinearGridScore):
            raise TypeError("from_score needs a LinearGridScore; use AnalyticScore.to_linear_grid(grid)")
        N = score.grid.num_steps
        idx = N - np.arange(N)
        A, b = score.A[idx], score.b[idx]
        if contexts is not None and contexts != A.shape[1]:
            A = np.repeat(A[:, :1], contexts, axis=1)
            b = np.repeat(b[:, :1], contexts, axis=1)
        return cls(A.copy(), b.copy(), explore_var, score.grid)

    def copy(self) -> "GaussianPolicy":
        return GaussianPolicy(self.A.copy(), self.b.copy(), self.explore_var, self.grid)

    def node(self, t: float) -> int:
        return min(self.grid.left_index(t), self.grid.num_steps - 1)

    def _check_context(self, c: int) -> None:
        if not 0 <= c < self.contexts:
            raise IndexError(f"context {c} out of range for {self.contexts} contexts")

    def mean_at_node(self, i: int, x, c: int = 0) -> np.ndarray:
        self._check_context(c)
        return np.asarray(x, dtype=float) @ self.A[i, c].T + self.b[i, c]

    def mean(self, t: float, x, c: int = 0) -> np.ndarray:
        return self.mean_at_node(self.node(t), x, c)

    def flatten(self) -> np.ndarray:
        N, C, d = self.A.shape[:3]
        return np.concatenate([self.A.reshape(N, C, d * d), self.b], axis=2).ravel()

    def with_params(self, theta: np.ndarray) -> "GaussianPolicy":
        N, C, d = self.A.shape[:3]
        theta = np.asarray(theta, dtype=float)
        if theta.size != self.num_params:
            raise ValueError(f"parameter vector has length {theta.size}, expected {self.num_params}")
        blocks = theta.reshape(N, C, d * d + d)
        return GaussianPolicy(blocks[:, :, : d * d].reshape(N, C, d, d), blocks[:, :, d * d :],
                              self.explore_var, self.grid)

    def block_slice(self, node: int, c: int) -> slice:
        start = (node * self.contexts + c) * self.block_size
        return slice(start, start + self.block_size)


def policy_mean(pol: GaussianPolicy, t: float, x, c: int = 0) -> np.ndarray:
    return pol.mean(t, x, c)


def sample_action(pol: GaussianPolicy, t: float, x, c: int, rng: np.random.Generator):
    """Draw ``a ~ N(mean, explore_var I)``; returns ``(a, z)`` with ``z`` the standard draw."""
    mu = pol.mean(t, x, c)
    z = rng.standard_normal(np.shape(mu))
    return mu + math.sqrt(pol.explore_var) * z, z


def log_prob(pol: GaussianPolicy, t: float, x, c: int, a) -> np.ndarray:
    d = pol.dim
    diff = np.asarray(a, dtype=float) - pol.mean(t, x, c)
    return -0.5 * d * math.log(2 * math.pi * pol.explore_var) - np.sum(diff * diff, axis=-1) / (2 * pol.explore_var)


def grad_log_prob_block(pol: GaussianPolicy, i: int, x, c: int, a) -> np.ndarray:
    """Gradient of ``log pi`` with respect to node ``i``'s ``(A, b)`` block.

    Shape ``(..., d*d + d)``; the ``A`` part is ``((a - mu) / var) outer x``.
    """
    x = np.asarray(x, dtype=float)
    u = (np.asarray(a, dtype=float) - pol.mean_at_node(i, x, c)) / pol.explore_var
    gA = u[..., :, None] * x[..., None, :]
    return np.concatenate([gA.reshape(gA.shape[:-2] + (-1,)), u], axis=-1)


def grad_log_prob(pol: GaussianPolicy, t: float, x, c: int, a) -> np.ndarray:
    """Full-length parameter gradient (zero outside the active node/context)."""
    i = pol.node(t)
    out = np.zeros(pol.num_params)
    out[pol.block_slice(i, c)] = grad_log_prob_block(pol, i, x, c, a)
    return out


def drift_b_eta(sched: NoiseSchedule, eta: float, t: float, x, a) -> np.ndarray:
    """Controlled drift ``-f(T-t, x) + (1 + eta^2)/2 * g^2(T-t) * a``."""
    tau = sched.horizon - t
    beta = sched.beta(tau)
    return 0.5 * beta * np.asarray(x, dtype=float) + (1.0 + eta**2) / 2.0 * beta * np.asarray(a, dtype=float)


def save_policy(path, pol: GaussianPolicy) -> None:
    write_linear_grid(path, pol.A, pol.b, pol.grid.num_steps, extra=(pol.explore_var,))


def load_policy(path, grid: TimeGrid) -> GaussianPolicy:
    A, b, n, extra = read_linear_grid(path)
    if n != grid.num_steps or not extra:
        raise ConfigError(f"{path}: not a policy file for grid.N={grid.num_steps}")
    return GaussianPolicy(A, b, extra[0], grid)
