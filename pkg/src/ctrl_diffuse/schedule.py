"""VP noise schedules and the uniform time grid.

Two schedule kinds are supported, both with a closed-form integral of
``beta``, so every derived quantity (``alpha_bar``, ``alpha_t``, ``sigma_t``,
log-SNR) is exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainError

_EDGE_TOL = 1e-12


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t_i = i * T / N`` for ``i = 0..N``."""

    num_steps: int
    horizon: float

    def __post_init__(self):
        if int(self.num_steps) != self.num_steps or self.num_steps < 1:
            raise ConfigError(f"grid.N must be a positive integer, got {self.num_steps}")
        if not self.horizon > 0:
            raise ConfigError(f"grid horizon must be positive, got {self.horizon}")

    @property
    def dt(self) -> float:
        return self.horizon / self.num_steps

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(self.num_steps + 1) * self.dt

    def time(self, i: int) -> float:
        return i * self.dt

    def left_index(self, t: float) -> int:
        """Index of the left grid node containing ``t`` (``t_N`` maps to ``N``)."""
        if t < -_EDGE_TOL or t > self.horizon * (1 + _EDGE_TOL) + _EDGE_TOL:
            raise DomainError(f"t={t} outside [0, {self.horizon}]")
        i = int(math.floor(t / self.dt + 1e-9))
        return min(max(i, 0), self.num_steps)


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance-preserving schedule ``beta(t)`` on ``[0, T]``.

    ``kind="constant"`` uses ``beta_min`` everywhere; ``kind="linear"`` ramps
    from ``beta_min`` at ``t=0`` to ``beta_max`` at ``t=T``.
    """

    kind: str = "linear"
    beta_min: float = 0.1
    beta_max: float = 20.0
    horizon: float = 1.0

    def __post_init__(self):
        if self.kind not in ("constant", "linear"):
            raise ConfigError(f"schedule.kind must be 'constant' or 'linear', got {self.kind!r}")
        if self.kind == "constant" and self.beta_max != self.beta_min:
            object.__setattr__(self, "beta_max", self.beta_min)
        if not 0 < self.beta_min <= self.beta_max:
            raise ConfigError("schedule requires 0 < beta_min <= beta_max")
        if not self.horizon > 0:
            raise ConfigError("schedule.T must be positive")

    @classmethod
    def constant(cls, beta: float, horizon: float = 1.0) -> "NoiseSchedule":
        return cls("constant", beta, beta, horizon)

    @classmethod
    def linear(cls, beta_min: float = 0.1, beta_max: float = 20.0, horizon: float = 1.0) -> "NoiseSchedule":
        return cls("linear", beta_min, beta_max, horizon)

    def _check(self, t: float) -> float:
        t = float(t)
        if not (-_EDGE_TOL <= t <= self.horizon + _EDGE_TOL) or math.isnan(t):
            raise DomainError(f"t={t} outside [0, {self.horizon}]")
        return min(max(t, 0.0), self.horizon)

    def beta(self, t: float) -> float:
        t = self._check(t)
        if self.kind == "constant":
            return self.beta_min
        return self.beta_min + (self.beta_max - self.beta_min) * t / self.horizon

    def integrated_beta(self, t: float) -> float:
        """Closed form of the integral of ``beta`` over ``[0, t]``."""
        t = self._check(t)
        if self.kind == "constant":
            return self.beta_min * t
        return self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t * t / self.horizon

    def alpha_bar(self, t: float) -> float:
        return math.exp(-self.integrated_beta(t))

    def alpha(self, t: float) -> float:
        return math.sqrt(self.alpha_bar(t))

    def sigma(self, t: float) -> float:
        # -expm1 keeps sigma accurate for small t
        return math.sqrt(-math.expm1(-self.integrated_beta(t)))

    def g2(self, t: float) -> float:
        return self.beta(t)

    def g(self, t: float) -> float:
        return math.sqrt(self.beta(t))

    def drift(self, t: float, x: np.ndarray) -> np.ndarray:
        return -0.5 * self.beta(t) * np.asarray(x, dtype=float)

    def sde_coeffs(self, t: float, x: np.ndarray) -> tuple[np.ndarray, float]:
        """Forward drift ``f(t, x) = -beta(t) x / 2`` and diffusion ``g(t)``."""
        return self.drift(t, x), self.g(t)

    def snr_lambda(self, t: float) -> float:
        """Log signal-to-noise ratio ``log(alpha_bar / (1 - alpha_bar))``."""
        t = self._check(t)
        if t == 0.0:
            raise DomainError("log-SNR is infinite at t=0 (sigma_0 = 0)")
        ib = self.integrated_beta(t)
        return -ib - math.log(-math.expm1(-ib))

    def discrete_betas(self, grid: TimeGrid) -> np.ndarray:
        """Per-step noise scales ``beta_i = beta(t_i) * dt`` for ``i = 1..N``.

        Entry ``k`` of the returned array is ``beta_{k+1}``.
        """
        if not math.isclose(grid.horizon, self.horizon, rel_tol=1e-12):
            raise ConfigError(f"grid horizon {grid.horizon} != schedule horizon {self.horizon}")
        betas = np.array([self.beta(grid.time(i)) * grid.dt for i in range(1, grid.num_steps + 1)])
        if np.any(betas >= 1.0):
            bad = int(np.argmax(betas >= 1.0)) + 1
            raise ConfigError(
                f"discretization too coarse: beta_{bad} = {betas[bad - 1]:.4g} >= 1; increase grid.N"
            )
        return betas


def beta_at(sched: NoiseSchedule, t: float) -> float:
    return sched.beta(t)


def sde_coeffs(sched: NoiseSchedule, t: float, x) -> tuple[np.ndarray, float]:
    return sched.sde_coeffs(t, x)


def alpha_bar(sched: NoiseSchedule, t: float) -> float:
    return sched.alpha_bar(t)


def snr_lambda(sched: NoiseSchedule, t: float) -> float:
    return sched.snr_lambda(t)


def discrete_betas(sched: NoiseSchedule, grid: TimeGrid) -> np.ndarray:
    return sched.discrete_betas(grid)
