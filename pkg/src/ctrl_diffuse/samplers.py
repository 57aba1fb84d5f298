"""Reverse-time samplers: Euler-Maruyama reverse SDE, probability-flow ODE,
DDPM ancestral chain and DDIM.

All rollouts are vectorized over paths. A rollout draws, from the generator it
is given, first the prior states ``(P, d)`` and then, for stochastic kinds, a
``(N, P, d)`` block of standard normals. Two rollouts fed generators with the
same seed are therefore noise-coupled step by step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data_scores import Gaussian, score_eps_x0_convert
from .errors import DivergenceError
from .rng import rng_stream
from .schedule import NoiseSchedule, TimeGrid

DIVERGENCE_NORM = 1e6
KINDS = ("reverse_sde", "prob_flow", "ddpm", "ddim")


@dataclass(frozen=True)
class SamplerSpec:
    kind: str
    grid: TimeGrid
    eta: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown sampler kind {self.kind!r}")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must lie in [0, 1]")

    @property
    def label(self) -> str:
        return f"reverse_sde(eta={self.eta:g})" if self.kind == "reverse_sde" else self.kind

    @property
    def stochastic(self) -> bool:
        return self.kind == "ddpm" or (self.kind == "reverse_sde" and self.eta > 0)


@dataclass
class Trajectory:
    """Batch of rollouts. ``states[p, k]`` is the state after ``k`` reverse steps."""

    times: np.ndarray
    states: np.ndarray
    noises: np.ndarray = field(default_factory=lambda: np.empty((0,)))

    @property
    def terminal(self) -> np.ndarray:
        return self.states[:, -1]


def sample_prior(dim: int, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
    """Draw from the VP prior ``N(0, I_d)``."""
    if n is None:
        return rng.standard_normal(dim)
    return rng.standard_normal((n, dim))


def check_finite(x: np.ndarray, step: int) -> None:
    if not np.all(np.isfinite(x)) or np.max(np.abs(x), initial=0.0) > DIVERGENCE_NORM:
        raise DivergenceError(f"state diverged at step {step}", step=step)


def _start(spec: SamplerSpec, dim: int, rng, num_paths: int, x0, noises):
    N = spec.grid.num_steps
    if x0 is None:
        x0 = sample_prior(dim, rng, num_paths)
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    if not spec.stochastic:
        return x0, None
    if noises is None:
        return x0, rng.standard_normal((N,) + x0.shape)
    return x0, np.swapaxes(np.asarray(noises, dtype=float), 0, 1)


def _pack(spec: SamplerSpec, states: list, noises) -> Trajectory:
    stacked = np.stack(states, axis=1)
    recorded = np.swapaxes(noises, 0, 1).copy() if noises is not None else np.empty((stacked.shape[0], 0, stacked.shape[2]))
    return Trajectory(spec.grid.nodes.copy(), stacked, recorded)


def _euler(score, sched: NoiseSchedule, spec: SamplerSpec, x: np.ndarray, noises) -> list:
    grid = spec.grid
    T, dt = grid.horizon, grid.dt
    coef = (1.0 + spec.eta**2) / 2.0
    states = [x]
    for i in range(grid.num_steps):
        tau = T - grid.time(i)
        beta = sched.beta(tau)
        drift = 0.5 * beta * x + coef * beta * score(tau, x)
        x = x + drift * dt
        if noises is not None:
            x = x + spec.eta * math.sqrt(beta) * math.sqrt(dt) * noises[i]
        check_finite(x, i)
        states.append(x)
    return states


def reverse_sde_rollout(score, sched: NoiseSchedule, spec: SamplerSpec, rng: np.random.Generator | None = None,
                        num_paths: int = 1, x0=None, noises=None) -> Trajectory:
    """Euler-Maruyama for the learned-score reverse SDE with stochasticity ``eta``.

    ``noises`` in the :class:`Trajectory` layout ``(P, N, d)`` replays a
    previous run. With ``eta = 0``
    no noise is drawn and the result equals :func:`prob_flow_rollout`.
    """
    if spec.kind != "reverse_sde":
        raise ValueError("spec.kind must be 'reverse_sde'")
    x, noises = _start(spec, score.dim, rng, num_paths, x0, noises)
    return _pack(spec, _euler(score, sched, spec, x, noises), noises)


def prob_flow_rollout(score, sched: NoiseSchedule, spec: SamplerSpec, rng: np.random.Generator | None = None,
                      num_paths: int = 1, x0=None) -> Trajectory:
    if spec.kind != "prob_flow":
        raise ValueError("spec.kind must be 'prob_flow'")
    ode = SamplerSpec("reverse_sde", spec.grid, 0.0, spec.seed)
    x, _ = _start(ode, score.dim, rng, num_paths, x0, None)
    return _pack(spec, _euler(score, sched, ode, x, None), None)


def ddpm_step(x: np.ndarray, s: np.ndarray, beta_i: float, z=None) -> np.ndarray:
    out = (x + beta_i * s) / math.sqrt(1.0 - beta_i)
    if z is not None:
        out = out + math.sqrt(beta_i) * z
    return out


def ddpm_rollout(score, sched: NoiseSchedule, spec: SamplerSpec, rng: np.random.Generator | None = None,
                 num_paths: int = 1, x0=None, noises=None) -> Trajectory:
    """Ancestral chain over ``discrete_betas``, index descending from ``N`` to 1."""
    if spec.kind != "ddpm":
        raise ValueError("spec.kind must be 'ddpm'")
    grid = spec.grid
    betas = sched.discrete_betas(grid)
    x, noises = _start(spec, score.dim, rng, num_paths, x0, noises)
    states = [x]
    for k in range(grid.num_steps):
        i = grid.num_steps - k
        x = ddpm_step(x, score(grid.time(i), x), betas[i - 1], noises[k])
        check_finite(x, k)
        states.append(x)
    return _pack(spec, states, noises)


def ddim_step(x: np.ndarray, s: np.ndarray, t: float, s_time: float, sched: NoiseSchedule) -> np.ndarray:
    """One DDIM step from time ``t`` down to ``s_time`` (x0-prediction form)."""
    _, x0_hat = score_eps_x0_convert(s, t, x, sched)
    sig_s = sched.sigma(s_time)
    if sig_s == 0.0:
        return x0_hat
    ratio = sig_s / sched.sigma(t)
    return ratio * x + (sched.alpha(s_time) - sched.alpha(t) * ratio) * x0_hat


def ddim_step_eps_form(x: np.ndarray, s: np.ndarray, t: float, s_time: float, sched: NoiseSchedule) -> np.ndarray:
    """The same step written with the noise prediction, as in the original DDIM rule."""
    ab_t, ab_s = sched.alpha_bar(t), sched.alpha_bar(s_time)
    eps = -sched.sigma(t) * s
    pred_x0 = (x - math.sqrt(1.0 - ab_t) * eps) / math.sqrt(ab_t)
    return math.sqrt(ab_s) * pred_x0 + math.sqrt(1.0 - ab_s) * eps


def ddim_rollout(score, sched: NoiseSchedule, spec: SamplerSpec, rng: np.random.Generator | None = None,
                 num_paths: int = 1, x0=None) -> Trajectory:
    if spec.kind != "ddim":
        raise ValueError("spec.kind must be 'ddim'")
    grid = spec.grid
    x, _ = _start(spec, score.dim, rng, num_paths, x0, None)
    states = [x]
    for k in range(grid.num_steps):
        j = grid.num_steps - k
        t, s_time = grid.time(j), grid.time(j - 1)
        x = ddim_step(x, score(t, x), t, s_time, sched)
        check_finite(x, k)
        states.append(x)
    return _pack(spec, states, None)


_ROLLOUTS = {
    "reverse_sde": reverse_sde_rollout,
    "prob_flow": prob_flow_rollout,
    "ddpm": ddpm_rollout,
    "ddim": ddim_rollout,
}


def rollout(score, sched: NoiseSchedule, spec: SamplerSpec, rng=None, num_paths: int = 1, x0=None) -> Trajectory:
    if rng is None:
        rng = rng_stream(spec.seed, "sampler", 0)
    return _ROLLOUTS[spec.kind](score, sched, spec, rng, num_paths=num_paths, x0=x0)


def exact_flow_gaussian(data: Gaussian, sched: NoiseSchedule, x: np.ndarray, t_from: float, t_to: float) -> np.ndarray:
    """Exact probability-flow map between forward times for Gaussian data.

    The flow transports ``N(m_from, S_from)`` to ``N(m_to, S_to)`` along
    ``S_to^{1/2} S_from^{-1/2}``; the factors commute because all marginal
    covariances share the eigenvectors of the data covariance.
    """
    w, v = np.linalg.eigh(data.cov)

    def moments(t):
        ab = sched.alpha_bar(t)
        return math.sqrt(ab) * data.mean, ab * w + (1.0 - ab)

    m_f, var_f = moments(t_from)
    m_t, var_t = moments(t_to)
    gain = (v * np.sqrt(var_t / var_f)) @ v.T
    return m_t + (np.asarray(x) - m_f) @ gain.T


# ---------------------------------------------------------------------------

def sampler_report(score, sched: NoiseSchedule, specs: list, num_paths: int, data=None) -> list[dict]:
    """Terminal moments per sampler; Gaussian ``data`` adds target discrepancies.

    Each spec rolls out with ``rng_stream(spec.seed, "sampler", 0)``, so specs
    sharing a seed are noise-coupled.
    """
    if not specs:
        return []
    grids = {(s.grid.num_steps, s.grid.horizon) for s in specs}
    if len(grids) != 1:
        raise ValueError("all sampler specs must share the grid")
    rows = []
    for spec in specs:
        traj = rollout(score, sched, spec, rng_stream(spec.seed, "sampler", 0), num_paths)
        xT = traj.terminal
        mean = xT.mean(axis=0)
        cov = np.atleast_2d(np.cov(xT, rowvar=False, ddof=1))
        row = {"sampler": spec.label, "num_steps": spec.grid.num_steps, "num_paths": num_paths,
               "mean": mean, "cov": cov}
        if isinstance(data, Gaussian):
            se = np.sqrt(np.diag(cov) / num_paths)
            row["mean_err_max"] = float(np.max(np.abs(mean - data.mean)))
            row["mean_z_max"] = float(np.max(np.abs(mean - data.mean) / se))
            row["cov_diag_rel_err_max"] = float(np.max(np.abs(np.diag(cov) - np.diag(data.cov)) / np.diag(data.cov)))
            row["cov_err_max"] = float(np.max(np.abs(cov - data.cov)))
        rows.append(row)
    return rows
