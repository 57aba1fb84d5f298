"""Value fitting, continuous-time policy-gradient estimators, a
common-random-number finite-difference oracle and the fine-tuning loop.

Every estimator has the form ``mean_p sum_i grad log pi_i * w[p, i]`` and only
differs in the weight ``w``:

* ``reward_to_go``: ``sum_{j >= i} r_j dt + RM(X_N)``
* ``qincrement``: ``V(t_{i+1}, X_{i+1}) - V(t_i, X_i) + r_i dt``
* ``cpg``: ``[r_i + (1+eta^2)/2 g^2 a_i . dV/dx(t_i, X_i)] dt``; with ``eta = 0``
  the bracket is ``r_i + b_0(t_i, X_i, a_i) . dV/dx``.
"""

from __future__ import annotations

import logging
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DivergenceError
from .policy import GaussianPolicy
from .rl_env import (PathBatch, RewardModel, RolloutConfig, objective_estimate, path_kl_girsanov, rollout)
from .rng import rng_stream
from .schedule import NoiseSchedule, TimeGrid

log = logging.getLogger(__name__)

ESTIMATORS = ("reward_to_go", "qincrement", "cpg", "fd")


def quad_features(x: np.ndarray) -> np.ndarray:
    """``[x_j x_k for j <= k] + x + [1]`` for a batch ``(P, d)``."""
    d = x.shape[1]
    ju, ku = np.triu_indices(d)
    return np.hstack([x[:, ju] * x[:, ku], x, np.ones((x.shape[0], 1))])


def num_quad_features(d: int) -> int:
    return d * (d + 1) // 2 + d + 1


@dataclass
class ValueModel:
    """``V(t_i, x, c) = x'P x + q'x + r`` at nodes ``0..N-1``; node ``N`` is ``RM``."""

    P: np.ndarray  # (N, C, d, d)
    q: np.ndarray  # (N, C, d)
    r: np.ndarray  # (N, C)
    reward: RewardModel
    grid: TimeGrid
    coef_stderr: np.ndarray | None = None  # (N, C, n_features)

    @property
    def num_steps(self) -> int:
        return self.P.shape[0]

    def value(self, i: int, x, c: int = 0) -> np.ndarray:
        if i == self.num_steps:
            return self.reward.value(x, c)
        x = np.asarray(x, dtype=float)
        return np.einsum("...i,ij,...j->...", x, self.P[i, c], x) + x @ self.q[i, c] + self.r[i, c]

    def grad_x(self, i: int, x, c: int = 0) -> np.ndarray:
        if i == self.num_steps:
            return self.reward.grad(x, c)
        return 2.0 * np.asarray(x, dtype=float) @ self.P[i, c] + self.q[i, c]

    def shifted(self, constant: float) -> "ValueModel":
        return ValueModel(self.P.copy(), self.q.copy(), self.r + constant, self.reward, self.grid)

    def coefficients(self, i: int, c: int = 0) -> np.ndarray:
        """Coefficients in :func:`quad_features` order."""
        d = self.P.shape[-1]
        ju, ku = np.triu_indices(d)
        Pc = self.P[i, c]
        quad = np.where(ju == ku, Pc[ju, ku], 2.0 * Pc[ju, ku])
        return np.concatenate([quad, self.q[i, c], [self.r[i, c]]])

    @classmethod
    def zeros(cls, reward: RewardModel, grid: TimeGrid, dim: int, contexts: int = 1) -> "ValueModel":
        N = grid.num_steps
        return cls(np.zeros((N, contexts, dim, dim)), np.zeros((N, contexts, dim)), np.zeros((N, contexts)),
                   reward, grid)


def _as_batches(batch) -> list:
    return list(batch) if isinstance(batch, (list, tuple)) else [batch]


def fit_value(batch, reward: RewardModel, grid: TimeGrid, contexts: int | None = None) -> ValueModel:
    """Least-squares fit of quadratic features of ``X_i`` to the return-to-go.

    ``batch`` is a :class:`PathBatch` or a list of them (one per context).
    """
    batches = _as_batches(batch)
    d = batches[0].states.shape[2]
    C = contexts or max(b.context for b in batches) + 1
    vm = ValueModel.zeros(reward, grid, d, C)
    nf = num_quad_features(d)
    vm.coef_stderr = np.zeros((grid.num_steps, C, nf))
    ju, ku = np.triu_indices(d)
    nq = len(ju)
    for b in batches:
        G = b.reward_to_go()
        for i in range(grid.num_steps):
            if len(b) < nf:
                raise ConfigError(f"value fit at node {i}: {len(b)} paths < {nf} quadratic features")
            X = quad_features(b.states[:, i])
            coef, _, rank, _ = np.linalg.lstsq(X, G[:, i], rcond=None)
            if rank < nf:
                raise ConfigError(f"value fit at node {i} is underdetermined (rank {rank} < {nf})")
            resid = G[:, i] - X @ coef
            dof = max(len(b) - nf, 1)
            cov = np.linalg.pinv(X.T @ X) * (resid @ resid) / dof
            vm.coef_stderr[i, b.context] = np.sqrt(np.clip(np.diag(cov), 0.0, None))
            P = np.zeros((d, d))
            P[ju, ku] = coef[:nq]
            P = 0.5 * (P + P.T)
            vm.P[i, b.context] = P
            vm.q[i, b.context] = coef[nq : nq + d]
            vm.r[i, b.context] = coef[-1]
    return vm


@dataclass
class GradEstimate:
    grad: np.ndarray
    estimator_kind: str
    num_paths: int
    component_var: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def stderr(self) -> np.ndarray:
        if self.component_var is None:
            return np.zeros_like(self.grad)
        return np.sqrt(self.component_var / max(self.num_paths, 1))


def _assemble(pol: GaussianPolicy, batches: list, weights: list, kind: str) -> GradEstimate:
    """Average ``grad log pi * w`` over paths; each step maps to its own node block."""
    grad = np.zeros(pol.num_params)
    var = np.zeros(pol.num_params)
    scale = 1.0 / len(batches)
    stats = []
    for b, w in zip(batches, weights):
        contrib = b.logpi_grads * w[:, :, None]  # (P, N, k)
        for i in range(b.num_steps):
            sl = pol.block_slice(i, b.context)
            grad[sl] += scale * contrib[:, i].mean(axis=0)
            var[sl] += scale**2 * contrib[:, i].var(axis=0)
        stats.append({"weight_mean": w.mean(axis=0).tolist(), "weight_std": w.std(axis=0).tolist()})
    n = min(len(b) for b in batches)
    return GradEstimate(grad, kind, n, var, {"per_step_weights": stats})


def pg_reward_to_go(batch, pol: GaussianPolicy) -> GradEstimate:
    batches = _as_batches(batch)
    if not batches or any(len(b) == 0 for b in batches):
        raise ValueError("empty batch")
    return _assemble(pol, batches, [b.reward_to_go() for b in batches], "reward_to_go")


def qincrement_weights(b: PathBatch, V: ValueModel) -> np.ndarray:
    N = b.num_steps
    if V.num_steps != N:
        raise ConfigError(f"value model has {V.num_steps} nodes, batch has {N} steps")
    vals = np.stack([V.value(i, b.states[:, i], b.context) for i in range(N + 1)], axis=1)
    return vals[:, 1:] - vals[:, :-1] + b.running_rewards * b.dt


def pg_qincrement(batch, pol: GaussianPolicy, V: ValueModel) -> GradEstimate:
    batches = _as_batches(batch)
    if not batches or any(len(b) == 0 for b in batches):
        raise ValueError("empty batch")
    return _assemble(pol, batches, [qincrement_weights(b, V) for b in batches], "qincrement")


def cpg_weights(b: PathBatch, V: ValueModel, cfg: RolloutConfig, sched: NoiseSchedule) -> np.ndarray:
    grid = cfg.grid
    T = grid.horizon
    w = np.empty(b.running_rewards.shape)
    for i in range(b.num_steps):
        beta = sched.beta(T - grid.time(i))
        x, a = b.states[:, i], b.actions[:, i]
        dV = V.grad_x(i, x, b.context)
        if cfg.ode_mode:
            drift = 0.5 * beta * x + 0.5 * beta * a
        else:
            drift = cfg.kappa_factor * beta * a
        w[:, i] = (b.running_rewards[:, i] + np.sum(drift * dV, axis=1)) * b.dt
    return w


def pg_cpg(batch, pol: GaussianPolicy, V: ValueModel | None, cfg: RolloutConfig, sched: NoiseSchedule) -> GradEstimate:
    if V is None:
        raise ValueError("the CPG estimator needs a value model")
    batches = _as_batches(batch)
    if not batches or any(len(b) == 0 for b in batches):
        raise ValueError("empty batch")
    kind = "cpg_ode" if cfg.ode_mode else "cpg"
    return _assemble(pol, batches, [cpg_weights(b, V, cfg, sched) for b in batches], kind)


def fd_gradient_oracle(pol: GaussianPolicy, pre: GaussianPolicy, reward: RewardModel, cfg: RolloutConfig,
                       sched: NoiseSchedule, direction_set=None, rng: np.random.Generator | None = None,
                       c: int = 0, num_paths: int | None = None, eps: float = 1e-4,
                       noises: dict | None = None) -> GradEstimate:
    """Central differences of the batch objective with common random numbers.

    ``direction_set`` lists parameter indices (default: every parameter of
    context ``c``). Unlisted entries are zero. The same recorded initial
    states, action noises and Brownian increments drive both perturbed runs.
    """
    if noises is None:
        if rng is None:
            raise ValueError("the FD oracle needs either recorded noises or a generator")
        noises = rollout(pol, pre, reward, cfg, sched, c, rng, num_paths).noises()
    theta = pol.flatten()
    if direction_set is None:
        direction_set = [k for i in range(pol.grid.num_steps) for k in range(*pol.block_slice(i, c).indices(pol.num_params))]
    grad = np.zeros_like(theta)
    steps = {}
    for k in direction_set:
        h = eps * max(1.0, abs(theta[k]))
        vals = []
        for sign in (1.0, -1.0):
            th = theta.copy()
            th[k] += sign * h
            b = rollout(pol.with_params(th), pre, reward, cfg, sched, c, noises=noises)
            vals.append(objective_estimate(b)[0])
        grad[k] = (vals[0] - vals[1]) / (2 * h)
        steps[int(k)] = h
    return GradEstimate(grad, "fd", noises["x0"].shape[0], None, {"steps": steps})


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        return float("nan")
    return float(u @ v / (nu * nv))


def relative_error(est: np.ndarray, ref: np.ndarray) -> float:
    return float(np.linalg.norm(est - ref) / np.linalg.norm(ref))


# ---------------------------------------------------------------------------
# training loop

@dataclass
class TrainConfig:
    step_size: float = 1.0
    num_iterations: int = 50
    batch_paths: int = 2000
    estimator_kind: str = "cpg"
    value_refit_every: int = 1
    seed: int = 0

    def __post_init__(self):
        if not self.step_size >= 0:
            raise ConfigError("train.step_size must be nonnegative")
        if self.batch_paths < 2:
            raise ConfigError("train.batch_paths must be >= 2")
        if self.estimator_kind not in ("reward_to_go", "qincrement", "cpg"):
            raise ConfigError(f"train.estimator must be reward_to_go, qincrement or cpg, got {self.estimator_kind!r}")
        if self.value_refit_every < 1:
            raise ConfigError("train.value_refit_every must be >= 1")


REPORT_COLUMNS = ("iter", "objective", "objective_stderr", "terminal_reward_mean", "path_kl", "grad_norm",
                  "wallclock_ms")


@dataclass
class TrainReport:
    rows: list = field(default_factory=list)
    diverged: bool = False
    message: str = ""
    policy: GaussianPolicy | None = None
    snapshots: dict = field(default_factory=dict)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=float)


def _timing_enabled() -> bool:
    return os.environ.get("CTRL_DIFFUSE_TIMING", "") not in ("", "0")


def train(pol: GaussianPolicy, pre: GaussianPolicy, reward: RewardModel, tcfg: TrainConfig, rl_cfg: RolloutConfig,
          sched: NoiseSchedule, rng_seed: int | None = None, snapshot_every: int | None = None) -> TrainReport:
    """Constant-step gradient ascent on the regularized objective.

    Each iteration rolls out ``batch_paths`` paths per context from stream
    ``("train", iteration * C + c)``, refits the value model on the first
    half when due (the gradient then uses the second half), and steps
    ``theta += step_size * grad``. Row ``k`` of the report describes the
    policy before update ``k``.
    """
    seed = tcfg.seed if rng_seed is None else rng_seed
    C = pol.contexts
    needs_value = tcfg.estimator_kind in ("qincrement", "cpg")
    report = TrainReport(policy=pol.copy())
    report.snapshots[0] = pol.copy()
    V = None
    current = pol.copy()
    for it in range(tcfg.num_iterations):
        start = time.perf_counter()
        try:
            batches = [rollout(current, pre, reward, rl_cfg, sched, c, rng_stream(seed, "train", it * C + c),
                               tcfg.batch_paths) for c in range(C)]
        except DivergenceError as exc:
            report.diverged, report.message = True, f"iteration {it}: {exc}"
            log.warning("training aborted: %s", report.message)
            break
        objs = [objective_estimate(b) for b in batches]
        obj = float(np.mean([o[0] for o in objs]))
        obj_se = float(math.sqrt(sum(o[1] ** 2 for o in objs)) / C)
        term = float(np.mean([b.terminal_reward.mean() for b in batches]))
        pkl = float(np.mean([path_kl_girsanov(current, pre, rl_cfg, sched, b.context, b) for b in batches])) \
            if not rl_cfg.ode_mode else float("nan")
        grad_batches = batches
        if needs_value:
            if V is None or it % tcfg.value_refit_every == 0:
                halves = [b.split() for b in batches]
                V = fit_value([h[0] for h in halves], reward, rl_cfg.grid, C)
                grad_batches = [h[1] for h in halves]
        if tcfg.estimator_kind == "reward_to_go":
            est = pg_reward_to_go(grad_batches, current)
        elif tcfg.estimator_kind == "qincrement":
            est = pg_qincrement(grad_batches, current, V)
        else:
            est = pg_cpg(grad_batches, current, V, rl_cfg, sched)
        gnorm = float(np.linalg.norm(est.grad))
        theta = current.flatten() + tcfg.step_size * est.grad
        ms = (time.perf_counter() - start) * 1e3 if _timing_enabled() else 0.0
        report.rows.append({"iter": it, "objective": obj, "objective_stderr": obj_se,
                            "terminal_reward_mean": term, "path_kl": pkl, "grad_norm": gnorm,
                            "wallclock_ms": ms})
        if not np.all(np.isfinite(theta)):
            report.diverged, report.message = True, f"iteration {it}: non-finite parameters"
            log.warning("training aborted: %s", report.message)
            break
        current = current.with_params(theta)
        if snapshot_every and (it + 1) % snapshot_every == 0:
            report.snapshots[it + 1] = current.copy()
    report.policy = current
    return report
