"""Data distributions, analytic forward marginals and scores, and DSM training.

Scores are evaluated for a single state ``(d,)`` or a batch ``(P, d)``; the
output has the same shape as the input.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .errors import ConfigError, DomainError, NumericError
from .rng import rng_stream
from .schedule import NoiseSchedule, TimeGrid


@dataclass(frozen=True)
class Gaussian:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.asarray(self.cov, dtype=float)
        if cov.ndim == 1:
            cov = np.diag(cov)
        if cov.shape != (mean.size, mean.size):
            raise ConfigError(f"covariance shape {cov.shape} does not match mean of length {mean.size}")
        if not np.allclose(cov, cov.T, atol=1e-12):
            raise ConfigError("covariance must be symmetric")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def is_spd(self) -> bool:
        return bool(np.all(np.linalg.eigvalsh(self.cov) > 0))

    def log_pdf(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        chol = _cholesky(self.cov)
        z = np.linalg.solve(chol, (x - self.mean).T).T if x.ndim > 1 else np.linalg.solve(chol, x - self.mean)
        logdet = 2.0 * np.sum(np.log(np.diag(chol)))
        quad = np.sum(z * z, axis=-1)
        return -0.5 * (self.dim * math.log(2 * math.pi) + logdet + quad)

    def score(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        try:
            prec = np.linalg.inv(self.cov)
        except np.linalg.LinAlgError as exc:
            raise NumericError("singular covariance in score evaluation") from exc
        if not np.all(np.isfinite(prec)) or np.linalg.cond(self.cov) > 1e14:
            raise NumericError("singular covariance in score evaluation")
        return -(x - self.mean) @ prec

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        w, v = np.linalg.eigh(self.cov)
        root = v * np.sqrt(np.clip(w, 0.0, None))
        return self.mean + rng.standard_normal((n, self.dim)) @ root.T


@dataclass(frozen=True)
class Mixture:
    weights: np.ndarray
    components: tuple

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        comps = tuple(self.components)
        if w.ndim != 1 or w.size != len(comps) or w.size == 0:
            raise ConfigError("mixture weights must match the number of components")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ConfigError("mixture weights must be nonnegative and sum to 1")
        if len({c.dim for c in comps}) != 1:
            raise ConfigError("mixture components must share a dimension")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "components", comps)

    @property
    def dim(self) -> int:
        return self.components[0].dim

    def _component_logs(self, x: np.ndarray) -> np.ndarray:
        with np.errstate(divide="ignore"):
            logw = np.log(self.weights)
        return np.stack([lw + c.log_pdf(x) for lw, c in zip(logw, self.components)])

    def log_pdf(self, x: np.ndarray) -> np.ndarray:
        return logsumexp(self._component_logs(x), axis=0)

    def score(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        logs = self._component_logs(x)
        resp = np.exp(logs - logsumexp(logs, axis=0))
        scores = np.stack([c.score(x) for c in self.components])
        return np.einsum("k...,k...d->...d", resp, scores)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        labels = rng.choice(len(self.components), size=n, p=self.weights)
        draws = np.stack([c.sample(rng, n) for c in self.components])
        return draws[labels, np.arange(n)]


DataDistribution = Gaussian | Mixture


def _cholesky(cov: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise NumericError("covariance is not positive definite") from exc


def forward_marginal(data: DataDistribution, sched: NoiseSchedule, t: float) -> DataDistribution:
    """Law of ``X_t`` under the VP forward SDE started from ``data``."""
    ab = sched.alpha_bar(t)
    if isinstance(data, Mixture):
        return Mixture(data.weights, tuple(forward_marginal(c, sched, t) for c in data.components))
    d = data.dim
    return Gaussian(math.sqrt(ab) * data.mean, ab * data.cov + (1.0 - ab) * np.eye(d))


def sample_forward(data: DataDistribution, sched: NoiseSchedule, t: float, rng: np.random.Generator,
                   n: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``x0 ~ data`` and ``x_t = alpha_t x0 + sigma_t eps``.

    With ``n=None`` single vectors are returned, otherwise ``(n, d)`` arrays.
    The noise is recoverable as ``(x_t - alpha_t x0) / sigma_t`` for ``t > 0``.
    """
    m = 1 if n is None else n
    x0 = data.sample(rng, m)
    eps = rng.standard_normal(x0.shape)
    xt = sched.alpha(t) * x0 + sched.sigma(t) * eps
    if n is None:
        return x0[0], xt[0]
    return x0, xt


def true_score(data: DataDistribution, sched: NoiseSchedule, t: float, x: np.ndarray) -> np.ndarray:
    return forward_marginal(data, sched, t).score(x)


def score_eps_x0_convert(s, t: float, x, sched: NoiseSchedule) -> tuple[np.ndarray, np.ndarray]:
    """Map a score to the equivalent noise prediction and predicted ``x0``."""
    if t <= 0:
        raise DomainError("score/eps/x0 conversion is singular at t=0")
    s = np.asarray(s, dtype=float)
    x = np.asarray(x, dtype=float)
    a, sg = sched.alpha(t), sched.sigma(t)
    return -sg * s, (x + sg * sg * s) / a


def score_from_eps(eps, t: float, sched: NoiseSchedule) -> np.ndarray:
    if t <= 0:
        raise DomainError("score/eps/x0 conversion is singular at t=0")
    return -np.asarray(eps, dtype=float) / sched.sigma(t)


def score_from_x0(x0_hat, t: float, x, sched: NoiseSchedule) -> np.ndarray:
    if t <= 0:
        raise DomainError("score/eps/x0 conversion is singular at t=0")
    a, sg = sched.alpha(t), sched.sigma(t)
    return (a * np.asarray(x0_hat, dtype=float) - np.asarray(x, dtype=float)) / (sg * sg)


class AnalyticScore:
    """Exact score of the forward marginals; the same for every context."""

    def __init__(self, data: DataDistribution, sched: NoiseSchedule, contexts: int = 1):
        self.data = data
        self.sched = sched
        self.contexts = contexts

    @property
    def dim(self) -> int:
        return self.data.dim

    def __call__(self, t: float, x, c: int = 0) -> np.ndarray:
        if not 0 <= c < self.contexts:
            raise IndexError(f"context {c} out of range")
        return true_score(self.data, self.sched, t, x)

    def linear_coefficients(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        """``(A, b)`` with ``score(t, x) = A x + b``; Gaussian data only."""
        if not isinstance(self.data, Gaussian):
            raise TypeError("mixture scores are not linear in x")
        marg = forward_marginal(self.data, self.sched, t)
        prec = np.linalg.inv(marg.cov)
        return -prec, prec @ marg.mean

    def to_linear_grid(self, grid: TimeGrid) -> "LinearGridScore":
        d = self.dim
        A = np.empty((grid.num_steps + 1, self.contexts, d, d))
        b = np.empty((grid.num_steps + 1, self.contexts, d))
        for i in range(grid.num_steps + 1):
            Ai, bi = self.linear_coefficients(grid.time(i))
            A[i], b[i] = Ai, bi
        return LinearGridScore(A, b, grid)


class LinearGridScore:
    """Score ``A[i, c] x + b[i, c]`` with ``i`` the left grid node of ``t``.

    Holds ``N + 1`` nodes (``t_0 .. t_N``).
    """

    def __init__(self, A: np.ndarray, b: np.ndarray, grid: TimeGrid):
        A = np.asarray(A, dtype=float)
        b = np.asarray(b, dtype=float)
        if A.ndim != 4 or b.shape != A.shape[:3]:
            raise ValueError("A must be (nodes, contexts, d, d) and b (nodes, contexts, d)")
        if A.shape[0] != grid.num_steps + 1:
            raise ValueError(f"expected {grid.num_steps + 1} nodes, got {A.shape[0]}")
        self.A, self.b, self.grid = A, b, grid

    @property
    def dim(self) -> int:
        return self.A.shape[-1]

    @property
    def contexts(self) -> int:
        return self.A.shape[1]

    def __call__(self, t: float, x, c: int = 0) -> np.ndarray:
        if not 0 <= c < self.contexts:
            raise IndexError(f"context {c} out of range")
        i = self.grid.left_index(t)
        return np.asarray(x, dtype=float) @ self.A[i, c].T + self.b[i, c]


ScoreModel = AnalyticScore | LinearGridScore


@dataclass
class ScoreMatchingConfig:
    weighting: str = "g_squared"
    num_samples_per_node: int = 10_000
    regularization_ridge: float = 0.0
    seed: int = 0
    antithetic: bool = True

    def __post_init__(self):
        if self.weighting not in ("g_squared", "uniform"):
            raise ConfigError(f"weighting must be 'g_squared' or 'uniform', got {self.weighting!r}")
        if self.regularization_ridge < 0:
            raise ConfigError("ridge must be nonnegative")

    def weight(self, sched: NoiseSchedule, t: float) -> float:
        # Only relative weights across nodes; the per-node solve ignores it.
        return sched.g2(t) if self.weighting == "g_squared" else 1.0


def _fit_node(config: ScoreMatchingConfig, data, sched: NoiseSchedule, t: float, node: int):
    n, d = config.num_samples_per_node, data.dim
    rng = rng_stream(config.seed, "dsm", node)
    sig = sched.sigma(t)
    if config.antithetic:
        # Each data draw is noised twice, with eps and -eps. The pair cancels
        # the x0-eps cross moment, whose sampling noise grows like 1/sigma_t
        # near the data end.
        x0 = data.sample(rng, n)
        eps = rng.standard_normal(x0.shape)
        x0, eps = np.vstack([x0, x0]), np.vstack([eps, -eps])
        xt = sched.alpha(t) * x0 + sig * eps
        target = -eps / sig
    else:
        x0, xt = sample_forward(data, sched, t, rng, n)
        target = -(xt - sched.alpha(t) * x0) / (sig * sig)
    feats = np.hstack([xt, np.ones((len(xt), 1))])
    gram = feats.T @ feats
    reg = np.zeros(d + 1)
    reg[:d] = config.regularization_ridge * len(xt)
    gram = gram + np.diag(reg)
    if config.regularization_ridge == 0 and np.linalg.matrix_rank(gram) < d + 1:
        raise NumericError(f"rank-deficient normal equations at node {node}")
    coef = np.linalg.solve(gram, feats.T @ target)
    return coef[:d].T, coef[d]


def dsm_train(config: ScoreMatchingConfig, data: DataDistribution, sched: NoiseSchedule, grid: TimeGrid,
              contexts: int = 1, workers: int = 1) -> LinearGridScore:
    """Per-node least-squares fit of a linear score to the DSM target.

    Node ``t_0 = 0`` has no target and copies the ``t_1`` solution. The data
    are unconditional, so every context receives the same fit.
    """
    d = data.dim
    if config.num_samples_per_node < d + 1:
        raise ConfigError(f"num_samples_per_node must be >= d+1 = {d + 1}, got {config.num_samples_per_node}")
    nodes = list(range(1, grid.num_steps + 1))
    fit = lambda i: _fit_node(config, data, sched, grid.time(i), i)  # noqa: E731
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            fits = list(pool.map(fit, nodes))
    else:
        fits = [fit(i) for i in nodes]
    A = np.empty((grid.num_steps + 1, contexts, d, d))
    b = np.empty((grid.num_steps + 1, contexts, d))
    for i, (Ai, bi) in zip(nodes, fits):
        A[i], b[i] = Ai, bi
    A[0], b[0] = A[1], b[1]
    return LinearGridScore(A, b, grid)


def score_relative_rmse(model, oracle, sched: NoiseSchedule, grid: TimeGrid, rng: np.random.Generator,
                        data: DataDistribution, points_per_node: int = 100, skip_zero: bool = True) -> np.ndarray:
    """Per-node relative RMSE of ``model`` against ``oracle`` on forward-marginal test points."""
    out = []
    for i in range(1 if skip_zero else 0, grid.num_steps + 1):
        t = grid.time(i)
        _, xt = sample_forward(data, sched, t, rng, points_per_node)
        ref = oracle(t, xt)
        err = model(t, xt) - ref
        out.append(math.sqrt(np.mean(np.sum(err**2, axis=1)) / np.mean(np.sum(ref**2, axis=1))))
    return np.array(out)


# ---------------------------------------------------------------------------
# flat-text persistence shared with policies

def write_linear_grid(path, A: np.ndarray, b: np.ndarray, num_steps: int, extra: tuple = ()) -> None:
    nodes, contexts, d, _ = A.shape
    lines = [" ".join([str(d), str(num_steps), str(contexts)] + [format(v, ".17g") for v in extra])]
    for i in range(nodes):
        for c in range(contexts):
            for row in A[i, c]:
                lines.append(" ".join(format(v, ".17g") for v in row))
            lines.append(" ".join(format(v, ".17g") for v in b[i, c]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_linear_grid(path) -> tuple[np.ndarray, np.ndarray, int, list[float]]:
    rows = [ln.split() for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not rows:
        raise ConfigError(f"{path}: empty model file")
    head = rows[0]
    d, num_steps, contexts = int(head[0]), int(head[1]), int(head[2])
    extra = [float(v) for v in head[3:]]
    body = np.array([[float(v) for v in r] for r in rows[1:]])
    per_block = d + 1
    if body.ndim != 2 or body.shape[1] != d or body.shape[0] % (per_block * contexts):
        raise ConfigError(f"{path}: body does not match header 'd={d} contexts={contexts}'")
    nodes = body.shape[0] // (per_block * contexts)
    blocks = body.reshape(nodes, contexts, per_block, d)
    return blocks[:, :, :d, :].copy(), blocks[:, :, d, :].copy(), num_steps, extra


def save_score_model(path, model: LinearGridScore) -> None:
    write_linear_grid(path, model.A, model.b, model.grid.num_steps)


def load_score_model(path, grid: TimeGrid) -> LinearGridScore:
    A, b, n, _ = read_linear_grid(path)
    if n != grid.num_steps:
        raise ConfigError(f"{path}: model was trained with N={n}, config has grid.N={grid.num_steps}")
    return LinearGridScore(A, b, grid)
