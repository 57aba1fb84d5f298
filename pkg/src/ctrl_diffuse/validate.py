"""Invariant suite behind ``ctrl-diffuse validate``.

Each check returns ``(passed, detail)``; :func:`run_suite` runs them all and
tags each result with the module it exercises. Sizes are chosen so the whole
suite finishes in about a minute on one core. The helpers that compute the
measured quantities are public so the test suite can reuse them at full size.
"""

from __future__ import annotations

import hashlib
import math
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import lqg
from .config import parse_config_text
from .data_scores import AnalyticScore, Gaussian, Mixture, ScoreMatchingConfig, dsm_train, forward_marginal, \
    score_relative_rmse, true_score
from .instances import finetune_instance, gradient_instance, max_mean_deviation, perturbed, pretrained_policy
from .policy import GaussianPolicy, grad_log_prob_block, sample_action
from .rl_algo import TrainConfig, _assemble, cosine, fd_gradient_oracle, pg_cpg, pg_qincrement, pg_reward_to_go, \
    relative_error, train
from .rl_env import NegSqDist, RolloutConfig, objective_estimate, path_kl_girsanov, path_kl_stderr, rollout, \
    terminal_kl_closed_form
from .rng import StreamRegistry, StreamReuseError, rng_stream
from .samplers import SamplerSpec, ddim_rollout, ddpm_rollout, exact_flow_gaussian, prob_flow_rollout, \
    reverse_sde_rollout, sampler_report
from .schedule import NoiseSchedule, TimeGrid

VALIDATE_COLUMNS = ("module", "check", "passed", "detail")
ORDER_NS = (125, 250, 500, 1000)
ORDER_DATA = Gaussian([3.0, 0.0], [4.0, 1.0])


@dataclass
class CheckResult:
    module: str
    check: str
    passed: bool
    detail: str

    def as_row(self) -> dict:
        return {"module": self.module, "check": self.check, "passed": self.passed, "detail": self.detail}


_CHECKS: list = []


def check(module: str):
    def deco(fn):
        _CHECKS.append((module, fn))
        return fn
    return deco


# ---------------------------------------------------------------------------
# measured quantities shared with the tests

def loglog_slope(ns, errors) -> float:
    return float(np.polyfit(np.log(ns), np.log(errors), 1)[0])


def product_limit_errors(sched: NoiseSchedule, ns=(100, 200, 400, 800)) -> list[float]:
    """Max over nodes of ``|prod_{j<=i}(1 - beta_j) - alpha_bar(t_i)|``."""
    out = []
    for n in ns:
        grid = TimeGrid(n, sched.horizon)
        prod = np.cumprod(1.0 - sched.discrete_betas(grid))
        ref = np.array([sched.alpha_bar(grid.time(i)) for i in range(1, n + 1)])
        out.append(float(np.max(np.abs(prod - ref))))
    return out


def order_errors(pair: str, ns=ORDER_NS, num_paths: int = 2000, seed: int = 0,
                 data: Gaussian = ORDER_DATA) -> list[float]:
    """Terminal-mean discrepancy per grid size for one sampler pair.

    ``pair`` is ``"ddpm_sde"`` (noise-coupled DDPM against Euler-Maruyama),
    ``"ode_exact"`` (Euler probability flow against the exact flow) or
    ``"ddim_exact"``. All runs share the prior draws of stream ``("order", 0)``.
    """
    sched = NoiseSchedule.linear(0.1, 20.0, 1.0)
    score = AnalyticScore(data, sched)
    x0 = rng_stream(seed, "order", 0).standard_normal((num_paths, data.dim))
    out = []
    for n in ns:
        grid = TimeGrid(n, 1.0)
        if pair == "ddpm_sde":
            noises = rng_stream(seed, "order", n).standard_normal((num_paths, n, data.dim))
            a = ddpm_rollout(score, sched, SamplerSpec("ddpm", grid), x0=x0, noises=noises).terminal
            b = reverse_sde_rollout(score, sched, SamplerSpec("reverse_sde", grid, 1.0), x0=x0, noises=noises).terminal
        else:
            fn, kind = (prob_flow_rollout, "prob_flow") if pair == "ode_exact" else (ddim_rollout, "ddim")
            a = fn(score, sched, SamplerSpec(kind, grid), x0=x0).terminal
            b = exact_flow_gaussian(data, sched, x0, 1.0, 0.0)
        out.append(float(np.linalg.norm(a.mean(axis=0) - b.mean(axis=0))))
    return out


def dsm_errors(sizes=(1_000, 10_000, 100_000), num_steps: int = 10, seed: int = 0) -> list[float]:
    """Mean over nodes of the relative RMSE of DSM fits at several sample sizes."""
    sched = NoiseSchedule.linear()
    grid = TimeGrid(num_steps, 1.0)
    oracle = AnalyticScore(ORDER_DATA, sched)
    out = []
    for n in sizes:
        model = dsm_train(ScoreMatchingConfig("g_squared", n, 0.0, seed), ORDER_DATA, sched, grid)
        out.append(float(np.mean(score_relative_rmse(model, oracle, sched, grid, rng_stream(seed, "score-test", 0),
                                                     ORDER_DATA))))
    return out


def vp_fixed_point_rows(num_steps: int = 1000, num_paths: int = 10_000, seed: int = 0) -> list[dict]:
    sched = NoiseSchedule.linear()
    data = Gaussian([0.0, 0.0], [1.0, 1.0])
    grid = TimeGrid(num_steps, 1.0)
    specs = [SamplerSpec("reverse_sde", grid, 1.0, seed), SamplerSpec("reverse_sde", grid, 0.0, seed),
             SamplerSpec("prob_flow", grid, 1.0, seed), SamplerSpec("ddpm", grid, 1.0, seed),
             SamplerSpec("ddim", grid, 1.0, seed)]
    return sampler_report(AnalyticScore(data, sched), sched, specs, num_paths, data)


def offset_pair(sched: NoiseSchedule, num_steps: int, delta) -> tuple[GaussianPolicy, GaussianPolicy]:
    """Zero policy and the same policy shifted by the constant vector ``delta``."""
    grid = TimeGrid(num_steps, sched.horizon)
    pre = GaussianPolicy.zeros(grid, len(delta), 1, 1.0)
    pol = pre.copy()
    pol.b[:, 0] = np.asarray(delta, dtype=float)
    return pol, pre


def offset_path_kl(sched: NoiseSchedule, num_steps: int, delta, num_paths: int = 200, seed: int = 0) -> float:
    pol, pre = offset_pair(sched, num_steps, delta)
    cfg = RolloutConfig(1.0, 0.0, pol.grid, 1, num_paths, seed)
    batch = rollout(pol, pre, NegSqDist([np.zeros(len(delta))]), cfg, sched, 0, rng_stream(seed, "offset", num_steps))
    return path_kl_girsanov(pol, pre, cfg, sched, 0, batch)


def kl_ordering_trials(num_trials: int = 100, num_paths: int = 2000, seed: int = 0) -> list[tuple]:
    """``(terminal_kl, path_kl, stderr)`` for random linear policy pairs."""
    out = []
    for k in range(num_trials):
        rng = rng_stream(seed, "kl-trial", k)
        d = 1 + k % 2
        sched = NoiseSchedule.constant(float(rng.uniform(0.5, 2.0)), 1.0)
        grid = TimeGrid(8, 1.0)
        data = Gaussian(rng.normal(size=d), rng.uniform(0.3, 2.0, size=d))
        pre = pretrained_policy(data, sched, grid, float(rng.uniform(0.01, 0.5)))
        pol = pre.with_params(pre.flatten() + float(rng.uniform(0.05, 0.5)) * rng.standard_normal(pre.num_params))
        cfg = RolloutConfig(float(rng.uniform(0.3, 1.0)), 0.0, grid, 1, num_paths, seed)
        batch = rollout(pol, pre, NegSqDist([np.zeros(d)]), cfg, sched, 0, rng)
        pkl, se = path_kl_stderr(pol, pre, cfg, sched, 0, batch)
        out.append((terminal_kl_closed_form(pol, pre, cfg, sched, 0), pkl, se))
    return out


def gradient_triangulation(eta: float, num_paths: int = 100_000, seed: int = 0) -> dict:
    """Cosine and relative error of each estimator against the CRN finite-difference oracle."""
    inst = gradient_instance(eta, num_paths=num_paths)
    pol, pre, reward, cfg, sched = inst.pol, inst.pre, inst.reward, inst.cfg, inst.sched
    batch = rollout(pol, pre, reward, cfg, sched, 0, rng_stream(seed, "grad-check", 0))
    fd = fd_gradient_oracle(pol, pre, reward, cfg, sched, noises=batch.noises())
    V = lqg.exact_value(pol, pre, reward, cfg, sched)
    ests = (pg_reward_to_go(batch, pol), pg_qincrement(batch, pol, V), pg_cpg(batch, pol, V, cfg, sched))
    out = {e.estimator_kind: (cosine(e.grad, fd.grad), relative_error(e.grad, fd.grad)) for e in ests}
    out["fd_vs_exact"] = (cosine(fd.grad, lqg.exact_gradient(pol, pre, reward, cfg, sched)),
                          relative_error(fd.grad, lqg.exact_gradient(pol, pre, reward, cfg, sched)))
    out["_estimates"] = ests
    return out


def finetune_run(penalty_beta: float, step_size: float, batch_paths: int, num_iterations: int = 50,
                 seed: int = 0, explore_var: float = 0.02):
    inst = finetune_instance(penalty_beta, explore_var)
    tcfg = TrainConfig(step_size, num_iterations, batch_paths, "qincrement", 1, seed)
    report = train(inst.pre.copy(), inst.pre, inst.reward, tcfg, inst.cfg, inst.sched)
    return inst, report


def monotone_violations(values, stderrs, slack: float = 2.0) -> int:
    values, stderrs = np.asarray(values), np.asarray(stderrs)
    drop = values[:-1] - values[1:]
    return int(np.sum(drop > slack * np.hypot(stderrs[:-1], stderrs[1:])))


# ---------------------------------------------------------------------------
# schedule

@check("schedule")
def vp_identity():
    worst = 0.0
    for sched in (NoiseSchedule.linear(), NoiseSchedule.constant(1.5, 2.0)):
        for t in np.linspace(0.0, sched.horizon, 2001):
            worst = max(worst, abs(sched.alpha(t) ** 2 + sched.sigma(t) ** 2 - 1.0))
    return worst < 1e-12, f"max |alpha^2 + sigma^2 - 1| = {worst:.2e}"


@check("schedule")
def product_limit():
    errs = product_limit_errors(NoiseSchedule.linear())
    ratios = [b / a for a, b in zip(errs, errs[1:])]
    return max(ratios) <= 0.6, "error ratios " + ", ".join(f"{r:.3f}" for r in ratios)


@check("schedule")
def monotone_alpha_bar_and_snr():
    sched = NoiseSchedule.linear()
    ts = np.linspace(1e-3, 1.0, 1000)
    ab = np.array([sched.alpha_bar(t) for t in ts])
    lam = np.array([sched.snr_lambda(t) for t in ts])
    ok = bool(np.all(np.diff(ab) < 0) and np.all(np.diff(lam) < 0))
    return ok, "alpha_bar and lambda strictly decreasing" if ok else "monotonicity violated"


# ---------------------------------------------------------------------------
# data_scores

@check("data_scores")
def score_matches_fd_log_density():
    sched = NoiseSchedule.linear()
    data = Mixture([0.3, 0.7], (Gaussian([-2.0, 0.0], [0.5, 1.0]), Gaussian([2.0, 1.0], [1.0, 0.3])))
    rng = rng_stream(0, "validate-score", 0)
    h, worst = 1e-5, 0.0
    for _ in range(200):
        t = float(rng.uniform(0.01, 1.0))
        x = rng.normal(size=2) * 2.0
        marg = forward_marginal(data, sched, t)
        fd = np.array([(marg.log_pdf(x + h * e) - marg.log_pdf(x - h * e)).item() / (2 * h) for e in np.eye(2)])
        s = true_score(data, sched, t, x)
        worst = max(worst, float(np.linalg.norm(s - fd) / max(np.linalg.norm(fd), 1.0)))
    return worst < 1e-5, f"max relative deviation {worst:.2e}"


@check("data_scores")
def dsm_consistency():
    errs = dsm_errors()
    ok = all(b <= 1.1 * a for a, b in zip(errs, errs[1:]))
    return ok, "mean rel RMSE " + ", ".join(f"{e:.4f}" for e in errs)


@check("data_scores")
def dsm_matches_explicit_minimizer():
    sched = NoiseSchedule.linear()
    grid = TimeGrid(100, 1.0)
    model = dsm_train(ScoreMatchingConfig("g_squared", 10_000, 0.0, 0), ORDER_DATA, sched, grid)
    rmse = score_relative_rmse(model, AnalyticScore(ORDER_DATA, sched), sched, grid, rng_stream(0, "score-test", 0),
                               ORDER_DATA)
    return float(rmse.max()) < 0.05, f"max rel RMSE {rmse.max():.4f}"


# ---------------------------------------------------------------------------
# samplers

@check("samplers")
def eta_zero_reduction():
    sched = NoiseSchedule.linear()
    score = AnalyticScore(ORDER_DATA, sched)
    grid = TimeGrid(50, 1.0)
    x0 = rng_stream(0, "validate-eta0", 0).standard_normal((64, 2))
    a = reverse_sde_rollout(score, sched, SamplerSpec("reverse_sde", grid, 0.0), x0=x0).states
    b = prob_flow_rollout(score, sched, SamplerSpec("prob_flow", grid), x0=x0).states
    return bool(np.array_equal(a, b)), "bit-identical" if np.array_equal(a, b) else "trajectories differ"


@check("samplers")
def noise_replay():
    sched = NoiseSchedule.linear()
    score = AnalyticScore(ORDER_DATA, sched)
    grid = TimeGrid(50, 1.0)
    ok = True
    for spec, fn in ((SamplerSpec("reverse_sde", grid, 0.7), reverse_sde_rollout), (SamplerSpec("ddpm", grid), ddpm_rollout)):
        first = fn(score, sched, spec, rng_stream(0, "validate-replay", 0), num_paths=32)
        again = fn(score, sched, spec, x0=first.states[:, 0], noises=first.noises)
        ok &= bool(np.array_equal(first.states, again.states))
    return ok, "states reproduced exactly" if ok else "replay mismatch"


@check("samplers")
def discretization_order():
    slopes = {pair: loglog_slope(ORDER_NS, order_errors(pair, num_paths=2000)) for pair in
              ("ddpm_sde", "ode_exact", "ddim_exact")}
    ok = all(-1.3 <= s <= -0.7 for s in slopes.values())
    return ok, ", ".join(f"{k} {v:.3f}" for k, v in slopes.items())


@check("samplers")
def vp_fixed_point():
    rows = vp_fixed_point_rows(num_steps=1000, num_paths=10_000)
    ok = all(r["mean_z_max"] <= 3.0 and r["cov_diag_rel_err_max"] <= 0.05 for r in rows)
    return ok, "; ".join(f"{r['sampler']} z={r['mean_z_max']:.2f} var={r['cov_diag_rel_err_max']:.3f}" for r in rows)


# ---------------------------------------------------------------------------
# policy

@check("policy")
def pretrained_equivalence():
    sched = NoiseSchedule.linear()
    grid = TimeGrid(100, 1.0)
    lin = AnalyticScore(ORDER_DATA, sched).to_linear_grid(grid)
    pre = GaussianPolicy.from_score(lin, 1e-300)
    cfg = RolloutConfig(1.0, 0.0, grid, 1, 64, 0)
    batch = rollout(pre, pre, NegSqDist([[0.0, 0.0]]), cfg, sched, 0, rng_stream(0, "validate-pre", 0))
    ref = reverse_sde_rollout(lin, sched, SamplerSpec("reverse_sde", grid, 1.0), x0=batch.states[:, 0],
                              noises=batch.brownian)
    dev = float(np.max(np.abs(ref.states - batch.states)))
    return dev < 1e-6, f"max state deviation {dev:.2e}"


@check("policy")
def grad_log_prob_zero_mean():
    inst = gradient_instance()
    pol, n = inst.pol, 100_000
    xs = np.full((n, 1), 0.7)
    a, _ = sample_action(pol, pol.grid.time(1), xs, 0, rng_stream(0, "validate-score-fn", 0))
    g = grad_log_prob_block(pol, 1, xs, 0, a)
    m, sd = g.mean(axis=0), g.std(axis=0)
    ok = bool(np.all(np.abs(m) <= 3 * sd / math.sqrt(n)))
    return ok, f"max |mean|/(std/sqrt n) = {np.max(np.abs(m) / (sd / math.sqrt(n))):.2f}"


@check("policy")
def flatten_bijection():
    pol = finetune_instance().pre
    theta = rng_stream(0, "validate-flat", 0).standard_normal(pol.num_params)
    ok = np.array_equal(pol.with_params(theta).flatten(), theta) and np.array_equal(pol.with_params(pol.flatten()).A, pol.A)
    return bool(ok), "round trip exact" if ok else "round trip mismatch"


# ---------------------------------------------------------------------------
# rl_env

@check("rl_env")
def path_kl_nonnegative():
    inst = gradient_instance(num_paths=2000)
    b = rollout(inst.pol, inst.pre, inst.reward, inst.cfg, inst.sched, 0, rng_stream(0, "validate-kl", 0))
    pos = path_kl_girsanov(inst.pol, inst.pre, inst.cfg, inst.sched, 0, b)
    zero = path_kl_girsanov(inst.pre, inst.pre, inst.cfg, inst.sched, 0, b)
    return pos > 0 and zero == 0.0, f"perturbed {pos:.4f}, identical {zero}"


@check("rl_env")
def girsanov_quadrature():
    sched = NoiseSchedule.linear()
    ref = 0.5 * sched.integrated_beta(1.0)
    errs = [abs(offset_path_kl(sched, n, [1.0]) - ref) for n in (100, 400, 1600)]
    scaled = [e * n for e, n in zip(errs, (100, 400, 1600))]
    const = offset_path_kl(NoiseSchedule.constant(1.0), 16, [0.6, 0.8])
    ok = max(scaled) <= 1.1 * scaled[0] and abs(const - 0.5) <= 2 / 16
    return ok, f"N*error {', '.join(f'{s:.3f}' for s in scaled)}; constant case {const:.6f}"


@check("rl_env")
def terminal_below_path_kl():
    trials = kl_ordering_trials(num_trials=100, num_paths=2000)
    ok = sum(t <= p + 3 * s for t, p, s in trials)
    return ok == len(trials), f"{ok}/{len(trials)} trials"


@check("rl_env")
def reward_sign_and_beta_zero():
    inst = gradient_instance(num_paths=2000)
    b = rollout(inst.pol, inst.pre, inst.reward, inst.cfg, inst.sched, 0, rng_stream(0, "validate-sign", 0))
    cfg0 = RolloutConfig(1.0, 0.0, inst.grid, 1, 2000, 0)
    b0 = rollout(inst.pol, inst.pre, inst.reward, cfg0, inst.sched, 0, rng_stream(0, "validate-sign", 1))
    ok = bool(np.all(b.running_rewards <= 0)) and objective_estimate(b0)[0] == float(b0.terminal_reward.mean())
    return ok, "running rewards nonpositive; beta=0 objective equals terminal mean"


# ---------------------------------------------------------------------------
# rl_algo

@check("rl_algo")
def triangulation_eta_one():
    res = gradient_triangulation(1.0)
    ok = all(res[k][0] >= 0.99 and res[k][1] <= 0.10 for k in ("reward_to_go", "qincrement", "cpg"))
    return ok, "; ".join(f"{k} cos {res[k][0]:.4f} rel {res[k][1]:.3f}" for k in ("reward_to_go", "qincrement", "cpg"))


@check("rl_algo")
def triangulation_ode_mode():
    res = gradient_triangulation(0.0)
    ok = all(res[k][0] >= 0.99 and res[k][1] <= 0.10 for k in ("reward_to_go", "qincrement", "cpg_ode"))
    return ok, "; ".join(f"{k} cos {res[k][0]:.4f} rel {res[k][1]:.3f}" for k in ("reward_to_go", "qincrement", "cpg_ode"))


@check("rl_algo")
def variance_ordering():
    inst = gradient_instance()
    b = rollout(inst.pol, inst.pre, inst.reward, inst.cfg, inst.sched, 0, rng_stream(0, "grad-check", 0))
    V = lqg.exact_value(inst.pol, inst.pre, inst.reward, inst.cfg, inst.sched)
    q, r = pg_qincrement(b, inst.pol, V), pg_reward_to_go(b, inst.pol)
    frac = float(np.mean(q.component_var < r.component_var))
    return frac >= 0.8, f"strictly lower on {frac:.0%} of components"


@check("rl_algo")
def baseline_invariance():
    inst = gradient_instance()
    b = rollout(inst.pol, inst.pre, inst.reward, inst.cfg, inst.sched, 0, rng_stream(0, "validate-baseline", 0))
    shift = 3.0 + b.states[:, :-1, 0] ** 2  # action-independent function of (t_i, X_i)
    est = _assemble(inst.pol, [b], [shift], "shift")
    z = np.abs(est.grad) / est.stderr
    return bool(np.all(z <= 3.0)), f"max |shift contribution| / stderr = {z.max():.2f}"


@check("rl_algo")
def improvement_small_step():
    inst, rep = finetune_run(0.0, 1.0, 1000, num_iterations=10)
    v = monotone_violations(rep.column("objective"), rep.column("objective_stderr"))
    gain = rep.column("objective")[-1] - rep.column("objective")[0]
    return v == 0 and gain > 0, f"{v} drops beyond 2 stderr; total gain {gain:.3f}"


# ---------------------------------------------------------------------------
# harness

MINIMAL_CONFIG = """\
schedule.kind = linear
grid.N = 50
data.mean = 1.0, -1.0
sample.num_paths = 200
sample.dump_paths = 2
"""


@check("harness")
def config_round_trip():
    cfg = parse_config_text(MINIMAL_CONFIG)
    again = parse_config_text(cfg.resolved_text())
    return again == cfg, "resolved copy reloads to the same config" if again == cfg else "round trip mismatch"


@check("harness")
def rng_streams():
    a = rng_stream(7, "tag", 0).standard_normal(10_000)
    same = np.array_equal(a, rng_stream(7, "tag", 0).standard_normal(10_000))
    rho = abs(float(np.corrcoef(a, rng_stream(7, "tag", 1).standard_normal(10_000))[0, 1]))
    reg = StreamRegistry(7)
    reg.stream("tag", 0)
    try:
        reg.stream("tag", 0)
        guarded = False
    except StreamReuseError:
        guarded = True
    return same and rho < 0.05 and guarded, f"reproducible={same} |rho|={rho:.4f} reuse guarded={guarded}"


@check("harness")
def pipeline_reproducible():
    from .pipeline import run_pipeline

    digests = []
    with tempfile.TemporaryDirectory() as tmp:
        for k in range(2):
            out = Path(tmp) / f"run{k}"
            cfg = parse_config_text(MINIMAL_CONFIG)
            run_pipeline(cfg, "sample", out)
            h = hashlib.sha256()
            for p in sorted(out.rglob("*")):
                if p.is_file():
                    h.update(p.relative_to(out).as_posix().encode() + p.read_bytes())
            digests.append(h.hexdigest())
    return digests[0] == digests[1], f"sha256 {digests[0][:16]}"


def run_suite(seed: int = 0, modules=None) -> list[CheckResult]:
    """Run every registered check (optionally only some modules).

    The checks use fixed internal seeds so the suite has a single verdict;
    ``seed`` is accepted for interface symmetry and recorded by the caller.
    """
    results = []
    for module, fn in _CHECKS:
        if modules and module not in modules:
            continue
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashing check is a failed check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append(CheckResult(module, fn.__name__, bool(ok), detail))
    return results


def pass_counts(results) -> dict:
    counts: dict = {}
    for r in results:
        ok, total = counts.get(r.module, (0, 0))
        counts[r.module] = (ok + r.passed, total + 1)
    return counts
