"""End-to-end experiment pipeline behind the CLI subcommands.

Every subcommand reads an :class:`~ctrl_diffuse.config.ExperimentConfig`,
writes ``config.resolved`` plus its own artifacts into the output directory
and returns the list of files it wrote. Outputs depend only on the config
and seed, so reruns are byte-identical.
"""

from __future__ import annotations

import csv
import logging
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import lqg
from .config import ExperimentConfig
from .data_scores import AnalyticScore, Gaussian, LinearGridScore, dsm_train, load_score_model, \
    save_score_model, score_relative_rmse
from .errors import ConfigError, DivergenceError, UnsupportedModeError
from .instances import perturbed
from .policy import GaussianPolicy, load_policy, save_policy
from .rl_algo import REPORT_COLUMNS, cosine, fd_gradient_oracle, pg_cpg, pg_qincrement, pg_reward_to_go, \
    relative_error, train
from .rl_env import exploration_floor, path_kl_stderr, rollout, terminal_kl_closed_form
from .rng import StreamRegistry
from .samplers import rollout as sampler_rollout
from .samplers import sampler_report

log = logging.getLogger(__name__)

SUBCOMMANDS = ("pretrain", "sample", "finetune", "kl-check", "grad-check", "validate", "report")

SCORE_FILE = "score_model.txt"
TRAIN_CSV = "train_report.csv"
KL_CSV = "kl_report.csv"
SAMPLER_CSV = "sampler_report.csv"
GRAD_CSV = "grad_check.csv"
TRAJ_CSV = "trajectories.csv"
SCORE_CSV = "score_report.csv"
ORACLE_CSV = "finetune_oracle.csv"
VALIDATE_CSV = "validate_report.csv"
REPORT_TXT = "report.txt"

KL_COLUMNS = ("context", "num_paths", "path_kl", "path_kl_stderr", "terminal_kl", "exploration_floor")
GRAD_COLUMNS = ("estimator", "eta", "num_paths", "value_model", "cosine", "rel_err", "grad_norm", "fd_norm",
                "passed")
SCORE_COLUMNS = ("node", "t", "rel_rmse")
ORACLE_COLUMNS = ("quantity", "value")
GRAD_COSINE_MIN = 0.99
GRAD_REL_ERR_MAX = 0.10


class PrerequisiteError(ConfigError):
    """A subcommand needs an artifact that an earlier subcommand writes."""


@dataclass
class RunArtifacts:
    out_dir: Path
    files: list = field(default_factory=list)
    passed: bool = True

    def add(self, name: str) -> Path:
        path = self.out_dir / name
        if name not in self.files:
            self.files.append(name)
        return path


def worker_count() -> int:
    """Worker cap from ``CTRL_DIFFUSE_THREADS``; defaults to the available cores."""
    raw = os.environ.get("CTRL_DIFFUSE_THREADS", "").strip()
    if not raw:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"CTRL_DIFFUSE_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"CTRL_DIFFUSE_THREADS must be a positive integer, got {raw!r}")
    return n


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".12g")
    return str(v)


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            values = [row[k] for k in header] if isinstance(row, dict) else row
            w.writerow([_fmt(v) for v in values])


def read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# model resolution

def score_model(cfg: ExperimentConfig, out: Path):
    """The score used for sampling: analytic oracle or the pretrained file."""
    if cfg["score.source"] == "file":
        path = out / SCORE_FILE
        if not path.is_file():
            raise PrerequisiteError(f"score.source = file needs {path}; run 'pretrain' first")
        return load_score_model(path, cfg.grid())
    return AnalyticScore(cfg.data(), cfg.schedule(), cfg.contexts)


def pretrained_policy(cfg: ExperimentConfig, out: Path) -> GaussianPolicy:
    score = score_model(cfg, out)
    if isinstance(score, AnalyticScore):
        if not isinstance(score.data, Gaussian):
            raise ConfigError("fine-tuning needs a linear score; with mixture data set score.source = file")
        score = score.to_linear_grid(cfg.grid())
    return GaussianPolicy.from_score(score, cfg["policy.explore_var"], cfg.contexts)


def _policy_files(out: Path) -> dict[int, Path]:
    found = {}
    for p in out.glob("policy_*.txt"):
        m = re.fullmatch(r"policy_(\d+)\.txt", p.name)
        if m:
            found[int(m.group(1))] = p
    return found


def latest_policy(cfg: ExperimentConfig, out: Path) -> tuple[GaussianPolicy, str]:
    files = _policy_files(out)
    if not files:
        raise PrerequisiteError(f"no policy_<iter>.txt in {out}; run 'finetune' first")
    it = max(files)
    return load_policy(files[it], cfg.grid()), files[it].name


# ---------------------------------------------------------------------------
# subcommands

def _pretrain(cfg: ExperimentConfig, out: Path, art: RunArtifacts, reg: StreamRegistry) -> None:
    sched, grid, data = cfg.schedule(), cfg.grid(), cfg.data()
    model = dsm_train(cfg.dsm_config(), data, sched, grid, cfg.contexts, workers=worker_count())
    save_score_model(art.add(SCORE_FILE), model)
    oracle = AnalyticScore(data, sched)
    rmse = score_relative_rmse(model, oracle, sched, grid, reg.stream("score-test", 0), data)
    rows = [{"node": i + 1, "t": grid.time(i + 1), "rel_rmse": e} for i, e in enumerate(rmse)]
    write_csv(art.add(SCORE_CSV), SCORE_COLUMNS, rows)
    log.info("pretrain: max relative RMSE %.4g over %d nodes", float(np.max(rmse)), len(rmse))


def _sample(cfg: ExperimentConfig, out: Path, art: RunArtifacts, reg: StreamRegistry) -> None:
    sched, grid, data = cfg.schedule(), cfg.grid(), cfg.data()
    score = score_model(cfg, out)
    specs = cfg.sampler_specs()
    rows = sampler_report(score, sched, specs, cfg["sample.num_paths"], data)
    d = data.dim
    header = ["sampler", "num_steps", "num_paths"] + [f"mean_{k}" for k in range(d)] + \
        [f"cov_{j}{k}" for j in range(d) for k in range(d)] + \
        ["mean_err_max", "mean_z_max", "cov_diag_rel_err_max", "cov_err_max"]
    flat = []
    for r in rows:
        row = {"sampler": r["sampler"], "num_steps": r["num_steps"], "num_paths": r["num_paths"]}
        row.update({f"mean_{k}": r["mean"][k] for k in range(d)})
        row.update({f"cov_{j}{k}": r["cov"][j, k] for j in range(d) for k in range(d)})
        for key in header[-4:]:
            row[key] = r.get(key, "")
        flat.append(row)
    write_csv(art.add(SAMPLER_CSV), header, flat)
    dump = cfg["sample.dump_paths"]
    traj_header = ["sampler", "path_id", "step", "t"] + [f"x_{k}" for k in range(d)]
    traj_rows = []
    if dump:
        for idx, spec in enumerate(specs):
            traj = sampler_rollout(score, sched, spec, reg.stream("trajectories", idx), dump)
            for p in range(dump):
                for i in range(grid.num_steps + 1):
                    traj_rows.append([spec.label, p, i, traj.times[i], *traj.states[p, i]])
    write_csv(art.add(TRAJ_CSV), traj_header, traj_rows)


def _finetune(cfg: ExperimentConfig, out: Path, art: RunArtifacts, reg: StreamRegistry) -> None:
    sched = cfg.schedule()
    pre = pretrained_policy(cfg, out)
    reward, rl_cfg, tcfg = cfg.reward(), cfg.rollout_config(), cfg.train_config()
    snap = cfg["train.snapshot_every"] or None
    report = train(pre.copy(), pre, reward, tcfg, rl_cfg, sched, snapshot_every=snap)
    write_csv(art.add(TRAIN_CSV), REPORT_COLUMNS, report.rows)
    for it, pol in sorted(report.snapshots.items()):
        save_policy(art.add(f"policy_{it}.txt"), pol)
    last = len(report.rows) if not report.diverged else max(report.snapshots)
    if not report.diverged:
        save_policy(art.add(f"policy_{last}.txt"), report.policy)
    final = report.policy if not report.diverged else report.snapshots[last]
    oracle = [
        ("initial_exact_objective", lqg.exact_objective(pre, pre, reward, rl_cfg, sched)),
        ("final_exact_objective", lqg.exact_objective(final, pre, reward, rl_cfg, sched)),
        ("initial_exact_terminal_reward", lqg.exact_terminal_reward(pre, reward, rl_cfg, sched)),
        ("final_exact_terminal_reward", lqg.exact_terminal_reward(final, reward, rl_cfg, sched)),
    ]
    try:
        oracle.append(("optimal_exact_objective", lqg.optimal_objective(pre, reward, rl_cfg, sched)))
    except ArithmeticError as exc:
        log.info("no finite LQG optimum: %s", exc)
    write_csv(art.add(ORACLE_CSV), ORACLE_COLUMNS, [{"quantity": k, "value": v} for k, v in oracle])
    if report.diverged:
        raise DivergenceError(f"fine-tuning diverged at {report.message}; last good policy is policy_{last}.txt")


def _kl_check(cfg: ExperimentConfig, out: Path, art: RunArtifacts, reg: StreamRegistry) -> None:
    sched = cfg.schedule()
    rl_cfg = cfg.rollout_config()
    if rl_cfg.ode_mode:
        raise UnsupportedModeError("kl-check needs rl.eta > 0: the path measures are singular at eta = 0")
    pre = pretrained_policy(cfg, out)
    pol, _ = latest_policy(cfg, out)
    reward = cfg.reward()
    floor = exploration_floor(pre, rl_cfg, sched)
    rows = []
    for c in range(cfg.contexts):
        batch = rollout(pol, pre, reward, rl_cfg, sched, c, reg.stream("kl-check", c))
        pkl, se = path_kl_stderr(pol, pre, rl_cfg, sched, c, batch)
        rows.append({"context": c, "num_paths": len(batch), "path_kl": pkl, "path_kl_stderr": se,
                     "terminal_kl": terminal_kl_closed_form(pol, pre, rl_cfg, sched, c),
                     "exploration_floor": floor})
    write_csv(art.add(KL_CSV), KL_COLUMNS, rows)


def _grad_check(cfg: ExperimentConfig, out: Path, art: RunArtifacts, reg: StreamRegistry) -> None:
    sched = cfg.schedule()
    rl_cfg = cfg.rollout_config()
    pre = pretrained_policy(cfg, out)
    pol = perturbed(pre, cfg["gradcheck.perturb"], cfg["master_seed"])
    reward = cfg.reward()
    n = cfg["gradcheck.num_paths"]
    V = lqg.exact_value(pol, pre, reward, rl_cfg, sched)
    rows = []
    for c in range(cfg.contexts):
        batch = rollout(pol, pre, reward, rl_cfg, sched, c, reg.stream("grad-check", c), n)
        fd = fd_gradient_oracle(pol, pre, reward, rl_cfg, sched, c=c, noises=batch.noises())
        sl = np.concatenate([np.arange(pol.num_params)[pol.block_slice(i, c)] for i in range(pol.grid.num_steps)])
        ests = [(pg_reward_to_go(batch, pol), "none"), (pg_qincrement(batch, pol, V), "lqg_exact"),
                (pg_cpg(batch, pol, V, rl_cfg, sched), "lqg_exact")]
        for est, vm in ests:
            g, ref = est.grad[sl], fd.grad[sl]
            cos, rel = cosine(g, ref), relative_error(g, ref)
            rows.append({"estimator": est.estimator_kind, "eta": rl_cfg.eta, "num_paths": n, "value_model": vm,
                         "cosine": cos, "rel_err": rel, "grad_norm": float(np.linalg.norm(g)),
                         "fd_norm": float(np.linalg.norm(ref)),
                         "passed": bool(cos >= GRAD_COSINE_MIN and rel <= GRAD_REL_ERR_MAX)})
    write_csv(art.add(GRAD_CSV), GRAD_COLUMNS, rows)
    art.passed = all(r["passed"] for r in rows)


def _validate(cfg: ExperimentConfig, out: Path, art: RunArtifacts, reg: StreamRegistry) -> None:
    from .validate import VALIDATE_COLUMNS, run_suite

    results = run_suite(cfg["master_seed"])
    write_csv(art.add(VALIDATE_CSV), VALIDATE_COLUMNS, [r.as_row() for r in results])
    art.passed = all(r.passed for r in results)


def _report(cfg: ExperimentConfig, out: Path, art: RunArtifacts, reg: StreamRegistry) -> None:
    from .plotting import render_figures
    from .report import build_report

    text, present = build_report(out)
    if not present:
        raise PrerequisiteError(f"no CSV reports in {out}; run another subcommand first")
    art.add(REPORT_TXT).write_text(text)
    for name in render_figures(out, out / "figures"):
        art.add(f"figures/{name}")


_DISPATCH = {
    "pretrain": _pretrain,
    "sample": _sample,
    "finetune": _finetune,
    "kl-check": _kl_check,
    "grad-check": _grad_check,
    "validate": _validate,
    "report": _report,
}


def run_pipeline(cfg: ExperimentConfig, subcommand: str, out_dir) -> RunArtifacts:
    """Run one subcommand; ``RunArtifacts.passed`` is false when a check failed."""
    if subcommand not in _DISPATCH:
        raise ConfigError(f"unknown subcommand {subcommand!r}; choose from {', '.join(SUBCOMMANDS)}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    art = RunArtifacts(out)
    cfg.write_resolved(art.add("config.resolved"))
    reg = StreamRegistry(cfg["master_seed"])
    _DISPATCH[subcommand](cfg, out, art, reg)
    return art
