"""Figures rendered from the CSV artifacts.

Uses the non-interactive Agg backend and strips the PNG software/date
metadata, so identical CSVs give identical image bytes.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .pipeline import GRAD_CSV, KL_CSV, ORACLE_CSV, SAMPLER_CSV, SCORE_CSV, TRAIN_CSV, TRAJ_CSV, read_csv  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 4.0),
    "figure.dpi": 100,
    "font.size": 10,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "svg.hashsalt": "ctrl-diffuse",
}
PNG_METADATA = {"Software": None}


def _save(fig, path: Path) -> None:
    fig.tight_layout()
    fig.savefig(path, format="png", metadata=PNG_METADATA)
    plt.close(fig)


def _col(rows, name) -> np.ndarray:
    return np.array([float(r[name]) if r[name] not in ("", "nan") else np.nan for r in rows])


def plot_training(rows, path: Path, optimum: float | None = None) -> None:
    it = _col(rows, "iter")
    obj, se = _col(rows, "objective"), _col(rows, "objective_stderr")
    fig, (ax1, ax2) = plt.subplots(2, 1, sharex=True, figsize=(6.0, 5.5))
    ax1.plot(it, obj, label="objective")
    ax1.fill_between(it, obj - 2 * se, obj + 2 * se, alpha=0.25, label="2 stderr")
    ax1.plot(it, _col(rows, "terminal_reward_mean"), ls="--", label="terminal reward")
    if optimum is not None:
        ax1.axhline(optimum, color="k", lw=0.8, ls=":", label="exact optimum")
    ax1.set_ylabel("value")
    ax1.legend()
    pkl = _col(rows, "path_kl")
    if np.any(np.isfinite(pkl)):
        ax2.plot(it, pkl, color="C3", label="path KL")
    ax2.plot(it, _col(rows, "grad_norm"), color="C2", label="gradient norm")
    ax2.set_yscale("log")
    ax2.set_xlabel("iteration")
    ax2.legend()
    _save(fig, path)


def plot_samplers(rows, path: Path) -> None:
    labels = [r["sampler"] for r in rows]
    dims = sorted(int(k.split("_")[1]) for k in rows[0] if k.startswith("mean_") and k[5:].isdigit())
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8.0, 3.5))
    x = np.arange(len(labels))
    width = 0.8 / max(len(dims), 1)
    for k in dims:
        ax1.bar(x + k * width, _col(rows, f"mean_{k}"), width, label=f"dim {k}")
        ax2.bar(x + k * width, _col(rows, f"cov_{k}{k}"), width, label=f"dim {k}")
    for ax, title in ((ax1, "terminal mean"), (ax2, "terminal variance")):
        ax.set_xticks(x + 0.4 - width / 2, labels, rotation=30, ha="right")
        ax.set_title(title)
    ax1.legend()
    _save(fig, path)


def plot_trajectories(rows, path: Path) -> None:
    samplers = list(dict.fromkeys(r["sampler"] for r in rows))
    fig, axes = plt.subplots(1, len(samplers), sharey=True, squeeze=False,
                             figsize=(2.4 * len(samplers) + 0.8, 3.2))
    for k, (ax, name) in enumerate(zip(axes[0], samplers)):
        sub = [r for r in rows if r["sampler"] == name]
        for p in sorted({int(r["path_id"]) for r in sub}):
            pr = [r for r in sub if int(r["path_id"]) == p]
            ax.plot(_col(pr, "t"), _col(pr, "x_0"), color=f"C{k}", lw=0.7, alpha=0.7)
        ax.set_title(name, fontsize=9)
        ax.set_xlabel("reverse time")
    axes[0, 0].set_ylabel("first coordinate")
    _save(fig, path)


def plot_gradcheck(rows, path: Path) -> None:
    labels = [r["estimator"] for r in rows]
    fig, ax = plt.subplots()
    ax.bar(np.arange(len(rows)), _col(rows, "rel_err"), color="C0")
    ax.axhline(0.10, color="C3", ls="--", label="tolerance")
    ax.set_xticks(np.arange(len(rows)), labels)
    ax.set_ylabel("relative error vs finite differences")
    ax.legend()
    _save(fig, path)


def plot_kl(rows, path: Path) -> None:
    fig, ax = plt.subplots()
    c = _col(rows, "context")
    ax.errorbar(c, _col(rows, "path_kl"), yerr=3 * _col(rows, "path_kl_stderr"), fmt="o", label="path KL")
    ax.plot(c, _col(rows, "terminal_kl"), "s", label="terminal KL")
    ax.plot(c, _col(rows, "exploration_floor"), "_", ms=20, label="exploration floor")
    ax.set_xlabel("context")
    ax.set_ylabel("KL")
    ax.legend()
    _save(fig, path)


def plot_score(rows, path: Path) -> None:
    fig, ax = plt.subplots()
    ax.plot(_col(rows, "t"), _col(rows, "rel_rmse"), marker=".")
    ax.set_xlabel("diffusion time")
    ax.set_ylabel("relative RMSE")
    _save(fig, path)


def _optimum(out: Path) -> float | None:
    path = out / ORACLE_CSV
    if not path.is_file():
        return None
    vals = {r["quantity"]: float(r["value"]) for r in read_csv(path)}
    return vals.get("optimal_exact_objective")


FIGURES = (
    (SCORE_CSV, "score_rmse.png", plot_score),
    (SAMPLER_CSV, "sampler_moments.png", plot_samplers),
    (TRAJ_CSV, "trajectories.png", plot_trajectories),
    (TRAIN_CSV, "training.png", plot_training),
    (KL_CSV, "kl_check.png", plot_kl),
    (GRAD_CSV, "grad_check.png", plot_gradcheck),
)


def render_figures(out_dir, fig_dir) -> list[str]:
    """Write one PNG per CSV present in ``out_dir``; returns the file names."""
    out, fig_dir = Path(out_dir), Path(fig_dir)
    written = []
    with plt.rc_context(STYLE):
        for csv_name, png, fn in FIGURES:
            path = out / csv_name
            if not path.is_file():
                continue
            rows = read_csv(path)
            if not rows:
                continue
            fig_dir.mkdir(parents=True, exist_ok=True)
            if fn is plot_training:
                fn(rows, fig_dir / png, _optimum(out))
            else:
                fn(rows, fig_dir / png)
            written.append(png)
    return written
