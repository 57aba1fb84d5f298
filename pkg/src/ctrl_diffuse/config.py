"""Plain-text experiment configuration.

One ``section.key = value`` per line, ``#`` starts a comment. Vectors are
comma-separated; lists of vectors (one per context or mixture component) are
separated by ``;``. ``master_seed`` is the only key without a section.
"""

from __future__ import annotations

import copy

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data_scores import Gaussian, Mixture, ScoreMatchingConfig
from .errors import ConfigError
from .rl_algo import TrainConfig
from .rl_env import LinearReward, NegSqDist, RolloutConfig
from .samplers import SamplerSpec
from .schedule import NoiseSchedule, TimeGrid

# key -> (type, default); None defaults are filled during resolution
SCHEMA: dict[str, tuple[str, object]] = {
    "master_seed": ("int", 0),
    "schedule.kind": ("str", "linear"),
    "schedule.beta_min": ("float", 0.1),
    "schedule.beta_max": ("float", 20.0),
    "schedule.T": ("float", 1.0),
    "grid.N": ("int", 1000),
    "data.kind": ("str", "gaussian"),
    "data.dim": ("int", None),
    "data.mean": ("vec", None),
    "data.cov_diag": ("vec", None),
    "data.mixture.weights": ("vec", None),
    "data.mixture.means": ("vecs", None),
    "data.mixture.cov_diags": ("vecs", None),
    "score.source": ("str", "analytic"),
    "dsm.weighting": ("str", "g_squared"),
    "dsm.num_samples_per_node": ("int", 10000),
    "dsm.ridge": ("float", 0.0),
    "dsm.antithetic": ("bool", True),
    "dsm.seed": ("int", None),
    "policy.explore_var": ("float", 0.1),
    "reward.kind": ("str", "neg_sq_dist"),
    "reward.target": ("vecs", None),
    "reward.weights": ("vecs", None),
    "rl.eta": ("float", 1.0),
    "rl.penalty_beta": ("float", 0.0),
    "rl.num_paths": ("int", 10000),
    "rl.seed": ("int", None),
    "train.step_size": ("float", 1.0),
    "train.num_iterations": ("int", 50),
    "train.batch_paths": ("int", 4000),
    "train.estimator": ("str", "qincrement"),
    "train.value_refit_every": ("int", 1),
    "train.snapshot_every": ("int", 0),
    "train.seed": ("int", None),
    "sample.num_paths": ("int", 10000),
    "sample.samplers": ("strs", ["reverse_sde:1", "reverse_sde:0", "prob_flow", "ddpm", "ddim"]),
    "sample.dump_paths": ("int", 16),
    "gradcheck.num_paths": ("int", 100000),
    "gradcheck.perturb": ("float", 0.3),
}

SEEDED_SECTIONS = ("dsm", "rl", "train")


def _parse(kind: str, text: str):
    text = text.strip()
    if kind == "int":
        return int(text)
    if kind == "float":
        return float(text)
    if kind == "bool":
        if text.lower() not in ("true", "false"):
            raise ValueError("expected true or false")
        return text.lower() == "true"
    if kind == "str":
        if not text:
            raise ValueError("empty string")
        return text
    if kind == "strs":
        return [s.strip() for s in text.split(",") if s.strip()]
    if kind == "vec":
        return [float(v) for v in text.split(",")]
    if kind == "vecs":
        return [[float(v) for v in part.split(",")] for part in text.split(";")]
    raise AssertionError(kind)


def _format(kind: str, value) -> str:
    if kind == "bool":
        return "true" if value else "false"
    if kind == "float":
        return repr(float(value))
    if kind == "strs":
        return ",".join(value)
    if kind == "vec":
        return ",".join(repr(float(v)) for v in value)
    if kind == "vecs":
        return ";".join(",".join(repr(float(v)) for v in row) for row in value)
    return str(value)


@dataclass
class ExperimentConfig:
    values: dict
    lines: dict = field(default_factory=dict, compare=False)
    source: str = field(default="<memory>", compare=False)

    def __getitem__(self, key: str):
        return self.values[key]

    def _err(self, key: str, msg: str) -> ConfigError:
        where = f"{self.source}:{self.lines[key]}: " if key in self.lines else f"{self.source}: "
        return ConfigError(f"{where}{key}: {msg}")

    # builders -------------------------------------------------------------
    def schedule(self) -> NoiseSchedule:
        v = self.values
        return NoiseSchedule(v["schedule.kind"], v["schedule.beta_min"], v["schedule.beta_max"], v["schedule.T"])

    def grid(self) -> TimeGrid:
        return TimeGrid(self.values["grid.N"], self.values["schedule.T"])

    def data(self):
        v = self.values
        if v["data.kind"] == "gaussian":
            return Gaussian(v["data.mean"], np.diag(v["data.cov_diag"]))
        comps = tuple(Gaussian(m, np.diag(c)) for m, c in zip(v["data.mixture.means"], v["data.mixture.cov_diags"]))
        return Mixture(v["data.mixture.weights"], comps)

    def dsm_config(self) -> ScoreMatchingConfig:
        v = self.values
        return ScoreMatchingConfig(v["dsm.weighting"], v["dsm.num_samples_per_node"], v["dsm.ridge"], v["dsm.seed"],
                                   v["dsm.antithetic"])

    def reward(self):
        v = self.values
        if v["reward.kind"] == "neg_sq_dist":
            return NegSqDist(v["reward.target"])
        return LinearReward(v["reward.weights"])

    @property
    def contexts(self) -> int:
        v = self.values
        return len(v["reward.target"] if v["reward.kind"] == "neg_sq_dist" else v["reward.weights"])

    def rollout_config(self) -> RolloutConfig:
        v = self.values
        return RolloutConfig(v["rl.eta"], v["rl.penalty_beta"], self.grid(), self.contexts, v["rl.num_paths"],
                             v["rl.seed"])

    def train_config(self) -> TrainConfig:
        v = self.values
        return TrainConfig(v["train.step_size"], v["train.num_iterations"], v["train.batch_paths"],
                           v["train.estimator"], v["train.value_refit_every"], v["train.seed"])

    def sampler_specs(self) -> list[SamplerSpec]:
        specs = []
        for item in self.values["sample.samplers"]:
            kind, _, eta = item.partition(":")
            specs.append(SamplerSpec(kind, self.grid(), float(eta) if eta else 1.0, self.values["master_seed"]))
        return specs

    # persistence ------------------------------------------------------------
    def resolved_text(self) -> str:
        out = ["# resolved configuration: every effective value"]
        for key, (kind, _) in SCHEMA.items():
            val = self.values.get(key)
            if val is None:
                continue
            out.append(f"{key} = {_format(kind, val)}")
        return "\n".join(out) + "\n"

    def write_resolved(self, path) -> None:
        Path(path).write_text(self.resolved_text())


def parse_config_text(text: str, source: str = "<memory>", seed_override: int | None = None) -> ExperimentConfig:
    raw: dict = {}
    lines: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{source}:{lineno}: expected 'section.key = value'")
        key, _, value = (s.strip() for s in body.partition("="))
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in lines:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r} (first set on line {lines[key]})")
        kind = SCHEMA[key][0]
        try:
            raw[key] = _parse(kind, value)
        except ValueError:
            raise ConfigError(f"{source}:{lineno}: {key}: expected {kind}, got {value!r}") from None
        lines[key] = lineno
    if seed_override is not None:
        raw["master_seed"] = int(seed_override)
        lines.pop("master_seed", None)
    values = {k: raw[k] if k in raw else copy.deepcopy(default) for k, (_, default) in SCHEMA.items()}
    cfg = ExperimentConfig(values, lines, source)
    _resolve(cfg, explicit=set(raw))
    _validate(cfg)
    return cfg


def load_config(path, seed_override: int | None = None) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text(), str(path), seed_override)


def _resolve(cfg: ExperimentConfig, explicit: set) -> None:
    v = cfg.values
    for sec in SEEDED_SECTIONS:
        if v[f"{sec}.seed"] is None:
            v[f"{sec}.seed"] = v["master_seed"]
    if v["schedule.kind"] == "constant" and "schedule.beta_max" not in explicit:
        v["schedule.beta_max"] = v["schedule.beta_min"]
    if v["data.kind"] == "gaussian":
        dim = v["data.dim"] or (len(v["data.mean"]) if v["data.mean"] else len(v["data.cov_diag"] or [0.0, 0.0]))
        v["data.dim"] = dim
        v["data.mean"] = v["data.mean"] or [0.0] * dim
        v["data.cov_diag"] = v["data.cov_diag"] or [1.0] * dim
    elif v["data.kind"] == "mixture" and v["data.mixture.means"]:
        v["data.dim"] = v["data.dim"] or len(v["data.mixture.means"][0])
        k = len(v["data.mixture.means"])
        v["data.mixture.weights"] = v["data.mixture.weights"] or [1.0 / k] * k
        v["data.mixture.cov_diags"] = v["data.mixture.cov_diags"] or [[1.0] * v["data.dim"]] * k
    dim = v["data.dim"] or 1
    if v["reward.kind"] == "neg_sq_dist" and v["reward.target"] is None:
        v["reward.target"] = [[0.0] * dim]
    if v["reward.kind"] == "linear" and v["reward.weights"] is None:
        v["reward.weights"] = [[1.0] + [0.0] * (dim - 1)]


def _validate(cfg: ExperimentConfig) -> None:
    v = cfg.values
    positive_int = ("grid.N", "dsm.num_samples_per_node", "rl.num_paths", "train.batch_paths",
                    "train.value_refit_every", "sample.num_paths", "gradcheck.num_paths")
    for key in positive_int:
        if v[key] < 1:
            raise cfg._err(key, f"must be >= 1, got {v[key]}")
    for key in ("train.num_iterations", "sample.dump_paths", "train.snapshot_every"):
        if v[key] < 0:
            raise cfg._err(key, "must be >= 0")
    choices = {
        "schedule.kind": ("constant", "linear"),
        "data.kind": ("gaussian", "mixture"),
        "score.source": ("analytic", "file"),
        "dsm.weighting": ("g_squared", "uniform"),
        "reward.kind": ("neg_sq_dist", "linear"),
        "train.estimator": ("reward_to_go", "qincrement", "cpg"),
    }
    for key, allowed in choices.items():
        if v[key] not in allowed:
            raise cfg._err(key, f"must be one of {allowed}, got {v[key]!r}")
    if not 0 < v["schedule.beta_min"] <= v["schedule.beta_max"]:
        raise cfg._err("schedule.beta_min", "requires 0 < beta_min <= beta_max")
    if not v["schedule.T"] > 0:
        raise cfg._err("schedule.T", "must be positive")
    if not v["policy.explore_var"] > 0:
        raise cfg._err("policy.explore_var", "must be positive")
    if not 0 <= v["rl.eta"] <= 1:
        raise cfg._err("rl.eta", "must lie in [0, 1]")
    if v["rl.penalty_beta"] < 0:
        raise cfg._err("rl.penalty_beta", "must be nonnegative")
    if v["train.batch_paths"] < 2:
        raise cfg._err("train.batch_paths", "must be >= 2")
    dim = v["data.dim"]
    if v["data.kind"] == "gaussian":
        for key in ("data.mean", "data.cov_diag"):
            if len(v[key]) != dim:
                raise cfg._err(key, f"has length {len(v[key])}, data.dim is {dim}")
        if min(v["data.cov_diag"]) <= 0:
            raise cfg._err("data.cov_diag", "entries must be positive")
    else:
        means = v["data.mixture.means"]
        if not means:
            raise cfg._err("data.mixture.means", "required for data.kind = mixture")
        if any(len(m) != dim for m in means):
            raise cfg._err("data.mixture.means", f"every mean must have length data.dim = {dim}")
        if len(v["data.mixture.weights"]) != len(means) or len(v["data.mixture.cov_diags"]) != len(means):
            raise cfg._err("data.mixture.weights", "weights, means and cov_diags must have one entry per component")
        if abs(sum(v["data.mixture.weights"]) - 1.0) > 1e-12 or min(v["data.mixture.weights"]) < 0:
            raise cfg._err("data.mixture.weights", "must be nonnegative and sum to 1")
    rkey = "reward.target" if v["reward.kind"] == "neg_sq_dist" else "reward.weights"
    if any(len(row) != dim for row in v[rkey]):
        raise cfg._err(rkey, f"every row must have length data.dim = {dim}")
    for item in v["sample.samplers"]:
        kind, _, eta = item.partition(":")
        try:
            SamplerSpec(kind, cfg.grid(), float(eta) if eta else 1.0)
        except ValueError as exc:
            raise cfg._err("sample.samplers", f"{item!r}: {exc}") from None
    if any(s.partition(":")[0] == "ddpm" for s in v["sample.samplers"]):
        try:
            cfg.schedule().discrete_betas(cfg.grid())
        except ConfigError as exc:
            raise cfg._err("grid.N", str(exc)) from None
