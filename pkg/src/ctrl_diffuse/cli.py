"""Command-line entry point: ``ctrl-diffuse <subcommand> --config <path> --out <dir> [--seed <int>]``.

Exit codes: 0 success, 1 a validation or gradient check failed,
2 configuration error (including a missing prerequisite artifact),
3 numeric divergence.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .config import load_config
from .errors import ConfigError, DivergenceError, NumericError, UnsupportedModeError
from .pipeline import GRAD_CSV, SUBCOMMANDS, VALIDATE_CSV, read_csv, run_pipeline

EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3

HELP = {
    "pretrain": "fit the linear score by denoising score matching",
    "sample": "run the samplers and write terminal moments and trajectories",
    "finetune": "fine-tune the pretrained policy by policy gradient",
    "kl-check": "compare path-space and terminal KL of the latest policy",
    "grad-check": "compare gradient estimators with finite differences",
    "validate": "run the invariant suite of every module",
    "report": "summarize the CSV outputs as text and figures",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ctrl-diffuse", description="Fine-tune score-based diffusion samplers "
                                     "with continuous-time policy gradients.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="subcommand", required=True, metavar="subcommand")
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, help=HELP[name])
        p.add_argument("--config", required=True, help="experiment config file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override master_seed")
    return parser


def _summary(sub: str, art) -> list[str]:
    lines = [f"{sub}: wrote {len(art.files)} files to {art.out_dir}"]
    if sub == "validate":
        counts: dict = {}
        for r in read_csv(art.out_dir / VALIDATE_CSV):
            ok, total = counts.get(r["module"], (0, 0))
            counts[r["module"]] = (ok + (r["passed"] == "true"), total + 1)
            if r["passed"] != "true":
                lines.append(f"  FAILED {r['module']}.{r['check']}: {r['detail']}")
        lines += [f"  {m}: {ok}/{total} invariants passed" for m, (ok, total) in counts.items()]
    if sub == "grad-check":
        for r in read_csv(art.out_dir / GRAD_CSV):
            lines.append(f"  {r['estimator']}: cosine {float(r['cosine']):.4f}, "
                         f"relative error {float(r['rel_err']):.4f} [{'pass' if r['passed'] == 'true' else 'FAIL'}]")
    return lines


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config, seed_override=args.seed)
        art = run_pipeline(cfg, args.subcommand, args.out)
    except DivergenceError as exc:
        print(f"error: numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, UnsupportedModeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    for line in _summary(args.subcommand, art):
        print(line)
    return EXIT_OK if art.passed else EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
