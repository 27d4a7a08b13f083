"""``skywatch`` command-line entry point.

Subcommands run one experiment stage each and exchange artifacts through
the output directory:

    ingest -> train-predictor -> train-policy -> eval-sweep
                              \\-> baseline
    di-train -> di-sweep

Exit status is 0 on success, 2 for configuration errors, 3 for data errors
and 4 for numeric failures.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import experiments as ex
from .config import ExperimentConfig, load_config
from .exceptions import SkywatchError

COMMANDS = ("ingest", "train-predictor", "train-policy", "eval-sweep", "baseline",
            "di-train", "di-sweep")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="skywatch", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, default=None,
                       help="YAML experiment config (defaults are used when omitted)")
        p.add_argument("--seed", type=int, default=None, help="global seed override")
        p.add_argument("--out", type=str, default=None, help="output directory override")
        p.add_argument("--trials", type=int, default=None, help="evaluation trials per range")
        p.add_argument("-v", "--verbose", action="store_true", help="progress on stderr")
    return parser


def run(command: str, cfg: ExperimentConfig, verbose: bool = False) -> list[Path]:
    out = Path(cfg.out)
    log = (lambda msg: print(msg, file=sys.stderr, flush=True)) if verbose else None
    if command == "ingest":
        files = ex.cmd_ingest(cfg)
    elif command == "train-predictor":
        model, files = ex.cmd_train_predictor(cfg)
        out.mkdir(parents=True, exist_ok=True)
        model.save(out / ex.PREDICTOR)
    elif command == "train-policy":
        agents, files = ex.cmd_train_policy(cfg, log)
        out.mkdir(parents=True, exist_ok=True)
        for r, agent in agents.items():
            agent.save(ex.policy_path(cfg, r), meta={"deterrence_range_m": r})
    elif command == "eval-sweep":
        files = ex.cmd_eval_sweep(cfg)
    elif command == "baseline":
        files = ex.cmd_baseline(cfg)
    elif command == "di-train":
        models, files = ex.cmd_di_train(cfg)
        out.mkdir(parents=True, exist_ok=True)
        for tag, model in models.items():
            model.save(out / f"desknet_{tag}.ckpt")
    elif command == "di-sweep":
        files = ex.cmd_di_sweep(cfg)
    else:
        raise ValueError(f"unknown command {command}")
    files[f"config_{command}.yaml"] = ex.config_snapshot(cfg)
    return ex.write_outputs(out, files)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config).with_overrides(args.seed, args.out, args.trials)
        written = run(args.command, cfg, args.verbose)
    except SkywatchError as exc:
        print(f"skywatch {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    for path in written:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
