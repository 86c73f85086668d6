"""Command-line entry point.

Subcommands: `run` an experiment from an INI config, `synth` a ratings file,
`eval` metrics on a checkpoint, `export-embeddings` from a checkpoint.
Exit codes: 0 success, 1 config error, 2 runtime failure. The environment
variable FEDRECSIM_THREADS overrides [federation] threads.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

from .config import ConfigError, load_config
from .runner import RuntimeFailure, build_simulation, run_experiment
from .synth import generate_synthetic

log = logging.getLogger("fedrecsim")

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("config", help="experiment INI file")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="SECTION.KEY=VALUE", help="override a config value")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedrecsim")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run an experiment")
    _add_config_args(run_p)
    run_p.add_argument("--resume", default=None, metavar="CHECKPOINT",
                       help="continue from a checkpoint file")

    synth_p = sub.add_parser("synth", help="generate a synthetic ratings file")
    synth_p.add_argument("--users", type=int, required=True)
    synth_p.add_argument("--items", type=int, required=True)
    synth_p.add_argument("--interactions", type=int, required=True)
    synth_p.add_argument("--skew", type=float, default=1.0)
    synth_p.add_argument("--clusters", type=int, default=5)
    synth_p.add_argument("--seed", type=int, default=1)
    synth_p.add_argument("--out", required=True)

    eval_p = sub.add_parser("eval", help="evaluate metrics on a checkpoint")
    _add_config_args(eval_p)
    eval_p.add_argument("--checkpoint", required=True)

    exp_p = sub.add_parser("export-embeddings", help="dump item embeddings to CSV")
    _add_config_args(exp_p)
    exp_p.add_argument("--checkpoint", required=True)
    exp_p.add_argument("--out", required=True)

    return parser


def _load(args) -> "ExperimentConfig":
    overrides = list(args.overrides)
    threads_env = os.environ.get("FEDRECSIM_THREADS")
    if threads_env:
        overrides.append(f"federation.threads={threads_env}")
    return load_config(args.config, overrides)


def cmd_run(args) -> int:
    cfg = _load(args)
    artifacts = run_experiment(cfg, resume_path=args.resume)
    if artifacts.series:
        last = artifacts.series[-1]
        print(f"epoch {last.epoch}: ER@{cfg.er_k}={last.er_at_k:.4f} "
              f"HR@{cfg.hr_k}={last.hr_at_k:.4f}")
    print(f"artifacts written to {artifacts.output_dir}")
    return EXIT_OK


def cmd_synth(args) -> int:
    try:
        rows = generate_synthetic(args.users, args.items, args.interactions,
                                  args.skew, args.seed, args.out, args.clusters)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    print(f"wrote {rows} interactions to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .metrics import evaluate_round
    from .model import load_checkpoint

    cfg = _load(args)
    ck = load_checkpoint(args.checkpoint)
    sim, _, _, _ = build_simulation(cfg, ck)
    er, hr = evaluate_round(sim.shared, sim.eval_clients(), cfg.er_k, cfg.hr_k,
                            sim.target_item)
    print(f"checkpoint round {ck.round_index}: ER@{cfg.er_k}={er:.4f} HR@{cfg.hr_k}={hr:.4f}")
    return EXIT_OK


def cmd_export(args) -> int:
    from .metrics import export_item_embeddings
    from .model import load_checkpoint

    cfg = _load(args)
    ck = load_checkpoint(args.checkpoint)
    sim, _, labels, _ = build_simulation(cfg, ck)
    export_item_embeddings(args.out, sim.shared, labels, sim.target_item)
    print(f"embeddings written to {args.out}")
    return EXIT_OK


COMMANDS = {
    "run": cmd_run,
    "synth": cmd_synth,
    "eval": cmd_eval,
    "export-embeddings": cmd_export,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RuntimeFailure, OSError, ArithmeticError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
