"""Command line: ``fedhpl run | validate | inspect``."""

from __future__ import annotations

import argparse
import logging
import sys

from .config import ConfigError, parse_config
from .results import accuracy_table, emit_results, read_metrics
from .runner import ExperimentError, Simulation

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_INVALID = 2


def _overrides(args) -> dict:
    return {
        "master_seed": args.seed,
        "policy": args.policy,
        "global_rounds": args.rounds,
        "upload_mode": args.upload_mode,
        "workers": args.workers,
    }


def cmd_run(args) -> int:
    try:
        cfg = parse_config(args.config, _overrides(args))
    except ConfigError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_INVALID
    try:
        sim = Simulation(cfg)
    except (ValueError, OSError) as exc:
        print(f"setup failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    try:
        metrics = sim.run()
    except ExperimentError as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        emit_results(exc.partial, args.out, cfg)
        return EXIT_RUNTIME
    emit_results(metrics, args.out, cfg)
    print(accuracy_table(metrics))
    print(f"results written to {args.out}")
    return EXIT_OK


def cmd_validate(args) -> int:
    try:
        cfg = parse_config(args.config)
    except ConfigError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_INVALID
    print(f"ok: {cfg.num_clients} clients, {cfg.global_rounds} rounds, policy={cfg.policy.value}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    try:
        metrics = read_metrics(args.results)
    except (OSError, ValueError, KeyError) as exc:
        print(f"cannot read results: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(accuracy_table(metrics))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedhpl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment")
    run.add_argument("--config", required=True)
    run.add_argument("--out", default="results")
    run.add_argument("--seed", type=int)
    run.add_argument("--policy", choices=["local_only", "fedhpl", "fedhpl_plus_prompts", "fedhpl_plus_heads"])
    run.add_argument("--rounds", type=int)
    run.add_argument("--upload-mode", choices=["full", "summary"])
    run.add_argument("--workers", type=int)
    run.set_defaults(func=cmd_run)

    val = sub.add_parser("validate", help="check a config file")
    val.add_argument("--config", required=True)
    val.set_defaults(func=cmd_validate)

    ins = sub.add_parser("inspect", help="print the accuracy table of a results directory")
    ins.add_argument("--results", required=True)
    ins.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
