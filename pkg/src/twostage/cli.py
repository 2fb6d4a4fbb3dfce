"""Command-line entry point for the training pipeline."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, from_dict, load_config

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

SUBCOMMANDS = {
    "train-stage1": "I",
    "record-experience": "record",
    "train-stage2": "II",
    "distill": "distill",
    "eval": "eval",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="twostage", description="Two-stage legged locomotion training.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, stage in SUBCOMMANDS.items():
        p = sub.add_parser(name, help=f"run the {stage!r} stage")
        p.add_argument("--config", help="TOML run configuration")
        p.add_argument("--seed", type=int, help="run a single seed instead of the configured list")
        p.add_argument("--out", help="output directory")
        p.add_argument("--deterministic", action="store_true", help="omit wall-clock fields from logs")
        p.add_argument("--paper-repro", action="store_true", help="lock the reward table, dt and dims")
    p = sub.add_parser("plot", help="emit SVG charts from a JSONL log")
    p.add_argument("log")
    p.add_argument("--out", default="plots")
    p = sub.add_parser("inspect-dataset", help="print the header and statistics of an experience dataset")
    p.add_argument("dataset")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def _config(args) -> RunConfig:
    overrides = {"stage": SUBCOMMANDS[args.command], "out": args.out}
    if args.deterministic:
        overrides["deterministic"] = True
    if args.paper_repro:
        overrides["paper_repro"] = True
    if args.config:
        cfg = load_config(args.config, **overrides)
    else:
        cfg = from_dict({}, **overrides)
    if args.seed is not None:
        cfg.seeds = [args.seed]
    return cfg


def _run_stage(cfg: RunConfig) -> list:
    from . import training

    results = []
    for seed in cfg.seeds:
        if cfg.stage == "I":
            results.append(training.run_stage1(cfg, seed, cfg.out))
        elif cfg.stage == "record":
            results.append(training.run_record(cfg, seed, cfg.out))
        elif cfg.stage == "II":
            if cfg.reward_mode == "BR+ER":
                for scale in cfg.style_scales:
                    results.append(training.run_stage2(cfg, seed, cfg.out, style_scale=scale))
            else:
                results.append(training.run_stage2(cfg, seed, cfg.out))
        elif cfg.stage == "distill":
            results.append(training.run_distill(cfg, seed, cfg.out))
        else:
            results.append(training.run_eval(cfg, seed, cfg.out))
    return results


def _print(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True, default=lambda o: np.asarray(o).tolist()))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "plot":
            from .plots import emit_plots

            if not Path(args.log).exists():
                raise ConfigError(f"log {args.log} does not exist")
            _print(emit_plots(args.log, args.out))
            return EXIT_OK
        if args.command == "inspect-dataset":
            from .training import inspect_dataset

            if not Path(args.dataset).exists():
                raise ConfigError(f"dataset {args.dataset} does not exist")
            _print(inspect_dataset(args.dataset))
            return EXIT_OK
        cfg = _config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    try:
        _print(_run_stage(cfg))
    except (ValueError, OSError, RuntimeError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
