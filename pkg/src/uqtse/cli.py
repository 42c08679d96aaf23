"""Command-line harness tying simulation, datasets, training, and reports
into reproducible experiments.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 missing upstream artifact. Flags can also be supplied through environment
variables UQTSE_CONFIG, UQTSE_OUT, UQTSE_SEED, UQTSE_THREADS (flags win).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .experiment import (
    ConfigError,
    MissingInputError,
    parse_config,
    run_evaluate,
    run_make_dataset,
    run_report,
    run_simulate,
    run_sweep,
    run_train,
)
from .solver import NumericalError

COMMANDS = ("simulate", "make-dataset", "train", "evaluate", "sweep", "report")


def _env_default(name: str, cast=str):
    raw = os.environ.get(f"UQTSE_{name}")
    if raw is None:
        return None
    try:
        return cast(raw)
    except ValueError:
        raise ConfigError(f"environment variable UQTSE_{name} is not a valid {cast.__name__}: {raw!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="uqtse", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="experiment config JSON (or UQTSE_CONFIG)")
        p.add_argument("--out", help="output directory (or UQTSE_OUT)")
        p.add_argument("--seed", type=int, help="override the config master_seed (or UQTSE_SEED)")
        p.add_argument("--threads", type=int, help="worker cap for sweep cells (or UQTSE_THREADS)")
    return parser


def _load(args) -> tuple:
    config_path = args.config or _env_default("CONFIG")
    out_dir = args.out or _env_default("OUT")
    if config_path is None:
        raise ConfigError("--config (or UQTSE_CONFIG) is required")
    if out_dir is None:
        raise ConfigError("--out (or UQTSE_OUT) is required")
    try:
        with open(config_path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {config_path}") from None
    except json.JSONDecodeError as err:
        raise ConfigError(f"config is not valid JSON: {err}") from None
    seed = args.seed if args.seed is not None else _env_default("SEED", int)
    if seed is not None:
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a JSON object")
        raw["master_seed"] = seed
    threads = args.threads if args.threads is not None else _env_default("THREADS", int)
    if threads is None:
        threads = os.cpu_count() or 1
    if threads < 1:
        raise ConfigError("--threads must be >= 1")
    return parse_config(raw), out_dir, threads


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg, out_dir, threads = _load(args)
        if args.command == "simulate":
            run_simulate(cfg, out_dir)
        elif args.command == "make-dataset":
            run_make_dataset(cfg, out_dir)
        elif args.command == "train":
            run_train(cfg, out_dir)
        elif args.command == "evaluate":
            run_evaluate(cfg, out_dir)
        elif args.command == "sweep":
            run_sweep(cfg, out_dir, threads=threads)
        elif args.command == "report":
            run_report(cfg, out_dir)
    except ConfigError as err:
        print(f"uqtse: config error: {err}", file=sys.stderr)
        return 2
    except MissingInputError as err:
        print(f"uqtse: missing input: {err}", file=sys.stderr)
        return 4
    except (NumericalError, FloatingPointError) as err:
        print(f"uqtse: numerical failure: {err}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
