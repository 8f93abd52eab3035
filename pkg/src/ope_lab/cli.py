"""``ope-lab`` command line: run, validate and oracle subcommands.

Exit codes: 0 success, 1 validation, 2 runtime, 3 I/O.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

from .core import OPELabError
from .experiment import (
    ConfigError,
    ConfigValidationError,
    SweepConfig,
    emit_report,
    oracle_values,
    parse_config,
    run_sweep,
)
from .oracle import ESTIMATOR_NAMES

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_IO = 0, 1, 2, 3


def _apply_overrides(config: SweepConfig, args: argparse.Namespace) -> SweepConfig:
    changes = {}
    try:
        if getattr(args, "grid", None):
            changes["action_space_grid"] = tuple(int(v) for v in args.grid.split(",") if v)
        if getattr(args, "estimators", None):
            changes["estimators"] = tuple(v.strip().lower() for v in args.estimators.split(",") if v.strip())
    except ValueError as exc:
        raise ConfigValidationError(f"bad command-line override: {exc}") from exc
    if getattr(args, "replications", None) is not None:
        changes["n_replications"] = args.replications
    if getattr(args, "seed", None) is not None:
        changes["base_seed"] = args.seed
    if getattr(args, "out", None):
        changes["out_dir"] = args.out
    return replace(config, **changes) if changes else config


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ope-lab", description="Off-policy evaluation sweeps on synthetic bandits.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a sweep and write results.csv, summary.txt and SVG charts")
    run.add_argument("--config", required=True)
    run.add_argument("--out")
    run.add_argument("--grid", help="comma-separated action-space sizes, e.g. 10,100,1000")
    run.add_argument("--replications", type=int)
    run.add_argument("--seed", type=int)
    run.add_argument("--estimators", help=f"comma-separated subset of {','.join(ESTIMATOR_NAMES)}")
    run.add_argument("--quiet", action="store_true", help="suppress progress on stderr")

    validate = sub.add_parser("validate", help="parse and validate a config file")
    validate.add_argument("--config", required=True)

    oracle = sub.add_parser("oracle", help="print the true policy value of every grid cell")
    oracle.add_argument("--config", required=True)
    oracle.add_argument("--grid")
    oracle.add_argument("--seed", type=int)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = _apply_overrides(parse_config(args.config), args)
    except ConfigError as exc:
        print(f"ope-lab: {exc.code}: {exc}", file=sys.stderr)
        return exc.exit_code

    if args.command == "validate":
        print(f"ok: {len(config.action_space_grid)} grid cells, estimators {','.join(config.estimators)}")
        return EXIT_OK

    if args.command == "oracle":
        try:
            values = oracle_values(config)
        except OPELabError as exc:
            print(f"ope-lab: runtime: {exc}", file=sys.stderr)
            return EXIT_RUNTIME
        print("n_actions,true_value,standard_error")
        for n_actions, value, se in values:
            print(f"{n_actions},{value!r},{se!r}")
        return EXIT_OK

    try:
        table = run_sweep(config, verbose=not args.quiet)
    except OPELabError as exc:
        print(f"ope-lab: runtime: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    try:
        paths = emit_report(table, config.out_dir)
    except OSError as exc:
        print(f"ope-lab: io: {exc}", file=sys.stderr)
        return EXIT_IO
    for path in paths.values():
        print(os.fspath(path))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
