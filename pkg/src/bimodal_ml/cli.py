"""Command-line entry point: run | compare | validate <config>.

Exit codes: 0 success, 2 config/data validation failure, 3 training
divergence. The default output root comes from $BIMODAL_ML_OUT_ROOT when a
relative output directory is configured.
"""

import argparse
import sys

from .config import load_config, resolve_out_dir, validate_config
from .errors import (
    InvalidConfigError,
    InvalidInputError,
    ManifestError,
    TrainingDivergedError,
    UndefinedMetricError,
    ValidationError,
)
from .experiment import run_compare, run_experiment
from .trainer import REGIMES

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_DIVERGED = 3

_VALIDATION_ERRORS = (
    InvalidConfigError,
    InvalidInputError,
    ValidationError,
    ManifestError,
    UndefinedMetricError,
    FileNotFoundError,
)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="bimodal-ml",
        description="Two-branch mutual-learning trainer for bimodal classifiers",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, doc in (
        ("run", "train one regime and write the full artifact set"),
        ("compare", "train several regimes over several seeds; write a table"),
        ("validate", "check a config file and exit"),
    ):
        cmd = sub.add_parser(name, help=doc)
        cmd.add_argument("config", help="path to a YAML experiment config")
        if name == "validate":
            continue
        cmd.add_argument("--seed", type=int, default=None, help="override training.seed")
        cmd.add_argument("--out", default=None, help="override output directory")
        cmd.add_argument(
            "--regime",
            action="append",
            choices=list(REGIMES),
            default=None,
            help="override the regime (repeatable for compare)",
        )
        cmd.add_argument("--quiet", action="store_true", help="suppress progress output")
    return parser


def cmd_run(config_path, seed=None, out=None, regimes=None, quiet=False):
    cfg = load_config(config_path)
    if regimes and len(regimes) > 1:
        raise InvalidConfigError("run takes at most one --regime")
    regime = regimes[0] if regimes else None
    out_dir = resolve_out_dir(cfg, override=out)
    result = run_experiment(cfg, out_dir, seed=seed, regime=regime, quiet=quiet)
    if not quiet:
        print(f"wrote {result.out_dir}")
    return EXIT_OK


def cmd_compare(config_path, seed=None, out=None, regimes=None, quiet=False):
    cfg = load_config(config_path)
    seeds = None
    if seed is not None:
        seeds = [seed + i for i, _ in enumerate(cfg.compare_seeds)]
    out_dir = resolve_out_dir(cfg, override=out)
    result = run_compare(cfg, out_dir, regimes=regimes, seeds=seeds, quiet=quiet)
    if not quiet:
        print(f"wrote {result.out_dir}")
    return EXIT_OK


def cmd_validate(config_path):
    errors = validate_config(config_path)
    if errors:
        for message in errors:
            print(f"error: {message}", file=sys.stderr)
        return EXIT_VALIDATION
    print("OK")
    return EXIT_OK


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "validate":
            return cmd_validate(args.config)
        if args.command == "run":
            return cmd_run(
                args.config,
                seed=args.seed,
                out=args.out,
                regimes=args.regime,
                quiet=args.quiet,
            )
        return cmd_compare(
            args.config,
            seed=args.seed,
            out=args.out,
            regimes=args.regime,
            quiet=args.quiet,
        )
    except _VALIDATION_ERRORS as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_VALIDATION
    except TrainingDivergedError as err:
        print(f"error: training diverged: {err}", file=sys.stderr)
        if err.diagnostics:
            print(f"diagnostics: {err.diagnostics}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
