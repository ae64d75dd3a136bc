"""Command-line entry point: ``cohort-forge <stage> [--config PATH] ...``.

Exit status is 0 on success, 1 for invalid input or configuration and 2 for
runtime or numerical failures.  ``COHORT_FORGE_LOG`` selects the log level
(``error``, ``warn``, ``info`` or ``debug``; default ``warn``).
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

from ._errors import CohortForgeError, ValidationError
from .config import load_config
from .pipeline import STAGES, run_all, run_stage

logger = logging.getLogger("cohort_forge")

LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO,
              "debug": logging.DEBUG}

HELP = {
    "synth": "write a synthetic cohort (and optional DWI phantoms)",
    "ingest": "read participants and metrics into the canonical tables",
    "qa": "apply inclusion criteria and the DWI shell rule",
    "dti": "fit tensors and compute whole-brain FA, MD and TICV",
    "harmonize": "ComBat harmonization and per-study outlier rejection",
    "fit": "fit full and null GAMLSS models per metric",
    "test": "likelihood-ratio tests, BY correction and bootstrap bands",
    "report": "SVG centile plots and an index JSON",
    "run": "run every stage in order (synth only when no inputs are configured)",
}


def _non_negative(text):
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return value


def _positive(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="YAML configuration file")
    common.add_argument("--seed", type=_non_negative, metavar="N", help="override the synthetic and bootstrap seeds")
    common.add_argument("--threads", type=_positive, metavar="N", help="worker processes for per-metric work")
    common.add_argument("--output", metavar="DIR", help="output directory (overrides the config)")
    parser = argparse.ArgumentParser(prog="cohort-forge", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name in (*STAGES, "run"):
        sub.add_parser(name, parents=[common], help=HELP[name], description=HELP[name])
    return parser


def configure_logging() -> None:
    name = os.environ.get("COHORT_FORGE_LOG", "warn").strip().lower()
    if name not in LOG_LEVELS:
        raise ValidationError("BAD_LOG_LEVEL", f"COHORT_FORGE_LOG must be one of {sorted(LOG_LEVELS)}, got {name!r}")
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    logger.handlers[:] = [handler]
    logger.setLevel(LOG_LEVELS[name])
    logger.propagate = False


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors; bad usage is invalid input here
        return 0 if exc.code == 0 else 1
    try:
        configure_logging()
        cfg = load_config(args.config)
        cfg = cfg.with_overrides(seed=args.seed, threads=args.threads, output=args.output)
        if args.command == "run":
            run_all(cfg)
        else:
            run_stage(args.command, cfg)
    except CohortForgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, MemoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
