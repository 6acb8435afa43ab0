"""Command-line front end.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 stage failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from .config import ConfigError, PipelineConfig, normalize, validate_config
from .pipeline import STAGES, DataError, Pipeline, StageError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_STAGE = 0, 2, 3, 4
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}

log = logging.getLogger("sdcuda")


def _setup_logging() -> None:
    name = os.environ.get("SDC_UDA_LOG", "info").lower()
    level = LOG_LEVELS.get(name, logging.INFO)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)
    if name not in LOG_LEVELS:
        log.warning("SDC_UDA_LOG=%r not one of error, info, debug; using info", name)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sdcuda", description="Volumetric domain adaptation pipeline.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name in STAGES + ("pipeline",):
        help_text = "run every stage in order" if name == "pipeline" else f"run the {name} stage"
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, help="TOML config file (defaults used when omitted)")
        p.add_argument("--resume", action="store_true", help="skip stages whose config hash and artifacts match")
        p.add_argument("--seed", type=int, help="override every seed in the config")
        p.add_argument("--workers", type=int, help="parallel workers; 1 is deterministic")
        p.add_argument("--out", type=Path, help="run directory")
    return parser


def load_config(args: argparse.Namespace) -> PipelineConfig:
    cfg = validate_config(args.config) if args.config else normalize({})
    d = cfg.to_dict()
    if args.out is not None:
        d["run"]["out"] = str(args.out)
    if args.workers is not None:
        d["run"]["workers"] = args.workers
    cfg = normalize(d)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging()
    try:
        cfg = load_config(args)
    except ConfigError as exc:
        print(f"error: {args.command}: config {args.config or '<defaults>'}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    pipe = Pipeline(cfg)
    stages = STAGES if args.command == "pipeline" else (args.command,)
    try:
        for stage in stages:
            try:
                pipe.run_stage(stage, args.resume)
            except DataError as exc:
                msg = str(exc)
                raise DataError(msg if msg.startswith("stage ") else f"stage {stage}: {msg}") from exc
            except ConfigError as exc:
                raise ConfigError(f"stage {stage}: {exc}") from exc
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
