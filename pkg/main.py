"""
Command-line entry point.

    zdsynth run --stage <optimize|library|fit|verify|simulate|all> <config.json>
    zdsynth export-plots <output_dir>
    zdsynth verify <output_dir>

Exit codes: 0 success, 1 verification failed, 2 execution error.
"""
import argparse
import os
import sys
from pathlib import Path
from typing import List, Optional

# Add current directory to path for imports
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from loguru import logger

from app import __version__
from app.middleware.error_handler import EXIT_OK, handle_stage_error
from app.schemas.config import load_config
from config.logging_config import setup_logging

STAGE_CHOICES = ("optimize", "library", "fit", "verify", "simulate", "all")


def parse_args(argv: Optional[List[str]] = None) -> argparse.Namespace:
    p = argparse.ArgumentParser(prog="zdsynth", description="Periodic stabilizing-controller synthesis")
    p.add_argument("--version", action="version", version=f"zdsynth {__version__}")
    p.add_argument("--log-level", default=None, help="overrides LOG_LEVEL")
    p.add_argument("--log-format", default=None, choices=["json", "text"], help="overrides LOG_FORMAT")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run pipeline stages for a config")
    run.add_argument("--stage", default="all", choices=STAGE_CHOICES)
    run.add_argument("--workers", type=int, default=None, help="worker processes (defaults to the config)")
    run.add_argument("--force", action="store_true", help="rerun stages whose inputs are unchanged")
    run.add_argument("config", type=Path)

    export = sub.add_parser("export-plots", help="write plot data CSVs for a finished run")
    export.add_argument("directory", type=Path)

    verify = sub.add_parser("verify", help="rerun verification from the artifacts of a run")
    verify.add_argument("directory", type=Path)
    return p.parse_args(argv)


def _run(args: argparse.Namespace) -> int:
    from app.services.pipeline_service import Pipeline

    out_dir = None
    pipeline = None
    try:
        config = load_config(args.config)
        out_dir = config.resolved_output_dir
        pipeline = Pipeline(config, workers=args.workers)
        summary = pipeline.run(args.stage, force=args.force)
    except Exception as exc:
        stage = pipeline.current_stage if pipeline is not None and pipeline.current_stage else args.stage
        return handle_stage_error(exc, stage, out_dir)
    logger.info(f"Run {summary.name} finished: " + ", ".join(f"{k}={v}" for k, v in summary.stages.items()))
    return EXIT_OK


def _export(args: argparse.Namespace) -> int:
    from app.services.export_service import export_plots

    try:
        export_plots(args.directory)
    except Exception as exc:
        return handle_stage_error(exc, "export-plots")
    return EXIT_OK


def _verify(args: argparse.Namespace) -> int:
    from app.services.pipeline_service import verify_artifacts

    try:
        summary = verify_artifacts(args.directory)
    except Exception as exc:
        out_dir = args.directory if args.directory.is_dir() else None
        return handle_stage_error(exc, "verify", out_dir)
    logger.info(f"Verification passed for {summary.name}")
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    args = parse_args(argv)
    setup_logging(level=args.log_level, fmt=args.log_format)
    handlers = {"run": _run, "export-plots": _export, "verify": _verify}
    return handlers[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
