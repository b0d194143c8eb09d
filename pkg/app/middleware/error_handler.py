"""
Error handling for pipeline stages.
"""
import json
import traceback
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Union

from loguru import logger

from app.errors import (
    ConfigError,
    ControllerFault,
    DependencyError,
    DivergenceError,
    SingularityError,
    TrainingError,
    VerificationFailure,
    ZDSynthError,
)

EXIT_OK = 0
EXIT_VERIFICATION_FAILED = 1
EXIT_EXECUTION_ERROR = 2

FAILURE_REPORT = "failure_report.json"


def exit_code_for(exc: BaseException) -> int:
    """Verification failures exit with 1, every other failure with 2."""
    if isinstance(exc, VerificationFailure):
        return EXIT_VERIFICATION_FAILED
    return EXIT_EXECUTION_ERROR


def _details(exc: BaseException) -> dict:
    details = {}
    if isinstance(exc, VerificationFailure):
        details["offending"] = [str(o) if not isinstance(o, (int, float, str)) else o for o in exc.offending]
        details.update({k: v for k, v in exc.details.items() if isinstance(v, (int, float, str, bool, list, dict))})
    if isinstance(exc, ControllerFault):
        details["time"] = exc.time
        details["state"] = None if exc.state is None else exc.state.tolist()
    if isinstance(exc, SingularityError) and exc.configuration is not None:
        details["configuration"] = exc.configuration.tolist()
    if isinstance(exc, DivergenceError):
        details["time"] = exc.time
    if isinstance(exc, TrainingError):
        details["epoch"] = exc.epoch
    return details


def handle_stage_error(exc: BaseException, stage: str, out_dir: Optional[Union[str, Path]] = None) -> int:
    """Log a stage failure, write the failure report and return the exit code.

    Artifacts already written by earlier stages are left in place.
    """
    code = exit_code_for(exc)
    if isinstance(exc, VerificationFailure):
        logger.error(f"Verification failed in stage {stage}: {exc}")
    elif isinstance(exc, (ConfigError, DependencyError)):
        logger.error(f"Stage {stage} cannot run: {exc}")
    elif isinstance(exc, ZDSynthError):
        logger.error(f"Stage {stage} failed: {type(exc).__name__}: {exc}")
    else:
        logger.exception(f"Unhandled exception in stage {stage}: {exc}")

    if out_dir is not None:
        report = {
            "error": {
                "stage": stage,
                "type": type(exc).__name__,
                "message": str(exc),
                "exit_code": code,
                "details": _details(exc),
                "time": datetime.now(timezone.utc).isoformat(),
                "traceback": traceback.format_exception(type(exc), exc, exc.__traceback__),
            }
        }
        path = Path(out_dir)
        path.mkdir(parents=True, exist_ok=True)
        (path / FAILURE_REPORT).write_text(json.dumps(report, indent=2, default=str))
    return code
