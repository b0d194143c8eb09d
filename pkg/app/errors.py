"""
Exception hierarchy for zdsynth.

Every error raised on purpose by the library derives from ZDSynthError so the
CLI error handler can map it to an exit code. Optimizer non-convergence is
reported through OptimizerResult.status and never raised.
"""
from typing import Any, Dict, List, Optional, Sequence

import numpy as np


class ZDSynthError(Exception):
    """Base class for all library errors."""


class ContractViolationError(ZDSynthError, ValueError):
    """A precondition on shapes or arguments does not hold."""


class ConfigError(ZDSynthError, ValueError):
    """Pipeline configuration is invalid."""


class ModelDefinitionError(ZDSynthError):
    """A model violates its own invariants (e.g. mass matrix not positive definite)."""


class SingularityError(ZDSynthError):
    """A matrix that must be inverted is singular at the given configuration."""

    def __init__(self, message: str, configuration: Optional[Sequence[float]] = None):
        self.configuration = None if configuration is None else np.asarray(configuration, dtype=float).copy()
        if self.configuration is not None:
            message = f"{message} at configuration {np.array2string(self.configuration, precision=6)}"
        super().__init__(message)


class DivergenceError(ZDSynthError):
    """Integration produced a non-finite state."""

    def __init__(self, message: str, time: float):
        self.time = float(time)
        super().__init__(f"{message} (t = {self.time:.6f} s)")


class StallError(ZDSynthError):
    """No guard crossing within the maximum phase duration."""


class EventDetectionError(ZDSynthError):
    """Guard crossing could not be localized (no sign change or multiple crossings)."""


class TranscriptionError(ZDSynthError, ValueError):
    """Collocation problem is inconsistent."""


class DesignError(ZDSynthError):
    """An insertion map or controller cannot be designed from the given data."""


class TrainingError(ZDSynthError):
    """Regression training failed."""

    def __init__(self, message: str, epoch: int):
        self.epoch = int(epoch)
        super().__init__(f"{message} (epoch {self.epoch})")


class TrajectoryLookupError(ZDSynthError, LookupError):
    """No stored trajectory is close enough to the queried state."""


class ControllerFault(ZDSynthError):
    """A controller cannot produce an input at the current state."""

    def __init__(self, message: str, state: Optional[Sequence[float]] = None, time: Optional[float] = None):
        self.state = None if state is None else np.asarray(state, dtype=float).copy()
        self.time = time
        detail = message
        if time is not None:
            detail += f" (t = {time:.6f} s)"
        if self.state is not None:
            detail += f" state={np.array2string(self.state, precision=6)}"
        super().__init__(detail)


class ClockError(ZDSynthError, ValueError):
    """The phase clock tau is outside [0, T_p]."""


class VerificationFailure(ZDSynthError):
    """A numerical verification check failed."""

    def __init__(self, message: str, offending: Optional[List[Any]] = None, details: Optional[Dict[str, Any]] = None):
        self.offending = list(offending or [])
        self.details = dict(details or {})
        super().__init__(message)


class DependencyError(ZDSynthError):
    """A pipeline stage is missing an upstream artifact."""
