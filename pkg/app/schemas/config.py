"""Pipeline configuration schemas.

One JSON file describes a full run: model, grids, optimizer, insertion map,
dataset, regression, controller, verification and scenarios. Unknown keys are
rejected everywhere.
"""
import json
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from app.errors import ConfigError
from app.services.nlp_solver import SolverOptions
from config.settings import settings


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


def _matrix(value, name: str) -> np.ndarray:
    M = np.atleast_2d(np.asarray(value, dtype=float))
    if M.shape[0] != M.shape[1]:
        raise ValueError(f"{name} must be square")
    return M


def _check_spd(value, name: str):
    if value is None:
        return value
    M = _matrix(value, name)
    if not np.allclose(M, M.T):
        raise ValueError(f"{name} must be symmetric")
    if np.min(np.linalg.eigvalsh(M)) <= 0:
        raise ValueError(f"{name} must be positive definite")
    return value


class GridDimension(StrictModel):
    min: float
    max: float
    count: int = Field(..., ge=2)

    @model_validator(mode="after")
    def _ordered(self):
        if not self.min < self.max:
            raise ValueError(f"grid dimension needs min < max, got [{self.min}, {self.max}]")
        return self


class GridSpec(StrictModel):
    """Uniform grid, enumerated row-major (last dimension varies fastest)."""

    dims: List[GridDimension] = Field(..., min_length=1)

    @property
    def size(self) -> int:
        return int(np.prod([d.count for d in self.dims]))


class ModelSpec(StrictModel):
    name: Literal["cart_pendulum", "biped3"]
    params: Dict[str, Any] = Field(default_factory=dict)


class CostSettings(StrictModel):
    Q: Optional[List[List[float]]] = None
    R: Optional[List[List[float]]] = None
    barrier_weight: float = Field(default=0.0, ge=0)
    barrier_half_width: float = Field(default=2.0, gt=0)
    barrier_index: int = Field(default=0, ge=0)


class LyapunovConstraintSettings(StrictModel):
    P: List[List[float]]
    ratio: float = Field(..., gt=0, lt=1)

    @field_validator("P")
    @classmethod
    def _spd(cls, value):
        return _check_spd(value, "P")


class OptimizerSettings(StrictModel):
    horizon_periods: int = Field(default=3, ge=1)
    intervals_per_period: int = Field(default=40, ge=2)
    cost: CostSettings = Field(default_factory=CostSettings)
    input_bounds: Optional[Tuple[float, float]] = None
    lyapunov: Optional[LyapunovConstraintSettings] = None
    solver: SolverOptions = Field(default_factory=SolverOptions)
    warm_start: bool = True


class InsertionSettings(StrictModel):
    kind: Literal["none", "linear-backstepping", "orbit-regression"] = "none"
    gains: Optional[List[List[float]]] = None
    poles: Optional[List[float]] = None
    orbit_grid: Optional[GridSpec] = None
    impose_boundary: bool = True


class GaitSettings(StrictModel):
    """Mesh, actuator and clearance settings shared by gait problems."""

    intervals: int = Field(default=20, ge=2, description="Mesh intervals per phase (T_p / 2)")
    torque_limit: float = Field(default=150.0, gt=0)
    clearance: float = Field(default=0.002, ge=0, description="Swing foot height one node before impact (m)")
    clearance_window: Tuple[float, float] = (0.5, 1.0)
    torso_lean: float = Field(default=0.1, description="Absolute torso angle of the initial guess (rad)")
    speeds: List[float] = Field(default_factory=list, description="Target speeds of the gait library (m/s)")
    solver: SolverOptions = Field(default_factory=SolverOptions)


class LibrarySettings(StrictModel):
    kind: Literal["full-state", "reduced", "orbit-transition", "gait-transition"]
    grid: GridSpec
    targets: Optional[GridSpec] = Field(default=None, description="Target orbit parameters (orbit transitions)")
    samples_per_period: int = Field(default=40, ge=1)

    @model_validator(mode="after")
    def _targets(self):
        if self.kind == "orbit-transition" and self.targets is None:
            raise ValueError("orbit-transition libraries need a targets grid")
        return self


class DatasetSettings(StrictModel):
    modes: List[Literal["full-state-mu", "reduced-nu", "reduced-mu"]] = Field(..., min_length=1)
    coordinate_map: Optional[List[List[float]]] = None
    drop_cyclic: List[int] = Field(default_factory=list)
    rank_threshold: float = Field(default=1e-3, gt=0)


class RegressionSettings(StrictModel):
    hidden: int = Field(default=50, ge=1)
    validation_ratio: float = Field(default=0.2, gt=0, lt=1)
    max_epochs: int = Field(default=4000, ge=1)
    learning_rate: float = Field(default=1e-2, gt=0)
    weight_decay: float = Field(default=1e-4, ge=0)
    patience: int = Field(default=500, ge=1)
    seed: int = 0
    pretrained: Optional[str] = Field(default=None, description="Directory of previously fitted regressors")

    @field_validator("pretrained")
    @classmethod
    def _exists(cls, value):
        if value is not None and not Path(value).is_dir():
            raise ValueError(f"pretrained regressor directory {value!r} does not exist")
        return value


class ControllerSettings(StrictModel):
    Kp: List[List[float]]
    Kd: List[List[float]]
    epsilon: float = Field(default=1.0, gt=0, le=1)

    @field_validator("Kp", "Kd")
    @classmethod
    def _spd(cls, value, info):
        return _check_spd(value, info.field_name)


class DisturbanceSettings(StrictModel):
    start: float
    end: float
    magnitude: float
    channel: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _window(self):
        if not self.start < self.end:
            raise ValueError("disturbance needs start < end")
        return self


class ScheduleEntry(StrictModel):
    time: float = Field(..., ge=0)
    parameters: List[float]


class PushSettings(StrictModel):
    step: int = Field(..., ge=0)
    velocity: List[float]


ControllerKind = Literal["continuous-hold", "zoh-mpc", "learned-full-state", "embedding", "hybrid-embedding"]


class ScenarioSettings(StrictModel):
    name: str = Field(..., min_length=1)
    controller: ControllerKind
    initial_state: Optional[List[float]] = None
    duration: Optional[float] = Field(default=None, gt=0)
    steps: Optional[int] = Field(default=None, ge=1)
    disturbances: List[DisturbanceSettings] = Field(default_factory=list)
    schedule: List[ScheduleEntry] = Field(default_factory=list)
    push: Optional[PushSettings] = None
    target_speed: Optional[float] = None

    @model_validator(mode="after")
    def _horizon(self):
        if self.duration is None and self.steps is None:
            raise ValueError(f"scenario {self.name!r} needs duration or steps")
        return self


class VerificationSettings(StrictModel):
    contraction_limit: float = Field(default=1.0, gt=0, le=1)
    boundary_tol: float = Field(default=1e-6, gt=0)
    poincare_speeds: List[float] = Field(default_factory=list)
    poincare_step: float = Field(default=1e-6, gt=0)
    fixed_point_tol: float = Field(default=1e-6, gt=0)
    fixed_point_iterations: int = Field(default=50, ge=1)
    equilibrium_tol: float = Field(default=1e-9, gt=0)


class PipelineConfig(StrictModel):
    name: str = Field(..., min_length=1)
    output_dir: str
    workers: Optional[int] = Field(default=None, ge=1)
    model: ModelSpec
    optimizer: OptimizerSettings = Field(default_factory=OptimizerSettings)
    insertion: InsertionSettings = Field(default_factory=InsertionSettings)
    library: LibrarySettings
    gait: Optional[GaitSettings] = None
    dataset: DatasetSettings
    regression: RegressionSettings = Field(default_factory=RegressionSettings)
    controller: Optional[ControllerSettings] = None
    verification: VerificationSettings = Field(default_factory=VerificationSettings)
    scenarios: List[ScenarioSettings] = Field(default_factory=list)

    @model_validator(mode="after")
    def _consistent(self):
        if self.library.kind == "gait-transition":
            if self.model.name != "biped3":
                raise ValueError("gait-transition libraries need the biped3 model")
            if self.gait is None or not self.gait.speeds:
                raise ValueError("gait-transition libraries need gait.speeds")
        if self.library.kind in ("reduced", "orbit-transition", "gait-transition") and self.insertion.kind == "none":
            raise ValueError(f"{self.library.kind} libraries need an insertion map")
        if self.library.kind == "orbit-transition" and self.insertion.kind == "orbit-regression" and self.insertion.orbit_grid is None:
            raise ValueError("orbit-regression insertion needs insertion.orbit_grid")
        needs_gains = {"embedding", "hybrid-embedding"}
        if any(s.controller in needs_gains for s in self.scenarios) and self.controller is None:
            raise ValueError("embedding scenarios need controller gains")
        return self

    @property
    def resolved_output_dir(self) -> Path:
        out = Path(self.output_dir)
        if not out.is_absolute() and settings.output_root:
            out = Path(settings.output_root) / out
        return out

    @property
    def worker_count(self) -> int:
        """ZDSYNTH_WORKERS, from the environment or .env, overrides the config knob."""
        if "workers" in settings.model_fields_set:
            return settings.workers
        return self.workers or settings.workers


def load_config(path: Union[str, Path]) -> PipelineConfig:
    """Read and validate a pipeline config.

    Raises:
        ConfigError: if the file is missing, not JSON, or fails validation
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    try:
        return PipelineConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(f"invalid config {path}: {exc}") from exc
