"""Schemas for pipeline artifacts: stage results, run summary, export manifest."""
from typing import Any, Dict, List, Literal, Optional

from pydantic import BaseModel, Field

StageStatus = Literal["ok", "failed", "not-run"]


class StageResult(BaseModel):
    """Written as <output>/<stage>/result.json when a stage completes."""
    stage: str
    metrics: Dict[str, Any] = Field(default_factory=dict)
    artifacts: List[str] = Field(default_factory=list)


class SummaryMetrics(BaseModel):
    feasible_trajectories: Optional[int] = None
    total_trajectories: Optional[int] = None
    contraction_constant: Optional[float] = None
    validation_mse: Dict[str, float] = Field(default_factory=dict)
    min_sigma2: Optional[float] = None
    max_poincare_modulus: Optional[float] = None


class PipelineSummary(BaseModel):
    """Machine-readable run summary (summary.json); contains no timings."""
    name: str
    model: str
    library: str
    stages: Dict[str, StageStatus]
    metrics: SummaryMetrics = Field(default_factory=SummaryMetrics)
    verification_passed: Optional[bool] = None
    failures: List[str] = Field(default_factory=list)


class ExportManifest(BaseModel):
    """plots/manifest.json: exported CSV files with their column descriptions."""
    files: Dict[str, str] = Field(default_factory=dict)
    missing: List[str] = Field(default_factory=list)
