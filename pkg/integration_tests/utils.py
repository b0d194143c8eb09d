"""
Helpers for acceptance-scale runs.
"""
import json
from pathlib import Path

from app.schemas.config import PipelineConfig
from app.services.pipeline_service import Pipeline

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


def load_run_config(name: str, output_dir: Path, **overrides) -> PipelineConfig:
    """configs/<name>.json with its output redirected to output_dir."""
    raw = json.loads((CONFIG_DIR / f"{name}.json").read_text())
    raw["output_dir"] = str(output_dir)
    raw.update(overrides)
    return PipelineConfig.model_validate(raw)


def stage_metrics(pipeline: Pipeline, stage: str) -> dict:
    result = pipeline.load_result(stage)
    assert result is not None, f"stage {stage} has no result"
    return result.metrics
