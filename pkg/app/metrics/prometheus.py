"""
Prometheus metrics for zdsynth pipeline runs.

Metrics exported:
- zdsynth_stage_duration_seconds{stage} - Wall time per pipeline stage
- zdsynth_solves_total{status} - Collocation solves by final status
- zdsynth_contraction_constant - Max V ratio over the library
- zdsynth_validation_mse{regressor} - Validation MSE per fitted regressor
- zdsynth_min_singular_value - Min over sample times of sigma_2
- zdsynth_max_poincare_modulus - Largest Poincare eigenvalue modulus

The pipeline writes the registry to <output>/metrics.prom after each run.
"""
from pathlib import Path
from typing import Union

from loguru import logger
from prometheus_client import (
    CollectorRegistry,
    Counter,
    Gauge,
    Histogram,
    Info,
    write_to_textfile,
)

zdsynth_registry = CollectorRegistry()

zdsynth_stage_duration_seconds = Histogram(
    "zdsynth_stage_duration_seconds",
    "Pipeline stage wall time in seconds",
    ["stage"],
    registry=zdsynth_registry,
    buckets=(0.1, 0.5, 1.0, 5.0, 15.0, 60.0, 300.0, 900.0, 1800.0, 3600.0),
)

zdsynth_solves_total = Counter(
    "zdsynth_solves_total",
    "Collocation solves by final status",
    ["status"],
    registry=zdsynth_registry,
)

zdsynth_contraction_constant = Gauge(
    "zdsynth_contraction_constant",
    "Largest V(phi(T_p)) / V(phi(0)) ratio over the library",
    registry=zdsynth_registry,
)

zdsynth_validation_mse = Gauge(
    "zdsynth_validation_mse",
    "Validation mean squared error per regressor",
    ["regressor"],
    registry=zdsynth_registry,
)

zdsynth_min_singular_value = Gauge(
    "zdsynth_min_singular_value",
    "Minimum over sample times of the second singular value of the x1 features",
    registry=zdsynth_registry,
)

zdsynth_max_poincare_modulus = Gauge(
    "zdsynth_max_poincare_modulus",
    "Largest eigenvalue modulus of the Poincare map Jacobian",
    registry=zdsynth_registry,
)

zdsynth_info = Info(
    "zdsynth",
    "zdsynth build information",
    registry=zdsynth_registry,
)


class MetricsCollector:
    """Thin facade the services report through."""

    def record_solve(self, status: str):
        zdsynth_solves_total.labels(status=status).inc()

    def observe_stage(self, stage: str, duration_seconds: float):
        zdsynth_stage_duration_seconds.labels(stage=stage).observe(duration_seconds)

    def set_contraction(self, c: float):
        zdsynth_contraction_constant.set(c)

    def set_validation_mse(self, regressor: str, mse: float):
        zdsynth_validation_mse.labels(regressor=regressor).set(mse)

    def set_min_singular_value(self, value: float):
        zdsynth_min_singular_value.set(value)

    def set_max_poincare_modulus(self, value: float):
        zdsynth_max_poincare_modulus.set(value)

    def set_system_info(self, version: str, model: str):
        zdsynth_info.info({"version": version, "model": model, "service": "zdsynth"})

    def write(self, out_dir: Union[str, Path]) -> Path:
        """Write the registry in textfile format to <out_dir>/metrics.prom."""
        path = Path(out_dir) / "metrics.prom"
        path.parent.mkdir(parents=True, exist_ok=True)
        write_to_textfile(str(path), zdsynth_registry)
        logger.debug(f"metrics written to {path}")
        return path


# Global metrics collector instance
metrics_collector = MetricsCollector()
