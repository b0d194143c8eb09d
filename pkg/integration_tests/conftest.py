"""
Fixtures for acceptance-scale pipeline runs.

Each config under configs/ runs once per test module, into a temporary
output directory.
"""
import pytest

from app.services.pipeline_service import Pipeline
from integration_tests.utils import load_run_config


@pytest.fixture(scope="module")
def finished_run(request, tmp_path_factory):
    """(pipeline, summary) for the config named by the module's CONFIG_NAME."""
    name = request.module.CONFIG_NAME
    pipeline = Pipeline(load_run_config(name, tmp_path_factory.mktemp(name)))
    summary = pipeline.run("all")
    return pipeline, summary
