"""
Root pytest hooks shared by tests/ and integration_tests/.
"""
import pytest

from config.settings import settings


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run acceptance-scale tests")


def pytest_collection_modifyitems(config, items):
    """Skip slow tests unless asked for."""
    if config.getoption("--runslow") or settings.run_slow:
        return
    skip_slow = pytest.mark.skip(reason="acceptance-scale test; use --runslow or ZDSYNTH_RUN_SLOW=1")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)
