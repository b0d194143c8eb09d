"""
Pytest configuration and fixtures.
"""
import json
from pathlib import Path

import numpy as np
import pytest

from app.models import build_model
from app.models.biped3 import Biped3Params
from app.models.cart_pendulum import CartPendulumParams


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def pendulum_params() -> CartPendulumParams:
    """Default cart-pendulum parameters."""
    return CartPendulumParams()


@pytest.fixture
def pendulum(pendulum_params):
    """Cart-pendulum model bundle."""
    return build_model("cart_pendulum", pendulum_params.model_dump())


@pytest.fixture
def biped_params() -> Biped3Params:
    return Biped3Params()


@pytest.fixture
def biped(biped_params):
    """Three-link biped model bundle."""
    return build_model("biped3", biped_params.model_dump())


@pytest.fixture
def output_dir(tmp_path: Path) -> Path:
    out = tmp_path / "run"
    out.mkdir()
    return out


@pytest.fixture
def write_config(tmp_path: Path):
    """Write a config dict to disk and return its path."""

    def _write(data: dict, name: str = "config.json") -> Path:
        path = tmp_path / name
        path.write_text(json.dumps(data, indent=2))
        return path

    return _write


# Phase markers for incremental testing
PHASES = {f"test_phase{k}": getattr(pytest.mark, f"phase{k}") for k in range(1, 9)}


def pytest_collection_modifyitems(config, items):
    """Add phase markers by filename prefix."""
    for item in items:
        for prefix, marker in PHASES.items():
            if prefix in item.nodeid:
                item.add_marker(marker)
                break
