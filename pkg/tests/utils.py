"""
Test utilities and helpers.
"""
from typing import Any, Callable, Dict, Optional

import numpy as np

from app.models.base import ControlSystem, StateDecomposition


def linear_system(A, B, period: float = 1.0, name: str = "linear",
                  decomposition: Optional[StateDecomposition] = None) -> ControlSystem:
    """x_dot = A x + B u, batch capable."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)

    def f(t, x, u):
        return x @ A.T + u @ B.T

    return ControlSystem(name=name, n=A.shape[0], m=B.shape[1], vector_field=f, period=period,
                         decomposition=decomposition)


def double_integrator(period: float = 1.0) -> ControlSystem:
    return linear_system([[0.0, 1.0], [0.0, 0.0]], [[0.0], [1.0]], period=period, name="double_integrator",
                         decomposition=StateDecomposition.leading(1, 1))


def numerical_gradient(fn: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function."""
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = step
        g[j] = (fn(x + e) - fn(x - e)) / (2.0 * step)
    return g


def numerical_jacobian(fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    f0 = np.atleast_1d(fn(x))
    J = np.empty((f0.size, x.size))
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = step
        J[:, j] = (np.atleast_1d(fn(x + e)) - np.atleast_1d(fn(x - e))) / (2.0 * step)
    return J


def create_pendulum_config(output_dir: str, **overrides) -> Dict[str, Any]:
    """Small full-state cart-pendulum config with optional top-level overrides."""
    config = {
        "name": "pendulum_small",
        "output_dir": output_dir,
        "workers": 1,
        "model": {"name": "cart_pendulum", "params": {}},
        "optimizer": {
            "horizon_periods": 2,
            "intervals_per_period": 10,
            "cost": {"barrier_weight": 10.0},
        },
        "library": {
            "kind": "full-state",
            "grid": {"dims": [
                {"min": -0.5, "max": 0.5, "count": 2},
                {"min": -0.5, "max": 0.5, "count": 2},
                {"min": -0.1, "max": 0.1, "count": 2},
                {"min": -0.5, "max": 0.5, "count": 2},
            ]},
            "samples_per_period": 10,
        },
        "dataset": {"modes": ["full-state-mu"]},
        "regression": {"hidden": 8, "max_epochs": 50, "patience": 20},
        "scenarios": [
            {"name": "hold", "controller": "continuous-hold", "initial_state": [0.2, 0.0, 0.05, 0.0], "duration": 2.0},
        ],
    }
    config.update(overrides)
    return config
