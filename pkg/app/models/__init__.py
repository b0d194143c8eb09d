"""
Model registry.

Bundled systems are looked up by name so worker processes can rebuild a
model from (name, params) without pickling closures.
"""
from dataclasses import dataclass
from typing import Any, Callable, Dict, Mapping, Optional

import numpy as np

from app.errors import ConfigError
from app.models.base import ControlSystem, HybridModel, MechanicalModel
from app.models.biped3 import Biped3, Biped3Params, biped3
from app.models.cart_pendulum import (
    CartPendulum,
    CartPendulumParams,
    cart_force,
    cart_pendulum,
    cart_pendulum_prefeedback,
    pendulum_acceleration,
)
from app.models.normal_forms import actuated_acceleration, spong_prefeedback

InputMap = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class ModelBundle:
    """Everything the pipeline needs to know about one bundled model.

    ``to_physical(x, u_bar)`` turns a commanded x2 acceleration into the
    physical input; ``to_prefeedback(x, u)`` is its inverse. Both accept one
    state or a batch of rows.
    """

    name: str
    params: Any
    mechanics: MechanicalModel
    system: ControlSystem
    hybrid: Optional[HybridModel] = None
    prefeedback: Optional[ControlSystem] = None
    to_physical: Optional[InputMap] = None
    to_prefeedback: Optional[InputMap] = None

    @property
    def is_hybrid(self) -> bool:
        return self.hybrid is not None

    @property
    def period(self) -> float:
        return self.system.period


def _rowwise(fn: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> InputMap:
    def mapped(x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        if x.ndim == 1:
            return fn(x, u)
        return np.array([fn(xk, uk) for xk, uk in zip(x, u)])

    return mapped


def _build_cart_pendulum(params: CartPendulumParams) -> ModelBundle:
    def to_physical(x, ubar):
        return np.asarray(cart_force(params, x, np.asarray(ubar, dtype=float)[..., 0]))[..., None]

    def to_prefeedback(x, u):
        return np.asarray(pendulum_acceleration(params, x, np.asarray(u, dtype=float)[..., 0]))[..., None]

    return ModelBundle(
        name="cart_pendulum",
        params=params,
        mechanics=CartPendulum(params),
        system=cart_pendulum(params),
        prefeedback=cart_pendulum_prefeedback(params),
        to_physical=to_physical,
        to_prefeedback=to_prefeedback,
    )


def _build_biped3(params: Biped3Params) -> ModelBundle:
    hybrid = biped3(params)
    mech = Biped3(params)

    def to_physical(x, v):
        q, dq = mech.configuration(x)
        return spong_prefeedback(mech, q, dq, v)

    def to_prefeedback(x, u):
        q, dq = mech.configuration(x)
        return actuated_acceleration(mech, q, dq, u)

    return ModelBundle(
        name="biped3",
        params=params,
        mechanics=mech,
        system=hybrid.continuous,
        hybrid=hybrid,
        to_physical=_rowwise(to_physical),
        to_prefeedback=_rowwise(to_prefeedback),
    )


MODEL_REGISTRY: Dict[str, tuple] = {
    "cart_pendulum": (CartPendulumParams, _build_cart_pendulum),
    "biped3": (Biped3Params, _build_biped3),
}


def build_model(name: str, params: Optional[Mapping[str, Any]] = None) -> ModelBundle:
    """Build a registered model from its name and a parameter mapping.

    Raises:
        ConfigError: if the name is unknown or the parameters are invalid
    """
    if name not in MODEL_REGISTRY:
        raise ConfigError(f"unknown model {name!r}; registered: {sorted(MODEL_REGISTRY)}")
    params_cls, builder = MODEL_REGISTRY[name]
    if isinstance(params, params_cls):
        return builder(params)
    try:
        parsed = params_cls.model_validate(dict(params or {}))
    except ValueError as exc:
        raise ConfigError(f"invalid parameters for {name}: {exc}") from exc
    return builder(parsed)
