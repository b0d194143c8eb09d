"""
Periodic orbits of the cart-pendulum.

The cart follows p(t) = p0 + (p0_dot / w) sin(w t), w = 2 pi / T_p. The
pendulum angle is the periodic solution that is odd about t = 0 and about
t = T_p / 2; it is found by shooting theta_dot(0) with theta(0) = 0 until
theta(T_p / 2) = 0, and the second half period is obtained by reflection.
"""
from dataclasses import dataclass
from typing import Iterable, List, Tuple

import numpy as np
from loguru import logger
from scipy.interpolate import CubicHermiteSpline
from scipy.optimize import brentq

from app.errors import DesignError
from app.models.cart_pendulum import OPERATING_LIMIT, CartPendulumParams, cart_force
from app.services.simulation_service import Trajectory

# RK4 substeps per half period when shooting
HALF_PERIOD_STEPS = 1000


@dataclass(frozen=True)
class PendulumOrbit:
    """One member of the orbit family, indexed by (p0, p0_dot)."""

    params: CartPendulumParams
    p0: float
    dp0: float
    dtheta0: float
    _theta: CubicHermiteSpline
    _dtheta: CubicHermiteSpline

    @property
    def period(self) -> float:
        return self.params.period

    @property
    def omega(self) -> float:
        return 2.0 * np.pi / self.params.period

    @property
    def midpoint(self) -> np.ndarray:
        """State at t = 0 (and every multiple of T_p)."""
        return np.array([self.p0, self.dp0, 0.0, self.dtheta0])

    @property
    def x1(self) -> np.ndarray:
        return np.array([self.p0, self.dp0])

    def states(self, times) -> np.ndarray:
        """Orbit states at arbitrary times (periodic extension)."""
        t = np.asarray(times, dtype=float)
        tau = np.mod(t, self.period)
        w = self.omega
        out = np.empty(t.shape + (4,))
        out[..., 0] = self.p0 + (self.dp0 / w) * np.sin(w * t)
        out[..., 1] = self.dp0 * np.cos(w * t)
        out[..., 2] = self._theta(tau)
        out[..., 3] = self._dtheta(tau)
        return out

    def pendulum_inputs(self, times) -> np.ndarray:
        """u_bar = theta_ddot along the orbit."""
        t = np.asarray(times, dtype=float)
        x = self.states(t)
        return _theta_ddot(self.params, x[..., 2], -self.dp0 * self.omega * np.sin(self.omega * t))

    @property
    def parameters(self) -> np.ndarray:
        return np.array([self.p0, self.dp0])

    def reference(self, times, phases=None) -> Tuple[np.ndarray, np.ndarray]:
        """Tracking reference (states, u_bar) for transition problems."""
        t = np.asarray(times, dtype=float)
        return self.states(t), self.pendulum_inputs(t)[..., None]

    def trajectory(self, times, physical: bool = False) -> Trajectory:
        """Orbit sampled on a grid; inputs are u_bar, or the cart force when ``physical``."""
        t = np.asarray(times, dtype=float)
        x = self.states(t)
        ubar = self.pendulum_inputs(t)
        u = cart_force(self.params, x, ubar) if physical else ubar
        return Trajectory(t, x, u[:, None])


def _theta_ddot(params: CartPendulumParams, theta, p_ddot):
    k = 3.0 / (2.0 * params.length)
    return k * (params.gravity * np.sin(theta) + np.cos(theta) * p_ddot)


def _shoot(params: CartPendulumParams, dp0: float, dtheta0: float, n_steps: int) -> np.ndarray:
    """RK4 over [0, T_p/2] for (theta, theta_dot); returns all nodes, shape (n_steps+1, 2)."""
    w = 2.0 * np.pi / params.period
    h = 0.5 * params.period / n_steps

    def rhs(t, y):
        return np.array([y[1], _theta_ddot(params, y[0], -dp0 * w * np.sin(w * t))])

    y = np.array([0.0, dtheta0])
    out = np.empty((n_steps + 1, 2))
    out[0] = y
    for k in range(n_steps):
        t = k * h
        k1 = rhs(t, y)
        k2 = rhs(t + 0.5 * h, y + 0.5 * h * k1)
        k3 = rhs(t + 0.5 * h, y + 0.5 * h * k2)
        k4 = rhs(t + h, y + h * k3)
        y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(y)) or abs(y[0]) > 10.0:
            out[k + 1:] = np.sign(y[0]) * 10.0 if np.isfinite(y[0]) else 10.0
            break
        out[k + 1] = y
    return out


def cart_pendulum_orbit(
    params: CartPendulumParams,
    p0: float,
    dp0: float,
    n_steps: int = HALF_PERIOD_STEPS,
) -> PendulumOrbit:
    """Periodic orbit with cart motion p0 + (dp0/w) sin(w t).

    Raises:
        DesignError: if no odd periodic solution exists inside |theta| < pi/2
    """
    T_p = params.period
    w = 2.0 * np.pi / T_p
    k = 3.0 / (2.0 * params.length)

    def residual(dtheta0: float) -> float:
        return float(_shoot(params, dp0, dtheta0, n_steps)[-1, 0])

    if dp0 == 0.0:
        dtheta0 = 0.0
    else:
        # linearized amplitude as the bracket center
        guess = w * k * dp0 * w / (w ** 2 + k * params.gravity)
        delta = 0.05 * abs(guess) + 1e-3
        lo, hi = guess - delta, guess + delta
        for _ in range(30):
            if residual(lo) * residual(hi) < 0.0:
                break
            delta *= 2.0
            lo, hi = guess - delta, guess + delta
        else:
            raise DesignError(f"no periodic pendulum orbit bracketed for dp0 = {dp0}")
        dtheta0 = brentq(residual, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=200)

    half = _shoot(params, dp0, dtheta0, n_steps)
    if np.any(np.abs(half[:, 0]) >= OPERATING_LIMIT):
        raise DesignError(f"orbit for (p0, dp0) = ({p0}, {dp0}) leaves |theta| < pi/2")

    h = 0.5 * T_p / n_steps
    t_half = h * np.arange(n_steps + 1)
    # odd about T_p / 2: theta(T_p - s) = -theta(s), theta_dot(T_p - s) = theta_dot(s)
    t_full = np.concatenate([t_half, T_p - t_half[-2::-1]])
    theta = np.concatenate([half[:, 0], -half[-2::-1, 0]])
    dtheta = np.concatenate([half[:, 1], half[-2::-1, 1]])
    ddtheta = _theta_ddot(params, theta, -dp0 * w * np.sin(w * t_full))
    orbit = PendulumOrbit(
        params=params,
        p0=float(p0),
        dp0=float(dp0),
        dtheta0=float(dtheta0),
        _theta=CubicHermiteSpline(t_full, theta, dtheta),
        _dtheta=CubicHermiteSpline(t_full, dtheta, ddtheta),
    )
    logger.debug(f"pendulum orbit (p0={p0:.3f}, dp0={dp0:.3f}): theta_dot(0) = {dtheta0:.6f}")
    return orbit


def orbit_library(params: CartPendulumParams, points: Iterable[Tuple[float, float]]) -> List[PendulumOrbit]:
    """Orbits for a list of (p0, dp0) pairs, in the given order."""
    return [cart_pendulum_orbit(params, p0, dp0) for p0, dp0 in points]
