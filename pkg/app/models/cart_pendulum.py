"""
Inverted pendulum on a cart.

Uniform rod of length l and mass m on a cart of mass M, force u on the cart.
State x = (p, p_dot, theta, theta_dot); x1 = (p, p_dot), x2 = (theta, theta_dot).
theta is measured from upright with the rod center at (p - l/2 sin(theta), l/2 cos(theta)),
which reproduces the textbook closed form

    p_ddot     = (2 sin(th) th_dot^2 - 3 g cos(th) sin(th) - 4 u) / (3 cos(th)^2 - 8)
    theta_ddot = (3 cos(th) sin(th) th_dot^2 - 12 g sin(th) - 6 cos(th) u) / (3 cos(th)^2 - 8)

for unit masses and length.
"""
import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from app.errors import SingularityError
from app.models.base import ControlSystem, MechanicalModel, StateDecomposition

# |theta| must stay below this for the pendulum pre-feedback to be invertible
OPERATING_LIMIT = np.pi / 2 - 1e-6


class CartPendulumParams(BaseModel):
    """Physical parameters of the cart-pendulum."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    length: float = Field(default=1.0, gt=0, description="Pendulum length (m)")
    pendulum_mass: float = Field(default=1.0, gt=0, description="Pendulum mass (kg)")
    cart_mass: float = Field(default=1.0, gt=0, description="Cart mass (kg)")
    gravity: float = Field(default=9.81, gt=0, description="Gravity (m/s^2)")
    barrier_half_width: float = Field(default=2.0, gt=0, description="Safe region half width p_b (m)")
    period: float = Field(default=2.0, gt=0, description="Common period T_p (s)")


class CartPendulum(MechanicalModel):
    """Lagrangian form of the cart-pendulum, q = (p, theta)."""

    n_q = 2
    n_u = 1
    unactuated = (0,)
    actuated = (1,)

    def __init__(self, params: CartPendulumParams):
        self.params = params

    def _coeffs(self):
        P = self.params
        half = 0.5 * P.pendulum_mass * P.length
        return P.cart_mass + P.pendulum_mass, half, P.pendulum_mass * P.length ** 2 / 3.0

    def mass_matrix(self, q):
        d11, half, d22 = self._coeffs()
        c = np.cos(q[1])
        return np.array([[d11, -half * c], [-half * c, d22]])

    def bias(self, q, dq):
        _, half, _ = self._coeffs()
        s = np.sin(q[1])
        return np.array([half * s * dq[1] ** 2, -half * self.params.gravity * s])

    def input_matrix(self, q):
        return np.array([[1.0], [0.0]])

    def potential_energy(self, q):
        _, half, _ = self._coeffs()
        return float(half * self.params.gravity * np.cos(q[1]))

    def check_operating_range(self, q):
        if abs(q[1]) >= OPERATING_LIMIT:
            raise SingularityError("pendulum pre-feedback outside |theta| < pi/2", q)


def _field(params: CartPendulumParams):
    M, m, l, g = params.cart_mass, params.pendulum_mass, params.length, params.gravity
    d11 = M + m
    half = 0.5 * m * l
    d22 = m * l ** 2 / 3.0

    def f(t, x, u):
        th = x[..., 2]
        dth = x[..., 3]
        s = np.sin(th)
        c = np.cos(th)
        d12 = -half * c
        det = d11 * d22 - d12 ** 2
        r1 = u[..., 0] - half * s * dth ** 2
        r2 = half * g * s
        out = np.empty(np.broadcast_shapes(x.shape, u.shape[:-1] + (4,)))
        out[..., 0] = x[..., 1]
        out[..., 1] = (d22 * r1 - d12 * r2) / det
        out[..., 2] = dth
        out[..., 3] = (d11 * r2 - d12 * r1) / det
        return out

    return f


def cart_pendulum(params: CartPendulumParams = CartPendulumParams()) -> ControlSystem:
    """Cart-pendulum as a ControlSystem with x1 = (p, p_dot), x2 = (theta, theta_dot)."""
    return ControlSystem(
        name="cart_pendulum",
        n=4,
        m=1,
        vector_field=_field(params),
        period=params.period,
        decomposition=StateDecomposition.leading(2, 2),
    )


def _prefeedback_field(params: CartPendulumParams):
    l, g = params.length, params.gravity

    def f(t, x, ubar):
        th = x[..., 2]
        out = np.empty(np.broadcast_shapes(x.shape, ubar.shape[:-1] + (4,)))
        out[..., 0] = x[..., 1]
        out[..., 1] = ((2.0 * l / 3.0) * ubar[..., 0] - g * np.sin(th)) / np.cos(th)
        out[..., 2] = x[..., 3]
        out[..., 3] = ubar[..., 0]
        return out

    return f


def cart_pendulum_prefeedback(params: CartPendulumParams = CartPendulumParams()) -> ControlSystem:
    """Cart-pendulum after the pendulum pre-feedback: input is theta_ddot."""
    return ControlSystem(
        name="cart_pendulum_prefeedback",
        n=4,
        m=1,
        vector_field=_prefeedback_field(params),
        period=params.period,
        decomposition=StateDecomposition.leading(2, 2),
    )


def pendulum_acceleration(params: CartPendulumParams, x, u):
    """u_bar = theta_ddot produced by the cart force u (one scalar force per state row)."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)[..., None]
    return _field(params)(0.0, x, u)[..., 3]


def cart_force(params: CartPendulumParams, x, ubar):
    """Invert the pendulum pre-feedback: the cart force realizing theta_ddot = ubar.

    Raises:
        SingularityError: if |theta| >= pi/2 - 1e-6 for any row
    """
    x = np.asarray(x, dtype=float)
    ubar = np.asarray(ubar, dtype=float)
    th = x[..., 2]
    if np.any(np.abs(th) >= OPERATING_LIMIT):
        raise SingularityError("pendulum pre-feedback outside |theta| < pi/2", x)
    M, m, l, g = params.cart_mass, params.pendulum_mass, params.length, params.gravity
    d11 = M + m
    half = 0.5 * m * l
    d22 = m * l ** 2 / 3.0
    s = np.sin(th)
    c = np.cos(th)
    d12 = -half * c
    det = d11 * d22 - d12 ** 2
    r2 = half * g * s
    # ubar * det = d11 r2 - d12 (u - half s th_dot^2)
    return (d11 * r2 + d12 * half * s * x[..., 3] ** 2 - ubar * det) / d12


def total_energy(params: CartPendulumParams, x) -> np.ndarray:
    """E = T + V from the Lagrangian (vectorized over rows)."""
    x = np.asarray(x, dtype=float)
    M, m, l, g = params.cart_mass, params.pendulum_mass, params.length, params.gravity
    dp, th, dth = x[..., 1], x[..., 2], x[..., 3]
    T = 0.5 * (M + m) * dp ** 2 - 0.5 * m * l * np.cos(th) * dp * dth + m * l ** 2 * dth ** 2 / 6.0
    V = 0.5 * m * g * l * np.cos(th)
    return T + V


def barrier_penalty(p, p_b: float, weight: float):
    """L(p, p_b) = w p^2 (exp(p - p_b) + exp(-p - p_b))."""
    p = np.asarray(p, dtype=float)
    return weight * p ** 2 * (np.exp(p - p_b) + np.exp(-p - p_b))


def barrier_penalty_gradient(p, p_b: float, weight: float):
    p = np.asarray(p, dtype=float)
    ep = np.exp(p - p_b)
    em = np.exp(-p - p_b)
    return weight * (2.0 * p * (ep + em) + p ** 2 * (ep - em))
