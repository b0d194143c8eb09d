"""
Planar 3-link biped: torso plus two rigid legs with point feet.

Generalized coordinates q = (theta, phi_t, phi_s): absolute stance-leg angle
(unactuated) and torso / swing-leg angles relative to the stance leg (actuated
at the hip). Angles are measured from the upward vertical, positive towards +x.
State layout x = (theta, theta_dot, phi_t, phi_s, phi_t_dot, phi_s_dot).

The stance foot sits at the origin. Impacts are instantaneous and plastic; the
swing leg becomes the stance leg and the old stance leg lifts off.
"""
from typing import Dict, List, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from app.errors import ModelDefinitionError
from app.models.base import ControlSystem, HybridModel, MechanicalModel, StateDecomposition

# q -> absolute angles (stance leg, torso, swing leg)
ABSOLUTE = np.array([[1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [1.0, 0.0, 1.0]])

# leg relabeling applied after impact
RELABEL = np.array([[1.0, 0.0, 1.0], [0.0, 1.0, -1.0], [0.0, 0.0, -1.0]])

INPUT_MATRIX = np.array([[0.0, 0.0], [1.0, -1.0], [0.0, 1.0]])


class Biped3Params(BaseModel):
    """Physical parameters of the 3-link walker (SI units)."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    torso_mass: float = Field(default=10.0, gt=0)
    torso_length: float = Field(default=0.5, gt=0)
    torso_com: float = Field(default=0.25, gt=0, description="Hip to torso center of mass")
    torso_inertia: float = Field(default=10.0 * 0.5 ** 2 / 12.0, gt=0, description="About the torso COM")
    leg_mass: float = Field(default=5.0, gt=0)
    leg_length: float = Field(default=1.0, gt=0)
    leg_com: float = Field(default=0.5, gt=0, description="Hip to leg center of mass")
    leg_inertia: float = Field(default=5.0 * 1.0 ** 2 / 12.0, gt=0, description="About the leg COM")
    gravity: float = Field(default=9.81, gt=0)
    period: float = Field(default=0.7, gt=0, description="Step period T_p (s)")
    arming_distance: float = Field(default=0.05, ge=0, description="Swing foot lead before impacts count (m)")

    @property
    def total_mass(self) -> float:
        return self.torso_mass + 2.0 * self.leg_mass


class Biped3(MechanicalModel):
    """Lagrangian model of the walker in stance-foot coordinates."""

    n_q = 3
    n_u = 2
    unactuated = (0,)
    actuated = (1, 2)

    def __init__(self, params: Biped3Params):
        P = params
        if P.leg_com >= P.leg_length:
            raise ModelDefinitionError("leg center of mass must lie between hip and foot")
        self.params = P
        r, lc = P.leg_length, P.leg_com
        # points as sums of c * (sin a_k, cos a_k) over absolute angles a
        self._terms: Dict[str, List[Tuple[float, int]]] = {
            "stance_com": [(r - lc, 0)],
            "hip": [(r, 0)],
            "torso_com": [(r, 0), (P.torso_com, 1)],
            "swing_com": [(r, 0), (-lc, 2)],
            "swing_foot": [(r, 0), (-r, 2)],
        }
        # (mass, point, inertia, absolute angle index)
        self._bodies = [
            (P.leg_mass, "stance_com", P.leg_inertia, 0),
            (P.torso_mass, "torso_com", P.torso_inertia, 1),
            (P.leg_mass, "swing_com", P.leg_inertia, 2),
        ]
        self._rot = sum(I * np.outer(ABSOLUTE[k], ABSOLUTE[k]) for _, _, I, k in self._bodies)

    # kinematics (batched over leading axes)

    def point(self, name: str, q) -> np.ndarray:
        a = np.asarray(q, dtype=float) @ ABSOLUTE.T
        pos = np.zeros(a.shape[:-1] + (2,))
        for c, k in self._terms[name]:
            pos[..., 0] += c * np.sin(a[..., k])
            pos[..., 1] += c * np.cos(a[..., k])
        return pos

    def point_jacobian(self, name: str, q) -> np.ndarray:
        """d(point)/dq, shape (..., 2, 3)."""
        a = np.asarray(q, dtype=float) @ ABSOLUTE.T
        Ja = np.zeros(a.shape[:-1] + (2, 3))
        for c, k in self._terms[name]:
            Ja[..., 0, k] += c * np.cos(a[..., k])
            Ja[..., 1, k] -= c * np.sin(a[..., k])
        return Ja @ ABSOLUTE

    def _velocity_product(self, name: str, q, dq) -> np.ndarray:
        a = np.asarray(q, dtype=float) @ ABSOLUTE.T
        da = np.asarray(dq, dtype=float) @ ABSOLUTE.T
        acc = np.zeros(a.shape[:-1] + (2,))
        for c, k in self._terms[name]:
            acc[..., 0] -= c * np.sin(a[..., k]) * da[..., k] ** 2
            acc[..., 1] -= c * np.cos(a[..., k]) * da[..., k] ** 2
        return acc

    # dynamics

    def mass_matrix(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        D = np.broadcast_to(self._rot, q.shape[:-1] + (3, 3)).copy()
        for m, name, _, _ in self._bodies:
            J = self.point_jacobian(name, q)
            D += m * np.einsum("...ij,...ik->...jk", J, J)
        return D

    def bias(self, q, dq) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        g = self.params.gravity
        out = np.zeros(np.broadcast_shapes(q.shape, np.shape(dq)))
        for m, name, _, _ in self._bodies:
            J = self.point_jacobian(name, q)
            out += m * np.einsum("...ij,...i->...j", J, self._velocity_product(name, q, dq))
            out += m * g * J[..., 1, :]
        return out

    def input_matrix(self, q) -> np.ndarray:
        return INPUT_MATRIX

    def potential_energy(self, q) -> float:
        g = self.params.gravity
        return float(sum(m * g * self.point(name, q)[1] for m, name, _, _ in self._bodies))

    def accelerations(self, q, dq, u) -> np.ndarray:
        """Batched q_ddot = D^{-1} (B u - Omega)."""
        rhs = np.asarray(u, dtype=float) @ INPUT_MATRIX.T - self.bias(q, dq)
        return np.linalg.solve(self.mass_matrix(q), rhs[..., None])[..., 0]

    # hybrid structure

    def swing_foot_height(self, x) -> float:
        q, _ = self.configuration(x)
        return float(self.point("swing_foot", q)[1])

    def swing_foot_lead(self, x) -> float:
        """Horizontal position of the swing foot relative to the stance foot."""
        q, _ = self.configuration(x)
        return float(self.point("swing_foot", q)[0])

    def armed(self, x) -> bool:
        return self.swing_foot_lead(x) >= self.params.arming_distance

    def impact_velocities(self, q, dq) -> Tuple[np.ndarray, np.ndarray]:
        """Post-impact extended velocities and the contact impulse.

        Extended coordinates append the stance-foot position (x_f, y_f) to q.
        The swing foot is brought to rest by an impulse F; the old stance foot
        receives none.

        Returns:
            (dqe_plus, F) with shapes (5,) and (2,)

        Raises:
            ModelDefinitionError: if the impact equations are singular at q
        """
        q = np.asarray(q, dtype=float)
        De = self.extended_mass_matrix(q)
        E2 = np.hstack([self.point_jacobian("swing_foot", q), np.eye(2)])
        kkt = np.block([[De, -E2.T], [E2, np.zeros((2, 2))]])
        s = np.linalg.svd(kkt, compute_uv=False)
        if s[-1] <= 1e-10 * s[0]:
            raise ModelDefinitionError(f"impact map singular at q={q}")
        dqe_minus = np.concatenate([np.asarray(dq, dtype=float), np.zeros(2)])
        sol = np.linalg.solve(kkt, np.concatenate([De @ dqe_minus, np.zeros(2)]))
        return sol[:5], sol[5:]

    def extended_mass_matrix(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        De = np.zeros((5, 5))
        De[:3, :3] = self._rot
        for m, name, _, _ in self._bodies:
            Je = np.hstack([self.point_jacobian(name, q), np.eye(2)])
            De += m * Je.T @ Je
        return De

    def impact(self, x) -> np.ndarray:
        """Reset map: plastic impact followed by relabeling of the legs."""
        q, dq = self.configuration(np.asarray(x, dtype=float))
        dqe_plus, _ = self.impact_velocities(q, dq)
        return self.state_from(RELABEL @ q, RELABEL @ dqe_plus[:3])

    # reporting helpers

    def angular_momentum(self, q, dqe, about) -> float:
        """Angular momentum (counterclockwise positive) about a fixed point.

        ``dqe`` holds extended velocities (q_dot, stance foot velocity).
        """
        q = np.asarray(q, dtype=float)
        dqe = np.asarray(dqe, dtype=float)
        da = dqe[:3] @ ABSOLUTE.T
        H = 0.0
        for m, name, I, k in self._bodies:
            r = self.point(name, q) - np.asarray(about, dtype=float)
            v = self.point_jacobian(name, q) @ dqe[:3] + dqe[3:]
            H += m * (r[0] * v[1] - r[1] * v[0]) - I * da[k]
        return float(H)

    def center_of_mass(self, q) -> np.ndarray:
        P = self.params
        total = sum(m * self.point(name, q) for m, name, _, _ in self._bodies)
        return total / P.total_mass

    def step_length(self, x) -> float:
        """Swing-foot lead at the given (pre-impact) state."""
        return self.swing_foot_lead(x)

    def hip_velocity(self, x) -> float:
        q, dq = self.configuration(np.asarray(x, dtype=float))
        return float(self.point_jacobian("hip", q)[0] @ dq)


def _field(mech: Biped3):
    def f(t, x, u):
        q, dq = mech.configuration(x)
        ddq = mech.accelerations(q, dq, u)
        return mech.state_from(dq, ddq)

    return f


def biped3(params: Biped3Params = Biped3Params()) -> HybridModel:
    """Walker as a HybridModel: guard is the swing-foot height, armed once the foot leads."""
    mech = Biped3(params)
    continuous = ControlSystem(
        name="biped3",
        n=6,
        m=2,
        vector_field=_field(mech),
        period=params.period,
        decomposition=StateDecomposition.leading(2, 4),
    )
    return HybridModel(
        name="biped3",
        continuous=continuous,
        guard=mech.swing_foot_height,
        reset=mech.impact,
        decomposition=continuous.decomposition,
        armed=mech.armed,
    )
