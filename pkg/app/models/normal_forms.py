"""
Normal-form pre-feedbacks for mechanical models.

Spong form: choose u so that the actuated accelerations equal a commanded v,
turning the x2 block into a double integrator. Conjugate-momentum form:
replace the unactuated velocities by sigma1 = D11 q1_dot + D12 q2_dot.
"""
from typing import Tuple

import numpy as np

from app.models.base import MechanicalModel, require_invertible


def _blocks(mech: MechanicalModel, D: np.ndarray):
    u_idx = list(mech.unactuated)
    a_idx = list(mech.actuated)
    return D[np.ix_(u_idx, u_idx)], D[np.ix_(u_idx, a_idx)], D[np.ix_(a_idx, u_idx)], D[np.ix_(a_idx, a_idx)]


def effective_input_matrix(mech: MechanicalModel, q: np.ndarray) -> np.ndarray:
    """Map from u to the actuated accelerations: rows ``actuated`` of D^{-1} B."""
    L = mech.cholesky(q)
    DinvB = np.linalg.solve(L.T, np.linalg.solve(L, mech.input_matrix(q)))
    return DinvB[list(mech.actuated), :]


def spong_prefeedback(mech: MechanicalModel, q, dq, v) -> np.ndarray:
    """Input that realizes q2_ddot = v exactly.

    Args:
        mech: mechanical model
        q: configuration
        dq: velocities
        v: commanded actuated accelerations

    Returns:
        physical input u

    Raises:
        SingularityError: if the effective input matrix is singular at q
        ModelDefinitionError: if D(q) is not positive definite
    """
    q = np.asarray(q, dtype=float)
    dq = np.asarray(dq, dtype=float)
    v = np.atleast_1d(np.asarray(v, dtype=float))
    mech.check_operating_range(q)
    L = mech.cholesky(q)
    DinvB = np.linalg.solve(L.T, np.linalg.solve(L, mech.input_matrix(q)))
    DinvOmega = np.linalg.solve(L.T, np.linalg.solve(L, mech.bias(q, dq)))
    a_idx = list(mech.actuated)
    M = DinvB[a_idx, :]
    require_invertible(M, "effective actuated input matrix", q)
    return np.linalg.solve(M, v + DinvOmega[a_idx])


def actuated_acceleration(mech: MechanicalModel, q, dq, u) -> np.ndarray:
    """q2_ddot produced by input u (inverse of spong_prefeedback)."""
    ddq = mech.forward_dynamics(np.asarray(q, float), np.asarray(dq, float), np.atleast_1d(u))
    return ddq[list(mech.actuated)]


def conjugate_momentum_coords(mech: MechanicalModel, q, dq) -> Tuple[np.ndarray, np.ndarray]:
    """(q1, sigma1) with sigma1 = D11 q1_dot + D12 q2_dot."""
    q = np.asarray(q, dtype=float)
    dq = np.asarray(dq, dtype=float)
    D11, D12, _, _ = _blocks(mech, mech.mass_matrix(q))
    require_invertible(D11, "D11", q)
    dq1 = dq[list(mech.unactuated)]
    dq2 = dq[list(mech.actuated)]
    return q[list(mech.unactuated)].copy(), D11 @ dq1 + D12 @ dq2


def velocities_from_momentum(mech: MechanicalModel, q, sigma1, dq2) -> np.ndarray:
    """Recover q1_dot from (q, sigma1, q2_dot)."""
    q = np.asarray(q, dtype=float)
    D11, D12, _, _ = _blocks(mech, mech.mass_matrix(q))
    require_invertible(D11, "D11", q)
    return np.linalg.solve(D11, np.atleast_1d(sigma1) - D12 @ np.atleast_1d(dq2))


def momentum_rate(mech: MechanicalModel, q, dq, u, step: float = 1e-6) -> np.ndarray:
    """kappa1 = d(sigma1)/dt = dL/dq1 + (B u)_1.

    dL/dq1 = 0.5 dq^T (dD/dq1) dq - dV/dq1, differentiated centrally.
    """
    q = np.asarray(q, dtype=float)
    dq = np.asarray(dq, dtype=float)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    kappa = np.empty(len(mech.unactuated))
    for k, j in enumerate(mech.unactuated):
        e = np.zeros_like(q)
        e[j] = step
        dD = (mech.mass_matrix(q + e) - mech.mass_matrix(q - e)) / (2.0 * step)
        dV = (mech.potential_energy(q + e) - mech.potential_energy(q - e)) / (2.0 * step)
        kappa[k] = 0.5 * dq @ dD @ dq - dV
    kappa += (mech.input_matrix(q) @ u)[list(mech.unactuated)]
    return kappa


