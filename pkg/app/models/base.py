"""
Core abstractions for controlled ODE and hybrid models.

State vectors are numpy arrays. Vector fields accept either a single state
(shape ``(n,)``) or a batch (shape ``(K, n)``); batch evaluation is what the
collocation transcription uses.
"""
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

from app.errors import ContractViolationError, ModelDefinitionError, SingularityError

VectorField = Callable[[float, np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class StateDecomposition:
    """Selector splitting a full state x into (x1, x2) and back.

    x1 is the weakly actuated block, x2 the strongly actuated block.
    """

    n1: int
    n2: int
    idx1: Tuple[int, ...]
    idx2: Tuple[int, ...]

    def __post_init__(self):
        if len(self.idx1) != self.n1 or len(self.idx2) != self.n2:
            raise ContractViolationError("index lists do not match n1/n2")
        if sorted(self.idx1 + self.idx2) != list(range(self.n1 + self.n2)):
            raise ContractViolationError("idx1 and idx2 must partition range(n)")

    @classmethod
    def leading(cls, n1: int, n2: int) -> "StateDecomposition":
        """x1 = first n1 entries, x2 = the rest."""
        return cls(n1, n2, tuple(range(n1)), tuple(range(n1, n1 + n2)))

    @property
    def n(self) -> int:
        return self.n1 + self.n2

    def split(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.n:
            raise ContractViolationError(f"state has {x.shape[-1]} entries, expected {self.n}")
        return x[..., list(self.idx1)], x[..., list(self.idx2)]

    def merge(self, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
        x1 = np.asarray(x1, dtype=float)
        x2 = np.asarray(x2, dtype=float)
        if x1.shape[-1] != self.n1 or x2.shape[-1] != self.n2:
            raise ContractViolationError("block sizes do not match the decomposition")
        batch = np.broadcast_shapes(x1.shape[:-1], x2.shape[:-1])
        x = np.empty(batch + (self.n,))
        x[..., list(self.idx1)] = x1
        x[..., list(self.idx2)] = x2
        return x


@dataclass(frozen=True)
class ControlSystem:
    """Controlled vector field x_dot = f(t, x, u) with period T_p."""

    name: str
    n: int
    m: int
    vector_field: VectorField
    period: float
    decomposition: Optional[StateDecomposition] = None
    time_varying: bool = False

    def __post_init__(self):
        if self.n <= 0 or self.m < 0:
            raise ContractViolationError("state dimension must be positive")
        if self.period <= 0:
            raise ContractViolationError("period must be positive")
        if self.decomposition is not None and self.decomposition.n != self.n:
            raise ContractViolationError("decomposition does not cover the state")

    def evaluate(self, t, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        """Batch-capable evaluation without shape checks beyond the last axis."""
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        if x.shape[-1] != self.n or u.shape[-1] != self.m:
            raise ContractViolationError(
                f"{self.name}: expected x[..., {self.n}] and u[..., {self.m}], "
                f"got {x.shape} and {u.shape}"
            )
        return self.vector_field(t, x, u)

    def jacobians(self, t, x: np.ndarray, u: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Central-difference Jacobians at a batch of points.

        Args:
            t: time (scalar or per-row array)
            x: states, shape (K, n)
            u: inputs, shape (K, m)

        Returns:
            (Fx, Fu) with shapes (K, n, n) and (K, n, m)
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        u = np.atleast_2d(np.asarray(u, dtype=float))
        K = x.shape[0]
        Fx = np.empty((K, self.n, self.n))
        Fu = np.empty((K, self.n, self.m))
        for j in range(self.n):
            h = 1e-6 * (1.0 + np.abs(x[:, j]))
            xp = x.copy()
            xm = x.copy()
            xp[:, j] += h
            xm[:, j] -= h
            Fx[:, :, j] = (self.vector_field(t, xp, u) - self.vector_field(t, xm, u)) / (2.0 * h[:, None])
        for j in range(self.m):
            h = 1e-6 * (1.0 + np.abs(u[:, j]))
            up = u.copy()
            um = u.copy()
            up[:, j] += h
            um[:, j] -= h
            Fu[:, :, j] = (self.vector_field(t, x, up) - self.vector_field(t, x, um)) / (2.0 * h[:, None])
        return Fx, Fu


def eval_field(sys: ControlSystem, t: float, x: Sequence[float], u: Sequence[float]) -> np.ndarray:
    """Evaluate f(t, x, u) for a single state/input pair.

    Raises:
        ContractViolationError: if x or u has the wrong dimension
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.shape != (sys.n,):
        raise ContractViolationError(f"{sys.name}: dim(x) = {x.shape}, expected ({sys.n},)")
    if u.shape != (sys.m,):
        raise ContractViolationError(f"{sys.name}: dim(u) = {u.shape}, expected ({sys.m},)")
    return np.asarray(sys.vector_field(float(t), x, u), dtype=float)


def _always_armed(x: np.ndarray) -> bool:
    return True


@dataclass(frozen=True)
class HybridModel:
    """Single-phase system with impulse effects.

    The guard p(x) is positive away from the switching surface; an impact
    happens when p crosses zero from above while ``armed(x)`` holds.
    """

    name: str
    continuous: ControlSystem
    guard: Callable[[np.ndarray], float]
    reset: Callable[[np.ndarray], np.ndarray]
    decomposition: StateDecomposition
    armed: Callable[[np.ndarray], bool] = field(default=_always_armed)

    @property
    def period(self) -> float:
        return self.continuous.period

    def guard_gradient(self, x: np.ndarray, step: float = 1e-7) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        grad = np.empty_like(x)
        for j in range(x.size):
            e = np.zeros_like(x)
            e[j] = step
            grad[j] = (self.guard(x + e) - self.guard(x - e)) / (2.0 * step)
        return grad

    def check_guard_gradient(self, samples: Sequence[np.ndarray], tol: float = 1e-8) -> None:
        """Raise ModelDefinitionError if dp/dx vanishes at any sampled guard point."""
        for x in samples:
            if np.linalg.norm(self.guard_gradient(x)) <= tol:
                raise ModelDefinitionError(f"{self.name}: guard gradient vanishes at {np.asarray(x)}")


class MechanicalModel(ABC):
    """Lagrangian model D(q) q_ddot + Omega(q, q_dot) = B(q) u.

    Configuration is partitioned into unactuated q1 (indices ``unactuated``)
    and actuated q2 (indices ``actuated``). The associated state layout is
    x = (q1, q1_dot, q2, q2_dot).
    """

    n_q: int
    n_u: int
    unactuated: Tuple[int, ...]
    actuated: Tuple[int, ...]

    @abstractmethod
    def mass_matrix(self, q: np.ndarray) -> np.ndarray:
        """D(q), shape (n_q, n_q)."""

    @abstractmethod
    def bias(self, q: np.ndarray, dq: np.ndarray) -> np.ndarray:
        """Omega(q, dq) = C(q, dq) dq + G(q)."""

    @abstractmethod
    def input_matrix(self, q: np.ndarray) -> np.ndarray:
        """B(q), shape (n_q, n_u)."""

    @abstractmethod
    def potential_energy(self, q: np.ndarray) -> float:
        """V(q)."""

    def kinetic_energy(self, q: np.ndarray, dq: np.ndarray) -> float:
        dq = np.asarray(dq, dtype=float)
        return 0.5 * float(dq @ self.mass_matrix(q) @ dq)

    def total_energy(self, q: np.ndarray, dq: np.ndarray) -> float:
        return self.kinetic_energy(q, dq) + self.potential_energy(q)

    def cholesky(self, q: np.ndarray) -> np.ndarray:
        """Lower Cholesky factor of D(q); raises ModelDefinitionError if D is not SPD."""
        D = self.mass_matrix(q)
        if not np.allclose(D, D.T, rtol=0.0, atol=1e-12 * max(1.0, np.abs(D).max())):
            raise ModelDefinitionError(f"mass matrix not symmetric at q={np.asarray(q)}")
        try:
            return np.linalg.cholesky(D)
        except np.linalg.LinAlgError as exc:
            raise ModelDefinitionError(f"mass matrix not positive definite at q={np.asarray(q)}") from exc

    def forward_dynamics(self, q: np.ndarray, dq: np.ndarray, u: np.ndarray) -> np.ndarray:
        """q_ddot = D^{-1} (B u - Omega)."""
        L = self.cholesky(q)
        rhs = self.input_matrix(q) @ np.asarray(u, dtype=float) - self.bias(q, dq)
        return np.linalg.solve(L.T, np.linalg.solve(L, rhs))

    @property
    def decomposition(self) -> StateDecomposition:
        n1 = 2 * len(self.unactuated)
        n2 = 2 * len(self.actuated)
        return StateDecomposition.leading(n1, n2)

    def state_from(self, q: np.ndarray, dq: np.ndarray) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        dq = np.asarray(dq, dtype=float)
        u_idx = list(self.unactuated)
        a_idx = list(self.actuated)
        return np.concatenate([q[..., u_idx], dq[..., u_idx], q[..., a_idx], dq[..., a_idx]], axis=-1)

    def configuration(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        x = np.asarray(x, dtype=float)
        k1 = len(self.unactuated)
        k2 = len(self.actuated)
        q = np.empty(x.shape[:-1] + (self.n_q,))
        dq = np.empty_like(q)
        q[..., list(self.unactuated)] = x[..., :k1]
        dq[..., list(self.unactuated)] = x[..., k1:2 * k1]
        q[..., list(self.actuated)] = x[..., 2 * k1:2 * k1 + k2]
        dq[..., list(self.actuated)] = x[..., 2 * k1 + k2:]
        return q, dq

    def state_derivative(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        q, dq = self.configuration(x)
        ddq = self.forward_dynamics(q, dq, u)
        return self.state_from(dq, ddq)

    def check_operating_range(self, q: np.ndarray) -> None:
        """Hook for models with a restricted operating range; default accepts everything."""
        return None


def require_invertible(matrix: np.ndarray, what: str, configuration, rcond: float = 1e-10) -> None:
    """Raise SingularityError if ``matrix`` is numerically singular."""
    s = np.linalg.svd(np.atleast_2d(matrix), compute_uv=False)
    if s.size == 0 or s[-1] <= rcond * max(1.0, s[0]):
        raise SingularityError(f"{what} is singular", configuration)
