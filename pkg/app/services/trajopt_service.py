"""
Direct-collocation trajectory optimization.

Trapezoidal transcription of x_dot = f(t, x, u) over one or more mesh
segments. The decision vector holds all node states followed by all node
inputs, node-major:

    z = [x_0, x_1, ..., x_K, u_0, u_1, ..., u_K]

Hybrid models are transcribed as alternating phase-i / phase-ii segments of
length T_p / 2; a phase-i segment ends on the guard and the next segment
starts at the reset of its last node.
"""
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger

from app.errors import ContractViolationError, TranscriptionError
from app.metrics.prometheus import metrics_collector
from app.models.base import ControlSystem, HybridModel
from app.models.cart_pendulum import barrier_penalty, barrier_penalty_gradient
from app.services.nlp_solver import (
    STATUS_CONVERGED,
    STATUS_FEASIBLE,
    STATUS_INFEASIBLE,
    NLPProblem,
    SolverOptions,
    solve_nlp,
)
from app.services.simulation_service import Phase, Trajectory

NODE_TIME_TOL = 1e-9

Reference = Callable[[np.ndarray, Sequence[Optional[Phase]]], Tuple[np.ndarray, np.ndarray]]


class CostKind(str, Enum):
    REGULATION = "regulation"
    ORBIT_TRANSITION = "orbit-transition"
    GAIT_ENERGY = "gait-energy"
    GAIT_TRANSITION = "gait-transition"


TRACKING_KINDS = (CostKind.ORBIT_TRANSITION, CostKind.GAIT_TRANSITION)


@dataclass
class CostSpec:
    """Running cost |x - x_ref|_Q^2 + |u - u_ref|_R^2 + L(p, p_b).

    The reference is used by the tracking variants only; the barrier is
    applied to state entry ``barrier_index`` when the weight is positive.
    """

    kind: CostKind
    Q: np.ndarray
    R: np.ndarray
    barrier_weight: float = 0.0
    barrier_half_width: float = 2.0
    barrier_index: int = 0
    reference: Optional[Reference] = None

    def __post_init__(self):
        self.kind = CostKind(self.kind)
        self.Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        self.R = np.atleast_2d(np.asarray(self.R, dtype=float))
        for name, W in (("Q", self.Q), ("R", self.R)):
            if W.shape[0] != W.shape[1] or not np.allclose(W, W.T):
                raise ContractViolationError(f"{name} must be a symmetric square matrix")
            if np.min(np.linalg.eigvalsh(W)) < -1e-12:
                raise ContractViolationError(f"{name} must be positive semidefinite")
        if self.barrier_weight < 0:
            raise ContractViolationError("barrier weight must be >= 0")
        if self.kind in TRACKING_KINDS and self.reference is None:
            raise ContractViolationError(f"cost {self.kind.value} needs a reference trajectory")

    def stage(self, X, U, Xr=None, Ur=None):
        """Running cost and its gradients at a batch of nodes."""
        dX = X if Xr is None else X - Xr
        dU = U if Ur is None else U - Ur
        QdX = dX @ self.Q
        RdU = dU @ self.R
        ell = np.einsum("ki,ki->k", QdX, dX) + np.einsum("ki,ki->k", RdU, dU)
        ell_x = 2.0 * QdX
        ell_u = 2.0 * RdU
        if self.barrier_weight > 0:
            p = X[:, self.barrier_index]
            ell = ell + barrier_penalty(p, self.barrier_half_width, self.barrier_weight)
            ell_x[:, self.barrier_index] += barrier_penalty_gradient(p, self.barrier_half_width, self.barrier_weight)
        return ell, ell_x, ell_u


@dataclass
class NodeConstraint:
    """Constraint on the states at a few nodes: eq (= 0) or ineq (<= 0)."""

    name: str
    nodes: Tuple[int, ...]
    fn: Callable[..., np.ndarray]
    kind: str = "eq"


@dataclass
class PathConstraint:
    """Inequality fn(t, X, U) <= 0 evaluated row-wise at every node of the selected segments.

    ``window`` restricts it to nodes whose normalized time within their
    segment lies in [start, end].
    """

    name: str
    fn: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    segments: Optional[Tuple[int, ...]] = None
    window: Tuple[float, float] = (0.0, 1.0)


@dataclass
class ConstraintSpec:
    """Boundary, path and bound constraints of a collocation problem.

    ``initial_state`` entries that are NaN are left free. ``boundary_map`` is
    an insertion map gamma(x1) -> x2 imposed at ``boundary_time`` (default
    T_p); ``lyapunov`` = (P, c) imposes V(x(T_p)) <= c V(x(0)).
    """

    initial_state: Optional[np.ndarray] = None
    terminal_state: Optional[np.ndarray] = None
    boundary_map: Optional[Callable[[np.ndarray], np.ndarray]] = None
    boundary_time: Optional[float] = None
    lyapunov: Optional[Tuple[np.ndarray, float]] = None
    periodic: bool = False
    input_bounds: Optional[Tuple[Union[float, Sequence[float]], Union[float, Sequence[float]]]] = None
    state_bounds: Optional[Tuple[Sequence[float], Sequence[float]]] = None
    path: List[PathConstraint] = field(default_factory=list)
    extra: List[NodeConstraint] = field(default_factory=list)


@dataclass(frozen=True)
class Segment:
    start: float
    duration: float
    intervals: int
    phase: Optional[Phase] = None

    @property
    def step(self) -> float:
        return self.duration / self.intervals


def _fd_jacobian(fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    f0 = np.atleast_1d(fn(x))
    J = np.empty((f0.size, x.size))
    for j in range(x.size):
        h = step * (1.0 + abs(x[j]))
        e = np.zeros_like(x)
        e[j] = h
        J[:, j] = (np.atleast_1d(fn(x + e)) - np.atleast_1d(fn(x - e))) / (2.0 * h)
    return J


class CollocationProblem:
    """Trapezoidal transcription; see the module docstring for the layout."""

    def __init__(
        self,
        system: ControlSystem,
        segments: List[Segment],
        cost: CostSpec,
        constraints: ConstraintSpec,
        period: float,
        reset: Optional[Callable[[np.ndarray], np.ndarray]] = None,
        guard: Optional[Callable[[np.ndarray], float]] = None,
    ):
        self.system = system
        self.segments = segments
        self.cost = cost
        self.constraints = constraints
        self.period = period
        self.reset = reset
        self.guard = guard
        self.n = system.n
        self.m = system.m

        times, phases, ranges = [], [], []
        start = 0
        for seg in segments:
            local = seg.start + seg.step * np.arange(seg.intervals + 1)
            local[-1] = seg.start + seg.duration
            times.append(local)
            phases.extend([seg.phase] * local.size)
            ranges.append((start, start + seg.intervals))
            start += seg.intervals + 1
        self.times = np.concatenate(times)
        self.node_phases = phases
        self.node_ranges = ranges
        self.n_nodes = self.times.size
        self.nx = self.n_nodes * self.n
        self.nz = self.nx + self.n_nodes * self.m
        self.T_h = float(segments[-1].start + segments[-1].duration)

        self._check_dimensions()
        self.node_constraints = self._build_node_constraints()
        self.lower, self.upper = self._build_bounds()
        self._x_ref = self._u_ref = None
        if cost.kind in TRACKING_KINDS:
            self._x_ref, self._u_ref = self._reference()
        self._weights = self._quadrature_weights()
        origin = np.zeros(self.n)
        self._sizes = [np.atleast_1d(nc.fn(*([origin] * len(nc.nodes)))).size for nc in self.node_constraints]
        self.n_defects = sum(seg.intervals for seg in segments) * self.n
        self.n_eq = self.n_defects + sum(s for nc, s in zip(self.node_constraints, self._sizes) if nc.kind == "eq")

    # layout

    def x_cols(self, node: int) -> np.ndarray:
        return node * self.n + np.arange(self.n)

    def u_cols(self, node: int) -> np.ndarray:
        return self.nx + node * self.m + np.arange(self.m)

    def unpack(self, z: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        z = np.asarray(z, dtype=float)
        if z.shape != (self.nz,):
            raise ContractViolationError(f"decision vector has shape {z.shape}, expected ({self.nz},)")
        return z[:self.nx].reshape(self.n_nodes, self.n), z[self.nx:].reshape(self.n_nodes, self.m)

    def pack(self, X: np.ndarray, U: np.ndarray) -> np.ndarray:
        return np.concatenate([np.asarray(X, float).ravel(), np.asarray(U, float).ravel()])

    def node_at(self, t: float) -> int:
        """First node at time t."""
        hits = np.flatnonzero(np.abs(self.times - t) <= NODE_TIME_TOL)
        if hits.size == 0:
            raise TranscriptionError(f"t = {t} is not a mesh node; choose N so that it falls on the grid")
        return int(hits[0])

    # construction

    def _check_dimensions(self):
        n, m = self.n, self.m
        c = self.constraints
        if self.cost.Q.shape != (n, n) or self.cost.R.shape != (m, m):
            raise TranscriptionError(f"cost weights have shapes {self.cost.Q.shape}/{self.cost.R.shape}, expected ({n},{n})/({m},{m})")
        for name, vec in (("initial_state", c.initial_state), ("terminal_state", c.terminal_state)):
            if vec is not None and np.asarray(vec).shape != (n,):
                raise TranscriptionError(f"{name} has shape {np.asarray(vec).shape}, expected ({n},)")
        if c.boundary_map is not None and self.system.decomposition is None:
            raise TranscriptionError("boundary condition needs a state decomposition")
        if c.lyapunov is not None and np.asarray(c.lyapunov[0]).shape != (n, n):
            raise TranscriptionError("Lyapunov matrix has the wrong shape")

    def _build_node_constraints(self) -> List[NodeConstraint]:
        out: List[NodeConstraint] = []
        last = self.n_nodes - 1
        for s in range(len(self.segments) - 1):
            end = self.node_ranges[s][1]
            nxt = self.node_ranges[s + 1][0]
            if self.segments[s].phase == Phase.I and self.reset is not None:
                reset = self.reset
                guard = self.guard
                out.append(NodeConstraint(f"reset[{s}]", (end, nxt), lambda a, b, r=reset: b - r(a)))
                out.append(NodeConstraint(f"guard[{s}]", (end,), lambda a, g=guard: np.array([g(a)])))
            else:
                out.append(NodeConstraint(f"continuity[{s}]", (end, nxt), lambda a, b: b - a))

        c = self.constraints
        if c.terminal_state is not None:
            target = np.asarray(c.terminal_state, dtype=float)
            out.append(NodeConstraint("terminal", (last,), lambda x, tg=target: x - tg))
        if c.periodic:
            out.append(NodeConstraint("periodic", (0, last), lambda a, b: b - a))
        if c.boundary_map is not None or c.lyapunov is not None:
            kb = self.node_at(self.period if c.boundary_time is None else c.boundary_time)
            if c.boundary_map is not None:
                dec = self.system.decomposition
                gamma = c.boundary_map

                def boundary(x, dec=dec, gamma=gamma):
                    x1, x2 = dec.split(x)
                    return np.asarray(gamma(x1), dtype=float) - x2

                out.append(NodeConstraint("boundary", (kb,), boundary))
            if c.lyapunov is not None:
                P = np.asarray(c.lyapunov[0], dtype=float)
                ratio = float(c.lyapunov[1])
                out.append(NodeConstraint(
                    "lyapunov", (0, kb), lambda a, b: np.array([b @ P @ b - ratio * (a @ P @ a)]), kind="ineq"))
        out.extend(c.extra)
        for nc in out:
            if nc.kind not in ("eq", "ineq"):
                raise TranscriptionError(f"constraint {nc.name}: kind must be 'eq' or 'ineq'")
            for node in nc.nodes:
                if not -self.n_nodes <= node < self.n_nodes:
                    raise TranscriptionError(f"constraint {nc.name} refers to node {node} outside the mesh")
        return [replace(nc, nodes=tuple(k % self.n_nodes for k in nc.nodes)) for nc in out]

    def _build_bounds(self):
        lo = np.full(self.nz, -np.inf)
        hi = np.full(self.nz, np.inf)
        c = self.constraints
        if c.state_bounds is not None:
            slo = np.broadcast_to(np.asarray(c.state_bounds[0], float), (self.n,))
            shi = np.broadcast_to(np.asarray(c.state_bounds[1], float), (self.n,))
            lo[:self.nx] = np.tile(slo, self.n_nodes)
            hi[:self.nx] = np.tile(shi, self.n_nodes)
        if c.input_bounds is not None:
            ulo = np.broadcast_to(np.asarray(c.input_bounds[0], float), (self.m,))
            uhi = np.broadcast_to(np.asarray(c.input_bounds[1], float), (self.m,))
            lo[self.nx:] = np.tile(ulo, self.n_nodes)
            hi[self.nx:] = np.tile(uhi, self.n_nodes)
        if c.initial_state is not None:
            x0 = np.asarray(c.initial_state, dtype=float)
            fixed = ~np.isnan(x0)
            cols = self.x_cols(0)[fixed]
            lo[cols] = x0[fixed]
            hi[cols] = x0[fixed]
        if np.any(lo > hi):
            raise TranscriptionError("inconsistent bounds (initial state outside the state bounds?)")
        return lo, hi

    def _reference(self):
        X, U = self.cost.reference(self.times, self.node_phases)
        X = np.asarray(X, dtype=float).reshape(self.n_nodes, self.n)
        U = np.asarray(U, dtype=float).reshape(self.n_nodes, self.m)
        return X, U

    def _quadrature_weights(self) -> np.ndarray:
        w = np.zeros(self.n_nodes)
        for seg, (a, b) in zip(self.segments, self.node_ranges):
            h = np.diff(self.times[a:b + 1])
            w[a:b] += 0.5 * h
            w[a + 1:b + 1] += 0.5 * h
        return w

    # NLP callbacks

    def objective(self, z: np.ndarray) -> Tuple[float, np.ndarray]:
        X, U = self.unpack(z)
        ell, ell_x, ell_u = self.cost.stage(X, U, self._x_ref, self._u_ref)
        w = self._weights
        grad = self.pack(w[:, None] * ell_x, w[:, None] * ell_u)
        return float(w @ ell), grad

    def defects(self, z: np.ndarray) -> np.ndarray:
        X, U = self.unpack(z)
        out = []
        for seg, (a, b) in zip(self.segments, self.node_ranges):
            ts, Xs, Us = self.times[a:b + 1], X[a:b + 1], U[a:b + 1]
            F = self.system.vector_field(ts, Xs, Us)
            h = np.diff(ts)[:, None]
            out.append(Xs[1:] - Xs[:-1] - 0.5 * h * (F[1:] + F[:-1]))
        return np.vstack(out)

    def _node_values(self, nc: NodeConstraint, X: np.ndarray, with_jac: bool):
        stacked = np.concatenate([X[k] for k in nc.nodes])
        k = len(nc.nodes)

        def fn(v):
            return np.atleast_1d(np.asarray(nc.fn(*np.split(v, k)), dtype=float))

        vals = fn(stacked)
        return vals, (_fd_jacobian(fn, stacked) if with_jac else None)

    def equality(self, z: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        X, U = self.unpack(z)
        n = self.n
        c = np.empty(self.n_eq)
        J = np.zeros((self.n_eq, self.nz))
        I = np.eye(n)
        r = 0
        for seg, (a, b) in zip(self.segments, self.node_ranges):
            ts, Xs, Us = self.times[a:b + 1], X[a:b + 1], U[a:b + 1]
            F = self.system.vector_field(ts, Xs, Us)
            Fx, Fu = self.system.jacobians(ts, Xs, Us)
            h = np.diff(ts)
            D = Xs[1:] - Xs[:-1] - 0.5 * h[:, None] * (F[1:] + F[:-1])
            c[r:r + D.size] = D.ravel()
            for k in range(seg.intervals):
                rows = slice(r + k * n, r + (k + 1) * n)
                hk = 0.5 * h[k]
                J[rows, self.x_cols(a + k)] = -I - hk * Fx[k]
                J[rows, self.x_cols(a + k + 1)] = I - hk * Fx[k + 1]
                J[rows, self.u_cols(a + k)] = -hk * Fu[k]
                J[rows, self.u_cols(a + k + 1)] = -hk * Fu[k + 1]
            r += D.size
        for nc, size in zip(self.node_constraints, self._sizes):
            if nc.kind != "eq":
                continue
            vals, jac = self._node_values(nc, X, with_jac=True)
            c[r:r + size] = vals
            for i, node in enumerate(nc.nodes):
                J[r:r + size, self.x_cols(node)] += jac[:, i * n:(i + 1) * n]
            r += size
        return c, J

    def inequality(self, z: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        X, U = self.unpack(z)
        n, m = self.n, self.m
        vals: List[np.ndarray] = []
        jacs: List[np.ndarray] = []
        for nc, size in zip(self.node_constraints, self._sizes):
            if nc.kind != "ineq":
                continue
            v, jac = self._node_values(nc, X, with_jac=True)
            G = np.zeros((size, self.nz))
            for i, node in enumerate(nc.nodes):
                G[:, self.x_cols(node)] += jac[:, i * n:(i + 1) * n]
            vals.append(v)
            jacs.append(G)
        for pc in self.constraints.path:
            nodes = self.path_nodes(pc)
            ts, Xs, Us = self.times[nodes], X[nodes], U[nodes]
            V = np.atleast_2d(np.asarray(pc.fn(ts, Xs, Us), dtype=float).reshape(nodes.size, -1))
            q = V.shape[1]
            G = np.zeros((nodes.size * q, self.nz))
            for j in range(n):
                h = 1e-6 * (1.0 + np.abs(Xs[:, j]))
                Xp, Xm = Xs.copy(), Xs.copy()
                Xp[:, j] += h
                Xm[:, j] -= h
                dV = (np.asarray(pc.fn(ts, Xp, Us)).reshape(nodes.size, q)
                      - np.asarray(pc.fn(ts, Xm, Us)).reshape(nodes.size, q)) / (2.0 * h[:, None])
                for i, node in enumerate(nodes):
                    G[i * q:(i + 1) * q, node * n + j] = dV[i]
            for j in range(m):
                h = 1e-6 * (1.0 + np.abs(Us[:, j]))
                Up, Um = Us.copy(), Us.copy()
                Up[:, j] += h
                Um[:, j] -= h
                dV = (np.asarray(pc.fn(ts, Xs, Up)).reshape(nodes.size, q)
                      - np.asarray(pc.fn(ts, Xs, Um)).reshape(nodes.size, q)) / (2.0 * h[:, None])
                for i, node in enumerate(nodes):
                    G[i * q:(i + 1) * q, self.nx + node * m + j] = dV[i]
            vals.append(V.ravel())
            jacs.append(G)
        if not vals:
            return np.zeros(0), np.zeros((0, self.nz))
        return np.concatenate(vals), np.vstack(jacs)

    def path_nodes(self, pc: PathConstraint) -> np.ndarray:
        segs = range(len(self.segments)) if pc.segments is None else pc.segments
        out = []
        for s in segs:
            a, b = self.node_ranges[s]
            frac = np.linspace(0.0, 1.0, b - a + 1)
            keep = (frac >= pc.window[0] - 1e-12) & (frac <= pc.window[1] + 1e-12)
            out.append(np.arange(a, b + 1)[keep])
        return np.concatenate(out) if out else np.zeros(0, dtype=int)

    def has_inequalities(self) -> bool:
        return bool(self.constraints.path) or any(nc.kind == "ineq" for nc in self.node_constraints)

    def nlp(self) -> NLPProblem:
        return NLPProblem(
            n_vars=self.nz,
            objective=self.objective,
            equality=self.equality if self.n_eq else None,
            inequality=self.inequality if self.has_inequalities() else None,
            lower=self.lower,
            upper=self.upper,
        )

    def violations(self, z: np.ndarray) -> Tuple[float, float]:
        """(max |equality residual|, max inequality excess), recomputed from z alone."""
        X, _ = self.unpack(z)
        eq = [np.abs(self.defects(z)).ravel()]
        ineq = [np.zeros(1)]
        for nc in self.node_constraints:
            vals, _ = self._node_values(nc, X, with_jac=False)
            (eq if nc.kind == "eq" else ineq).append(np.abs(vals) if nc.kind == "eq" else np.maximum(vals, 0.0))
        if self.constraints.path:
            g, _ = self.inequality(z)
            ineq.append(np.maximum(g, 0.0))
        bound_excess = np.maximum(np.maximum(self.lower - z, z - self.upper), 0.0)
        ineq.append(bound_excess)
        return float(np.max(np.concatenate(eq))), float(np.max(np.concatenate(ineq)))

    def cost_value(self, z: np.ndarray) -> float:
        return self.objective(z)[0]

    # guesses

    def guess_from_trajectory(self, traj: Trajectory) -> np.ndarray:
        """Interpolate a trajectory onto the mesh (times mod the trajectory length if shorter)."""
        t = np.clip(self.times, traj.times[0], traj.times[-1])
        X = np.column_stack([np.interp(t, traj.times, col) for col in traj.states.T])
        U = np.column_stack([np.interp(t, traj.times, col) for col in traj.inputs.T])
        return self.pack(X, U)

    def default_guess(self) -> np.ndarray:
        c = self.constraints
        x0 = np.zeros(self.n) if c.initial_state is None else np.nan_to_num(np.asarray(c.initial_state, float))
        x1 = x0 if c.terminal_state is None else np.asarray(c.terminal_state, float)
        s = (self.times - self.times[0]) / max(self.T_h, 1e-12)
        X = x0[None, :] + s[:, None] * (x1 - x0)[None, :]
        return self.pack(X, np.zeros((self.n_nodes, self.m)))

    def trajectories(self, z: np.ndarray) -> List[Tuple[Optional[Phase], Trajectory]]:
        X, U = self.unpack(z)
        return [(seg.phase, Trajectory(self.times[a:b + 1], X[a:b + 1], U[a:b + 1]))
                for seg, (a, b) in zip(self.segments, self.node_ranges)]


def transcribe(
    model: Union[ControlSystem, HybridModel],
    cost: CostSpec,
    constraints: ConstraintSpec,
    N: int,
    T_h: float,
) -> CollocationProblem:
    """Build the trapezoidal collocation problem.

    Args:
        model: control system, or hybrid model (two phases of T_p/2 per period)
        cost: running cost
        constraints: boundary, path and bound constraints
        N: mesh intervals (whole horizon for a control system, per phase
            segment for a hybrid model)
        T_h: horizon (s)

    Raises:
        TranscriptionError: on inconsistent dimensions, N < 2 or T_h <= 0
    """
    if N < 2:
        raise TranscriptionError(f"need at least 2 mesh intervals, got {N}")
    if not T_h > 0:
        raise TranscriptionError(f"horizon must be positive, got {T_h}")
    if isinstance(model, HybridModel):
        half = 0.5 * model.period
        n_seg = int(round(T_h / half))
        if n_seg < 1 or abs(n_seg * half - T_h) > NODE_TIME_TOL:
            raise TranscriptionError(f"hybrid horizon {T_h} is not a multiple of T_p/2 = {half}")
        segments = [Segment(k * half, half, N, Phase.I if k % 2 == 0 else Phase.II) for k in range(n_seg)]
        return CollocationProblem(model.continuous, segments, cost, constraints, model.period,
                                  reset=model.reset, guard=model.guard)
    return CollocationProblem(model, [Segment(0.0, T_h, N)], cost, constraints, model.period)


@dataclass
class OptimizerResult:
    """Solution of one collocation problem.

    Violations are recomputed from the decision vector, not taken from the solver.
    """

    segments: List[Tuple[Optional[Phase], Trajectory]]
    cost: float
    status: str
    eq_violation: float
    ineq_violation: float
    iterations: int
    inner_iterations: int
    z: Optional[np.ndarray] = None
    full: Optional["OptimizerResult"] = None

    @property
    def feasible(self) -> bool:
        return self.status in (STATUS_CONVERGED, STATUS_FEASIBLE)

    @property
    def trajectory(self) -> Trajectory:
        """Single-phase solution; hybrid solutions expose ``segments`` instead."""
        if len(self.segments) != 1:
            raise ContractViolationError("multi-phase result has no single trajectory; use segments")
        return self.segments[0][1]

    def restricted(self, t_end: float) -> "OptimizerResult":
        """Copy holding only the part of the solution on [0, t_end]."""
        kept = []
        for phase, traj in self.segments:
            if traj.times[0] >= t_end - NODE_TIME_TOL:
                break
            kept.append((phase, traj.restrict(traj.times[0], t_end)))
        return replace(self, segments=kept, full=self.full or self)


def solve(
    problem: CollocationProblem,
    initial_guess: Union[None, np.ndarray, Trajectory] = None,
    options: Optional[SolverOptions] = None,
) -> OptimizerResult:
    """Solve a transcribed problem with the augmented-Lagrangian solver."""
    if initial_guess is None:
        z0 = problem.default_guess()
    elif isinstance(initial_guess, Trajectory):
        z0 = problem.guess_from_trajectory(initial_guess)
    else:
        z0 = np.asarray(initial_guess, dtype=float)
        if z0.shape != (problem.nz,):
            raise ContractViolationError(f"initial guess has shape {z0.shape}, expected ({problem.nz},)")
    res = solve_nlp(problem.nlp(), z0, options)
    eq_v, ineq_v = problem.violations(res.z)
    status = res.status
    tol = (options or SolverOptions()).constraint_tol
    if status in (STATUS_CONVERGED, STATUS_FEASIBLE) and max(eq_v, ineq_v) > 10.0 * tol:
        status = "failed"
    metrics_collector.record_solve(status)
    if status not in (STATUS_CONVERGED, STATUS_FEASIBLE):
        logger.warning(f"collocation solve {status}: violation {max(eq_v, ineq_v):.3e} after {res.outer_iterations} outer iterations")
    return OptimizerResult(
        segments=problem.trajectories(res.z),
        cost=problem.cost_value(res.z),
        status=status,
        eq_violation=eq_v,
        ineq_violation=ineq_v,
        iterations=res.outer_iterations,
        inner_iterations=res.inner_iterations,
        z=res.z,
    )


def infeasible_result(reason: str) -> OptimizerResult:
    logger.warning(f"skipping optimization: {reason}")
    metrics_collector.record_solve(STATUS_INFEASIBLE)
    return OptimizerResult(segments=[], cost=float("inf"), status=STATUS_INFEASIBLE,
                           eq_violation=float("inf"), ineq_violation=float("inf"), iterations=0, inner_iterations=0)


# problem builders


def optimize_regulation(
    system: ControlSystem,
    xi: Sequence[float],
    cost: CostSpec,
    N: int,
    T_h: float,
    boundary_map: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    lyapunov: Optional[Tuple[np.ndarray, float]] = None,
    input_bounds=None,
    state_bounds=None,
    options: Optional[SolverOptions] = None,
    initial_guess=None,
) -> OptimizerResult:
    """Drive xi to the origin at T_h, optionally imposing gamma(x1(T_p)) = x2(T_p)."""
    spec = ConstraintSpec(
        initial_state=np.asarray(xi, dtype=float),
        terminal_state=np.zeros(system.n),
        boundary_map=boundary_map,
        lyapunov=lyapunov,
        input_bounds=input_bounds,
        state_bounds=state_bounds,
    )
    problem = transcribe(system, cost, spec, N, T_h)
    return solve(problem, initial_guess, options)


class TargetOrbit:
    """Interface of a periodic target used by transition problems."""

    period: float

    @property
    def midpoint(self) -> np.ndarray:
        raise NotImplementedError

    def reference(self, times: np.ndarray, phases: Sequence[Optional[Phase]]) -> Tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError


def optimize_transition(
    model: Union[ControlSystem, HybridModel],
    xi1: Sequence[float],
    gamma: Callable[[np.ndarray], np.ndarray],
    target: TargetOrbit,
    Q: np.ndarray,
    R: np.ndarray,
    N: int,
    horizon_periods: int = 3,
    kind: CostKind = CostKind.ORBIT_TRANSITION,
    input_bounds=None,
    state_bounds=None,
    path: Optional[List[PathConstraint]] = None,
    impose_boundary: bool = True,
    options: Optional[SolverOptions] = None,
    initial_guess=None,
) -> OptimizerResult:
    """Transition from (xi1, gamma(xi1)) onto a target orbit over T_h = k T_p.

    Tracks the target orbit and its input, ends on the orbit midpoint at T_h,
    and imposes gamma(x1(T_p)) = x2(T_p). The returned result is restricted
    to [0, T_p]; the full-horizon solution is kept in ``full``.
    """
    system = model.continuous if isinstance(model, HybridModel) else model
    dec = system.decomposition
    if dec is None:
        raise TranscriptionError("transition problems need a state decomposition")
    xi1 = np.asarray(xi1, dtype=float)
    x0 = dec.merge(xi1, np.asarray(gamma(xi1), dtype=float))
    T_p = system.period
    spec = ConstraintSpec(
        initial_state=x0,
        terminal_state=target.midpoint,
        boundary_map=gamma if impose_boundary else None,
        input_bounds=input_bounds,
        state_bounds=state_bounds,
        path=list(path or []),
    )
    cost = CostSpec(kind=kind, Q=Q, R=R, reference=target.reference)
    problem = transcribe(model, cost, spec, N, horizon_periods * T_p)
    if initial_guess is None:
        X, U = target.reference(problem.times, problem.node_phases)
        initial_guess = problem.pack(X, U)
    result = solve(problem, initial_guess, options)
    return result.restricted(T_p)
