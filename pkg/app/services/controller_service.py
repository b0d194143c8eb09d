"""
Feedback controllers built from libraries and regressors.

All controllers follow the simulator's Controller protocol: their mutable
parts (hold period, active phase, target orbit) live in the explicit state
the simulator threads through ``update``/``on_phase``; ``command`` is pure.
"""
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from app.errors import ClockError, ContractViolationError, ControllerFault, SingularityError, TrajectoryLookupError
from app.models.base import HybridModel, StateDecomposition
from app.models.biped3 import Biped3
from app.services.learning_service import Regressor, SplitPhaseRegressor
from app.services.library_service import FeatureMap, LibraryEntry, TrajectoryLibrary
from app.services.simulation_service import (
    Controller,
    DisturbanceSignal,
    HybridExecution,
    Phase,
    Trajectory,
    integrate,
    simulate_hybrid,
)
from app.services.trajopt_service import OptimizerResult

HOLD_TOL = 1e-9


def _period_index(t: float, period: float) -> int:
    return int(np.floor((t + HOLD_TOL) / period))


def _check_gains(Kp, Kd, n: int) -> Tuple[np.ndarray, np.ndarray]:
    Kp = np.atleast_2d(np.asarray(Kp, dtype=float))
    Kd = np.atleast_2d(np.asarray(Kd, dtype=float))
    for name, K in (("Kp", Kp), ("Kd", Kd)):
        if K.shape != (n, n):
            raise ContractViolationError(f"{name} has shape {K.shape}, expected ({n}, {n})")
        if not np.allclose(K, K.T) or np.min(np.linalg.eigvalsh(K)) <= 0:
            raise ContractViolationError(f"{name} must be symmetric positive definite")
    return Kp, Kd


@dataclass(frozen=True)
class HoldState:
    period_index: int
    entry: Optional[int] = None
    u: Optional[np.ndarray] = None


class ContinuousHoldController(Controller):
    """Replays the stored input of the library trajectory nearest to the
    state sampled at the last multiple of T_p.

    Distances are Euclidean in coordinates standardized by the spread of the
    library's initial states; states outside the grid box widened by one
    grid spacing have no trajectory.
    """

    def __init__(self, library: TrajectoryLibrary, m: int):
        self.library = library
        self.period = library.period
        self.m = m
        self.entries: List[LibraryEntry] = library.feasible_entries()
        if not self.entries:
            raise TrajectoryLookupError("library has no feasible trajectory to replay")
        X0 = np.array([e.initial_state for e in self.entries])
        self._X0 = X0
        spread = X0.std(axis=0)
        self._scale = np.where(spread > 1e-12, spread, 1.0)
        lo, hi = X0.min(axis=0), X0.max(axis=0)
        spacing = np.array([np.min(np.diff(np.unique(c))) if np.unique(c).size > 1 else 0.0 for c in X0.T])
        self._lo, self._hi = lo - spacing - 1e-9, hi + spacing + 1e-9

    def lookup(self, xi: np.ndarray) -> int:
        xi = np.asarray(xi, dtype=float)
        if np.any(xi < self._lo) or np.any(xi > self._hi):
            raise TrajectoryLookupError(f"no stored trajectory near {np.round(xi, 4).tolist()}")
        d = np.linalg.norm((self._X0 - xi) / self._scale, axis=1)
        return int(np.argmin(d))

    def initial_state(self, t, x):
        return HoldState(_period_index(t, self.period), self.lookup(x))

    def update(self, state: HoldState, t, x):
        k = _period_index(t, self.period)
        if k != state.period_index:
            return HoldState(k, self.lookup(x))
        return state

    def command(self, state: HoldState, t, x):
        local = min(max(t - state.period_index * self.period, 0.0), self.period)
        return self.entries[state.entry].input_at(local, self.period)


class ZohMpcController(Controller):
    """Re-optimizes from the measured state every T_p and holds u_x(0).

    ``solve(x)`` returns the optimizer result for a problem started at x.
    """

    def __init__(self, solve: Callable[[np.ndarray], OptimizerResult], period: float, m: int,
                 equilibrium_tol: float = 1e-9):
        self.solve = solve
        self.period = period
        self.m = m
        self.equilibrium_tol = equilibrium_tol

    def _hold(self, k: int, t: float, x: np.ndarray) -> HoldState:
        if np.linalg.norm(x) <= self.equilibrium_tol:
            return HoldState(k, u=np.zeros(self.m))
        result = self.solve(np.asarray(x, dtype=float))
        if not result.feasible:
            raise ControllerFault(f"re-optimization {result.status} at t = {t:.3f}", state=np.asarray(x), time=t)
        u = result.segments[0][1].inputs[0].copy()
        logger.debug(f"zoh hold {k}: u = {np.round(u, 4).tolist()}")
        return HoldState(k, u=u)

    def initial_state(self, t, x):
        return self._hold(_period_index(t, self.period), t, x)

    def update(self, state: HoldState, t, x):
        k = _period_index(t, self.period)
        return self._hold(k, t, x) if k != state.period_index else state

    def command(self, state: HoldState, t, x):
        return state.u


class LearnedFullStateController(Controller):
    """u = mu(t mod T_p, x)."""

    def __init__(self, mu: Regressor, feature_map: FeatureMap, period: float, m: int):
        self.mu = mu
        self.feature_map = feature_map
        self.period = period
        self.m = m

    def command(self, state, t, x):
        tau = float(np.mod(t, self.period))
        return self.mu.evaluate(self.feature_map(tau, x)[0])


@dataclass(frozen=True)
class TargetState:
    """Active target orbit parameters (None without targets), hybrid phase and cycle."""

    targets: Optional[Tuple[float, ...]] = None
    phase: Phase = Phase.I
    cycle: int = -1


class _ScheduleMixin:
    """Piecewise-constant target parameters switched at scheduled times."""

    schedule: List[Tuple[float, Tuple[float, ...]]]

    def _targets_at(self, t: float) -> Optional[Tuple[float, ...]]:
        active = None
        for time, params in self.schedule:
            if t + HOLD_TOL >= time:
                active = params
        return active


class EmbeddingController(_ScheduleMixin, Controller):
    """u_bar = mu(t, x1) - [Kp Kd](x2 - nu(t, x1)), mapped to the physical input.

    With a schedule the target orbit parameters are appended to the
    regression features and switch at the scheduled times.
    """

    def __init__(
        self,
        nu: Regressor,
        mu: Regressor,
        Kp,
        Kd,
        feature_map: FeatureMap,
        decomposition: StateDecomposition,
        period: float,
        m: int,
        to_physical: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None,
        schedule: Sequence[Tuple[float, Sequence[float]]] = (),
    ):
        self.nu = nu
        self.mu = mu
        self.dec = decomposition
        self.n_pos = decomposition.n2 // 2
        self.Kp, self.Kd = _check_gains(Kp, Kd, self.n_pos)
        self.feature_map = feature_map
        self.period = period
        self.m = m
        self.to_physical = to_physical
        self.schedule = sorted((float(t), tuple(float(v) for v in p)) for t, p in schedule)

    def initial_state(self, t, x):
        return TargetState(self._targets_at(t))

    def update(self, state: TargetState, t, x):
        targets = self._targets_at(t)
        return state if targets == state.targets else replace(state, targets=targets)

    def _features(self, tau: float, x, state: TargetState) -> np.ndarray:
        return self.feature_map(tau, x, None if state.targets is None else np.array(state.targets))[0]

    def output(self, state: TargetState, t: float, x) -> np.ndarray:
        """y = x2 - nu(t, x1)."""
        tau = float(np.mod(t, self.period))
        _, x2 = self.dec.split(x)
        return x2 - self.nu.evaluate(self._features(tau, x, state))

    def commanded_acceleration(self, state: TargetState, t: float, x) -> np.ndarray:
        tau = float(np.mod(t, self.period))
        f = self._features(tau, x, state)
        _, x2 = self.dec.split(x)
        y = x2 - self.nu.evaluate(f)
        return self.mu.evaluate(f) - self.Kp @ y[: self.n_pos] - self.Kd @ y[self.n_pos:]

    def command(self, state, t, x):
        ubar = self.commanded_acceleration(state, t, x)
        if self.to_physical is None:
            return ubar
        try:
            return np.atleast_1d(self.to_physical(np.asarray(x, dtype=float), ubar))
        except SingularityError as exc:
            raise ControllerFault(f"pre-feedback singular: {exc}", state=np.asarray(x), time=t) from exc


class HybridEmbeddingController(_ScheduleMixin, Controller):
    """Phase-selected embedding law with high-gain scaling Kp / eps^2, Kd / eps.

    Evaluated with the simulator's clock tau in [0, T_p]. Schedule times
    count completed steps.
    """

    def __init__(
        self,
        nu: SplitPhaseRegressor,
        mu: SplitPhaseRegressor,
        Kp,
        Kd,
        epsilon: float,
        feature_map: FeatureMap,
        decomposition: StateDecomposition,
        period: float,
        m: int,
        to_physical: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None,
        schedule: Sequence[Tuple[float, Sequence[float]]] = (),
    ):
        if not 0.0 < epsilon <= 1.0:
            raise ContractViolationError(f"epsilon must lie in (0, 1], got {epsilon}")
        self.nu = nu
        self.mu = mu
        self.dec = decomposition
        self.n_pos = decomposition.n2 // 2
        self.Kp, self.Kd = _check_gains(Kp, Kd, self.n_pos)
        self.epsilon = epsilon
        self.feature_map = feature_map
        self.period = period
        self.m = m
        self.to_physical = to_physical
        self.schedule = sorted((float(t), tuple(float(v) for v in p)) for t, p in schedule)

    def initial_state(self, t, x):
        return TargetState(self._targets_at(0.0), Phase.I, cycle=-1)

    def on_phase(self, state: TargetState, phase: Phase, t, x):
        cycle = state.cycle + 1 if phase == Phase.I else state.cycle
        return TargetState(self._targets_at(float(cycle)), phase, cycle)

    def _check_clock(self, tau: float):
        if not -HOLD_TOL <= tau <= self.period + HOLD_TOL:
            raise ClockError(f"clock tau = {tau:.6f} outside [0, {self.period}]")

    def output(self, state: TargetState, tau: float, x) -> np.ndarray:
        self._check_clock(tau)
        f = self.feature_map(tau, x, None if state.targets is None else np.array(state.targets))[0]
        _, x2 = self.dec.split(x)
        return x2 - self.nu.for_phase(state.phase).evaluate(f)

    def commanded_acceleration(self, state: TargetState, tau: float, x) -> np.ndarray:
        self._check_clock(tau)
        f = self.feature_map(tau, x, None if state.targets is None else np.array(state.targets))[0]
        _, x2 = self.dec.split(x)
        y = x2 - self.nu.for_phase(state.phase).evaluate(f)
        eps = self.epsilon
        return (self.mu.for_phase(state.phase).evaluate(f)
                - (self.Kp / eps ** 2) @ y[: self.n_pos] - (self.Kd / eps) @ y[self.n_pos:])

    def command(self, state, t, x):
        ubar = self.commanded_acceleration(state, t, x)
        if self.to_physical is None:
            return ubar
        try:
            return np.atleast_1d(self.to_physical(np.asarray(x, dtype=float), ubar))
        except SingularityError as exc:
            raise ControllerFault(f"pre-feedback singular: {exc}", state=np.asarray(x), time=t) from exc


# scenarios


@dataclass
class ScheduleRun:
    """Closed-loop trajectory with the active target parameters per sample."""

    trajectory: Trajectory
    targets: np.ndarray
    switch_times: List[float] = field(default_factory=list)


def run_schedule(
    system,
    controller: EmbeddingController,
    xi: Sequence[float],
    duration: float,
    disturbance: Optional[DisturbanceSignal] = None,
    dt: float = 1e-3,
) -> ScheduleRun:
    """Simulate an orbit-transition schedule.

    Raises:
        ContractViolationError: if a switch time is not a multiple of T_p
    """
    T_p = controller.period
    for t, _ in controller.schedule:
        if abs(t / T_p - round(t / T_p)) > 1e-9:
            raise ContractViolationError(f"schedule switch at t = {t} is not a multiple of T_p = {T_p}")
    traj = integrate(system, controller, xi, 0.0, duration, disturbance=disturbance, dt=dt)
    targets = np.array([controller._targets_at(t) for t in traj.times], dtype=float)
    switches = [t for t, _ in controller.schedule if 0.0 < t < duration]
    logger.info(f"schedule run: {len(switches)} switches over {duration} s")
    return ScheduleRun(traj, targets, switches)


def step_speeds(mech: Biped3, execution: HybridExecution, period: float) -> np.ndarray:
    """Average forward speed of each completed cycle (hip displacement / T_p)."""

    def hip_x(x):
        q, _ = mech.configuration(np.asarray(x, dtype=float))
        return float(mech.point("hip", q)[0])

    speeds = []
    segs = execution.segments
    for k in range(0, len(segs) - 1, 2):
        (_, s1), (_, s2) = segs[k], segs[k + 1]
        disp = (hip_x(s1.final_state) - hip_x(s1.initial_state)) + (hip_x(s2.final_state) - hip_x(s2.initial_state))
        speeds.append(disp / period)
    return np.array(speeds)


@dataclass
class PushRecovery:
    execution: HybridExecution
    speeds: np.ndarray
    target_speed: float
    push_step: int

    def recovery_steps(self, tol: float) -> Optional[int]:
        """Steps after the push until the speed error stays within tol (None if never)."""
        err = np.abs(self.speeds - self.target_speed)
        for k in range(self.push_step, err.size):
            if np.all(err[k:] <= tol):
                return k - self.push_step
        return None


def push_recovery(
    model: HybridModel,
    mech: Biped3,
    controller: Controller,
    xi: Sequence[float],
    n_steps: int,
    push_step: int,
    push_velocity: Sequence[float],
    target_speed: float,
    dt: float = 1e-3,
) -> PushRecovery:
    """Walk n_steps, adding ``push_velocity`` to the x1 velocities at the start of cycle ``push_step``."""
    dec = model.decomposition
    delta_x1 = np.zeros(dec.n1)
    v = np.asarray(push_velocity, dtype=float)
    delta_x1[dec.n1 - v.size:] = v
    perturbation = dec.merge(delta_x1, np.zeros(dec.n2))
    execution = simulate_hybrid(model, controller, xi, n_steps, dt=dt, perturbations={push_step: perturbation})
    speeds = step_speeds(mech, execution, model.period)
    logger.info(f"push recovery: speeds {np.round(speeds, 3).tolist()} (target {target_speed})")
    return PushRecovery(execution, speeds, target_speed, push_step)
