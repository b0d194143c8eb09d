"""
Fixed-step simulation of controlled and hybrid systems.

RK4 at a fixed step (default 1e-3 s), with the last step shortened to land on
the requested end time. Guard crossings are checked at step boundaries and
refined inside the bracketing step by re-integrating from the step start with
a shorter RK4 step (bisection or secant).

Hybrid executions follow a two-phase cycle driven by the clock tau:
phase i runs from mid-step (tau = 0) until impact, phase ii from impact until
tau = T_p, where tau resets to 0.
"""
import csv
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger

from app.errors import ContractViolationError, DivergenceError, EventDetectionError, StallError
from app.models.base import ControlSystem, HybridModel

DEFAULT_DT = 1e-3
DEFAULT_EVENT_TOL = 1e-10


@dataclass
class Trajectory:
    """Time grid with per-time states and inputs."""

    times: np.ndarray
    states: np.ndarray
    inputs: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.atleast_2d(np.asarray(self.states, dtype=float))
        self.inputs = np.asarray(self.inputs, dtype=float).reshape(len(self.times), -1)
        if self.states.shape[0] != self.times.size:
            raise ContractViolationError("states and times differ in length")
        if self.times.size > 1 and np.any(np.diff(self.times) <= 0):
            raise ContractViolationError("trajectory times must be strictly increasing")

    @property
    def n(self) -> int:
        return self.states.shape[1]

    @property
    def m(self) -> int:
        return self.inputs.shape[1]

    @property
    def initial_state(self) -> np.ndarray:
        return self.states[0].copy()

    @property
    def final_state(self) -> np.ndarray:
        return self.states[-1].copy()

    @property
    def duration(self) -> float:
        return float(self.times[-1] - self.times[0])

    def state_at(self, t: float) -> np.ndarray:
        """Linear interpolation between stored samples."""
        return np.array([np.interp(t, self.times, col) for col in self.states.T])

    def index_of(self, t: float, tol: float = 1e-9) -> int:
        """Index of the stored sample at time t; raises if t is not a grid time."""
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > tol:
            raise ContractViolationError(f"t = {t} is not a sample time of this trajectory")
        return k

    def restrict(self, t0: float, t1: float) -> "Trajectory":
        """Samples with t0 <= t <= t1 (inclusive, up to 1e-9)."""
        mask = (self.times >= t0 - 1e-9) & (self.times <= t1 + 1e-9)
        return Trajectory(self.times[mask], self.states[mask], self.inputs[mask])

    def columns(self) -> List[str]:
        return ["t"] + [f"x{i}" for i in range(self.n)] + [f"u{j}" for j in range(self.m)]

    def to_csv(self, path: Union[str, Path]) -> None:
        data = np.column_stack([self.times, self.states, self.inputs])
        np.savetxt(path, data, delimiter=",", header=",".join(self.columns()), comments="", fmt="%.17g")

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> "Trajectory":
        with open(path, newline="") as fh:
            header = next(csv.reader(fh))
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        n = sum(1 for c in header if c.startswith("x"))
        return cls(data[:, 0], data[:, 1:1 + n], data[:, 1 + n:])


@dataclass(frozen=True)
class DisturbanceWindow:
    """Constant additive input on one channel during [start, end)."""

    start: float
    end: float
    magnitude: float
    channel: int = 0

    def __post_init__(self):
        if not self.start < self.end:
            raise ContractViolationError(f"disturbance window needs start < end, got [{self.start}, {self.end}]")

    def active(self, t: float) -> bool:
        return self.start <= t < self.end


@dataclass(frozen=True)
class DisturbanceSignal:
    windows: Tuple[DisturbanceWindow, ...] = ()

    def value(self, t: float, m: int) -> np.ndarray:
        d = np.zeros(m)
        for w in self.windows:
            if w.active(t):
                if not 0 <= w.channel < m:
                    raise ContractViolationError(f"disturbance channel {w.channel} outside input range {m}")
                d[w.channel] += w.magnitude
        return d


class Controller:
    """Feedback law with explicit state.

    The simulator owns the controller state: it calls ``initial_state`` once,
    ``update`` at every step boundary, ``on_phase`` at every hybrid phase
    switch, and evaluates ``command`` (a pure function of state, time and x)
    at every RK4 stage.
    """

    m: int = 0

    def initial_state(self, t: float, x: np.ndarray):
        return None

    def update(self, state, t: float, x: np.ndarray):
        return state

    def on_phase(self, state, phase: "Phase", t: float, x: np.ndarray):
        return state

    def command(self, state, t: float, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class ZeroInput(Controller):
    def __init__(self, m: int):
        self.m = m

    def command(self, state, t, x):
        return np.zeros(self.m)


class FunctionController(Controller):
    """Stateless feedback u = fn(t, x)."""

    def __init__(self, fn: Callable[[float, np.ndarray], np.ndarray], m: int):
        self.fn = fn
        self.m = m

    def command(self, state, t, x):
        return np.atleast_1d(np.asarray(self.fn(t, x), dtype=float))


class OpenLoopInput(Controller):
    """Replays sampled inputs with linear interpolation (held constant past the ends)."""

    def __init__(self, times: Sequence[float], inputs: np.ndarray):
        self.times = np.asarray(times, dtype=float)
        self.inputs = np.asarray(inputs, dtype=float).reshape(self.times.size, -1)
        self.m = self.inputs.shape[1]

    def command(self, state, t, x):
        return np.array([np.interp(t, self.times, col) for col in self.inputs.T])


ControllerLike = Union[Controller, Callable[[float, np.ndarray], np.ndarray], None]


def as_controller(controller: ControllerLike, m: int) -> Controller:
    if controller is None:
        return ZeroInput(m)
    if isinstance(controller, Controller):
        return controller
    if callable(controller):
        return FunctionController(controller, m)
    raise ContractViolationError(f"cannot use {type(controller).__name__} as a controller")


class _Stepper:
    """RK4 step of the closed loop; ``clock`` maps absolute time to controller time."""

    def __init__(self, sys: ControlSystem, controller: Controller,
                 disturbance: Optional[DisturbanceSignal], clock: Callable[[float], float]):
        self.sys = sys
        self.controller = controller
        self.disturbance = disturbance
        self.clock = clock

    def input(self, cstate, t: float, x: np.ndarray) -> np.ndarray:
        u = np.atleast_1d(np.asarray(self.controller.command(cstate, self.clock(t), x), dtype=float))
        if u.shape != (self.sys.m,):
            raise ContractViolationError(f"controller returned input of shape {u.shape}, expected ({self.sys.m},)")
        if self.disturbance is not None:
            u = u + self.disturbance.value(t, self.sys.m)
        return u

    def rhs(self, cstate, t, x):
        return self.sys.vector_field(t, x, self.input(cstate, t, x))

    def step(self, cstate, t: float, x: np.ndarray, h: float) -> np.ndarray:
        k1 = self.rhs(cstate, t, x)
        k2 = self.rhs(cstate, t + 0.5 * h, x + 0.5 * h * k1)
        k3 = self.rhs(cstate, t + 0.5 * h, x + 0.5 * h * k2)
        k4 = self.rhs(cstate, t + h, x + h * k3)
        return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _time_grid(t0: float, t1: float, dt: float) -> np.ndarray:
    n = int(np.ceil((t1 - t0) / dt - 1e-9))
    grid = t0 + dt * np.arange(n + 1)
    grid[-1] = t1
    if n >= 1 and grid[-1] - grid[-2] <= 1e-12:
        grid = np.delete(grid, -2)
    return grid


def integrate(
    sys: ControlSystem,
    controller: ControllerLike,
    xi: Sequence[float],
    t0: float,
    t1: float,
    disturbance: Optional[DisturbanceSignal] = None,
    dt: float = DEFAULT_DT,
    controller_state=None,
) -> Trajectory:
    """Integrate the closed loop from xi over [t0, t1] with fixed-step RK4.

    Args:
        sys: control system
        controller: Controller, callable (t, x) -> u, or None for zero input
        xi: initial state
        t0: start time
        t1: end time (> t0)
        disturbance: additive input disturbance
        dt: integrator step
        controller_state: explicit controller state; defaults to initial_state(t0, xi)

    Returns:
        Trajectory whose inputs are the applied inputs (controller plus disturbance)

    Raises:
        ContractViolationError: if t1 <= t0 or xi has the wrong dimension
        DivergenceError: on a non-finite state
    """
    if not t1 > t0:
        raise ContractViolationError(f"integrate needs t1 > t0, got [{t0}, {t1}]")
    x = np.asarray(xi, dtype=float).copy()
    if x.shape != (sys.n,):
        raise ContractViolationError(f"{sys.name}: initial state has shape {x.shape}, expected ({sys.n},)")
    ctrl = as_controller(controller, sys.m)
    stepper = _Stepper(sys, ctrl, disturbance, clock=lambda t: t)
    cstate = ctrl.initial_state(t0, x) if controller_state is None else controller_state

    times = _time_grid(t0, t1, dt)
    states = np.empty((times.size, sys.n))
    inputs = np.empty((times.size, sys.m))
    for k, t in enumerate(times):
        cstate = ctrl.update(cstate, t, x)
        states[k] = x
        inputs[k] = stepper.input(cstate, t, x)
        if k + 1 < times.size:
            x = stepper.step(cstate, t, x, times[k + 1] - t)
            if not np.all(np.isfinite(x)):
                raise DivergenceError(f"{sys.name}: non-finite state", times[k + 1])
    return Trajectory(times, states, inputs)


# event location


def locate_event(
    advance: Callable[[float], np.ndarray],
    h: float,
    guard: Callable[[np.ndarray], float],
    p_start: float,
    method: str = "bisection",
    tol: float = DEFAULT_EVENT_TOL,
    max_iter: int = 200,
) -> Tuple[float, np.ndarray]:
    """Find s in (0, h] with guard(advance(s)) = 0.

    ``advance(s)`` integrates from the step start over a sub-step of length s.
    The bracket must satisfy p_start > 0 >= guard(advance(h)).

    Returns:
        (s, state at s) with |guard(state)| <= tol

    Raises:
        EventDetectionError: if the guard does not change sign or the
            iteration fails to reach the tolerance
    """
    x_hi = advance(h)
    p_lo, p_hi = float(p_start), float(guard(x_hi))
    if not (p_lo > 0.0 >= p_hi):
        raise EventDetectionError(f"guard does not change sign over the step (p: {p_lo:.3e} -> {p_hi:.3e})")
    if abs(p_hi) <= tol:
        return h, x_hi
    lo, hi = 0.0, h
    side = 0
    for _ in range(max_iter):
        if method == "bisection":
            s = 0.5 * (lo + hi)
        elif method == "secant":
            # regula falsi with the Illinois modification
            s = hi - p_hi * (hi - lo) / (p_hi - p_lo)
        else:
            raise ContractViolationError(f"unknown event locator {method!r}")
        x_s = advance(s)
        p_s = float(guard(x_s))
        if abs(p_s) <= tol:
            return s, x_s
        if p_s > 0.0:
            lo, p_lo = s, p_s
            if side == -1:
                p_hi *= 0.5
            side = -1
        else:
            hi, p_hi = s, p_s
            if side == 1:
                p_lo *= 0.5
            side = 1
        if hi - lo <= 1e-15 * max(1.0, h):
            break
    raise EventDetectionError(f"event location did not reach |p| <= {tol:g}")


# hybrid execution


class Phase(str, Enum):
    I = "i"
    II = "ii"


# impacts end phase i, the clock ends phase ii
VALID_TRANSITIONS = {
    Phase.I: [Phase.II],
    Phase.II: [Phase.I],
}


@dataclass
class HybridExecution:
    """Ordered (phase, segment) list with impact and cycle bookkeeping."""

    initial_state: np.ndarray
    segments: List[Tuple[Phase, Trajectory]] = field(default_factory=list)
    impact_times: List[float] = field(default_factory=list)
    impact_taus: List[float] = field(default_factory=list)
    pre_impact_states: List[np.ndarray] = field(default_factory=list)
    cycle_starts: List[float] = field(default_factory=list)
    cycle_start_states: List[np.ndarray] = field(default_factory=list)
    final_state: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.final_state is None:
            self.final_state = np.asarray(self.initial_state, dtype=float).copy()

    @property
    def n_impacts(self) -> int:
        return len(self.impact_times)

    def append(self, phase: Phase, segment: Trajectory) -> None:
        if self.segments and phase not in VALID_TRANSITIONS[self.segments[-1][0]]:
            raise ContractViolationError(f"invalid phase sequence {self.segments[-1][0].value} -> {phase.value}")
        self.segments.append((phase, segment))

    def to_csv(self, path: Union[str, Path]) -> None:
        rows = []
        header = None
        for phase, seg in self.segments:
            header = header or (["phase"] + seg.columns())
            for k in range(seg.times.size):
                rows.append([phase.value] + [repr(float(v)) for v in
                                             np.concatenate([[seg.times[k]], seg.states[k], seg.inputs[k]])])
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            if header:
                writer.writerow(header)
            writer.writerows(rows)


def _scan_crossings(values: Sequence[float]) -> int:
    signs = np.sign(values)
    return int(np.count_nonzero(np.diff(signs[signs != 0]) != 0)) if np.any(signs != 0) else 0


def simulate_hybrid(
    model: HybridModel,
    controller: ControllerLike,
    xi: Sequence[float],
    n_steps: int,
    dt: float = DEFAULT_DT,
    event_tol: float = DEFAULT_EVENT_TOL,
    max_phase_duration: Optional[float] = None,
    locator: str = "bisection",
    disturbance: Optional[DisturbanceSignal] = None,
    perturbations: Optional[Dict[int, np.ndarray]] = None,
    t0: float = 0.0,
) -> HybridExecution:
    """Simulate n_steps full cycles (phase i, impact, phase ii) from mid-step.

    Args:
        model: hybrid model
        controller: feedback evaluated with the clock tau in place of time
        xi: state at tau = 0 (phase i domain)
        n_steps: number of impacts to simulate
        dt: integrator step
        event_tol: |p| tolerance at located impacts
        max_phase_duration: phase-i time limit before a stall is declared
            (default 3 T_p)
        locator: "bisection" or "secant"
        disturbance: additive input disturbance in absolute time
        perturbations: state increments applied at the start of the given cycles
        t0: absolute start time

    Raises:
        StallError: if no impact occurs within max_phase_duration
        EventDetectionError: if a crossing cannot be localized
        DivergenceError: on a non-finite state
    """
    sys = model.continuous
    T_p = model.period
    max_phase = 3.0 * T_p if max_phase_duration is None else max_phase_duration
    x = np.asarray(xi, dtype=float).copy()
    if x.shape != (sys.n,):
        raise ContractViolationError(f"{model.name}: initial state has shape {x.shape}, expected ({sys.n},)")
    execution = HybridExecution(initial_state=x.copy())
    if n_steps <= 0:
        return execution

    ctrl = as_controller(controller, sys.m)
    cycle_start = t0
    stepper = _Stepper(sys, ctrl, disturbance, clock=lambda t: min(max(t - cycle_start, 0.0), T_p))
    cstate = ctrl.initial_state(0.0, x)
    t = t0

    for cycle in range(n_steps):
        if perturbations and cycle in perturbations:
            x = x + np.asarray(perturbations[cycle], dtype=float)
            logger.debug(f"{model.name}: perturbation applied at cycle {cycle}")
        cycle_start = t
        execution.cycle_starts.append(t)
        execution.cycle_start_states.append(x.copy())

        # phase i: integrate until the armed guard crosses zero from above
        cstate = ctrl.on_phase(cstate, Phase.I, 0.0, x)
        times, states, inputs = [], [], []
        p_prev = float(model.guard(x))
        k_step = 0
        while True:
            cstate = ctrl.update(cstate, t - cycle_start, x)
            times.append(t)
            states.append(x)
            inputs.append(stepper.input(cstate, t, x))
            if t - cycle_start > max_phase:
                raise StallError(f"{model.name}: no impact within {max_phase:.3f} s of phase i (cycle {cycle})")
            x_next = stepper.step(cstate, t, x, dt)
            if not np.all(np.isfinite(x_next)):
                raise DivergenceError(f"{model.name}: non-finite state", t + dt)
            p_next = float(model.guard(x_next))
            if p_prev > 0.0 >= p_next and model.armed(x_next):
                x_start, t_start, cs = x, t, cstate
                samples = [p_prev] + [float(model.guard(stepper.step(cs, t_start, x_start, f * dt)))
                                      for f in (0.25, 0.5, 0.75)] + [p_next]
                if _scan_crossings(samples) > 1:
                    raise EventDetectionError(f"{model.name}: multiple guard crossings within one step at t = {t:.6f}")
                s, x_minus = locate_event(
                    lambda h: stepper.step(cs, t_start, x_start, h), dt, model.guard, p_prev,
                    method=locator, tol=event_tol,
                )
                t = t_start + s
                if s > 1e-14:
                    times.append(t)
                    states.append(x_minus)
                    inputs.append(stepper.input(cstate, t, x_minus))
                break
            x, p_prev = x_next, p_next
            k_step += 1
            t = cycle_start + k_step * dt

        execution.append(Phase.I, Trajectory(np.array(times), np.array(states), np.array(inputs)))
        execution.impact_times.append(t)
        execution.impact_taus.append(t - cycle_start)
        execution.pre_impact_states.append(np.asarray(states[-1]).copy())
        x = np.asarray(model.reset(states[-1]), dtype=float)
        logger.debug(f"{model.name}: impact {cycle + 1} at t = {t:.6f} (tau = {t - cycle_start:.6f})")

        # phase ii: integrate until tau = T_p
        cstate = ctrl.on_phase(cstate, Phase.II, t - cycle_start, x)
        t_end = cycle_start + T_p
        if t_end - t > 1e-12:
            seg = _integrate_segment(stepper, ctrl, cstate, x, t, t_end, dt, cycle_start)
            cstate = seg[1]
            execution.append(Phase.II, seg[0])
            x = seg[0].final_state
            t = t_end
        else:
            execution.append(Phase.II, Trajectory(np.array([t]), x[None, :], stepper.input(cstate, t, x)[None, :]))

    execution.final_state = x.copy()
    return execution


def _integrate_segment(stepper: _Stepper, ctrl: Controller, cstate, x, t0, t1, dt, cycle_start):
    times = _time_grid(t0, t1, dt)
    states = np.empty((times.size, x.size))
    inputs = np.empty((times.size, stepper.sys.m))
    for k, t in enumerate(times):
        cstate = ctrl.update(cstate, t - cycle_start, x)
        states[k] = x
        inputs[k] = stepper.input(cstate, t, x)
        if k + 1 < times.size:
            x = stepper.step(cstate, t, x, times[k + 1] - t)
            if not np.all(np.isfinite(x)):
                raise DivergenceError(f"{stepper.sys.name}: non-finite state", times[k + 1])
    return Trajectory(times, states, inputs), cstate
