"""
Periodic gaits and gait transitions for the 3-link biped.

A gait is clocked from mid-step (swing foot level with the stance foot,
tau = 0): phase i runs to the impact at tau = T_p / 2, phase ii from the
reset state back to the next mid-step at tau = T_p. Gaits are indexed by the
average forward speed v = step length / T_p.
"""
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from app.errors import ContractViolationError
from app.models.base import HybridModel
from app.models.biped3 import Biped3
from app.schemas.config import GaitSettings
from app.services.simulation_service import Phase, Trajectory
from app.services.trajopt_service import (
    ConstraintSpec,
    CostKind,
    CostSpec,
    NodeConstraint,
    OptimizerResult,
    PathConstraint,
    TargetOrbit,
    infeasible_result,
    optimize_transition,
    solve,
    transcribe,
)


def _swing_heights(mech: Biped3, X: np.ndarray) -> np.ndarray:
    q, _ = mech.configuration(X)
    return mech.point("swing_foot", q)[..., 1]


def clearance_constraints(mech: Biped3, segments: Sequence[int], settings: GaitSettings) -> List[PathConstraint]:
    """Swing foot at or above ground over the late part of each phase-i segment."""
    return [PathConstraint(
        "clearance",
        lambda t, X, U: -_swing_heights(mech, X)[:, None],
        segments=tuple(segments),
        window=tuple(settings.clearance_window),
    )]


@dataclass
class PeriodicGait:
    """One member of the gait library."""

    speed: float
    period: float
    status: str
    result: Optional[OptimizerResult] = None

    @property
    def feasible(self) -> bool:
        return self.result is not None and self.result.feasible

    def _require(self) -> OptimizerResult:
        if not self.feasible:
            raise ContractViolationError(f"gait at v = {self.speed} is {self.status}")
        return self.result

    def phase_trajectory(self, phase: Phase) -> Trajectory:
        for ph, traj in self._require().segments:
            if ph == phase:
                return traj
        raise ContractViolationError(f"gait has no {phase.value} segment")

    @property
    def midpoint(self) -> np.ndarray:
        return self.phase_trajectory(Phase.I).initial_state

    @property
    def x1(self) -> np.ndarray:
        return self.midpoint[:2]

    @property
    def parameters(self) -> np.ndarray:
        return np.array([self.speed])

    def state_at(self, tau: float, phase: Phase) -> np.ndarray:
        return self.phase_trajectory(phase).state_at(tau)

    def input_at(self, tau: float, phase: Phase) -> np.ndarray:
        traj = self.phase_trajectory(phase)
        return np.array([np.interp(tau, traj.times, col) for col in traj.inputs.T])

    def local_clock(self, t: float, phase: Phase) -> float:
        """tau of absolute time t, assigned to the given phase."""
        T_p = self.period
        offset = 0.0 if phase == Phase.I else 0.5 * T_p
        k = np.floor((t - offset + 1e-9) / T_p)
        lo, hi = (0.0, 0.5 * T_p) if phase == Phase.I else (0.5 * T_p, T_p)
        return float(np.clip(t - k * T_p, lo, hi))

    def reference(self, times, phases) -> Tuple[np.ndarray, np.ndarray]:
        X, U = [], []
        for t, ph in zip(np.asarray(times, dtype=float), phases):
            ph = Phase.I if ph is None else ph
            tau = self.local_clock(t, ph)
            X.append(self.state_at(tau, ph))
            U.append(self.input_at(tau, ph))
        return np.array(X), np.array(U)


class GaitTarget(TargetOrbit):
    """Adapter exposing a PeriodicGait to transition problems."""

    def __init__(self, gait: PeriodicGait):
        self.gait = gait
        self.period = gait.period

    @property
    def midpoint(self) -> np.ndarray:
        return self.gait.midpoint

    def reference(self, times, phases):
        return self.gait.reference(times, phases)


def _gait_guess(problem, mech: Biped3, step_length: float, lean: float) -> np.ndarray:
    """Symmetric swing with linear stance-leg motion and zero torque."""
    r = mech.params.leg_length
    alpha = float(np.arcsin(np.clip(step_length / (2.0 * r), 0.0, 0.99)))
    X = np.zeros((problem.n_nodes, problem.n))
    for seg, (a, b) in zip(problem.segments, problem.node_ranges):
        s = np.linspace(0.0, 1.0, b - a + 1)
        if seg.phase == Phase.I:
            theta = alpha * s
            swing = -alpha * (2.0 * s - s ** 2)
        else:
            theta = -alpha * (1.0 - s)
            swing = alpha * (1.0 - s)
        q = np.column_stack([theta, lean - theta, swing - theta])
        dq = np.gradient(q, problem.times[a:b + 1], axis=0)
        X[a:b + 1] = mech.state_from(q, dq)
    return problem.pack(X, np.zeros((problem.n_nodes, problem.m)))


def optimize_periodic_gait(
    model: HybridModel,
    mech: Biped3,
    speed: float,
    settings: Optional[GaitSettings] = None,
    initial_guess=None,
) -> PeriodicGait:
    """Minimum-torque periodic gait at average speed ``speed``.

    Two phases of T_p / 2; the impact node lies on the guard, the step
    length is speed * T_p and the gait closes on itself after the reset.
    Speeds whose step is shorter than the arming distance are infeasible.
    """
    settings = settings or GaitSettings()
    T_p = model.period
    step = speed * T_p
    if step < mech.params.arming_distance:
        result = infeasible_result(f"gait speed {speed} gives step {step:.3f} m below the arming distance")
        return PeriodicGait(speed=speed, period=T_p, status=result.status, result=None)
    if step >= 2.0 * mech.params.leg_length:
        result = infeasible_result(f"gait speed {speed} needs a step longer than the leg span")
        return PeriodicGait(speed=speed, period=T_p, status=result.status, result=None)

    N = settings.intervals
    impact_node = N
    extra = [
        NodeConstraint("midstep", (0,), lambda x: np.array([mech.swing_foot_lead(x)])),
        NodeConstraint("step_length", (impact_node,), lambda x: np.array([mech.swing_foot_lead(x) - step])),
        NodeConstraint(
            "transversal", (impact_node - 1,),
            lambda x: np.array([settings.clearance - mech.swing_foot_height(x)]), kind="ineq"),
    ]
    tau_lim = settings.torque_limit
    spec = ConstraintSpec(
        periodic=True,
        input_bounds=(-tau_lim, tau_lim),
        path=clearance_constraints(mech, (0,), settings),
        extra=extra,
    )
    cost = CostSpec(kind=CostKind.GAIT_ENERGY, Q=np.zeros((6, 6)), R=np.eye(2))
    problem = transcribe(model, cost, spec, N, T_p)
    guess = initial_guess if initial_guess is not None else _gait_guess(problem, mech, step, settings.torso_lean)
    result = solve(problem, guess, settings.solver)
    logger.info(f"gait v = {speed:.3f} m/s: {result.status}, cost {result.cost:.4g}")
    return PeriodicGait(speed=speed, period=T_p, status=result.status, result=result)


def gait_library(
    model: HybridModel,
    mech: Biped3,
    speeds: Sequence[float],
    settings: Optional[GaitSettings] = None,
) -> List[PeriodicGait]:
    """Gaits for increasing speeds, each warm-started from the previous feasible one."""
    gaits: List[PeriodicGait] = []
    previous: Optional[PeriodicGait] = None
    for v in speeds:
        guess = previous.result.z if previous is not None else None
        gait = optimize_periodic_gait(model, mech, v, settings, initial_guess=guess)
        if not gait.feasible and guess is not None:
            gait = optimize_periodic_gait(model, mech, v, settings)
        gaits.append(gait)
        if gait.feasible:
            previous = gait
    n_ok = sum(g.feasible for g in gaits)
    logger.info(f"gait library: {n_ok}/{len(gaits)} feasible")
    return gaits


def optimize_gait_transition(
    model: HybridModel,
    mech: Biped3,
    xi1: Sequence[float],
    gamma,
    target: PeriodicGait,
    Q: np.ndarray,
    R: np.ndarray,
    horizon_steps: int = 3,
    settings: Optional[GaitSettings] = None,
    impose_boundary: bool = True,
) -> OptimizerResult:
    """Transition from (xi1, gamma(xi1)) onto ``target`` over ``horizon_steps`` steps.

    Returns the first step; the full solution is kept in ``full``.
    """
    settings = settings or GaitSettings()
    if not target.feasible:
        return infeasible_result(f"target gait v = {target.speed} is {target.status}")
    phase_i_segments = tuple(range(0, 2 * horizon_steps, 2))
    return optimize_transition(
        model,
        xi1,
        gamma,
        GaitTarget(target),
        Q,
        R,
        settings.intervals,
        horizon_periods=horizon_steps,
        kind=CostKind.GAIT_TRANSITION,
        input_bounds=(-settings.torque_limit, settings.torque_limit),
        path=clearance_constraints(mech, phase_i_segments, settings),
        impose_boundary=impose_boundary,
        options=settings.solver,
    )
