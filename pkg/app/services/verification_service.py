"""
Numerical verification of the synthesized controllers.

Everything here is recomputed from stored trajectories, regressors and
closed-loop simulations; no number reported by a solver or trainer is reused.
"""
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from loguru import logger

from app.errors import ContractViolationError, VerificationFailure
from app.metrics.prometheus import metrics_collector
from app.services.learning_service import Regressor
from app.services.library_service import Dataset, FeatureMap, LibraryEntry, TrajectoryLibrary
from app.services.simulation_service import Trajectory


# Lyapunov form


@dataclass
class LyapunovForm:
    """V(x) = x' P x fitted to optimal costs."""

    P: np.ndarray
    residual: float
    eigenvalues: np.ndarray

    @property
    def alpha1(self) -> float:
        return float(self.eigenvalues.min())

    @property
    def alpha2(self) -> float:
        return float(self.eigenvalues.max())

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.einsum("...i,ij,...j->...", x, self.P, x)

    def to_dict(self) -> Dict:
        return {"P": self.P.tolist(), "residual": self.residual, "eigenvalues": self.eigenvalues.tolist()}


def fit_lyapunov(points, costs) -> LyapunovForm:
    """Least-squares fit of J(xi) ~ xi' P xi over all quadratic monomials.

    Raises:
        ContractViolationError: with fewer than n(n+1)/2 samples
        VerificationFailure: if the fitted P is not positive definite
    """
    X = np.atleast_2d(np.asarray(points, dtype=float))
    J = np.asarray(costs, dtype=float).ravel()
    n = X.shape[1]
    pairs = [(i, j) for i in range(n) for j in range(i, n)]
    if X.shape[0] < len(pairs):
        raise ContractViolationError(f"Lyapunov fit needs at least {len(pairs)} samples, got {X.shape[0]}")
    Phi = np.column_stack([X[:, i] * X[:, j] for i, j in pairs])
    coef, *_ = np.linalg.lstsq(Phi, J, rcond=None)
    P = np.zeros((n, n))
    for c, (i, j) in zip(coef, pairs):
        if i == j:
            P[i, i] = c
        else:
            P[i, j] = P[j, i] = 0.5 * c
    residual = float(np.sqrt(np.mean((Phi @ coef - J) ** 2)))
    eig = np.linalg.eigvalsh(P)
    form = LyapunovForm(P=P, residual=residual, eigenvalues=eig)
    logger.info(f"Lyapunov fit: eigenvalues {np.round(eig, 5).tolist()}, RMS residual {residual:.3e}")
    if eig.min() <= 0:
        raise VerificationFailure("fitted Lyapunov matrix is not positive definite",
                                  offending=eig.tolist(), details=form.to_dict())
    return form


# contraction


@dataclass
class ContractionReport:
    c: float
    limit: float
    ratios: np.ndarray
    entries: np.ndarray
    excluded: List[int] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.c < self.limit

    @property
    def violating(self) -> List[int]:
        return self.entries[self.ratios >= self.limit].tolist()

    def to_dict(self) -> Dict:
        return {"c": self.c, "limit": self.limit, "passed": self.passed,
                "violating": self.violating, "excluded": self.excluded}


def contraction_constant(
    library: TrajectoryLibrary,
    V: Callable[[np.ndarray], float],
    reference: Optional[Callable[[LibraryEntry], np.ndarray]] = None,
    limit: float = 1.0,
    zero_tol: float = 1e-12,
) -> ContractionReport:
    """max over feasible entries of V(phi(T_p)) / V(phi(0)).

    ``reference(entry)`` gives the state V is measured from (the target
    orbit midpoint for transition libraries); entries already at their
    reference are excluded.
    """
    ratios, idx, excluded = [], [], []
    for e in library.feasible_entries():
        ref = 0.0 if reference is None else reference(e)
        v0 = float(V(e.initial_state - ref))
        if v0 <= zero_tol:
            excluded.append(e.index)
            continue
        ratios.append(float(V(e.final_state - ref)) / v0)
        idx.append(e.index)
    if not ratios:
        raise ContractViolationError("no library entry away from its reference")
    ratios = np.array(ratios)
    report = ContractionReport(c=float(ratios.max()), limit=limit, ratios=ratios, entries=np.array(idx), excluded=excluded)
    metrics_collector.set_contraction(report.c)
    level = "INFO" if report.passed else "WARNING"
    logger.log(level, f"contraction constant c = {report.c:.4f} over {ratios.size} entries (limit {limit})")
    return report


def lyapunov_sequence(trajectory: Trajectory, V: Callable[[np.ndarray], float], period: float,
                      c: Optional[float] = None, tol: float = 1e-12) -> Dict:
    """V(phi(k T_p)) along a closed-loop trajectory, with the check V_k <= c^k V_0."""
    n_periods = int(np.floor((trajectory.times[-1] - trajectory.times[0]) / period + 1e-9))
    times = trajectory.times[0] + period * np.arange(n_periods + 1)
    values = np.array([float(V(trajectory.state_at(t))) for t in times])
    out = {"times": times, "values": values}
    if c is not None:
        bound = values[0] * c ** np.arange(values.size)
        out["bound"] = bound
        out["dominated"] = bool(np.all(values <= bound + tol))
    return out


# Poincare analysis


@dataclass
class PoincareReport:
    fixed_point: np.ndarray
    residual: float
    residual_history: List[float]
    converged: bool
    jacobian: Optional[np.ndarray] = None
    forward_jacobian: Optional[np.ndarray] = None
    eigenvalues: Optional[np.ndarray] = None
    step_flagged: bool = False

    @property
    def moduli(self) -> np.ndarray:
        return np.abs(self.eigenvalues) if self.eigenvalues is not None else np.array([])

    @property
    def max_modulus(self) -> float:
        return float(self.moduli.max()) if self.moduli.size else float("nan")

    @property
    def stable(self) -> bool:
        return self.converged and self.max_modulus < 1.0

    def to_dict(self) -> Dict:
        return {
            "fixed_point": self.fixed_point.tolist(),
            "residual": self.residual,
            "converged": self.converged,
            "max_modulus": self.max_modulus,
            "moduli": self.moduli.tolist(),
            "stable": self.stable,
            "step_flagged": self.step_flagged,
            "residual_history": self.residual_history,
        }


def find_fixed_point(step_map: Callable[[np.ndarray], np.ndarray], xi_guess, tol: float = 1e-6,
                     max_iter: int = 50):
    """Fixed-point iteration of the return map with componentwise Aitken acceleration.

    An accelerated point is used only when it lowers the residual.

    Returns:
        (point, residual, residual history, converged)
    """
    x = np.asarray(xi_guess, dtype=float).copy()
    history = []
    for _ in range(max_iter):
        x1 = np.asarray(step_map(x), dtype=float)
        r = float(np.linalg.norm(x1 - x, ord=np.inf))
        history.append(r)
        if r <= tol:
            return x, r, history, True
        x2 = np.asarray(step_map(x1), dtype=float)
        d1, d2 = x1 - x, x2 - x1
        denom = d2 - d1
        safe = np.abs(denom) > 1e-14 * np.maximum(1.0, np.abs(x2))
        accel = np.where(safe, x2 - d2 ** 2 / np.where(safe, denom, 1.0), x2)
        r_acc = float(np.linalg.norm(np.asarray(step_map(accel)) - accel, ord=np.inf)) if np.all(np.isfinite(accel)) else np.inf
        r_plain = float(np.linalg.norm(d2, ord=np.inf))
        x = accel if r_acc < r_plain else x2
        if not np.all(np.isfinite(x)) or (len(history) > 5 and r > 1e3 * history[0]):
            break
    r = float(np.linalg.norm(np.asarray(step_map(x)) - x, ord=np.inf)) if np.all(np.isfinite(x)) else float("inf")
    history.append(r)
    return x, r, history, r <= tol


def _jacobian(step_map, x, steps, central: bool) -> np.ndarray:
    n = x.size
    J = np.empty((n, n))
    base = None if central else np.asarray(step_map(x), dtype=float)
    for i in range(n):
        e = np.zeros(n)
        e[i] = steps[i]
        if central:
            J[:, i] = (np.asarray(step_map(x + e)) - np.asarray(step_map(x - e))) / (2.0 * steps[i])
        else:
            J[:, i] = (np.asarray(step_map(x + e)) - base) / steps[i]
    return J


def poincare_jacobian(
    step_map: Callable[[np.ndarray], np.ndarray],
    xi_guess,
    step: float = 1e-6,
    scale: Optional[Sequence[float]] = None,
    tol: float = 1e-6,
    max_iter: int = 50,
    agreement: float = 1e-3,
) -> PoincareReport:
    """Fixed point of the return map and the spectrum of its Jacobian.

    Central differences with ``step * scale[i]`` per coordinate; a forward
    difference Jacobian is computed alongside and the step is flagged when the
    two disagree by more than ``agreement`` (relative).
    """
    x, r, history, converged = find_fixed_point(step_map, xi_guess, tol, max_iter)
    if not converged:
        logger.warning(f"return map fixed point not found (residual {r:.3e} after {len(history)} iterations)")
        return PoincareReport(fixed_point=x, residual=r, residual_history=history, converged=False)
    scale = np.ones(x.size) if scale is None else np.asarray(scale, dtype=float)
    steps = step * scale
    J = _jacobian(step_map, x, steps, central=True)
    Jf = _jacobian(step_map, x, steps, central=False)
    rel = np.linalg.norm(J - Jf) / max(np.linalg.norm(J), 1e-12)
    eig = np.linalg.eigvals(J)
    report = PoincareReport(x, r, history, True, J, Jf, eig, step_flagged=bool(rel > agreement))
    if report.step_flagged:
        logger.warning(f"forward and central Jacobians differ by {rel:.2e}; difference step may be too large")
    logger.info(f"return map: max |eig| = {report.max_modulus:.4f}, fixed-point residual {r:.2e}")
    return report


def phase_offset_reports(make_step_map: Callable[[float], Callable], xi_guesses: Callable[[float], np.ndarray],
                         period: float, n_offsets: int = 3, seed: int = 0, **kwargs) -> List[PoincareReport]:
    """Return-map reports with sections at t0 = 0 and n_offsets random phases."""
    rng = np.random.default_rng(seed)
    offsets = np.concatenate([[0.0], np.sort(rng.uniform(0.0, period, n_offsets))])
    reports = []
    for t0 in offsets:
        rep = poincare_jacobian(make_step_map(float(t0)), xi_guesses(float(t0)), **kwargs)
        logger.debug(f"section t0 = {t0:.3f}: max |eig| = {rep.max_modulus:.4f}")
        reports.append(rep)
    return reports


# boundary and learning conditions


@dataclass
class BoundaryReport:
    max_residual: float
    residuals: np.ndarray
    entries: np.ndarray
    tol: float
    nu_continuity: Optional[float] = None

    @property
    def flagged(self) -> List[int]:
        return self.entries[self.residuals > self.tol].tolist()

    @property
    def passed(self) -> bool:
        return self.max_residual <= self.tol

    def to_dict(self) -> Dict:
        return {"max_residual": self.max_residual, "tol": self.tol, "passed": self.passed,
                "flagged": self.flagged, "nu_continuity": self.nu_continuity}


def check_boundary_conditions(
    library: TrajectoryLibrary,
    decomposition,
    tol: float = 1e-6,
    nu: Optional[Regressor] = None,
) -> BoundaryReport:
    """|gamma(x1(T_p)) - x2(T_p)| per entry, and |nu(0, x1(T_p)) - nu(T_p, x1(T_p))| when nu is given.

    Raises:
        ContractViolationError: if the library has no insertion map
    """
    if library.insertion is None:
        raise ContractViolationError("boundary conditions need a library built with an insertion map")
    entries = library.feasible_entries()
    residuals = library.boundary_residuals(decomposition)
    continuity = None
    if nu is not None:
        fmap = FeatureMap.from_dict(nu.meta["feature_map"])
        gaps = []
        for e in entries:
            x_end = e.final_state[None, :]
            f0 = fmap(0.0, x_end, e.target)
            f1 = fmap(library.period, x_end, e.target)
            gaps.append(float(np.max(np.abs(nu.evaluate(f0) - nu.evaluate(f1)))))
        continuity = float(max(gaps))
    report = BoundaryReport(
        max_residual=float(residuals.max()), residuals=residuals,
        entries=np.array([e.index for e in entries]), tol=tol, nu_continuity=continuity,
    )
    if not report.passed:
        logger.warning(f"boundary condition violated at {len(report.flagged)} entries (max {report.max_residual:.2e})")
    return report


@dataclass
class ResidualReport:
    max_residual: float
    mean_residual: float
    mse: float
    times: np.ndarray
    max_per_time: np.ndarray

    def to_dict(self) -> Dict:
        return {"max_residual": self.max_residual, "mean_residual": self.mean_residual, "mse": self.mse}


def learning_residuals(regressor: Regressor, dataset: Dataset) -> ResidualReport:
    """Learning-condition residual |regressor(features) - label| over every row."""
    if dataset.features.shape[1] != regressor.n_in or dataset.labels.shape[1] != regressor.n_out:
        raise ContractViolationError("regressor and dataset dimensions differ")
    R = regressor.evaluate(dataset.features) - dataset.labels
    row = np.abs(R).max(axis=1)
    times = np.unique(dataset.times)
    per_time = np.array([row[np.abs(dataset.times - t) <= 1e-9].max() for t in times])
    return ResidualReport(
        max_residual=float(row.max()),
        mean_residual=float(row.mean()),
        mse=float(np.mean(R ** 2)),
        times=times,
        max_per_time=per_time,
    )


# closed-loop diagnostics


def output_decay(trajectory: Trajectory, output: Callable[[float, np.ndarray], np.ndarray],
                 t0: Optional[float] = None, t1: Optional[float] = None, floor: float = 1e-8) -> Dict:
    """|y(t)| along a trajectory and the slope of log|y| over [t0, t1]."""
    norms = np.array([float(np.linalg.norm(output(t, x))) for t, x in zip(trajectory.times, trajectory.states)])
    t0 = trajectory.times[0] if t0 is None else t0
    t1 = trajectory.times[-1] if t1 is None else t1
    mask = (trajectory.times >= t0) & (trajectory.times <= t1) & (norms > floor)
    slope = float("nan")
    if mask.sum() >= 2:
        slope = float(np.polyfit(trajectory.times[mask], np.log(norms[mask]), 1)[0])
    return {"times": trajectory.times, "norms": norms, "log_slope": slope}


@dataclass
class SensitivityReport:
    deltas: np.ndarray
    values: np.ndarray
    K1: float
    K2: float
    linear: np.ndarray
    quadratic: np.ndarray

    def to_dict(self) -> Dict:
        return {"K1": self.K1, "K2": self.K2, "linear": self.linear.tolist(), "quadratic": self.quadratic.tolist()}


def posture_sensitivity(
    nu: Regressor,
    feature_map: FeatureMap,
    t: float,
    x_base: Sequence[float],
    sweep_index: int,
    deltas: Sequence[float],
    component: int,
    targets: Optional[Sequence[float]] = None,
) -> SensitivityReport:
    """Linear and quadratic fits of nu[component] against a sweep of one state entry.

    ``K1`` is the linear gain, ``K2`` the quadratic coefficient.
    """
    deltas = np.asarray(deltas, dtype=float)
    X = np.repeat(np.asarray(x_base, dtype=float)[None, :], deltas.size, axis=0)
    X[:, sweep_index] += deltas
    values = nu.evaluate(feature_map(t, X, targets))[:, component]
    linear = np.polyfit(deltas, values, 1)
    quadratic = np.polyfit(deltas, values, 2)
    return SensitivityReport(deltas, values, float(linear[0]), float(quadratic[0]), linear, quadratic)
