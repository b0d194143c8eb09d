"""
Augmented-Lagrangian solver for bound-constrained nonlinear programs.

    minimize f(z)  s.t.  c(z) = 0,  g(z) <= 0,  lower <= z <= upper

The outer loop updates multipliers (PHR form for inequalities) and the
penalty on a tolerance schedule; the inner bound-constrained minimization is
L-BFGS-B. Nearly feasible iterates are finished by Newton steps on the KKT
conditions with a finite-difference Lagrangian Hessian. Failure to converge
is reported through the status, never raised.
"""
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field
from scipy.optimize import Bounds, minimize

ValueGrad = Callable[[np.ndarray], Tuple[float, np.ndarray]]
ValueJac = Callable[[np.ndarray], Tuple[np.ndarray, np.ndarray]]

STATUS_CONVERGED = "converged"
STATUS_FEASIBLE = "feasible"
STATUS_FAILED = "failed"
STATUS_INFEASIBLE = "infeasible"


class SolverOptions(BaseModel):
    """Tolerances and iteration limits of the augmented-Lagrangian loop."""

    model_config = ConfigDict(extra="forbid")

    constraint_tol: float = Field(default=1e-6, gt=0)
    gradient_tol: float = Field(default=1e-6, gt=0)
    max_outer: int = Field(default=30, ge=1)
    max_inner: int = Field(default=2000, ge=1)
    rho_init: float = Field(default=10.0, gt=0)
    rho_growth: float = Field(default=10.0, gt=1)
    rho_max: float = Field(default=1e8, gt=0)
    infeasible_tol: float = Field(default=1e-3, gt=0, description="Violation left at rho_max that marks a problem infeasible")
    refine_tol: float = Field(default=1e-4, gt=0, description="Violation below which Newton refinement of the KKT conditions starts")
    max_newton: int = Field(default=10, ge=0)
    hessian_step: float = Field(default=1e-4, gt=0, description="Relative step of the finite-difference Lagrangian Hessian")


@dataclass
class NLPProblem:
    n_vars: int
    objective: ValueGrad
    equality: Optional[ValueJac] = None
    inequality: Optional[ValueJac] = None
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None

    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        lo = np.full(self.n_vars, -np.inf) if self.lower is None else np.asarray(self.lower, dtype=float)
        hi = np.full(self.n_vars, np.inf) if self.upper is None else np.asarray(self.upper, dtype=float)
        return lo, hi


@dataclass
class NLPResult:
    z: np.ndarray
    objective: float
    status: str
    eq_violation: float
    ineq_violation: float
    gradient_norm: float
    outer_iterations: int
    inner_iterations: int
    history: List[Tuple[float, float, float]] = field(default_factory=list)

    @property
    def violation(self) -> float:
        return max(self.eq_violation, self.ineq_violation)


def _eval_constraints(problem: NLPProblem, z: np.ndarray):
    if problem.equality is not None:
        c, Jc = problem.equality(z)
    else:
        c, Jc = np.zeros(0), np.zeros((0, z.size))
    if problem.inequality is not None:
        g, Jg = problem.inequality(z)
    else:
        g, Jg = np.zeros(0), np.zeros((0, z.size))
    return np.asarray(c, float), np.asarray(Jc, float), np.asarray(g, float), np.asarray(Jg, float)


def projected_gradient(z: np.ndarray, grad: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    return z - np.clip(z - grad, lo, hi)


def augmented_lagrangian(problem: NLPProblem, lam: np.ndarray, mu: np.ndarray, rho: float) -> ValueGrad:
    """L_rho(z) = f + lam.c + rho/2 |c|^2 + (|max(0, mu + rho g)|^2 - |mu|^2) / (2 rho)."""

    def fun(z: np.ndarray):
        f, gf = problem.objective(z)
        val = float(f)
        grad = np.array(gf, dtype=float)
        c, Jc, g, Jg = _eval_constraints(problem, z)
        if c.size:
            val += float(lam @ c) + 0.5 * rho * float(c @ c)
            grad += Jc.T @ (lam + rho * c)
        if g.size:
            s = np.maximum(0.0, mu + rho * g)
            val += (float(s @ s) - float(mu @ mu)) / (2.0 * rho)
            grad += Jg.T @ s
        return val, grad

    return fun


def _initial_multipliers(problem: NLPProblem, z: np.ndarray, lo: np.ndarray, hi: np.ndarray):
    """Least-squares multipliers on the free variables, inequalities restricted to active rows."""
    _, gf = problem.objective(z)
    c, Jc, g, Jg = _eval_constraints(problem, z)
    active = g >= -1e-9
    A = np.vstack([Jc, Jg[active]])
    lam = np.zeros(c.size)
    mu = np.zeros(g.size)
    if A.shape[0] == 0:
        return lam, mu
    free = (z > lo + 1e-12) & (z < hi - 1e-12)
    if not np.any(free):
        return lam, mu
    sol, *_ = np.linalg.lstsq(A[:, free].T, -np.asarray(gf)[free], rcond=None)
    lam = sol[:c.size]
    mu[active] = np.maximum(0.0, sol[c.size:])
    return lam, mu


def _stationarity(problem: NLPProblem, z, lam, mu, lo, hi) -> Tuple[float, float, float, float]:
    """(eq violation, ineq violation, projected Lagrangian gradient, 1 + |grad f|)."""
    _, gf = problem.objective(z)
    gf = np.asarray(gf, dtype=float)
    c, Jc, g, Jg = _eval_constraints(problem, z)
    eq_v = float(np.max(np.abs(c))) if c.size else 0.0
    ineq_v = float(np.max(np.maximum(g, 0.0))) if g.size else 0.0
    grad_L = gf + Jc.T @ lam + Jg.T @ mu
    pg = float(np.max(np.abs(projected_gradient(z, grad_L, lo, hi)))) if z.size else 0.0
    scale = 1.0 + (float(np.max(np.abs(gf))) if gf.size else 0.0)
    return eq_v, ineq_v, pg, scale


def _lagrangian_hessian(problem: NLPProblem, z, lam, mu, cols: np.ndarray, step: float) -> np.ndarray:
    """Central differences of the Lagrangian gradient, restricted to ``cols``."""

    def grad_L(v):
        _, gf = problem.objective(v)
        _, Jc, _, Jg = _eval_constraints(problem, v)
        return np.asarray(gf, dtype=float) + Jc.T @ lam + Jg.T @ mu

    H = np.empty((cols.size, cols.size))
    for k, j in enumerate(cols):
        h = step * (1.0 + abs(z[j]))
        e = np.zeros_like(z)
        e[j] = h
        H[:, k] = (grad_L(z + e) - grad_L(z - e))[cols] / (2.0 * h)
    return 0.5 * (H + H.T)


def _kkt_merit(problem: NLPProblem, z, lam, mu, lo, hi, opts: SolverOptions) -> float:
    eq_v, ineq_v, pg, scale = _stationarity(problem, z, lam, mu, lo, hi)
    return max(max(eq_v, ineq_v) / opts.constraint_tol, pg / (opts.gradient_tol * scale))


def _newton_refine(problem: NLPProblem, z, lam, mu, lo, hi, opts: SolverOptions):
    """Newton iterations on the KKT conditions from a nearly feasible point.

    Bounds that push against their variable and inequalities that are active
    or carry a positive multiplier are held as equalities. Returns the best
    (z, lam, mu) found and whether it meets both tolerances.
    """
    best = (z, lam, mu)
    merit = _kkt_merit(problem, z, lam, mu, lo, hi, opts)
    for it in range(opts.max_newton):
        if merit <= 1.0:
            return best, True
        z, lam, mu = best
        _, gf = problem.objective(z)
        gf = np.asarray(gf, dtype=float)
        c, Jc, g, Jg = _eval_constraints(problem, z)
        grad_L = gf + Jc.T @ lam + Jg.T @ mu
        fixed = (hi - lo <= 0) | ((z <= lo) & (grad_L > 0)) | ((z >= hi) & (grad_L < 0))
        free = np.flatnonzero(~fixed)
        if free.size == 0:
            return best, merit <= 1.0
        active = (mu > 0) | (g > -opts.constraint_tol)
        H = _lagrangian_hessian(problem, z, lam, mu, free, opts.hessian_step)

        for _ in range(g.size + 1):
            A = np.vstack([Jc, Jg[active]])[:, free]
            r = np.concatenate([c, g[active]])
            nf = free.size
            K = np.zeros((nf + A.shape[0], nf + A.shape[0]))
            K[:nf, :nf] = H
            K[:nf, nf:] = A.T
            K[nf:, :nf] = A
            rhs = np.concatenate([-gf[free], -r])
            sol, *_ = np.linalg.lstsq(K, rhs, rcond=None)
            nu = sol[free.size:]
            mu_active = nu[c.size:]
            if np.all(mu_active >= 0.0):
                break
            drop = np.flatnonzero(active)[mu_active < 0.0]
            active[drop] = False
        dz = np.zeros_like(z)
        dz[free] = sol[:free.size]
        lam_new = nu[:c.size]
        mu_new = np.zeros_like(mu)
        mu_new[active] = np.maximum(nu[c.size:], 0.0)

        alpha = 1.0
        for _ in range(8):
            trial_z = np.clip(z + alpha * dz, lo, hi)
            trial_lam = lam + alpha * (lam_new - lam)
            trial_mu = mu + alpha * (mu_new - mu)
            trial = _kkt_merit(problem, trial_z, trial_lam, trial_mu, lo, hi, opts)
            if trial < merit:
                break
            alpha *= 0.5
        else:
            logger.debug(f"Newton refinement stalled at iteration {it}: merit {merit:.3e}")
            return best, False
        best = (trial_z, trial_lam, trial_mu)
        merit = trial
        logger.debug(f"Newton refinement {it}: merit={merit:.3e} step={alpha:g}")
    return best, merit <= 1.0


def solve_nlp(problem: NLPProblem, z0: np.ndarray, options: Optional[SolverOptions] = None) -> NLPResult:
    """Run the augmented-Lagrangian loop from z0.

    Status is ``converged`` when the constraint violation and the projected
    Lagrangian gradient (relative to 1 + |grad f|) are both below tolerance,
    ``feasible`` when only the violation is, ``infeasible`` when the penalty
    hit its cap with a large violation left, and ``failed`` otherwise.

    Each subproblem is solved to a tolerance omega; multipliers are updated
    when the violation is below the target eta, otherwise the penalty grows
    and both targets are reset from it. Once the violation is small,
    Newton iterations on the KKT conditions finish the solve.
    """
    opts = options or SolverOptions()
    lo, hi = problem.bounds()
    z = np.clip(np.asarray(z0, dtype=float).copy(), lo, hi)
    lam, mu = _initial_multipliers(problem, z, lo, hi)
    rho = opts.rho_init
    omega = 1.0 / rho
    eta = 0.1 / rho ** 0.1
    bounds = Bounds(lo, hi)
    inner_total = 0
    history: List[Tuple[float, float, float]] = []
    status = STATUS_FAILED
    eq_v = ineq_v = pg_norm = np.inf
    outer = 0

    for outer in range(1, opts.max_outer + 1):
        res = minimize(
            augmented_lagrangian(problem, lam, mu, rho),
            z,
            jac=True,
            method="L-BFGS-B",
            bounds=bounds,
            options={"maxiter": opts.max_inner, "gtol": max(omega, 0.1 * opts.gradient_tol), "ftol": 1e-15, "maxcor": 20},
        )
        z = np.clip(res.x, lo, hi)
        inner_total += int(res.nit)

        c, _, g, _ = _eval_constraints(problem, z)
        lam_trial = lam + rho * c
        mu_trial = np.maximum(0.0, mu + rho * g)
        eq_v, ineq_v, pg_norm, scale = _stationarity(problem, z, lam_trial, mu_trial, lo, hi)
        violation = max(eq_v, ineq_v)
        history.append((violation, pg_norm, rho))
        logger.debug(f"AL outer {outer}: violation={violation:.3e} |pg|={pg_norm:.3e} rho={rho:.1e} inner={res.nit}")

        if violation <= opts.constraint_tol and pg_norm <= opts.gradient_tol * scale:
            status = STATUS_CONVERGED
            break
        if violation <= max(eta, opts.constraint_tol):
            lam, mu = lam_trial, mu_trial
            if violation <= opts.refine_tol:
                (z_new, lam_new, mu_new), done = _newton_refine(problem, z, lam, mu, lo, hi, opts)
                eq_n, ineq_n, pg_n, _ = _stationarity(problem, z_new, lam_new, mu_new, lo, hi)
                if done or max(eq_n, ineq_n) <= opts.constraint_tol:
                    z, lam, mu = z_new, lam_new, mu_new
                    eq_v, ineq_v, pg_norm = eq_n, ineq_n, pg_n
                    history.append((max(eq_v, ineq_v), pg_norm, rho))
                if done:
                    status = STATUS_CONVERGED
                    break
            eta = max(eta / rho ** 0.9, 0.1 * opts.constraint_tol)
            omega = max(omega / rho, 0.1 * opts.gradient_tol)
        else:
            if rho >= opts.rho_max and violation > opts.infeasible_tol:
                status = STATUS_INFEASIBLE
                break
            rho = min(rho * opts.rho_growth, opts.rho_max)
            eta = 0.1 / rho ** 0.1
            omega = 1.0 / rho
    else:
        violation = max(eq_v, ineq_v)
        if violation <= opts.constraint_tol:
            status = STATUS_FEASIBLE
        elif rho >= opts.rho_max and violation > opts.infeasible_tol:
            status = STATUS_INFEASIBLE
        else:
            status = STATUS_FAILED

    f, _ = problem.objective(z)
    return NLPResult(
        z=z,
        objective=float(f),
        status=status,
        eq_violation=eq_v,
        ineq_violation=ineq_v,
        gradient_norm=pg_norm,
        outer_iterations=outer,
        inner_iterations=inner_total,
        history=history,
    )
