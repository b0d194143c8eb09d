"""
Builds insertion maps and trajectory libraries for a pipeline config.

Grid solves are grouped into chunks of consecutive points (one chunk per
line of the last grid dimension, and per target); points inside a chunk
are solved in order, each warm-started from the previous feasible one.
Chunks are independent and go to the worker pool, so results do not
depend on the worker count.
"""
from dataclasses import dataclass
from functools import partial
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from app.errors import DesignError
from app.models import ModelBundle, build_model
from app.schemas.config import GaitSettings, InsertionSettings, LibrarySettings, OptimizerSettings, PipelineConfig
from app.services.gait_service import PeriodicGait, gait_library, optimize_gait_transition
from app.services.library_service import (
    InsertionMap,
    LibraryEntry,
    TrajectoryLibrary,
    build_insertion_backstepping,
    build_insertion_from_orbits,
    sample_grid,
)
from app.services.orbit_service import cart_pendulum_orbit
from app.services.trajopt_service import CostKind, CostSpec, OptimizerResult, optimize_regulation, optimize_transition
from app.services.worker_pool import WorkerPool


# gait library persistence


def gaits_to_library(gaits: Sequence[PeriodicGait], period: float) -> TrajectoryLibrary:
    entries = []
    for i, g in enumerate(gaits):
        if g.result is None:
            entries.append(LibraryEntry(i, np.array([g.speed]), g.status, float("inf"), float("inf"), float("inf")))
        else:
            entries.append(LibraryEntry.from_result(i, [g.speed], g.result))
    return TrajectoryLibrary(model="biped3", kind="gait", period=period, entries=entries)


def gaits_from_library(lib: TrajectoryLibrary) -> List[PeriodicGait]:
    gaits = []
    for e in lib.entries:
        result = None
        if e.segments:
            result = OptimizerResult(segments=e.segments, cost=e.cost, status=e.status,
                                     eq_violation=e.eq_violation, ineq_violation=e.ineq_violation,
                                     iterations=0, inner_iterations=0)
        gaits.append(PeriodicGait(speed=float(e.point[0]), period=lib.period, status=e.status, result=result))
    return gaits


def build_gaits(bundle: ModelBundle, settings: GaitSettings) -> List[PeriodicGait]:
    if not bundle.is_hybrid:
        raise DesignError(f"{bundle.name} is not a walking model")
    return gait_library(bundle.hybrid, bundle.mechanics, settings.speeds, settings)


# insertion maps


def orbit_midpoint_samples(bundle: ModelBundle, settings: InsertionSettings) -> Tuple[np.ndarray, np.ndarray]:
    """(x1, x2) midpoints of the pendulum orbits on the insertion orbit grid."""
    x1s, x2s = [], []
    for p0, dp0 in sample_grid(settings.orbit_grid):
        try:
            orbit = cart_pendulum_orbit(bundle.params, p0, dp0)
        except DesignError as exc:
            logger.warning(f"orbit ({p0:.3f}, {dp0:.3f}) skipped: {exc}")
            continue
        x1, x2 = bundle.system.decomposition.split(orbit.midpoint)
        x1s.append(x1)
        x2s.append(x2)
    if not x1s:
        raise DesignError("no periodic orbit found on the insertion orbit grid")
    return np.array(x1s), np.array(x2s)


def build_insertion(
    bundle: ModelBundle,
    settings: InsertionSettings,
    gaits: Optional[Sequence[PeriodicGait]] = None,
) -> Optional[InsertionMap]:
    """Insertion map of the configured kind, or None for full-state libraries."""
    if settings.kind == "none":
        return None
    if settings.kind == "linear-backstepping":
        system = bundle.prefeedback or bundle.system
        return build_insertion_backstepping(system, gains=settings.gains, poles=settings.poles)
    if bundle.is_hybrid:
        feasible = [g for g in gaits or [] if g.feasible]
        if not feasible:
            raise DesignError("orbit-regression insertion needs at least one feasible gait")
        dec = bundle.system.decomposition
        x1s = np.array([dec.split(g.midpoint)[0] for g in feasible])
        x2s = np.array([dec.split(g.midpoint)[1] for g in feasible])
        return build_insertion_from_orbits(x1s, x2s)
    return build_insertion_from_orbits(*orbit_midpoint_samples(bundle, settings))


# grid solves


@dataclass(frozen=True)
class ChunkTask:
    """Picklable description of consecutive grid solves."""

    model: str
    params: Dict
    kind: str
    indices: Tuple[int, ...]
    points: np.ndarray
    optimizer: OptimizerSettings
    insertion: Optional[InsertionMap] = None
    impose_boundary: bool = True
    target: Optional[np.ndarray] = None
    gait: Optional[PeriodicGait] = None
    gait_settings: Optional[GaitSettings] = None


def _weights(optimizer: OptimizerSettings, n: int, m: int) -> Tuple[np.ndarray, np.ndarray]:
    Q = np.eye(n) if optimizer.cost.Q is None else np.asarray(optimizer.cost.Q, dtype=float)
    R = np.eye(m) if optimizer.cost.R is None else np.asarray(optimizer.cost.R, dtype=float)
    return Q, R


def regulation_cost(system, optimizer: OptimizerSettings) -> CostSpec:
    Q, R = _weights(optimizer, system.n, system.m)
    c = optimizer.cost
    return CostSpec(CostKind.REGULATION, Q, R, barrier_weight=c.barrier_weight,
                    barrier_half_width=c.barrier_half_width, barrier_index=c.barrier_index)


def regulation_solver(system, optimizer: OptimizerSettings, period: float) -> Callable[[np.ndarray], OptimizerResult]:
    """x -> regulation solve from x with the configured horizon, used for receding-horizon control."""
    lyap = None if optimizer.lyapunov is None else (np.asarray(optimizer.lyapunov.P, dtype=float), optimizer.lyapunov.ratio)
    return partial(
        optimize_regulation,
        system,
        cost=regulation_cost(system, optimizer),
        N=optimizer.horizon_periods * optimizer.intervals_per_period,
        T_h=optimizer.horizon_periods * period,
        lyapunov=lyap,
        input_bounds=optimizer.input_bounds,
        options=optimizer.solver,
    )


def _solve_point(task: ChunkTask, bundle: ModelBundle, point: np.ndarray, guess):
    opt = task.optimizer
    N = opt.horizon_periods * opt.intervals_per_period
    T_h = opt.horizon_periods * bundle.period
    if task.kind in ("full-state", "reduced"):
        system = bundle.system
        cost = regulation_cost(system, opt)
        if task.kind == "reduced":
            xi = system.decomposition.merge(point, task.insertion(point))
            boundary = task.insertion if task.impose_boundary else None
        else:
            xi, boundary = point, None
        lyap = None if opt.lyapunov is None else (np.asarray(opt.lyapunov.P, dtype=float), opt.lyapunov.ratio)
        result = optimize_regulation(system, xi, cost, N, T_h, boundary_map=boundary, lyapunov=lyap,
                                     input_bounds=opt.input_bounds, options=opt.solver, initial_guess=guess)
        return xi, result.restricted(bundle.period)
    if task.kind == "orbit-transition":
        system = bundle.prefeedback
        target = cart_pendulum_orbit(bundle.params, *task.target)
        Q, R = _weights(opt, system.n, system.m)
        result = optimize_transition(system, point, task.insertion, target, Q, R, N,
                                     horizon_periods=opt.horizon_periods, input_bounds=opt.input_bounds,
                                     impose_boundary=task.impose_boundary, options=opt.solver, initial_guess=guess)
        return point, result
    # gait-transition: the point is an offset of x1 from the target gait's midpoint
    xi1 = task.gait.x1 + point
    Q, R = _weights(opt, bundle.system.n, bundle.system.m)
    result = optimize_gait_transition(bundle.hybrid, bundle.mechanics, xi1, task.insertion, task.gait, Q, R,
                                      horizon_steps=opt.horizon_periods, settings=task.gait_settings,
                                      impose_boundary=task.impose_boundary)
    return xi1, result


def solve_chunk(task: ChunkTask) -> List[LibraryEntry]:
    """Worker entry point: solve a chunk of grid points in order."""
    bundle = build_model(task.model, task.params)
    entries = []
    guess = None
    for index, point in zip(task.indices, task.points):
        x0, result = _solve_point(task, bundle, np.asarray(point, dtype=float), guess)
        entries.append(LibraryEntry.from_result(index, x0, result, target=task.target))
        if task.optimizer.warm_start and result.feasible:
            source = result.full or result
            guess = source.z
        else:
            guess = None
    return entries


def _chunks(points: np.ndarray, size: int, start: int) -> List[Tuple[Tuple[int, ...], np.ndarray]]:
    out = []
    for a in range(0, len(points), size):
        block = points[a:a + size]
        out.append((tuple(range(start + a, start + a + len(block))), block))
    return out


def plan_chunks(
    bundle: ModelBundle,
    config: PipelineConfig,
    insertion: Optional[InsertionMap],
    gaits: Optional[Sequence[PeriodicGait]] = None,
) -> List[ChunkTask]:
    """Chunk tasks in library order (target-major, then the grid row-major)."""
    lib: LibrarySettings = config.library
    grid = sample_grid(lib.grid)
    size = lib.grid.dims[-1].count
    common = dict(
        model=bundle.name,
        params=bundle.params.model_dump(),
        kind=lib.kind,
        optimizer=config.optimizer,
        insertion=insertion,
        impose_boundary=config.insertion.impose_boundary,
    )
    tasks = []
    if lib.kind in ("full-state", "reduced"):
        for idx, block in _chunks(grid, size, 0):
            tasks.append(ChunkTask(indices=idx, points=block, **common))
    elif lib.kind == "orbit-transition":
        for k, target in enumerate(sample_grid(lib.targets)):
            for idx, block in _chunks(grid, size, k * len(grid)):
                tasks.append(ChunkTask(indices=idx, points=block, target=target, **common))
    else:
        for k, gait in enumerate(gaits or []):
            for idx, block in _chunks(grid, size, k * len(grid)):
                tasks.append(ChunkTask(indices=idx, points=block, target=np.array([gait.speed]),
                                       gait=gait, gait_settings=config.gait, **common))
    return tasks


def build_library(
    bundle: ModelBundle,
    config: PipelineConfig,
    insertion: Optional[InsertionMap] = None,
    gaits: Optional[Sequence[PeriodicGait]] = None,
    workers: Optional[int] = None,
) -> TrajectoryLibrary:
    """Solve every grid point of the configured library.

    Points whose target gait is infeasible are stored as infeasible entries.
    """
    lib = config.library
    if lib.kind == "gait-transition" and gaits is None:
        raise DesignError("gait-transition libraries need a gait library")
    feasible_gaits = [g for g in gaits or [] if g.feasible]
    tasks = plan_chunks(bundle, config, insertion, feasible_gaits)
    logger.info(f"{lib.kind} library: {sum(len(t.indices) for t in tasks)} points in {len(tasks)} chunks")
    entries: List[LibraryEntry] = []
    for chunk in WorkerPool(workers).map(solve_chunk, tasks):
        entries.extend(chunk)

    if lib.kind == "gait-transition":
        grid = sample_grid(lib.grid)
        for g in gaits:
            if g.feasible:
                continue
            start = len(entries)
            for j, offset in enumerate(grid):
                entries.append(LibraryEntry(start + j, np.asarray(offset), "infeasible", float("inf"),
                                            float("inf"), float("inf"), target=np.array([g.speed])))
    library = TrajectoryLibrary(model=bundle.name, kind=lib.kind, period=bundle.period, entries=entries,
                                insertion=insertion, grid=lib.grid)
    n_ok = int(library.feasibility_mask.sum())
    logger.info(f"{lib.kind} library: {n_ok}/{len(entries)} feasible")
    if n_ok == 0:
        raise DesignError(f"{lib.kind} library has no feasible trajectory")
    return library
