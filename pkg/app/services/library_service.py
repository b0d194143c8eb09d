"""
Trajectory libraries, insertion maps and regression datasets.

A library holds one optimized trajectory per grid point, restricted to the
first period. Datasets are exact samples of those trajectories at the
configured sample times; nothing is re-interpolated.
"""
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger
from scipy.signal import place_poles

from app.errors import ContractViolationError, DependencyError, DesignError
from app.models.base import ControlSystem
from app.schemas.config import GridSpec
from app.services.simulation_service import Phase, Trajectory
from app.services.trajopt_service import OptimizerResult

DATASET_MODES = ("full-state-mu", "reduced-nu", "reduced-mu")


def sample_grid(spec: GridSpec) -> np.ndarray:
    """Grid points, shape (count, dims), row-major (last dimension fastest)."""
    axes = [np.linspace(d.min, d.max, d.count) for d in spec.dims]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


# insertion maps


@dataclass
class InsertionMap:
    """Affine map gamma(x1) = a0 + a1 x1 assigning x2 from x1."""

    kind: str
    a0: np.ndarray
    a1: np.ndarray
    residual: float = 0.0

    def __post_init__(self):
        self.a1 = np.atleast_2d(np.asarray(self.a1, dtype=float))
        self.a0 = np.asarray(self.a0, dtype=float).reshape(self.a1.shape[0])

    @property
    def n1(self) -> int:
        return self.a1.shape[1]

    @property
    def n2(self) -> int:
        return self.a1.shape[0]

    def __call__(self, x1) -> np.ndarray:
        x1 = np.asarray(x1, dtype=float)
        if x1.shape[-1] != self.n1:
            raise ContractViolationError(f"insertion map expects x1 of size {self.n1}, got {x1.shape[-1]}")
        return self.a0 + x1 @ self.a1.T

    def to_dict(self) -> Dict:
        return {"kind": self.kind, "a0": self.a0.tolist(), "a1": self.a1.tolist(), "residual": self.residual}

    @classmethod
    def from_dict(cls, data: Dict) -> "InsertionMap":
        return cls(kind=data["kind"], a0=np.array(data["a0"]), a1=np.array(data["a1"]), residual=data.get("residual", 0.0))


def _linearize(system: ControlSystem):
    A, B = system.jacobians(0.0, np.zeros((1, system.n)), np.zeros((1, system.m)))
    return A[0], B[0]


def x1_closed_loop_matrix(system: ControlSystem, gamma: InsertionMap) -> np.ndarray:
    """Linearization at 0 of x1_dot = f1(t, x1, gamma(x1)) with zero input."""
    dec = system.decomposition
    A, _ = _linearize(system)
    i1, i2 = list(dec.idx1), list(dec.idx2)
    return A[np.ix_(i1, i1)] + A[np.ix_(i1, i2)] @ gamma.a1


def build_insertion_backstepping(
    system: ControlSystem,
    gains: Optional[Sequence[Sequence[float]]] = None,
    poles: Optional[Sequence[float]] = None,
) -> InsertionMap:
    """Linear insertion map x2 = K x1 making the x1-subsystem Hurwitz.

    The x2 positions act as a virtual input to the linearized x1-subsystem
    (x2 velocities are assigned zero). Gains are taken as given and checked,
    or placed at ``poles``.

    Raises:
        DesignError: if the virtual input cannot stabilize x1, or the
            resulting closed loop is not Hurwitz
    """
    dec = system.decomposition
    if dec is None:
        raise DesignError(f"{system.name} has no state decomposition")
    n1, n2 = len(dec.idx1), len(dec.idx2)
    A, _ = _linearize(system)
    i1, i2 = list(dec.idx1), list(dec.idx2)
    A11 = A[np.ix_(i1, i1)]
    Bv = A[np.ix_(i1, i2)][:, : n2 // 2]
    ctrb = np.hstack([np.linalg.matrix_power(A11, k) @ Bv for k in range(n1)])
    if np.linalg.matrix_rank(ctrb, tol=1e-9) < n1:
        raise DesignError(f"{system.name}: x1-subsystem is not stabilizable through the x2 positions")

    if gains is not None:
        K = np.atleast_2d(np.asarray(gains, dtype=float))
        if K.shape != (n2, n1):
            raise DesignError(f"insertion gains have shape {K.shape}, expected ({n2}, {n1})")
    elif poles is not None:
        G = place_poles(A11, Bv, np.asarray(poles, dtype=float)).gain_matrix
        K = np.zeros((n2, n1))
        K[: n2 // 2] = -G
    else:
        raise DesignError("backstepping insertion needs gains or poles")

    gamma = InsertionMap(kind="linear-backstepping", a0=np.zeros(n2), a1=K)
    eig = np.linalg.eigvals(x1_closed_loop_matrix(system, gamma))
    if np.max(eig.real) >= 0:
        raise DesignError(f"closed x1-subsystem is not Hurwitz (eigenvalues {np.round(eig, 6)})")
    logger.info(f"backstepping insertion: K = {K.tolist()}, x1 eigenvalues {np.round(eig, 4)}")
    return gamma


def build_insertion_from_orbits(x1: np.ndarray, x2: np.ndarray) -> InsertionMap:
    """Least-squares affine fit of orbit midpoints x2 against x1.

    A single sample, or samples that all coincide, give the constant map
    through them.

    Raises:
        DesignError: on mismatched or empty inputs, or a rank-deficient
            regressor matrix
    """
    x1 = np.atleast_2d(np.asarray(x1, dtype=float))
    x2 = np.atleast_2d(np.asarray(x2, dtype=float))
    if x1.shape[0] != x2.shape[0] or x1.shape[0] == 0:
        raise DesignError("orbit regression needs matching, non-empty (x1, x2) samples")
    if x1.shape[0] == 1 or np.ptp(x1, axis=0).max() == 0.0 and np.ptp(x2, axis=0).max() == 0.0:
        return InsertionMap(kind="orbit-regression", a0=x2[0], a1=np.zeros((x2.shape[1], x1.shape[1])))
    Phi = np.hstack([np.ones((x1.shape[0], 1)), x1])
    if np.linalg.matrix_rank(Phi) < Phi.shape[1]:
        raise DesignError("orbit regression matrix is rank deficient; sample more distinct orbits")
    coef, *_ = np.linalg.lstsq(Phi, x2, rcond=None)
    residual = float(np.sqrt(np.mean((Phi @ coef - x2) ** 2, axis=0)).max())
    gamma = InsertionMap(kind="orbit-regression", a0=coef[0], a1=coef[1:].T, residual=residual)
    logger.info(f"orbit-regression insertion: a1 = {np.round(gamma.a1, 4).tolist()}, max RMSE {residual:.3e}")
    return gamma


# libraries


@dataclass
class LibraryEntry:
    """Stored solution for one grid point, restricted to [0, T_p]."""

    index: int
    point: np.ndarray
    status: str
    cost: float
    eq_violation: float
    ineq_violation: float
    segments: List[Tuple[Optional[Phase], Trajectory]] = field(default_factory=list)
    target: Optional[np.ndarray] = None

    @classmethod
    def from_result(cls, index: int, point, result: OptimizerResult, target=None) -> "LibraryEntry":
        return cls(
            index=index,
            point=np.asarray(point, dtype=float),
            status=result.status,
            cost=float(result.cost),
            eq_violation=float(result.eq_violation),
            ineq_violation=float(result.ineq_violation),
            segments=list(result.segments),
            target=None if target is None else np.atleast_1d(np.asarray(target, dtype=float)),
        )

    @property
    def feasible(self) -> bool:
        return self.status in ("converged", "feasible") and bool(self.segments)

    @property
    def initial_state(self) -> np.ndarray:
        return self.segments[0][1].initial_state

    @property
    def final_state(self) -> np.ndarray:
        return self.segments[-1][1].final_state

    def segment_for(self, t: float, period: float) -> Trajectory:
        """Segment holding sample time t; phase ii from T_p / 2 on (right-continuous)."""
        if len(self.segments) == 1:
            return self.segments[0][1]
        want = Phase.I if t < 0.5 * period - 1e-9 else Phase.II
        for phase, traj in self.segments:
            if phase == want:
                return traj
        raise ContractViolationError(f"entry {self.index} has no {want.value} segment")

    def sample(self, t: float, period: float) -> Tuple[np.ndarray, np.ndarray]:
        """Stored (state, input) at node time t."""
        traj = self.segment_for(t, period)
        k = traj.index_of(t)
        return traj.states[k], traj.inputs[k]

    def input_at(self, t: float, period: float) -> np.ndarray:
        traj = self.segment_for(t, period)
        return np.array([np.interp(t, traj.times, col) for col in traj.inputs.T])


@dataclass
class TrajectoryLibrary:
    """Optimized trajectories over a grid of initial conditions.

    Saved as a directory: ``manifest.json`` plus one CSV per entry whose
    first column is the segment index.
    """

    model: str
    kind: str
    period: float
    entries: List[LibraryEntry]
    insertion: Optional[InsertionMap] = None
    grid: Optional[GridSpec] = None

    @property
    def feasibility_mask(self) -> np.ndarray:
        return np.array([e.feasible for e in self.entries], dtype=bool)

    def feasible_entries(self) -> List[LibraryEntry]:
        return [e for e in self.entries if e.feasible]

    def points(self) -> np.ndarray:
        return np.array([e.point for e in self.entries])

    def boundary_residuals(self, decomposition) -> np.ndarray:
        """|gamma(x1(T_p)) - x2(T_p)|_inf per feasible entry."""
        if self.insertion is None:
            raise DependencyError("library has no insertion map")
        out = []
        for e in self.feasible_entries():
            x1, x2 = decomposition.split(e.final_state)
            out.append(float(np.max(np.abs(self.insertion(x1) - x2))))
        return np.array(out)

    def save(self, directory: Union[str, Path]) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        manifest = {
            "model": self.model,
            "kind": self.kind,
            "period": self.period,
            "insertion": None if self.insertion is None else self.insertion.to_dict(),
            "grid": None if self.grid is None else self.grid.model_dump(),
            "entries": [],
        }
        for e in self.entries:
            fname = f"traj_{e.index:05d}.csv"
            manifest["entries"].append({
                "index": e.index,
                "point": e.point.tolist(),
                "target": None if e.target is None else e.target.tolist(),
                "status": e.status,
                "cost": e.cost,
                "eq_violation": e.eq_violation,
                "ineq_violation": e.ineq_violation,
                "phases": [None if ph is None else ph.value for ph, _ in e.segments],
                "file": fname if e.segments else None,
            })
            if e.segments:
                rows = [np.column_stack([np.full(tr.times.size, s), tr.times, tr.states, tr.inputs])
                        for s, (_, tr) in enumerate(e.segments)]
                tr0 = e.segments[0][1]
                header = ",".join(["segment"] + tr0.columns())
                np.savetxt(directory / fname, np.vstack(rows), delimiter=",", header=header, comments="", fmt="%.17g")
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
        logger.info(f"library saved to {directory} ({int(self.feasibility_mask.sum())}/{len(self.entries)} feasible)")
        return directory

    @classmethod
    def load(cls, directory: Union[str, Path]) -> "TrajectoryLibrary":
        directory = Path(directory)
        path = directory / "manifest.json"
        if not path.exists():
            raise DependencyError(f"no trajectory library at {directory}")
        manifest = json.loads(path.read_text())
        entries = []
        for item in manifest["entries"]:
            segments = []
            if item["file"]:
                data = np.loadtxt(directory / item["file"], delimiter=",", skiprows=1, ndmin=2)
                with open(directory / item["file"]) as fh:
                    header = fh.readline().strip().split(",")
                n = sum(1 for c in header if c.startswith("x"))
                for s, phase in enumerate(item["phases"]):
                    rows = data[data[:, 0] == s]
                    segments.append((None if phase is None else Phase(phase),
                                     Trajectory(rows[:, 1], rows[:, 2:2 + n], rows[:, 2 + n:])))
            entries.append(LibraryEntry(
                index=item["index"],
                point=np.array(item["point"], dtype=float),
                status=item["status"],
                cost=item["cost"],
                eq_violation=item["eq_violation"],
                ineq_violation=item["ineq_violation"],
                segments=segments,
                target=None if item["target"] is None else np.array(item["target"], dtype=float),
            ))
        return cls(
            model=manifest["model"],
            kind=manifest["kind"],
            period=manifest["period"],
            entries=entries,
            insertion=None if manifest["insertion"] is None else InsertionMap.from_dict(manifest["insertion"]),
            grid=None if manifest["grid"] is None else GridSpec.model_validate(manifest["grid"]),
        )


# datasets


@dataclass(frozen=True)
class FeatureMap:
    """(t, x[, target]) -> regression features.

    x1 features are the x1 block of the state, or ``coordinate_map @ x`` when
    a coordinate change is configured, or the whole state for full-state
    regression; ``drop`` removes cyclic entries.
    """

    x1_index: Tuple[int, ...]
    full_state: bool = False
    coordinate_map: Optional[Tuple[Tuple[float, ...], ...]] = None
    drop: Tuple[int, ...] = ()
    n_targets: int = 0

    def x1_features(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.full_state:
            F = X
        elif self.coordinate_map is not None:
            F = X @ np.asarray(self.coordinate_map, dtype=float).T
        else:
            F = X[:, list(self.x1_index)]
        if self.drop:
            F = np.delete(F, list(self.drop), axis=1)
        return F

    def __call__(self, t, X, targets=None) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        t = np.broadcast_to(np.asarray(t, dtype=float), (X.shape[0],))
        cols = [t[:, None], self.x1_features(X)]
        if self.n_targets:
            if targets is None:
                raise ContractViolationError("feature map needs target orbit parameters")
            cols.append(np.broadcast_to(np.asarray(targets, dtype=float), (X.shape[0], self.n_targets)))
        return np.hstack(cols)

    def to_dict(self) -> Dict:
        return {
            "x1_index": list(self.x1_index),
            "full_state": self.full_state,
            "coordinate_map": None if self.coordinate_map is None else [list(r) for r in self.coordinate_map],
            "drop": list(self.drop),
            "n_targets": self.n_targets,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "FeatureMap":
        cmap = data.get("coordinate_map")
        return cls(
            x1_index=tuple(data["x1_index"]),
            full_state=data.get("full_state", False),
            coordinate_map=None if cmap is None else tuple(tuple(r) for r in cmap),
            drop=tuple(data.get("drop", ())),
            n_targets=data.get("n_targets", 0),
        )


@dataclass
class Dataset:
    """Feature/label rows with their library provenance.

    The first feature column is always the sample time.
    """

    mode: str
    feature_names: List[str]
    label_names: List[str]
    features: np.ndarray
    labels: np.ndarray
    provenance: np.ndarray
    feature_map: Optional[FeatureMap] = None
    stats: Optional[Dict[str, List[float]]] = None

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=float))
        self.labels = np.atleast_2d(np.asarray(self.labels, dtype=float))
        self.provenance = np.asarray(self.provenance, dtype=int)
        if not (self.features.shape[0] == self.labels.shape[0] == self.provenance.size):
            raise ContractViolationError("dataset features, labels and provenance differ in row count")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def times(self) -> np.ndarray:
        return self.features[:, 0]

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        return Dataset(self.mode, self.feature_names, self.label_names, self.features[rows],
                       self.labels[rows], self.provenance[rows], self.feature_map, self.stats)

    def split(self, validation_ratio: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
        """Seeded shuffle into (train, validation) row indices."""
        if not 0.0 < validation_ratio < 1.0:
            raise ContractViolationError("validation ratio must lie in (0, 1)")
        rng = np.random.default_rng(seed)
        order = rng.permutation(len(self))
        n_val = max(1, int(round(validation_ratio * len(self))))
        return np.sort(order[n_val:]), np.sort(order[:n_val])

    def standardization(self, rows) -> Dict[str, List[float]]:
        """Per-column mean and std of the given rows; stored in ``stats``."""
        F = self.features[np.asarray(rows)]
        std = F.std(axis=0)
        std[std < 1e-12] = 1.0
        self.stats = {"mean": F.mean(axis=0).tolist(), "std": std.tolist()}
        return self.stats

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        header = ",".join(["entry"] + [f"f_{n}" for n in self.feature_names] + [f"y_{n}" for n in self.label_names])
        data = np.column_stack([self.provenance, self.features, self.labels])
        np.savetxt(path, data, delimiter=",", header=header, comments="", fmt="%.17g")
        meta = {"mode": self.mode, "stats": self.stats,
                "feature_map": None if self.feature_map is None else self.feature_map.to_dict()}
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2))
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Dataset":
        path = Path(path)
        if not path.exists():
            raise DependencyError(f"no dataset at {path}")
        with open(path) as fh:
            header = fh.readline().strip().split(",")
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        f_cols = [i for i, c in enumerate(header) if c.startswith("f_")]
        y_cols = [i for i, c in enumerate(header) if c.startswith("y_")]
        meta = json.loads(path.with_suffix(".json").read_text())
        fmap = meta.get("feature_map")
        return cls(
            mode=meta["mode"],
            feature_names=[header[i][2:] for i in f_cols],
            label_names=[header[i][2:] for i in y_cols],
            features=data[:, f_cols],
            labels=data[:, y_cols],
            provenance=data[:, 0].astype(int),
            feature_map=None if fmap is None else FeatureMap.from_dict(fmap),
            stats=meta.get("stats"),
        )


def sample_times(period: float, samples_per_period: int) -> np.ndarray:
    """j T_p / k for j = 0..k."""
    return period * np.arange(samples_per_period + 1) / samples_per_period


def assemble_dataset(
    lib: TrajectoryLibrary,
    mode: str,
    decomposition,
    times: Sequence[float],
    coordinate_map: Optional[Sequence[Sequence[float]]] = None,
    drop_cyclic: Sequence[int] = (),
    input_map: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None,
) -> Dataset:
    """Arrange library samples into a regression dataset.

    Modes: ``full-state-mu`` (t, x) -> u; ``reduced-nu`` (t, x1) -> x2;
    ``reduced-mu`` (t, x1) -> u, with u passed through ``input_map`` (e.g.
    physical input to commanded x2 acceleration) when given. Entries carrying
    target orbit parameters append them as features.

    Raises:
        ContractViolationError: on an unknown mode
        DesignError: if no feasible entry is left
    """
    if mode not in DATASET_MODES:
        raise ContractViolationError(f"unknown dataset mode {mode!r}; expected one of {DATASET_MODES}")
    entries = lib.feasible_entries()
    if not entries:
        raise DesignError(f"library {lib.kind} has no feasible trajectories")
    dropped = len(lib.entries) - len(entries)
    if dropped:
        logger.warning(f"dataset {mode}: {dropped} infeasible library entries excluded")

    n_targets = 0 if entries[0].target is None else entries[0].target.size
    fmap = FeatureMap(
        x1_index=tuple(decomposition.idx1),
        full_state=(mode == "full-state-mu"),
        coordinate_map=None if coordinate_map is None or mode == "full-state-mu"
        else tuple(tuple(float(v) for v in r) for r in coordinate_map),
        drop=tuple(drop_cyclic) if mode != "full-state-mu" else (),
        n_targets=n_targets,
    )
    times = np.asarray(times, dtype=float)
    F, Y, P = [], [], []
    for e in entries:
        X = np.empty((times.size, decomposition.n))
        U = []
        for j, t in enumerate(times):
            X[j], u = e.sample(t, lib.period)
            U.append(u)
        U = np.array(U)
        F.append(fmap(times, X, e.target))
        if mode == "reduced-nu":
            Y.append(X[:, list(decomposition.idx2)])
        elif mode == "reduced-mu" and input_map is not None:
            Y.append(np.atleast_2d(np.asarray(input_map(X, U), dtype=float)).reshape(times.size, -1))
        else:
            Y.append(U)
        P.append(np.full(times.size, e.index))

    n_feat_x = F[0].shape[1] - 1 - n_targets
    feature_names = ["t"] + [f"x{i}" for i in range(n_feat_x)] + [f"target{i}" for i in range(n_targets)]
    labels = np.vstack(Y)
    label_names = ([f"x2_{i}" for i in range(labels.shape[1])] if mode == "reduced-nu"
                   else [f"u{i}" for i in range(labels.shape[1])])
    ds = Dataset(mode, feature_names, label_names, np.vstack(F), labels, np.concatenate(P), fmap)
    logger.info(f"dataset {mode}: {len(ds)} rows from {len(entries)} trajectories")
    return ds


@dataclass
class InjectivityReport:
    """Singular values of the centered x1-feature matrix at each sample time."""

    times: np.ndarray
    singular_values: np.ndarray
    threshold: float

    @property
    def ratios(self) -> np.ndarray:
        s = self.singular_values
        return s[:, 1] / np.maximum(s[:, 0], 1e-300) if s.shape[1] > 1 else np.ones(s.shape[0])

    @property
    def flagged_times(self) -> np.ndarray:
        return self.times[self.ratios < self.threshold]

    @property
    def min_sigma2(self) -> float:
        return float(self.singular_values[:, 1].min()) if self.singular_values.shape[1] > 1 else float("nan")

    def to_csv(self, path: Union[str, Path]) -> None:
        k = self.singular_values.shape[1]
        header = ",".join(["t"] + [f"sigma{i + 1}" for i in range(k)])
        np.savetxt(path, np.column_stack([self.times, self.singular_values]), delimiter=",",
                   header=header, comments="", fmt="%.17g")


def injectivity_diagnostic(dataset: Dataset, threshold: float = 1e-3) -> InjectivityReport:
    """Per sample time, SVD of the mean-centered x1 features across trajectories."""
    n_targets = 0 if dataset.feature_map is None else dataset.feature_map.n_targets
    stop = dataset.features.shape[1] - n_targets
    times = np.unique(dataset.times)
    sv = []
    for t in times:
        rows = dataset.features[np.abs(dataset.times - t) <= 1e-9, 1:stop]
        if rows.shape[0] < rows.shape[1] + 1:
            raise ContractViolationError(f"injectivity check needs at least {rows.shape[1] + 1} samples at t = {t}")
        sv.append(np.linalg.svd(rows - rows.mean(axis=0), compute_uv=False))
    report = InjectivityReport(times=times, singular_values=np.array(sv), threshold=threshold)
    if report.flagged_times.size:
        logger.warning(
            f"x1 features lose rank (sigma2/sigma1 < {threshold:g}) at t = {np.round(report.flagged_times, 3).tolist()}; "
            f"consider a coordinate change of the x1 features"
        )
    return report
