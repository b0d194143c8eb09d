"""
Regression of nu and mu from trajectory datasets.

One hidden tanh layer, trained full-batch with Adam proposals and L2 weight
decay. A proposal that raises the training loss is rejected and the step
size halved, so the accepted loss sequence never increases. The weights
with the lowest validation loss are kept.
"""
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger

from app.errors import ContractViolationError, DependencyError, TrainingError
from app.metrics.prometheus import metrics_collector
from app.schemas.config import RegressionSettings
from app.services.library_service import Dataset
from app.services.worker_pool import WorkerPool

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
MIN_STEP = 1e-12
GRADIENT_CHECK_TOL = 1e-5


@dataclass
class FitReport:
    name: str
    train_mse: float
    validation_mse: float
    rmse: List[float]
    worst_residual: float
    worst_entry: int
    epochs: int
    accepted_steps: int
    loss_history: List[float] = field(default_factory=list, repr=False)

    def to_dict(self) -> Dict:
        out = asdict(self)
        out.pop("loss_history")
        return out


class Regressor:
    """Trained network with its feature and label standardization.

    Evaluation is a pure function of the stored arrays.
    """

    def __init__(self, W1, b1, W2, b2, x_mean, x_std, y_mean, y_std, meta: Optional[Dict] = None):
        self.W1 = np.asarray(W1, dtype=float)
        self.b1 = np.asarray(b1, dtype=float)
        self.W2 = np.asarray(W2, dtype=float)
        self.b2 = np.asarray(b2, dtype=float)
        self.x_mean = np.asarray(x_mean, dtype=float)
        self.x_std = np.asarray(x_std, dtype=float)
        self.y_mean = np.asarray(y_mean, dtype=float)
        self.y_std = np.asarray(y_std, dtype=float)
        self.meta = dict(meta or {})

    @property
    def n_in(self) -> int:
        return self.W1.shape[1]

    @property
    def n_out(self) -> int:
        return self.W2.shape[0]

    @property
    def hidden(self) -> int:
        return self.W1.shape[0]

    @property
    def domain(self) -> Optional[Tuple[float, float]]:
        d = self.meta.get("domain")
        return None if d is None else (float(d[0]), float(d[1]))

    def _prepare(self, features) -> Tuple[np.ndarray, bool]:
        F = np.asarray(features, dtype=float)
        single = F.ndim == 1
        F = np.atleast_2d(F)
        if F.shape[1] != self.n_in:
            raise ContractViolationError(f"regressor expects {self.n_in} features, got {F.shape[1]}")
        return F, single

    def evaluate(self, features) -> np.ndarray:
        F, single = self._prepare(features)
        H = np.tanh(((F - self.x_mean) / self.x_std) @ self.W1.T + self.b1)
        Y = (H @ self.W2.T + self.b2) * self.y_std + self.y_mean
        return Y[0] if single else Y

    __call__ = evaluate

    def input_gradient(self, features) -> np.ndarray:
        """d outputs / d features, shape (K, n_out, n_in) (or (n_out, n_in) for one row)."""
        F, single = self._prepare(features)
        H = np.tanh(((F - self.x_mean) / self.x_std) @ self.W1.T + self.b1)
        inner = (1.0 - H ** 2)[:, None, :] * self.W2[None, :, :]
        J = self.y_std[None, :, None] * (inner @ self.W1) / self.x_std[None, None, :]
        return J[0] if single else J

    def in_training_box(self, features) -> np.ndarray:
        """True for rows inside the bounding box of the training features."""
        F, _ = self._prepare(features)
        lo = np.asarray(self.meta.get("feature_min", np.full(self.n_in, -np.inf)))
        hi = np.asarray(self.meta.get("feature_max", np.full(self.n_in, np.inf)))
        return np.all((F >= lo - 1e-12) & (F <= hi + 1e-12), axis=1)

    def save(self, directory: Union[str, Path], name: str) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for key in ("W1", "b1", "W2", "b2", "x_mean", "x_std", "y_mean", "y_std"):
            np.savetxt(directory / f"{name}.{key}.csv", np.atleast_2d(getattr(self, key)), delimiter=",", fmt="%.17g")
        manifest = {"name": name, "n_in": self.n_in, "n_out": self.n_out, "hidden": self.hidden, "meta": self.meta}
        path = directory / f"{name}.json"
        path.write_text(json.dumps(manifest, indent=2))
        return path

    @classmethod
    def load(cls, directory: Union[str, Path], name: str) -> "Regressor":
        directory = Path(directory)
        path = directory / f"{name}.json"
        if not path.exists():
            raise DependencyError(f"no regressor {name!r} in {directory}")
        manifest = json.loads(path.read_text())

        def arr(key, vector=True):
            a = np.loadtxt(directory / f"{name}.{key}.csv", delimiter=",", ndmin=2)
            return a.ravel() if vector else a

        return cls(arr("W1", False), arr("b1"), arr("W2", False), arr("b2"),
                   arr("x_mean"), arr("x_std"), arr("y_mean"), arr("y_std"), manifest["meta"])


# training internals


def _shapes(n_in: int, hidden: int, n_out: int):
    return [(hidden, n_in), (hidden,), (n_out, hidden), (n_out,)]


def _unflatten(theta: np.ndarray, shapes) -> List[np.ndarray]:
    out, k = [], 0
    for s in shapes:
        size = int(np.prod(s))
        out.append(theta[k:k + size].reshape(s))
        k += size
    return out


def _loss_and_grad(theta, shapes, X, Y, weight_decay: float) -> Tuple[float, np.ndarray]:
    W1, b1, W2, b2 = _unflatten(theta, shapes)
    H = np.tanh(X @ W1.T + b1)
    E = H @ W2.T + b2 - Y
    loss = float(np.mean(E ** 2) + weight_decay * (np.sum(W1 ** 2) + np.sum(W2 ** 2)))
    dY = 2.0 * E / E.size
    gW2 = dY.T @ H + 2.0 * weight_decay * W2
    gb2 = dY.sum(axis=0)
    dZ = (dY @ W2) * (1.0 - H ** 2)
    gW1 = dZ.T @ X + 2.0 * weight_decay * W1
    gb1 = dZ.sum(axis=0)
    return loss, np.concatenate([gW1.ravel(), gb1, gW2.ravel(), gb2])


def _mse(theta, shapes, X, Y) -> float:
    W1, b1, W2, b2 = _unflatten(theta, shapes)
    return float(np.mean((np.tanh(X @ W1.T + b1) @ W2.T + b2 - Y) ** 2))


def _initial_weights(rng: np.random.Generator, n_in: int, hidden: int, n_out: int) -> np.ndarray:
    # zero output layer: constant labels are fitted exactly from the start
    W1 = rng.uniform(-1.0, 1.0, size=(hidden, n_in)) / np.sqrt(n_in)
    return np.concatenate([W1.ravel(), np.zeros(hidden), np.zeros(n_out * hidden), np.zeros(n_out)])


def gradient_check(theta, shapes, X, Y, weight_decay: float, n_checks: int = 10, seed: int = 0,
                   step: float = 1e-6) -> float:
    """Worst relative error of back-propagated directional derivatives against central differences.

    Each check is taken at a random perturbation of ``theta`` along a random direction.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_checks):
        point = theta + 0.1 * rng.standard_normal(theta.size)
        direction = rng.standard_normal(theta.size)
        direction /= np.linalg.norm(direction)
        _, g = _loss_and_grad(point, shapes, X, Y, weight_decay)
        analytic = float(g @ direction)
        fp, _ = _loss_and_grad(point + step * direction, shapes, X, Y, weight_decay)
        fm, _ = _loss_and_grad(point - step * direction, shapes, X, Y, weight_decay)
        numeric = (fp - fm) / (2.0 * step)
        scale = max(abs(analytic), abs(numeric), 1e-6)
        worst = max(worst, abs(analytic - numeric) / scale)
    return worst


def fit_arrays(
    features: np.ndarray,
    labels: np.ndarray,
    train_rows: np.ndarray,
    validation_rows: np.ndarray,
    hp: RegressionSettings,
    seed: Optional[int] = None,
    name: str = "regressor",
    provenance: Optional[np.ndarray] = None,
) -> Tuple[Regressor, FitReport]:
    """Train on ``train_rows``, early-stop on ``validation_rows``.

    Raises:
        ContractViolationError: on empty or overlapping splits
        TrainingError: if back-propagation disagrees with finite differences,
            or the loss becomes non-finite
    """
    F = np.atleast_2d(np.asarray(features, dtype=float))
    Y = np.atleast_2d(np.asarray(labels, dtype=float))
    train_rows = np.asarray(train_rows, dtype=int)
    validation_rows = np.asarray(validation_rows, dtype=int)
    if train_rows.size == 0 or validation_rows.size == 0:
        raise ContractViolationError(f"{name}: empty training or validation split")
    if np.intersect1d(train_rows, validation_rows).size:
        raise ContractViolationError(f"{name}: training and validation rows overlap")
    seed = hp.seed if seed is None else seed

    Ft, Yt = F[train_rows], Y[train_rows]
    x_mean, x_std = Ft.mean(axis=0), Ft.std(axis=0)
    y_mean, y_std = Yt.mean(axis=0), Yt.std(axis=0)
    x_std[x_std < 1e-12] = 1.0
    y_std[y_std < 1e-12] = 1.0
    Xs, Ys = (F - x_mean) / x_std, (Y - y_mean) / y_std
    Xt, Yt_s = Xs[train_rows], Ys[train_rows]
    Xv, Yv_s = Xs[validation_rows], Ys[validation_rows]

    shapes = _shapes(F.shape[1], hp.hidden, Y.shape[1])
    rng = np.random.default_rng(seed)
    theta = _initial_weights(rng, F.shape[1], hp.hidden, Y.shape[1])

    err = gradient_check(theta, shapes, Xt, Yt_s, hp.weight_decay, seed=seed)
    if err > GRADIENT_CHECK_TOL:
        raise TrainingError(f"{name}: back-propagation disagrees with finite differences ({err:.2e})", epoch=0)

    loss, g = _loss_and_grad(theta, shapes, Xt, Yt_s, hp.weight_decay)
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    lr = hp.learning_rate
    best_theta, best_val = theta.copy(), _mse(theta, shapes, Xv, Yv_s)
    since_best, accepted, epoch = 0, 0, 0
    history = [loss]
    for epoch in range(1, hp.max_epochs + 1):
        m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * g ** 2
        m_hat = m / (1.0 - ADAM_BETA1 ** epoch)
        v_hat = v / (1.0 - ADAM_BETA2 ** epoch)
        candidate = theta - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        c_loss, c_g = _loss_and_grad(candidate, shapes, Xt, Yt_s, hp.weight_decay)
        if not np.isfinite(c_loss):
            raise TrainingError(f"{name}: non-finite training loss", epoch=epoch)
        if c_loss <= loss:
            theta, loss, g = candidate, c_loss, c_g
            accepted += 1
            lr = min(1.1 * lr, hp.learning_rate)
        else:
            lr *= 0.5
        history.append(loss)

        val = _mse(theta, shapes, Xv, Yv_s)
        if val < best_val:
            best_theta, best_val, since_best = theta.copy(), val, 0
        else:
            since_best += 1
        if since_best >= hp.patience or lr < MIN_STEP:
            logger.debug(f"{name}: stopping at epoch {epoch} (lr {lr:.1e}, {since_best} epochs without improvement)")
            break
        if epoch % 500 == 0:
            logger.debug(f"{name}: epoch {epoch}, loss {loss:.3e}, validation {val:.3e}")

    W1, b1, W2, b2 = (a.copy() for a in _unflatten(best_theta, shapes))
    reg = Regressor(W1, b1, W2, b2, x_mean, x_std, y_mean, y_std, meta={
        "name": name,
        "seed": seed,
        "epochs": epoch,
        "hidden": hp.hidden,
        "weight_decay": hp.weight_decay,
        "validation_rows": validation_rows.tolist(),
        "feature_min": Ft.min(axis=0).tolist(),
        "feature_max": Ft.max(axis=0).tolist(),
    })

    pred = reg.evaluate(F)
    resid = pred - Y
    train_res = np.abs(resid[train_rows]).max(axis=1)
    worst = int(np.argmax(train_res))
    report = FitReport(
        name=name,
        train_mse=float(np.mean(resid[train_rows] ** 2)),
        validation_mse=float(np.mean(resid[validation_rows] ** 2)),
        rmse=np.sqrt(np.mean(resid[validation_rows] ** 2, axis=0)).tolist(),
        worst_residual=float(train_res[worst]),
        worst_entry=int(provenance[train_rows[worst]]) if provenance is not None else int(train_rows[worst]),
        epochs=epoch,
        accepted_steps=accepted,
        loss_history=history,
    )
    reg.meta.update({"train_mse": report.train_mse, "validation_mse": report.validation_mse,
                     "worst_residual": report.worst_residual})
    metrics_collector.set_validation_mse(name, report.validation_mse)
    logger.info(f"{name}: train MSE {report.train_mse:.3e}, validation MSE {report.validation_mse:.3e} "
                f"after {epoch} epochs ({accepted} accepted)")
    return reg, report


def fit(dataset: Dataset, hp: RegressionSettings, seed: Optional[int] = None,
        name: str = "regressor") -> Tuple[Regressor, FitReport]:
    """Fit a regressor to a dataset with a seeded validation split."""
    if len(dataset) == 0:
        raise ContractViolationError("cannot fit an empty dataset")
    seed = hp.seed if seed is None else seed
    train, val = dataset.split(hp.validation_ratio, seed)
    dataset.standardization(train)
    reg, report = fit_arrays(dataset.features, dataset.labels, train, val, hp, seed, name, dataset.provenance)
    reg.meta["mode"] = dataset.mode
    if dataset.feature_map is not None:
        reg.meta["feature_map"] = dataset.feature_map.to_dict()
    return reg, report


def validation_mse(reg: Regressor, dataset: Dataset) -> float:
    """Recompute the validation MSE on the rows stored with the regressor."""
    rows = np.asarray(reg.meta["validation_rows"], dtype=int)
    return float(np.mean((reg.evaluate(dataset.features[rows]) - dataset.labels[rows]) ** 2))


@dataclass
class SplitPhaseRegressor:
    """Phase-i regressor on [0, t_split + delta], phase-ii on [t_split - delta, T_p]."""

    phase_i: Regressor
    phase_ii: Regressor
    t_split: float
    delta: float

    def for_phase(self, phase) -> Regressor:
        return self.phase_i if getattr(phase, "value", phase) == "i" else self.phase_ii

    def save(self, directory: Union[str, Path], name: str) -> None:
        self.phase_i.save(directory, f"{name}_i")
        self.phase_ii.save(directory, f"{name}_ii")

    @classmethod
    def load(cls, directory: Union[str, Path], name: str) -> "SplitPhaseRegressor":
        reg_i = Regressor.load(directory, f"{name}_i")
        reg_ii = Regressor.load(directory, f"{name}_ii")
        return cls(reg_i, reg_ii, reg_i.meta["t_split"], reg_i.meta["delta"])


def fit_split_phase(
    dataset: Dataset,
    t_split: float,
    hp: RegressionSettings,
    seed: Optional[int] = None,
    name: str = "regressor",
    period: Optional[float] = None,
) -> Tuple[SplitPhaseRegressor, Tuple[FitReport, FitReport]]:
    """Fit one regressor on rows with t < t_split and one on the rest.

    Raises:
        ContractViolationError: if either phase has no rows
    """
    times = dataset.times
    grid = np.unique(times)
    delta = float(np.min(np.diff(grid))) if grid.size > 1 else 0.0
    period = float(grid.max()) if period is None else period
    rows_i = np.flatnonzero(times < t_split - 1e-12)
    rows_ii = np.flatnonzero(times >= t_split - 1e-12)
    if rows_i.size == 0 or rows_ii.size == 0:
        raise ContractViolationError(f"{name}: dataset does not span both phases around t = {t_split}")
    reg_i, rep_i = fit(dataset.subset(rows_i), hp, seed, f"{name}_i")
    reg_ii, rep_ii = fit(dataset.subset(rows_ii), hp, seed, f"{name}_ii")
    for reg, domain in ((reg_i, (0.0, t_split + delta)), (reg_ii, (t_split - delta, period))):
        reg.meta.update({"t_split": t_split, "delta": delta, "domain": list(domain)})
    return SplitPhaseRegressor(reg_i, reg_ii, t_split, delta), (rep_i, rep_ii)


@dataclass(frozen=True)
class FitJob:
    name: str
    dataset: Dataset
    hp: RegressionSettings
    split_at: Optional[float] = None
    period: Optional[float] = None


def _run_fit_job(job: FitJob):
    if job.split_at is None:
        return fit(job.dataset, job.hp, name=job.name)
    return fit_split_phase(job.dataset, job.split_at, job.hp, name=job.name, period=job.period)


def fit_many(jobs: Sequence[FitJob], workers: Optional[int] = None) -> List:
    """Train independent regressors concurrently; results in job order."""
    return WorkerPool(workers).map(_run_fit_job, jobs)
