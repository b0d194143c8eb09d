"""
Stage runner for a pipeline config.

Stages run in the order optimize -> library -> fit -> verify -> simulate.
Each completed stage writes ``<output>/<stage>/result.json``; a stage is
skipped when its config slice and upstream results are unchanged since the
last run (content hashes in ``.stage_hashes.json``). ``summary.json`` is
assembled from the result files only, so reruns reproduce it byte for byte.
"""
import hashlib
import json
import time
from collections import Counter
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from app import __version__
from app.errors import ConfigError, DependencyError, DesignError, VerificationFailure, ZDSynthError
from app.metrics.prometheus import metrics_collector
from app.models import build_model
from app.schemas.config import PipelineConfig, ScenarioSettings
from app.schemas.reports import PipelineSummary, StageResult, SummaryMetrics
from app.services.controller_service import (
    ContinuousHoldController,
    EmbeddingController,
    HybridEmbeddingController,
    LearnedFullStateController,
    TargetState,
    ZohMpcController,
    push_recovery,
    run_schedule,
    step_speeds,
)
from app.services.gait_service import PeriodicGait
from app.services.learning_service import FitJob, Regressor, SplitPhaseRegressor, fit_many
from app.services.library_builder import (
    build_gaits,
    build_insertion,
    build_library,
    gaits_from_library,
    gaits_to_library,
    regulation_solver,
)
from app.services.library_service import (
    Dataset,
    FeatureMap,
    InsertionMap,
    TrajectoryLibrary,
    assemble_dataset,
    injectivity_diagnostic,
    sample_grid,
    sample_times,
    x1_closed_loop_matrix,
)
from app.services.orbit_service import cart_pendulum_orbit
from app.services.simulation_service import DisturbanceSignal, DisturbanceWindow, integrate, simulate_hybrid
from app.services.verification_service import (
    PoincareReport,
    check_boundary_conditions,
    contraction_constant,
    fit_lyapunov,
    learning_residuals,
    lyapunov_sequence,
    output_decay,
    phase_offset_reports,
    poincare_jacobian,
    posture_sensitivity,
)

STAGES = ("optimize", "library", "fit", "verify", "simulate")
UPSTREAM: Dict[str, Tuple[str, ...]] = {
    "optimize": (),
    "library": ("optimize",),
    "fit": ("library",),
    "verify": ("fit",),
    "simulate": ("fit",),
}
STAGE_CONFIG = {
    "optimize": {"model", "optimizer", "insertion", "library", "gait"},
    "library": {"dataset", "library"},
    "fit": {"regression"},
    "verify": {"verification", "controller"},
    "simulate": {"scenarios", "controller", "verification"},
}
REGRESSOR_FOR_MODE = {"full-state-mu": "mu", "reduced-nu": "nu", "reduced-mu": "mu_bar"}

RESULT_FILE = "result.json"
HASH_FILE = ".stage_hashes.json"
SUMMARY_FILE = "summary.json"
CONFIG_COPY = "config.json"
RECOVERY_TOL = 0.05


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_jsonable)


def _jsonable(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, np.bool_):
        return bool(value)
    return str(value)


def _finite(value: float) -> Optional[float]:
    return float(value) if np.isfinite(value) else None


class Pipeline:
    """Runs the stages of one config against its output directory."""

    def __init__(self, config: PipelineConfig, workers: Optional[int] = None):
        self.config = config
        self.out = config.resolved_output_dir
        self.workers = workers or config.worker_count
        self.bundle = build_model(config.model.name, config.model.params)
        self.current_stage: Optional[str] = None

    # artifacts

    def stage_dir(self, stage: str) -> Path:
        path = self.out / stage
        path.mkdir(parents=True, exist_ok=True)
        return path

    def load_result(self, stage: str) -> Optional[StageResult]:
        path = self.out / stage / RESULT_FILE
        if not path.exists():
            return None
        return StageResult.model_validate_json(path.read_text())

    def _write_result(self, stage: str, metrics: Dict, artifacts: Sequence[str]) -> None:
        result = StageResult(stage=stage, metrics=json.loads(_json(metrics)), artifacts=sorted(artifacts))
        (self.stage_dir(stage) / RESULT_FILE).write_text(result.model_dump_json(indent=2))

    def _hashes(self) -> Dict[str, str]:
        path = self.out / HASH_FILE
        return json.loads(path.read_text()) if path.exists() else {}

    def _save_hashes(self, hashes: Dict[str, str]) -> None:
        (self.out / HASH_FILE).write_text(json.dumps(hashes, indent=2, sort_keys=True))

    def stage_hash(self, stage: str) -> str:
        """Content hash of the stage's config slice and its upstream hashes."""
        hashes = self._hashes()
        upstream = list(UPSTREAM[stage])
        if stage == "simulate" and "verify" in hashes:
            upstream.append("verify")
        payload = {
            "stage": stage,
            "config": json.loads(self.config.model_dump_json(include=STAGE_CONFIG[stage])),
            "upstream": {u: hashes.get(u) for u in upstream},
        }
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()

    def load_library(self) -> TrajectoryLibrary:
        return TrajectoryLibrary.load(self.out / "optimize" / "library")

    def load_gaits(self) -> List[PeriodicGait]:
        return gaits_from_library(TrajectoryLibrary.load(self.out / "optimize" / "gaits"))

    def load_regressor(self, name: str):
        directory = self.out / "fit"
        if not (directory / f"{name}.json").exists() and not (directory / f"{name}_i.json").exists():
            raise DependencyError(f"regressor {name!r} not found in {directory}; run the fit stage first")
        if self.bundle.is_hybrid:
            return SplitPhaseRegressor.load(directory, name)
        return Regressor.load(directory, name)

    # running

    def run(self, stage: str = "all", force: bool = False) -> PipelineSummary:
        """Run one stage or all of them.

        Raises:
            ConfigError: for an unknown stage name
            DependencyError: if an upstream stage has no result
        """
        if stage != "all" and stage not in STAGES:
            raise ConfigError(f"unknown stage {stage!r}; expected one of {', '.join(STAGES)} or all")
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / CONFIG_COPY).write_text(self.config.model_dump_json(indent=2))
        metrics_collector.set_system_info(__version__, self.bundle.name)
        stages = STAGES if stage == "all" else (stage,)
        try:
            for name in stages:
                self._run_stage(name, force)
        except BaseException:
            self.write_summary(failed=self.current_stage)
            raise
        finally:
            metrics_collector.write(self.out)
        return self.write_summary()

    def _run_stage(self, stage: str, force: bool) -> None:
        self.current_stage = stage
        for up in UPSTREAM[stage]:
            if self.load_result(up) is None:
                raise DependencyError(f"stage {stage} needs the {up} stage; run it first")
        digest = self.stage_hash(stage)
        hashes = self._hashes()
        if not force and hashes.get(stage) == digest and self.load_result(stage) is not None:
            logger.info(f"Stage {stage}: inputs unchanged, skipped")
            return

        logger.info(f"Stage {stage}: started")
        start = time.perf_counter()
        metrics, artifacts = getattr(self, f"_stage_{stage}")()
        metrics_collector.observe_stage(stage, time.perf_counter() - start)
        self._write_result(stage, metrics, artifacts)
        if metrics.get("passed") is False:
            hashes.pop(stage, None)
            self._save_hashes(hashes)
            raise VerificationFailure(
                f"{len(metrics['failures'])} verification check(s) failed: {'; '.join(metrics['failures'])}",
                offending=metrics["failures"],
                details={"report": str(self.out / stage / "verification.json")},
            )
        hashes[stage] = digest
        self._save_hashes(hashes)
        logger.info(f"Stage {stage}: completed in {time.perf_counter() - start:.1f} s")

    def summary(self, failed: Optional[str] = None) -> PipelineSummary:
        stages, metrics, failures, passed = {}, SummaryMetrics(), [], None
        for stage in STAGES:
            result = self.load_result(stage)
            if stage == failed:
                stages[stage] = "failed"
            elif result is None:
                stages[stage] = "not-run"
            else:
                stages[stage] = "ok" if result.metrics.get("passed", True) else "failed"
            if result is None:
                continue
            m = result.metrics
            if stage == "optimize":
                metrics.feasible_trajectories = m.get("feasible")
                metrics.total_trajectories = m.get("total")
            elif stage == "library":
                metrics.min_sigma2 = m.get("min_sigma2")
            elif stage == "fit":
                metrics.validation_mse = m.get("validation_mse", {})
            elif stage == "verify":
                metrics.contraction_constant = m.get("contraction_constant")
                metrics.max_poincare_modulus = m.get("max_poincare_modulus")
                passed = m.get("passed")
                failures = m.get("failures", [])
        return PipelineSummary(
            name=self.config.name, model=self.bundle.name, library=self.config.library.kind,
            stages=stages, metrics=metrics, verification_passed=passed, failures=failures,
        )

    def write_summary(self, failed: Optional[str] = None) -> PipelineSummary:
        summary = self.summary(failed)
        (self.out / SUMMARY_FILE).write_text(summary.model_dump_json(indent=2))
        return summary

    # optimize

    def _stage_optimize(self):
        c, b = self.config, self.bundle
        d = self.stage_dir("optimize")
        metrics, artifacts = {}, []
        gaits = None
        if b.is_hybrid:
            if c.gait is None:
                raise ConfigError("the biped3 model needs gait settings")
            gaits = build_gaits(b, c.gait)
            gaits_to_library(gaits, b.period).save(d / "gaits")
            artifacts.append("gaits")
            metrics["gaits"] = {f"{g.speed:g}": g.status for g in gaits}

        insertion = build_insertion(b, c.insertion, gaits)
        (d / "insertion.json").write_text(_json(None if insertion is None else insertion.to_dict()))
        artifacts.append("insertion.json")
        if insertion is not None:
            metrics["insertion"] = self._insertion_metrics(insertion)

        library = build_library(b, c, insertion, gaits, self.workers)
        library.save(d / "library")
        artifacts.append("library")
        statuses = Counter(e.status for e in library.entries)
        metrics.update(feasible=int(library.feasibility_mask.sum()), total=len(library.entries),
                       statuses=dict(sorted(statuses.items())))
        return metrics, artifacts

    def _insertion_metrics(self, insertion: InsertionMap) -> Dict:
        out = {"kind": insertion.kind, "residual": _finite(insertion.residual)}
        if insertion.kind == "linear-backstepping":
            system = self.bundle.prefeedback or self.bundle.system
            eig = np.linalg.eigvals(x1_closed_loop_matrix(system, insertion))
            out["x1_max_real_eigenvalue"] = float(eig.real.max())
        return out

    # library

    def _stage_library(self):
        c, b = self.config, self.bundle
        d = self.stage_dir("library")
        lib = self.load_library()
        times = sample_times(b.period, c.library.samples_per_period)
        metrics: Dict = {"datasets": {}}
        artifacts = []
        diagnosed = False
        for mode in c.dataset.modes:
            input_map = None
            if mode == "reduced-mu" and c.library.kind in ("reduced", "gait-transition"):
                input_map = b.to_prefeedback
            ds = assemble_dataset(lib, mode, b.system.decomposition, times, c.dataset.coordinate_map,
                                  c.dataset.drop_cyclic, input_map)
            ds.save(d / f"dataset_{mode}.csv")
            artifacts.append(f"dataset_{mode}.csv")
            metrics["datasets"][mode] = len(ds)
            if mode != "full-state-mu" and not diagnosed:
                report = injectivity_diagnostic(ds, c.dataset.rank_threshold)
                report.to_csv(d / "injectivity.csv")
                artifacts.append("injectivity.csv")
                metrics["min_sigma2"] = _finite(report.min_sigma2)
                metrics["flagged_times"] = [float(t) for t in report.flagged_times]
                metrics_collector.set_min_singular_value(report.min_sigma2)
                diagnosed = True
        return metrics, artifacts

    # fit

    def _fit_jobs(self) -> List[FitJob]:
        c, b = self.config, self.bundle
        d = self.out / "library"
        split_at = 0.5 * b.period if b.is_hybrid else None
        jobs = []
        for mode in c.dataset.modes:
            ds = Dataset.load(d / f"dataset_{mode}.csv")
            jobs.append(FitJob(REGRESSOR_FOR_MODE[mode], ds, c.regression, split_at, b.period))
        return jobs

    def _stage_fit(self):
        d = self.stage_dir("fit")
        jobs = self._fit_jobs()
        metrics: Dict = {"validation_mse": {}, "reports": {}}
        artifacts = []
        if self.config.regression.pretrained:
            source = Path(self.config.regression.pretrained)
            logger.info(f"Loading pretrained regressors from {source}")
            for job in jobs:
                loader = SplitPhaseRegressor if job.split_at is not None else Regressor
                reg = loader.load(source, job.name)
                reg.save(d, job.name)
                parts = (reg.phase_i, reg.phase_ii) if job.split_at is not None else (reg,)
                for suffix, part in zip(("_i", "_ii") if job.split_at is not None else ("",), parts):
                    mse = float(part.meta.get("validation_mse", float("nan")))
                    metrics["validation_mse"][job.name + suffix] = mse
                    metrics_collector.set_validation_mse(job.name + suffix, mse)
                artifacts.append(job.name)
            return metrics, artifacts

        # metrics set inside worker processes do not reach this process
        for job, (reg, reports) in zip(jobs, fit_many(jobs, self.workers)):
            reg.save(d, job.name)
            artifacts.append(job.name)
            for report in reports if isinstance(reports, tuple) else (reports,):
                metrics["validation_mse"][report.name] = report.validation_mse
                metrics["reports"][report.name] = report.to_dict()
                metrics_collector.set_validation_mse(report.name, report.validation_mse)
        return metrics, artifacts

    # controllers

    def _feature_map(self, reg) -> FeatureMap:
        part = reg.phase_i if isinstance(reg, SplitPhaseRegressor) else reg
        return FeatureMap.from_dict(part.meta["feature_map"])

    def build_controller(self, kind: str, schedule: Sequence[Tuple[float, Sequence[float]]] = ()):
        c, b = self.config, self.bundle
        m = b.system.m
        if kind == "continuous-hold":
            return ContinuousHoldController(self.load_library(), m)
        if kind == "zoh-mpc":
            solve = regulation_solver(b.system, c.optimizer, b.period)
            return ZohMpcController(solve, b.period, m, equilibrium_tol=c.verification.equilibrium_tol)
        if kind == "learned-full-state":
            mu = self.load_regressor("mu")
            return LearnedFullStateController(mu, self._feature_map(mu), b.period, m)
        if c.controller is None:
            raise ConfigError(f"{kind} controllers need controller gains")
        nu, mu = self.load_regressor("nu"), self.load_regressor("mu_bar")
        Kp, Kd = np.asarray(c.controller.Kp), np.asarray(c.controller.Kd)
        if kind == "embedding":
            if b.is_hybrid:
                raise ConfigError("the walking model needs the hybrid-embedding controller")
            return EmbeddingController(nu, mu, Kp, Kd, self._feature_map(nu), b.system.decomposition,
                                       b.period, m, b.to_physical, schedule)
        if not b.is_hybrid:
            raise ConfigError("hybrid-embedding controllers need a walking model")
        return HybridEmbeddingController(nu, mu, Kp, Kd, c.controller.epsilon, self._feature_map(nu),
                                         b.system.decomposition, b.period, m, b.to_physical, schedule)

    def gait_midpoint(self, speed: float, gaits: Optional[Sequence[PeriodicGait]] = None) -> np.ndarray:
        """Midpoint state interpolated between the feasible gaits of neighbouring speeds."""
        feasible = sorted((g for g in gaits or self.load_gaits() if g.feasible), key=lambda g: g.speed)
        if not feasible:
            raise DesignError("no feasible gait to start from")
        speeds = np.array([g.speed for g in feasible])
        mids = np.array([g.midpoint for g in feasible])
        return np.array([np.interp(speed, speeds, mids[:, i]) for i in range(mids.shape[1])])

    # verify

    def _stage_verify(self):
        c, b = self.config, self.bundle
        v = c.verification
        d = self.stage_dir("verify")
        lib = self.load_library()
        failures: List[str] = []
        report: Dict = {}

        V, reference = self._lyapunov_candidate(lib, report, failures)
        if V is not None:
            contraction = contraction_constant(lib, V, reference, v.contraction_limit)
            report["contraction"] = contraction.to_dict()
            if not contraction.passed:
                failures.append(f"contraction constant {contraction.c:.4f} >= {v.contraction_limit}")

        if lib.insertion is not None and c.insertion.impose_boundary:
            nu = None
            if not b.is_hybrid and "reduced-nu" in c.dataset.modes:
                nu = self.load_regressor("nu")
            boundary = check_boundary_conditions(lib, b.system.decomposition, v.boundary_tol, nu)
            report["boundary"] = boundary.to_dict()
            if not boundary.passed:
                failures.append(f"boundary residual {boundary.max_residual:.2e} > {v.boundary_tol}")

        report["residuals"] = self._residuals()
        if b.is_hybrid and "reduced-nu" in c.dataset.modes:
            report["posture_sensitivity"] = self._posture_sensitivity()

        poincare = self._poincare_reports()
        rows = []
        for key, rep in poincare:
            rows.append({"section": key, **rep.to_dict()})
            if not rep.stable:
                failures.append(f"return map at {key}: " + (
                    f"max |eig| = {rep.max_modulus:.4f}" if rep.converged else "no fixed point"))
        report["poincare"] = rows
        moduli = [rep.max_modulus for _, rep in poincare if rep.converged]
        max_modulus = float(max(moduli)) if moduli else None
        if max_modulus is not None:
            metrics_collector.set_max_poincare_modulus(max_modulus)
        self._write_poincare_csv(d / "poincare.csv", poincare)

        report["failures"] = failures
        (d / "verification.json").write_text(_json(report))
        passed = not failures
        log = logger.info if passed else logger.error
        log(f"Verification {'passed' if passed else 'failed'} ({len(failures)} failure(s))")
        metrics = {
            "passed": passed,
            "failures": failures,
            "contraction_constant": report.get("contraction", {}).get("c"),
            "max_poincare_modulus": max_modulus,
            "lyapunov": report.get("lyapunov"),
        }
        return metrics, ["verification.json", "poincare.csv"] + (["lyapunov.json"] if "lyapunov" in report else [])

    def _lyapunov_candidate(self, lib: TrajectoryLibrary, report: Dict, failures: List[str]):
        """(V, reference) for the contraction check; quadratic fit on regulation libraries."""
        kind = self.config.library.kind
        if kind in ("full-state", "reduced"):
            feasible = lib.feasible_entries()
            try:
                form = fit_lyapunov([e.initial_state for e in feasible], [e.cost for e in feasible])
            except VerificationFailure as exc:
                failures.append(str(exc))
                return None, None
            report["lyapunov"] = form.to_dict()
            (self.out / "verify" / "lyapunov.json").write_text(_json(form.to_dict()))
            return form, None

        def squared(x):
            return float(np.dot(x, x))

        if kind == "orbit-transition":
            cache: Dict[Tuple[float, ...], np.ndarray] = {}

            def reference(entry):
                key = tuple(float(t) for t in entry.target)
                if key not in cache:
                    cache[key] = cart_pendulum_orbit(self.bundle.params, *key).midpoint
                return cache[key]

            return squared, reference

        gaits = self.load_gaits()
        by_speed = {round(g.speed, 9): g for g in gaits if g.feasible}
        return squared, lambda entry: by_speed[round(float(entry.target[0]), 9)].midpoint

    def _residuals(self) -> Dict:
        c, b = self.config, self.bundle
        out = {}
        for mode in c.dataset.modes:
            name = REGRESSOR_FOR_MODE[mode]
            ds = Dataset.load(self.out / "library" / f"dataset_{mode}.csv")
            reg = self.load_regressor(name)
            if isinstance(reg, SplitPhaseRegressor):
                early = np.flatnonzero(ds.times < reg.t_split)
                late = np.flatnonzero(ds.times >= reg.t_split)
                out[f"{name}_i"] = learning_residuals(reg.phase_i, ds.subset(early)).to_dict()
                out[f"{name}_ii"] = learning_residuals(reg.phase_ii, ds.subset(late)).to_dict()
            else:
                out[name] = learning_residuals(reg, ds).to_dict()
        return out

    def _posture_sensitivity(self) -> Dict:
        """Swing-leg nu versus stance-leg velocity at mid-step of a library gait."""
        b = self.bundle
        feasible = [g for g in self.load_gaits() if g.feasible]
        if not feasible:
            return {}
        gait = feasible[len(feasible) // 2]
        nu = self.load_regressor("nu")
        dec = b.system.decomposition
        report = posture_sensitivity(
            nu.phase_ii, self._feature_map(nu), 0.5 * b.period, gait.midpoint,
            sweep_index=dec.idx1[-1], deltas=np.linspace(-0.3, 0.3, 13),
            component=1, targets=[gait.speed],
        )
        logger.info(f"Posture sensitivity at {gait.speed:g} m/s: K1 = {report.K1:.4f}, K2 = {report.K2:.4f}")
        return {"speed": gait.speed, **report.to_dict()}

    def _poincare_kwargs(self) -> Dict:
        v = self.config.verification
        return dict(step=v.poincare_step, tol=v.fixed_point_tol, max_iter=v.fixed_point_iterations)

    def _continuous_step_map(self, controller, t0: float = 0.0) -> Callable[[np.ndarray], np.ndarray]:
        b = self.bundle
        return lambda x: integrate(b.system, controller, x, t0, t0 + b.period).final_state

    def _hybrid_step_map(self, controller) -> Callable[[np.ndarray], np.ndarray]:
        return lambda x: simulate_hybrid(self.bundle.hybrid, controller, x, 1).final_state

    def _guarded(self, key: str, compute: Callable[[], PoincareReport], guess) -> PoincareReport:
        try:
            return compute()
        except ZDSynthError as exc:
            logger.warning(f"return map at {key} could not be evaluated: {exc}")
            x = np.asarray(guess, dtype=float)
            return PoincareReport(fixed_point=x, residual=float("inf"), residual_history=[], converged=False)

    def _poincare_reports(self) -> List[Tuple[str, PoincareReport]]:
        c, b = self.config, self.bundle
        kind = c.library.kind
        kwargs = self._poincare_kwargs()
        reports: List[Tuple[str, PoincareReport]] = []
        origin = np.zeros(b.system.n)

        if kind in ("full-state", "reduced"):
            if kind == "reduced" and c.controller is None:
                logger.warning("No controller gains configured; return-map analysis skipped")
                return reports
            controller = self.build_controller("learned-full-state" if kind == "full-state" else "embedding")
            offsets = phase_offset_reports(
                lambda t0: self._continuous_step_map(controller, t0), lambda t0: origin,
                b.period, seed=c.regression.seed, **kwargs,
            )
            for k, rep in enumerate(offsets):
                reports.append(("origin" if k == 0 else f"origin@offset{k}", rep))
            return reports

        if c.controller is None:
            logger.warning("No controller gains configured; return-map analysis skipped")
            return reports

        if kind == "orbit-transition":
            for target in sample_grid(c.library.targets):
                key = "target(" + ", ".join(f"{t:g}" for t in target) + ")"
                try:
                    guess = cart_pendulum_orbit(b.params, *target).midpoint
                except DesignError as exc:
                    logger.warning(f"{key} skipped: {exc}")
                    continue
                controller = self.build_controller("embedding", [(0.0, target)])
                step_map = self._continuous_step_map(controller)
                reports.append((key, self._guarded(key, lambda: poincare_jacobian(step_map, guess, **kwargs), guess)))
            return reports

        gaits = self.load_gaits()
        speeds = sorted({g.speed for g in gaits if g.feasible} | set(c.verification.poincare_speeds))
        for speed in speeds:
            key = f"speed({speed:g})"
            guess = self.gait_midpoint(speed, gaits)
            controller = self.build_controller("hybrid-embedding", [(0.0, [speed])])
            step_map = self._hybrid_step_map(controller)
            reports.append((key, self._guarded(key, lambda: poincare_jacobian(step_map, guess, **kwargs), guess)))
        return reports

    @staticmethod
    def _write_poincare_csv(path: Path, reports: Sequence[Tuple[str, PoincareReport]]) -> None:
        width = max([rep.moduli.size for _, rep in reports] + [0])
        header = ["section", "converged", "residual", "max_modulus"] + [f"modulus_{i}" for i in range(width)]
        lines = [",".join(header)]
        for key, rep in reports:
            moduli = sorted(rep.moduli.tolist(), reverse=True) + [float("nan")] * (width - rep.moduli.size)
            row = [key, str(int(rep.converged)), f"{rep.residual:.6e}", f"{rep.max_modulus:.12g}"]
            lines.append(",".join(row + [f"{m:.12g}" for m in moduli]))
        path.write_text("\n".join(lines) + "\n")

    # simulate

    def _stage_simulate(self):
        d = self.stage_dir("simulate")
        metrics, artifacts = {}, []
        for scenario in self.config.scenarios:
            logger.info(f"Scenario {scenario.name}: {scenario.controller}")
            if self.bundle.is_hybrid:
                metrics[scenario.name], files = self._walk(scenario, d)
            else:
                metrics[scenario.name], files = self._regulate(scenario, d)
            artifacts.extend(files)
        return metrics, artifacts

    def _disturbance(self, scenario: ScenarioSettings) -> Optional[DisturbanceSignal]:
        if not scenario.disturbances:
            return None
        return DisturbanceSignal(tuple(DisturbanceWindow(**w.model_dump()) for w in scenario.disturbances))

    def _regulate(self, scenario: ScenarioSettings, d: Path):
        b = self.bundle
        schedule = [(e.time, e.parameters) for e in scenario.schedule]
        controller = self.build_controller(scenario.controller, schedule)
        xi = np.zeros(b.system.n) if scenario.initial_state is None else np.asarray(scenario.initial_state, dtype=float)
        duration = scenario.duration or scenario.steps * b.period
        disturbance = self._disturbance(scenario)
        files = [f"{scenario.name}.csv"]
        if schedule:
            run = run_schedule(b.system, controller, xi, duration, disturbance)
            traj = run.trajectory
            np.savetxt(d / f"{scenario.name}_targets.csv", np.column_stack([traj.times, run.targets]),
                       delimiter=",", header="t," + ",".join(f"target_{i}" for i in range(run.targets.shape[1])),
                       comments="", fmt="%.12g")
            files.append(f"{scenario.name}_targets.csv")
        else:
            traj = integrate(b.system, controller, xi, 0.0, duration, disturbance=disturbance)
        traj.to_csv(d / f"{scenario.name}.csv")

        norms = np.linalg.norm(traj.states, axis=1)
        out = {"final_norm": float(norms[-1]), "peak_norm": float(norms.max())}
        if scenario.disturbances:
            start = min(w.start for w in scenario.disturbances)
            before = traj.times < start
            if before.any():
                out["norm_before_disturbance"] = float(norms[before][-1])
            out["peak_after_disturbance"] = float(norms[~before].max())

        if isinstance(controller, EmbeddingController):
            def output(t, x):
                return controller.output(TargetState(controller._targets_at(t)), t, x)

            decay = output_decay(traj, output)
            np.savetxt(d / f"{scenario.name}_output.csv", np.column_stack([decay["times"], decay["norms"]]),
                       delimiter=",", header="t,output_norm", comments="", fmt="%.12g")
            files.append(f"{scenario.name}_output.csv")
            out.update(final_output=float(decay["norms"][-1]), output_log_slope=_finite(decay["log_slope"]))

        lyap = self._stored_lyapunov()
        if lyap is not None:
            V, c_bound = lyap
            seq = lyapunov_sequence(traj, V, b.period, c_bound)
            cols = [seq["times"], seq["values"]] + ([seq["bound"]] if "bound" in seq else [])
            np.savetxt(d / f"{scenario.name}_lyapunov.csv", np.column_stack(cols), delimiter=",",
                       header="t,V" + (",bound" if "bound" in seq else ""), comments="", fmt="%.12g")
            files.append(f"{scenario.name}_lyapunov.csv")
            if "dominated" in seq:
                out["lyapunov_dominated"] = seq["dominated"]
        return out, files

    def _stored_lyapunov(self):
        """(V, c) from the verify stage, when it fitted a quadratic form."""
        path = self.out / "verify" / "lyapunov.json"
        if not path.exists():
            return None
        P = np.asarray(json.loads(path.read_text())["P"], dtype=float)
        result = self.load_result("verify")
        c_bound = None if result is None else result.metrics.get("contraction_constant")

        def V(x):
            x = np.asarray(x, dtype=float)
            return float(x @ P @ x)

        return V, c_bound

    def _walk(self, scenario: ScenarioSettings, d: Path):
        b = self.bundle
        if scenario.controller != "hybrid-embedding":
            raise ConfigError(f"scenario {scenario.name}: the walking model needs the hybrid-embedding controller")
        gaits = self.load_gaits()
        feasible = [g.speed for g in gaits if g.feasible]
        target = scenario.target_speed if scenario.target_speed is not None else feasible[0]
        schedule = [(0.0, [target])] + [(e.time, e.parameters) for e in scenario.schedule]
        controller = self.build_controller("hybrid-embedding", schedule)
        xi = (self.gait_midpoint(target, gaits) if scenario.initial_state is None
              else np.asarray(scenario.initial_state, dtype=float))
        steps = scenario.steps or int(np.ceil(scenario.duration / b.period))

        out = {"target_speed": target}
        if scenario.push is not None:
            pr = push_recovery(b.hybrid, b.mechanics, controller, xi, steps, scenario.push.step,
                               scenario.push.velocity, target)
            execution, speeds = pr.execution, pr.speeds
            out["recovery_steps"] = pr.recovery_steps(RECOVERY_TOL)
        else:
            execution = simulate_hybrid(b.hybrid, controller, xi, steps, disturbance=self._disturbance(scenario))
            speeds = step_speeds(b.mechanics, execution, b.period)
        execution.to_csv(d / f"{scenario.name}.csv")
        np.savetxt(d / f"{scenario.name}_speeds.csv", np.column_stack([np.arange(speeds.size), speeds]),
                   delimiter=",", header="step,speed", comments="", fmt="%.12g")
        out.update(steps=int(speeds.size), impacts=execution.n_impacts,
                   final_speed=float(speeds[-1]) if speeds.size else None,
                   speed_error=float(abs(speeds[-1] - target)) if speeds.size else None)
        return out, [f"{scenario.name}.csv", f"{scenario.name}_speeds.csv"]


def verify_artifacts(directory) -> PipelineSummary:
    """Re-run the verify stage from the artifacts of a finished run.

    Raises:
        DependencyError: if the directory has no config copy or fit results
    """
    directory = Path(directory)
    config_path = directory / CONFIG_COPY
    if not config_path.exists():
        raise DependencyError(f"{directory} has no {CONFIG_COPY}; it is not a pipeline output directory")
    config = PipelineConfig.model_validate_json(config_path.read_text())
    config = config.model_copy(update={"output_dir": str(directory.resolve())})
    return Pipeline(config).run("verify", force=True)
