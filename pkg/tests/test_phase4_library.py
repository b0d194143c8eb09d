"""
Phase 4 Tests: Trajectory Libraries & Datasets

Tests for:
- Grid enumeration order and chunk planning
- Insertion maps (backstepping, orbit regression)
- Library persistence
- Dataset assembly per mode
- Injectivity diagnostic
"""
import numpy as np
import pytest
from pydantic import ValidationError

from app.errors import ContractViolationError, DependencyError, DesignError
from app.models.cart_pendulum import CartPendulumParams, cart_pendulum_prefeedback
from app.schemas.config import GridSpec, PipelineConfig
from app.services.library_builder import plan_chunks
from app.services.library_service import (
    Dataset,
    InsertionMap,
    LibraryEntry,
    TrajectoryLibrary,
    assemble_dataset,
    build_insertion_backstepping,
    build_insertion_from_orbits,
    injectivity_diagnostic,
    sample_grid,
    sample_times,
    x1_closed_loop_matrix,
)
from app.models.base import StateDecomposition
from app.services.simulation_service import Phase, Trajectory
from app.services.worker_pool import WorkerPool
from tests.utils import create_pendulum_config

DEC = StateDecomposition.leading(2, 2)


def _entry(index, point, status="converged", target=None, period=1.0):
    """Entry whose state decays linearly from point to zero over one period."""
    t = np.linspace(0.0, period, 11)
    X = np.outer(1.0 - t / period, point)
    U = -X.sum(axis=1, keepdims=True)
    return LibraryEntry(index, np.asarray(point, float), status, float(np.sum(np.square(point))), 0.0, 0.0,
                        segments=[(None, Trajectory(t, X, U))],
                        target=None if target is None else np.asarray(target, float))


def _library(points, statuses=None, insertion=None):
    statuses = statuses or ["converged"] * len(points)
    entries = [_entry(i, p, s) for i, (p, s) in enumerate(zip(points, statuses))]
    return TrajectoryLibrary(model="test", kind="full-state", period=1.0, entries=entries, insertion=insertion)


def _points(n=6, seed=3):
    return np.random.default_rng(seed).uniform(-1.0, 1.0, size=(n, 4))


class TestGrid:

    @pytest.mark.phase4
    def test_row_major_order(self):
        spec = GridSpec(dims=[{"min": 0, "max": 1, "count": 2}, {"min": 10, "max": 30, "count": 3}])
        grid = sample_grid(spec)
        np.testing.assert_array_equal(grid, [[0, 10], [0, 20], [0, 30], [1, 10], [1, 20], [1, 30]])
        assert spec.size == 6

    @pytest.mark.phase4
    def test_invalid_dimension(self):
        with pytest.raises(ValidationError):
            GridSpec(dims=[{"min": 1, "max": 1, "count": 3}])
        with pytest.raises(ValidationError):
            GridSpec(dims=[{"min": 0, "max": 1, "count": 1}])

    @pytest.mark.phase4
    def test_sample_times_cover_period(self):
        np.testing.assert_allclose(sample_times(2.0, 4), [0.0, 0.5, 1.0, 1.5, 2.0])

    @pytest.mark.phase4
    def test_chunks_follow_grid_rows(self, tmp_path):
        config = PipelineConfig.model_validate(create_pendulum_config(str(tmp_path)))
        from app.models import build_model

        tasks = plan_chunks(build_model("cart_pendulum"), config, None)
        assert len(tasks) == 8
        indices = [i for t in tasks for i in t.indices]
        assert indices == list(range(16))
        np.testing.assert_array_equal(np.vstack([t.points for t in tasks]), sample_grid(config.library.grid))

    @pytest.mark.phase4
    def test_orbit_transition_chunks_are_target_major(self, tmp_path):
        data = create_pendulum_config(
            str(tmp_path),
            insertion={"kind": "orbit-regression", "orbit_grid": {"dims": [
                {"min": -1, "max": 1, "count": 2}, {"min": 0, "max": 1, "count": 2}]}},
            library={
                "kind": "orbit-transition",
                "grid": {"dims": [{"min": -1, "max": 1, "count": 3}, {"min": -1, "max": 1, "count": 2}]},
                "targets": {"dims": [{"min": -1, "max": 0, "count": 2}, {"min": 0, "max": 1, "count": 2}]},
            },
            dataset={"modes": ["reduced-nu"]},
        )
        config = PipelineConfig.model_validate(data)
        from app.models import build_model

        tasks = plan_chunks(build_model("cart_pendulum"), config, InsertionMap("orbit-regression", [0, 0], np.zeros((2, 2))))
        assert len(tasks) == 4 * 3
        assert tasks[3].indices == (6, 7)
        np.testing.assert_array_equal(tasks[3].target, [-1.0, 1.0])

    @pytest.mark.phase4
    def test_worker_pool_preserves_order(self):
        assert WorkerPool(1).map(abs, [-3, 2, -1]) == [3, 2, 1]


class TestInsertionMaps:
    """gamma(x1) -> x2."""

    @pytest.mark.phase4
    def test_backstepping_gains_make_x1_hurwitz(self):
        system = cart_pendulum_prefeedback(CartPendulumParams())
        gamma = build_insertion_backstepping(system, gains=[[0.03, 0.1], [0.0, 0.0]])
        eig = np.linalg.eigvals(x1_closed_loop_matrix(system, gamma))
        assert np.max(eig.real) < 0
        np.testing.assert_allclose(gamma([1.0, 2.0]), [0.23, 0.0])

    @pytest.mark.phase4
    def test_backstepping_pole_placement(self):
        system = cart_pendulum_prefeedback(CartPendulumParams())
        gamma = build_insertion_backstepping(system, poles=[-1.0, -2.0])
        eig = np.sort(np.linalg.eigvals(x1_closed_loop_matrix(system, gamma)).real)
        np.testing.assert_allclose(eig, [-2.0, -1.0], atol=1e-6)
        np.testing.assert_allclose(gamma.a1[1], 0.0)

    @pytest.mark.phase4
    def test_destabilizing_gains_rejected(self):
        system = cart_pendulum_prefeedback(CartPendulumParams())
        with pytest.raises(DesignError):
            build_insertion_backstepping(system, gains=[[-0.03, -0.1], [0.0, 0.0]])
        with pytest.raises(DesignError):
            build_insertion_backstepping(system)
        with pytest.raises(DesignError):
            build_insertion_backstepping(system, gains=[[0.03, 0.1]])

    @pytest.mark.phase4
    def test_orbit_regression_recovers_affine_map(self, rng):
        x1 = rng.uniform(-1.0, 1.0, size=(12, 2))
        a0 = np.array([0.0, 0.4])
        a1 = np.array([[0.0, 0.0], [0.2, -0.7]])
        gamma = build_insertion_from_orbits(x1, a0 + x1 @ a1.T)
        np.testing.assert_allclose(gamma.a0, a0, atol=1e-12)
        np.testing.assert_allclose(gamma.a1, a1, atol=1e-12)
        assert gamma.residual < 1e-12

    @pytest.mark.phase4
    def test_single_orbit_gives_constant_map(self):
        gamma = build_insertion_from_orbits([[0.5, 1.0]], [[0.0, 0.8]])
        np.testing.assert_allclose(gamma([3.0, -2.0]), [0.0, 0.8])

    @pytest.mark.phase4
    def test_degenerate_samples(self):
        with pytest.raises(DesignError):
            build_insertion_from_orbits(np.zeros((0, 2)), np.zeros((0, 2)))
        with pytest.raises(DesignError):
            build_insertion_from_orbits([[1.0, 0.0], [1.0, 0.0]], [[0.0, 0.1], [0.0, 0.2]])

    @pytest.mark.phase4
    def test_wrong_x1_width(self):
        gamma = InsertionMap("linear-backstepping", [0.0, 0.0], np.zeros((2, 2)))
        with pytest.raises(ContractViolationError):
            gamma([1.0, 2.0, 3.0])


class TestLibrary:

    @pytest.mark.phase4
    def test_save_and_load(self, tmp_path):
        gamma = InsertionMap("linear-backstepping", [0.0, 0.0], [[0.03, 0.1], [0.0, 0.0]])
        lib = _library(_points(3), statuses=["converged", "failed", "feasible"], insertion=gamma)
        lib.entries.append(LibraryEntry(3, np.ones(4), "infeasible", float("inf"), float("inf"), float("inf")))
        lib.save(tmp_path / "lib")
        back = TrajectoryLibrary.load(tmp_path / "lib")
        assert [e.status for e in back.entries] == ["converged", "failed", "feasible", "infeasible"]
        np.testing.assert_array_equal(back.feasibility_mask, [True, False, True, False])
        np.testing.assert_array_equal(back.entries[2].segments[0][1].states, lib.entries[2].segments[0][1].states)
        np.testing.assert_array_equal(back.insertion.a1, gamma.a1)

    @pytest.mark.phase4
    def test_load_missing(self, tmp_path):
        with pytest.raises(DependencyError):
            TrajectoryLibrary.load(tmp_path / "nothing")

    @pytest.mark.phase4
    def test_boundary_residuals(self):
        lib = _library(_points(2), insertion=InsertionMap("orbit-regression", [0.0, 0.0], np.zeros((2, 2))))
        # trajectories end at the origin, which the zero map assigns to itself
        np.testing.assert_allclose(lib.boundary_residuals(DEC), 0.0, atol=1e-12)
        with pytest.raises(DependencyError):
            _library(_points(2)).boundary_residuals(DEC)

    @pytest.mark.phase4
    def test_split_phase_lookup(self):
        t1 = np.linspace(0.0, 0.5, 3)
        t2 = np.linspace(0.5, 1.0, 3)
        entry = LibraryEntry(0, np.zeros(1), "converged", 0.0, 0.0, 0.0, segments=[
            (Phase.I, Trajectory(t1, np.zeros((3, 1)), np.zeros((3, 1)))),
            (Phase.II, Trajectory(t2, np.ones((3, 1)), np.ones((3, 1)))),
        ])
        assert entry.sample(0.25, 1.0)[0][0] == 0.0
        # right-continuous at mid-step
        assert entry.sample(0.5, 1.0)[0][0] == 1.0


class TestDatasets:
    """Library samples arranged into regression rows."""

    @pytest.mark.phase4
    def test_full_state_mode(self):
        points = _points(4)
        ds = assemble_dataset(_library(points), "full-state-mu", DEC, sample_times(1.0, 5))
        assert len(ds) == 4 * 6
        assert ds.feature_names == ["t", "x0", "x1", "x2", "x3"]
        row = 6 + 2  # entry 1 at t = 0.4
        assert ds.times[row] == pytest.approx(0.4)
        np.testing.assert_allclose(ds.features[row, 1:], 0.6 * points[1])
        np.testing.assert_allclose(ds.labels[row], [-0.6 * points[1].sum()])
        assert ds.provenance[row] == 1

    @pytest.mark.phase4
    def test_reduced_modes(self):
        points = _points(3)
        lib = _library(points)
        nu = assemble_dataset(lib, "reduced-nu", DEC, sample_times(1.0, 2))
        assert nu.features.shape == (9, 3)
        np.testing.assert_allclose(nu.labels[0], points[0, 2:])
        mu = assemble_dataset(lib, "reduced-mu", DEC, sample_times(1.0, 2), input_map=lambda X, U: 2.0 * U)
        decay = 1.0 - np.array([0.0, 0.5, 1.0])
        expected = np.concatenate([-2.0 * decay * p.sum() for p in points])
        np.testing.assert_allclose(mu.labels[:, 0], expected)
        assert mu.label_names == ["u0"]

    @pytest.mark.phase4
    def test_coordinate_map_and_cyclic_drop(self):
        lib = _library(_points(3))
        cmap = [[1.0, 0.0, -1.0, 0.0], [0.0, 1.0, 0.0, -1.0]]
        ds = assemble_dataset(lib, "reduced-nu", DEC, [0.0], coordinate_map=cmap, drop_cyclic=[0])
        p = lib.entries[2].point
        np.testing.assert_allclose(ds.features[2], [0.0, p[1] - p[3]])

    @pytest.mark.phase4
    def test_targets_appended(self):
        entries = [_entry(i, p, target=[0.5, 1.0]) for i, p in enumerate(_points(2))]
        lib = TrajectoryLibrary("test", "orbit-transition", 1.0, entries)
        ds = assemble_dataset(lib, "reduced-nu", DEC, [0.0, 0.5])
        assert ds.feature_names == ["t", "x0", "x1", "target0", "target1"]
        np.testing.assert_allclose(ds.features[:, -2:], [[0.5, 1.0]] * 4)

    @pytest.mark.phase4
    def test_infeasible_entries_excluded(self):
        lib = _library(_points(3), statuses=["converged", "infeasible", "feasible"])
        ds = assemble_dataset(lib, "full-state-mu", DEC, [0.0])
        np.testing.assert_array_equal(ds.provenance, [0, 2])
        with pytest.raises(DesignError):
            assemble_dataset(_library(_points(2), statuses=["failed", "failed"]), "full-state-mu", DEC, [0.0])

    @pytest.mark.phase4
    def test_unknown_mode(self):
        with pytest.raises(ContractViolationError):
            assemble_dataset(_library(_points(2)), "full-state-nu", DEC, [0.0])

    @pytest.mark.phase4
    def test_split_and_standardization(self, tmp_path):
        ds = assemble_dataset(_library(_points(5)), "full-state-mu", DEC, sample_times(1.0, 3))
        train, val = ds.split(0.2, seed=7)
        assert len(val) == 4 and len(train) == 16
        assert set(train).isdisjoint(val)
        again = ds.split(0.2, seed=7)
        np.testing.assert_array_equal(again[0], train)
        stats = ds.standardization(train)
        np.testing.assert_allclose(stats["mean"], ds.features[train].mean(axis=0))
        path = ds.save(tmp_path / "ds.csv")
        back = Dataset.load(path)
        np.testing.assert_array_equal(back.features, ds.features)
        assert back.feature_map == ds.feature_map
        assert back.stats == stats


class TestInjectivity:

    @pytest.mark.phase4
    def test_collapse_flagged(self):
        ds = assemble_dataset(_library(_points(6)), "reduced-nu", DEC, sample_times(1.0, 4))
        report = injectivity_diagnostic(ds, threshold=1e-3)
        np.testing.assert_allclose(report.times, [0.0, 0.25, 0.5, 0.75, 1.0])
        # every trajectory reaches the origin at t = T_p
        np.testing.assert_allclose(report.flagged_times, [1.0])
        assert report.singular_values.shape == (5, 2)
        assert report.min_sigma2 == pytest.approx(0.0, abs=1e-12)

    @pytest.mark.phase4
    def test_needs_enough_trajectories(self):
        ds = assemble_dataset(_library(_points(2)), "reduced-nu", DEC, [0.0])
        with pytest.raises(ContractViolationError):
            injectivity_diagnostic(ds)

    @pytest.mark.phase4
    def test_csv(self, tmp_path):
        ds = assemble_dataset(_library(_points(4)), "reduced-nu", DEC, [0.0, 0.5])
        report = injectivity_diagnostic(ds)
        report.to_csv(tmp_path / "sv.csv")
        assert (tmp_path / "sv.csv").read_text().splitlines()[0] == "t,sigma1,sigma2"
