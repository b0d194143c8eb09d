"""
Phase 7 Tests: Verification

Tests for:
- Quadratic Lyapunov fit and contraction constant
- Return-map fixed points and Jacobian spectra
- Boundary and learning conditions
- Output decay and posture sensitivity
"""
import numpy as np
import pytest

from app.errors import ContractViolationError, VerificationFailure
from app.models.base import StateDecomposition
from app.services.learning_service import Regressor
from app.services.library_service import Dataset, FeatureMap, InsertionMap, LibraryEntry, TrajectoryLibrary
from app.services.simulation_service import Trajectory
from app.services.verification_service import (
    check_boundary_conditions,
    contraction_constant,
    find_fixed_point,
    fit_lyapunov,
    learning_residuals,
    lyapunov_sequence,
    output_decay,
    phase_offset_reports,
    poincare_jacobian,
    posture_sensitivity,
)

DEC = StateDecomposition.leading(1, 1)


def _entry(index, point, shrink):
    """Entry moving linearly from point to shrink * point over one period."""
    t = np.linspace(0.0, 1.0, 11)
    X = np.outer(1.0 - (1.0 - shrink) * t, point)
    return LibraryEntry(index, np.asarray(point, float), "converged", 1.0, 0.0, 0.0,
                        segments=[(None, Trajectory(t, X, np.zeros((t.size, 1))))])


def _library(points, shrinks, insertion=None):
    entries = [_entry(i, p, s) for i, (p, s) in enumerate(zip(points, shrinks))]
    return TrajectoryLibrary(model="test", kind="reduced", period=1.0, entries=entries, insertion=insertion)


def _squared(x):
    return float(np.sum(np.square(x)))


def _affine_map(A, p):
    A, p = np.asarray(A, float), np.asarray(p, float)
    return lambda x: A @ (np.asarray(x) - p) + p


class TestLyapunovFit:

    @pytest.mark.phase7
    def test_exact_quadratic(self, rng):
        P = np.array([[2.0, 0.5], [0.5, 1.0]])
        X = rng.uniform(-1.0, 1.0, size=(12, 2))
        form = fit_lyapunov(X, np.einsum("ki,ij,kj->k", X, P, X))
        np.testing.assert_allclose(form.P, P, atol=1e-10)
        assert form.residual < 1e-10
        np.testing.assert_allclose([form.alpha1, form.alpha2], np.linalg.eigvalsh(P))
        assert form(np.array([1.0, 0.0])) == pytest.approx(2.0)

    @pytest.mark.phase7
    def test_too_few_samples(self):
        with pytest.raises(ContractViolationError):
            fit_lyapunov([[1.0, 0.0], [0.0, 1.0]], [1.0, 1.0])

    @pytest.mark.phase7
    def test_indefinite_fit_fails(self, rng):
        X = rng.uniform(-1.0, 1.0, size=(8, 2))
        with pytest.raises(VerificationFailure) as exc:
            fit_lyapunov(X, X[:, 0] ** 2 - X[:, 1] ** 2)
        assert min(exc.value.offending) == pytest.approx(-1.0)


class TestContraction:

    @pytest.mark.phase7
    def test_max_ratio(self):
        report = contraction_constant(_library([[1.0, 0.0], [0.0, 2.0]], [0.5, 0.8]), _squared)
        np.testing.assert_allclose(report.ratios, [0.25, 0.64])
        assert report.c == pytest.approx(0.64)
        assert report.passed and report.violating == []

    @pytest.mark.phase7
    def test_expanding_entry_violates(self):
        report = contraction_constant(_library([[1.0, 0.0], [0.0, 1.0]], [0.5, 1.2]), _squared)
        assert report.c == pytest.approx(1.44)
        assert not report.passed
        assert report.violating == [1]

    @pytest.mark.phase7
    def test_entry_at_reference_excluded(self):
        report = contraction_constant(_library([[0.0, 0.0], [1.0, 1.0]], [0.5, 0.5]), _squared)
        assert report.excluded == [0]
        assert report.c == pytest.approx(0.25)

    @pytest.mark.phase7
    def test_custom_reference(self):
        lib = _library([[1.0, 0.0]], [0.5])
        report = contraction_constant(lib, _squared, reference=lambda e: e.final_state)
        assert report.c == pytest.approx(0.0)

    @pytest.mark.phase7
    def test_nothing_to_measure(self):
        with pytest.raises(ContractViolationError):
            contraction_constant(_library([[0.0, 0.0]], [0.5]), _squared)

    @pytest.mark.phase7
    def test_sequence_bound(self):
        t = np.linspace(0.0, 3.0, 301)
        traj = Trajectory(t, np.exp(-t)[:, None], np.zeros(t.size))
        seq = lyapunov_sequence(traj, _squared, period=1.0, c=0.2)
        np.testing.assert_allclose(seq["times"], [0.0, 1.0, 2.0, 3.0])
        np.testing.assert_allclose(seq["values"], np.exp(-2.0 * seq["times"]), rtol=1e-9)
        assert seq["dominated"]
        assert not lyapunov_sequence(traj, _squared, period=1.0, c=0.1)["dominated"]


class TestPoincare:

    @pytest.mark.phase7
    def test_linear_map(self):
        A = [[0.5, 0.1], [0.0, -0.3]]
        report = poincare_jacobian(_affine_map(A, [1.0, 2.0]), [0.0, 0.0], tol=1e-10)
        assert report.converged
        np.testing.assert_allclose(report.fixed_point, [1.0, 2.0], atol=1e-9)
        np.testing.assert_allclose(report.jacobian, A, atol=1e-7)
        np.testing.assert_allclose(sorted(report.moduli), [0.3, 0.5], atol=1e-7)
        assert report.stable and not report.step_flagged

    @pytest.mark.phase7
    def test_unstable_fixed_point(self):
        report = poincare_jacobian(_affine_map(np.diag([2.0, 0.5]), [0.3, -0.1]), [0.0, 0.0])
        assert report.converged
        assert report.max_modulus == pytest.approx(2.0, rel=1e-6)
        assert not report.stable

    @pytest.mark.phase7
    def test_no_fixed_point(self):
        report = poincare_jacobian(lambda x: np.asarray(x) + 1.0, [0.0], max_iter=10)
        assert not report.converged
        assert report.jacobian is None and not report.stable
        assert report.to_dict()["converged"] is False

    @pytest.mark.phase7
    def test_fixed_point_history(self):
        x, r, history, converged = find_fixed_point(_affine_map([[0.5]], [1.0]), [0.0], tol=1e-8)
        assert converged and r <= 1e-8
        assert x[0] == pytest.approx(1.0, abs=1e-8)
        assert len(history) >= 1

    @pytest.mark.phase7
    def test_phase_offsets(self):
        reports = phase_offset_reports(lambda t0: _affine_map([[0.4]], [t0]), lambda t0: np.zeros(1),
                                       period=1.0, n_offsets=3, seed=7)
        assert len(reports) == 4
        assert reports[0].fixed_point[0] == pytest.approx(0.0, abs=1e-6)
        assert all(r.stable for r in reports)


class TestBoundaryAndLearning:

    def _constant(self, value, n_in=2, meta=None):
        return Regressor(np.zeros((1, n_in)), np.zeros(1), np.zeros((1, 1)), np.zeros(1),
                         np.zeros(n_in), np.ones(n_in), [value], [1.0], meta)

    @pytest.mark.phase7
    def test_boundary_residuals(self):
        gamma = InsertionMap("linear-backstepping", [0.0], [[-1.0]])
        lib = _library([[1.0, -1.0], [1.0, 0.0]], [0.5, 0.5], insertion=gamma)
        report = check_boundary_conditions(lib, DEC, tol=1e-6)
        np.testing.assert_allclose(report.residuals, [0.0, 0.5])
        assert report.flagged == [1] and not report.passed

    @pytest.mark.phase7
    def test_nu_continuity(self):
        gamma = InsertionMap("linear-backstepping", [0.0], [[-1.0]])
        lib = _library([[1.0, -1.0]], [0.5], insertion=gamma)
        nu = self._constant(0.3, meta={"feature_map": FeatureMap(x1_index=(0,)).to_dict()})
        report = check_boundary_conditions(lib, DEC, nu=nu)
        assert report.passed
        assert report.nu_continuity == pytest.approx(0.0)

    @pytest.mark.phase7
    def test_needs_insertion(self):
        with pytest.raises(ContractViolationError):
            check_boundary_conditions(_library([[1.0, 0.0]], [0.5]), DEC)

    @pytest.mark.phase7
    def test_learning_residuals(self):
        features = np.column_stack([[0.0, 0.0, 0.5, 0.5], [1.0, 2.0, 3.0, 4.0]])
        labels = np.array([[1.0], [1.1], [0.8], [1.0]])
        ds = Dataset("reduced-mu", ["t", "x0"], ["u_0"], features, labels, np.arange(4))
        report = learning_residuals(self._constant(1.0), ds)
        assert report.max_residual == pytest.approx(0.2)
        np.testing.assert_allclose(report.times, [0.0, 0.5])
        np.testing.assert_allclose(report.max_per_time, [0.1, 0.2])
        assert report.mse == pytest.approx((0.01 + 0.04) / 4)

    @pytest.mark.phase7
    def test_learning_residuals_dimension_check(self):
        ds = Dataset("reduced-mu", ["t", "x0", "x1"], ["u_0"], np.zeros((2, 3)), np.zeros((2, 1)), np.arange(2))
        with pytest.raises(ContractViolationError):
            learning_residuals(self._constant(0.0), ds)


class TestClosedLoopDiagnostics:

    @pytest.mark.phase7
    def test_output_decay_slope(self):
        t = np.linspace(0.0, 2.0, 201)
        traj = Trajectory(t, np.exp(-3.0 * t)[:, None], np.zeros(t.size))
        decay = output_decay(traj, lambda t, x: x)
        assert decay["log_slope"] == pytest.approx(-3.0, rel=1e-9)
        assert decay["norms"][0] == pytest.approx(1.0)

    @pytest.mark.phase7
    def test_output_decay_floor(self):
        t = np.linspace(0.0, 1.0, 11)
        traj = Trajectory(t, np.zeros((t.size, 1)), np.zeros(t.size))
        assert np.isnan(output_decay(traj, lambda t, x: x)["log_slope"])

    @pytest.mark.phase7
    def test_posture_sensitivity(self):
        nu = Regressor([[0.0, 1.0, 0.0]], [0.0], [[1.0]], [0.0], np.zeros(3), np.ones(3), [0.0], [1.0])
        report = posture_sensitivity(nu, FeatureMap(x1_index=(0, 1)), 0.2, [0.0, 0.5], sweep_index=0,
                                     deltas=np.linspace(-0.01, 0.01, 5), component=0)
        assert report.K1 == pytest.approx(1.0, rel=1e-3)
        assert report.K2 == pytest.approx(0.0, abs=1e-8)
        np.testing.assert_allclose(report.values, np.tanh(report.deltas))
