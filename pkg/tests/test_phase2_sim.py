"""
Phase 2 Tests: Simulation & Event Location

Tests for:
- Fixed-step RK4 accuracy and step-halving convergence
- Repeatable runs
- Half-open disturbance windows
- Guard-crossing location and locator agreement
- Hybrid execution bookkeeping and stalls
- Trajectory CSV files
"""
import numpy as np
import pytest
from scipy.linalg import expm

from app.errors import ContractViolationError, DivergenceError, EventDetectionError, StallError
from app.models.base import ControlSystem, HybridModel, StateDecomposition
from app.services.simulation_service import (
    DisturbanceSignal,
    DisturbanceWindow,
    HybridExecution,
    OpenLoopInput,
    Phase,
    Trajectory,
    as_controller,
    integrate,
    locate_event,
    simulate_hybrid,
)
from tests.utils import linear_system


def _hopper(offset: float = 0.0) -> HybridModel:
    """h decreases at unit rate; the guard is h - offset and the reset lifts h by 2."""

    def f(t, x, u):
        out = np.zeros(np.broadcast_shapes(x.shape, u.shape[:-1] + (2,)))
        out[..., 0] = -1.0
        out[..., 1] = u[..., 0]
        return out

    sys = ControlSystem("hopper", 2, 1, f, period=2.0, decomposition=StateDecomposition.leading(1, 1))
    return HybridModel("hopper", sys, guard=lambda x: float(x[0] - offset),
                       reset=lambda x: np.array([x[0] + 2.0, x[1]]), decomposition=sys.decomposition)


class TestIntegrate:
    """Closed-loop RK4."""

    @pytest.mark.phase2
    def test_matches_matrix_exponential(self):
        A = np.array([[0.0, 1.0], [-1.0, -0.1]])
        sys = linear_system(A, [[0.0], [1.0]])
        x0 = np.array([1.0, 0.0])
        traj = integrate(sys, None, x0, 0.0, 2 * np.pi)
        np.testing.assert_allclose(traj.final_state, expm(A * 2 * np.pi) @ x0, atol=1e-9)
        assert traj.times[-1] == pytest.approx(2 * np.pi)

    @pytest.mark.phase2
    def test_grid_ends_exactly_on_t1(self):
        sys = linear_system([[0.0]], [[1.0]])
        traj = integrate(sys, None, [0.0], 0.0, 0.0105, dt=1e-3)
        assert traj.times[-1] == 0.0105
        assert np.all(np.diff(traj.times) > 0)

    @pytest.mark.phase2
    def test_feedback_controller(self):
        sys = linear_system([[0.0]], [[1.0]])
        traj = integrate(sys, lambda t, x: -2.0 * x, [1.0], 0.0, 1.0)
        assert traj.final_state[0] == pytest.approx(np.exp(-2.0), rel=1e-8)
        np.testing.assert_allclose(traj.inputs[:, 0], -2.0 * traj.states[:, 0])

    @pytest.mark.phase2
    def test_open_loop_replay(self):
        sys = linear_system([[0.0]], [[1.0]])
        ctrl = OpenLoopInput([0.0, 1.0], np.array([[1.0], [1.0]]))
        traj = integrate(sys, ctrl, [0.0], 0.0, 1.0)
        assert traj.final_state[0] == pytest.approx(1.0)

    @pytest.mark.phase2
    def test_empty_interval_rejected(self):
        sys = linear_system([[0.0]], [[1.0]])
        with pytest.raises(ContractViolationError):
            integrate(sys, None, [0.0], 1.0, 1.0)
        with pytest.raises(ContractViolationError):
            integrate(sys, None, [0.0, 0.0], 0.0, 1.0)

    @pytest.mark.phase2
    def test_finite_escape_reported(self):
        def f(t, x, u):
            return x ** 2

        sys = ControlSystem("blowup", 1, 1, f, period=1.0)
        with pytest.raises(DivergenceError) as info:
            integrate(sys, None, [1.0], 0.0, 3.0)
        assert info.value.time > 0.9

    @pytest.mark.phase2
    def test_rejects_non_controller(self):
        with pytest.raises(ContractViolationError):
            as_controller(42, 1)

    @pytest.mark.phase2
    def test_step_halving_error_ratio(self):
        def f(t, x, u):
            out = np.empty(np.broadcast_shapes(x.shape, u.shape[:-1] + (2,)))
            out[..., 0] = x[..., 1]
            out[..., 1] = -np.sin(x[..., 0]) + u[..., 0]
            return out

        sys = ControlSystem("pendulum", 2, 1, f, period=1.0)
        ends = [integrate(sys, None, [1.0, 0.0], 0.0, 2.0, dt=dt).final_state for dt in (0.04, 0.02, 0.01)]
        ratio = np.linalg.norm(ends[0] - ends[1]) / np.linalg.norm(ends[1] - ends[2])
        assert 16.0 * 0.7 <= ratio <= 16.0 * 1.3

    @pytest.mark.phase2
    def test_repeated_runs_are_identical(self):
        A = np.array([[0.0, 1.0], [2.0, -0.3]])
        sys = linear_system(A, [[0.0], [1.0]])
        signal = DisturbanceSignal((DisturbanceWindow(0.3, 0.6, 0.7),))
        runs = [integrate(sys, lambda t, x: -np.array([4.0 * x[0] + 2.0 * x[1]]), [0.2, -0.1], 0.0, 1.5,
                          disturbance=signal) for _ in range(2)]
        np.testing.assert_array_equal(runs[0].times, runs[1].times)
        np.testing.assert_array_equal(runs[0].states, runs[1].states)
        np.testing.assert_array_equal(runs[0].inputs, runs[1].inputs)


class TestDisturbance:

    @pytest.mark.phase2
    def test_window_is_half_open(self):
        w = DisturbanceWindow(0.5, 1.0, 2.0)
        assert w.active(0.5)
        assert w.active(0.999)
        assert not w.active(1.0)
        assert not w.active(0.4999)

    @pytest.mark.phase2
    def test_pulse_integrates_to_area(self):
        sys = linear_system([[0.0]], [[1.0]])
        signal = DisturbanceSignal((DisturbanceWindow(0.5, 1.0, 2.0),))
        traj = integrate(sys, None, [0.0], 0.0, 2.0, disturbance=signal)
        assert traj.final_state[0] == pytest.approx(1.0, abs=2e-3)
        assert traj.inputs[traj.index_of(0.75), 0] == pytest.approx(2.0)
        assert traj.inputs[traj.index_of(1.5), 0] == 0.0

    @pytest.mark.phase2
    def test_invalid_window(self):
        with pytest.raises(ContractViolationError):
            DisturbanceWindow(1.0, 1.0, 1.0)

    @pytest.mark.phase2
    def test_channel_out_of_range(self):
        signal = DisturbanceSignal((DisturbanceWindow(0.0, 1.0, 1.0, channel=3),))
        with pytest.raises(ContractViolationError):
            signal.value(0.5, 1)


class TestLocateEvent:
    """Zero crossing of guard(advance(s)) on (0, h]."""

    @staticmethod
    def _advance(s):
        return np.array([np.cos(s)])

    @pytest.mark.phase2
    @pytest.mark.parametrize("method", ["bisection", "secant"])
    def test_finds_root(self, method):
        s, x = locate_event(self._advance, 1.5, lambda x: x[0] - 0.5, 0.5, method=method, tol=1e-12)
        assert s == pytest.approx(np.pi / 3, abs=1e-10)
        assert abs(x[0] - 0.5) <= 1e-12

    @pytest.mark.phase2
    def test_no_sign_change(self):
        with pytest.raises(EventDetectionError):
            locate_event(self._advance, 0.5, lambda x: x[0] - 0.5, 0.5)

    @pytest.mark.phase2
    def test_unknown_method(self):
        with pytest.raises(ContractViolationError):
            locate_event(self._advance, 1.5, lambda x: x[0] - 0.5, 0.5, method="newton")


class TestHybridSimulation:
    """Phase i until impact, phase ii until tau = T_p."""

    @pytest.mark.phase2
    @pytest.mark.parametrize("locator", ["bisection", "secant"])
    def test_periodic_hopper(self, locator):
        model = _hopper()
        run = simulate_hybrid(model, None, [0.5, 0.3], n_steps=3, dt=0.01, locator=locator)
        np.testing.assert_allclose(run.impact_times, [0.5, 2.5, 4.5], atol=1e-8)
        np.testing.assert_allclose(run.cycle_starts, [0.0, 2.0, 4.0], atol=1e-12)
        np.testing.assert_allclose(run.final_state, [0.5, 0.3], atol=1e-8)
        assert run.n_impacts == 3
        assert [p for p, _ in run.segments] == [Phase.I, Phase.II] * 3
        for x in run.pre_impact_states:
            assert abs(x[0]) <= 1e-10

    @pytest.mark.phase2
    def test_locators_agree_on_nonlinear_crossing(self):
        # h_dot = -(1 + h^2) reaches h = 0 at atan(h0); the reset makes the motion 1-periodic
        def f(t, x, u):
            out = np.zeros(np.broadcast_shapes(x.shape, u.shape[:-1] + (2,)))
            out[..., 0] = -(1.0 + x[..., 0] ** 2)
            return out

        sys = ControlSystem("tangent", 2, 1, f, period=1.0, decomposition=StateDecomposition.leading(1, 1))
        model = HybridModel("tangent", sys, guard=lambda x: float(x[0]),
                            reset=lambda x: np.array([x[0] + np.tan(1.0), x[1]]), decomposition=sys.decomposition)
        runs = {m: simulate_hybrid(model, None, [0.5, 0.0], n_steps=3, dt=0.01, locator=m)
                for m in ("bisection", "secant")}
        np.testing.assert_allclose(runs["bisection"].impact_times, runs["secant"].impact_times, rtol=0, atol=1e-8)
        np.testing.assert_allclose(runs["secant"].impact_times, np.arctan(0.5) + np.arange(3), atol=1e-5)

    @pytest.mark.phase2
    def test_perturbation_applied_at_cycle_start(self):
        model = _hopper()
        run = simulate_hybrid(model, None, [0.5, 0.0], n_steps=2, dt=0.01, perturbations={1: np.array([0.1, 0.0])})
        assert run.impact_times[1] == pytest.approx(2.6, abs=1e-8)
        np.testing.assert_allclose(run.cycle_start_states[1], [0.6, 0.0], atol=1e-8)

    @pytest.mark.phase2
    def test_stall_without_impact(self):
        model = _hopper(offset=-100.0)
        with pytest.raises(StallError):
            simulate_hybrid(model, None, [0.5, 0.0], n_steps=1, dt=0.01, max_phase_duration=1.0)

    @pytest.mark.phase2
    def test_zero_steps(self):
        run = simulate_hybrid(_hopper(), None, [0.5, 0.0], n_steps=0)
        assert run.segments == [] and run.n_impacts == 0
        np.testing.assert_array_equal(run.final_state, [0.5, 0.0])

    @pytest.mark.phase2
    def test_phase_order_enforced(self):
        run = HybridExecution(initial_state=np.zeros(1))
        seg = Trajectory(np.array([0.0]), np.zeros((1, 1)), np.zeros((1, 1)))
        run.append(Phase.I, seg)
        with pytest.raises(ContractViolationError):
            run.append(Phase.I, seg)

    @pytest.mark.phase2
    def test_execution_csv_has_phase_column(self, tmp_path):
        run = simulate_hybrid(_hopper(), None, [0.5, 0.0], n_steps=1, dt=0.1)
        path = tmp_path / "hop.csv"
        run.to_csv(path)
        lines = path.read_text().splitlines()
        assert lines[0].split(",")[:2] == ["phase", "t"]
        assert {line.split(",")[0] for line in lines[1:]} == {"i", "ii"}


class TestTrajectory:

    @pytest.mark.phase2
    def test_csv_round_trip(self, tmp_path):
        traj = Trajectory(np.linspace(0.0, 1.0, 5), np.arange(10.0).reshape(5, 2) / 3.0, np.ones((5, 1)) / 7.0)
        path = tmp_path / "traj.csv"
        traj.to_csv(path)
        back = Trajectory.from_csv(path)
        np.testing.assert_array_equal(back.times, traj.times)
        np.testing.assert_array_equal(back.states, traj.states)
        np.testing.assert_array_equal(back.inputs, traj.inputs)

    @pytest.mark.phase2
    def test_interpolation_and_restriction(self):
        traj = Trajectory(np.array([0.0, 1.0, 2.0]), np.array([[0.0], [2.0], [4.0]]), np.zeros((3, 1)))
        assert traj.state_at(0.5)[0] == pytest.approx(1.0)
        part = traj.restrict(0.5, 2.0)
        np.testing.assert_array_equal(part.times, [1.0, 2.0])
        with pytest.raises(ContractViolationError):
            traj.index_of(0.5)

    @pytest.mark.phase2
    def test_times_must_increase(self):
        with pytest.raises(ContractViolationError):
            Trajectory(np.array([0.0, 0.0]), np.zeros((2, 1)), np.zeros((2, 1)))
