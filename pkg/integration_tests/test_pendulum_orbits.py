"""
Orbit-transition library: regression insertion map, coordinate change for
the x1 features, scheduled transitions between orbits.
"""
import numpy as np
import pytest

from app.services.library_service import assemble_dataset, injectivity_diagnostic, sample_times
from app.services.orbit_service import cart_pendulum_orbit
from app.services.simulation_service import Trajectory
from integration_tests.utils import stage_metrics

CONFIG_NAME = "pendulum_orbits"
SETTLE_PERIODS = 3


@pytest.mark.slow
class TestOrbitTransitions:

    def test_all_stages_pass(self, finished_run):
        _, summary = finished_run
        assert set(summary.stages.values()) == {"ok"}

    def test_raw_features_lose_rank(self, finished_run):
        pipeline, _ = finished_run
        b = pipeline.bundle
        times = sample_times(b.period, pipeline.config.library.samples_per_period)
        raw = assemble_dataset(pipeline.load_library(), "reduced-nu", b.system.decomposition, times)
        report = injectivity_diagnostic(raw)
        near = np.abs(report.times - 1.8) <= 0.2
        assert report.ratios[near].min() < 1e-2

    def test_mapped_features_injective(self, finished_run):
        _, summary = finished_run
        assert summary.metrics.min_sigma2 >= 0.1

    def test_transitions_settle(self, finished_run):
        pipeline, _ = finished_run
        traj = Trajectory.from_csv(pipeline.out / "simulate" / "orbit_schedule.csv")
        scenario = pipeline.config.scenarios[0]
        period = pipeline.bundle.period
        for entry in scenario.schedule:
            orbit = cart_pendulum_orbit(pipeline.bundle.params, *entry.parameters)
            t_check = entry.time + SETTLE_PERIODS * period
            x = traj.state_at(t_check)
            assert np.max(np.abs(x[:2] - orbit.x1)) <= 0.05, f"orbit {entry.parameters} at t = {t_check}"

    def test_no_jump_at_transitions(self, finished_run):
        pipeline, summary = finished_run
        rmse = np.sqrt(summary.metrics.validation_mse["nu"])
        data = np.loadtxt(pipeline.out / "simulate" / "orbit_schedule_output.csv", delimiter=",", skiprows=1)
        t, norms = data[:, 0], data[:, 1]
        for entry in pipeline.config.scenarios[0].schedule[1:]:
            k = int(np.argmin(np.abs(t - entry.time)))
            assert abs(norms[k] - norms[k - 1]) <= 5.0 * rmse + 1e-3

    def test_disturbance_rejected(self, finished_run):
        pipeline, _ = finished_run
        traj = Trajectory.from_csv(pipeline.out / "simulate" / "orbit_schedule.csv")
        final = pipeline.config.scenarios[0].schedule[-1].parameters
        orbit = cart_pendulum_orbit(pipeline.bundle.params, *final)
        assert np.max(np.abs(traj.state_at(80.0)[:2] - orbit.x1)) <= 0.05

    def test_poincare_sections_converge(self, finished_run):
        pipeline, summary = finished_run
        assert summary.metrics.max_poincare_modulus < 1.0
        assert stage_metrics(pipeline, "verify")["passed"]
