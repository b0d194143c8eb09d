"""
Three-link walker: periodic gaits over a speed range, transition libraries,
split-phase regressors and the high-gain hybrid embedding controller.
"""
import json

import numpy as np
import pytest

from integration_tests.utils import stage_metrics

CONFIG_NAME = "biped_walking"


@pytest.mark.slow
class TestBipedWalking:

    def test_gaits_found(self, finished_run):
        pipeline, _ = finished_run
        gaits = stage_metrics(pipeline, "optimize")["gaits"]
        assert sum(status in ("converged", "feasible") for status in gaits.values()) >= 5

    def test_boundary_residuals(self, finished_run):
        pipeline, _ = finished_run
        report = json.loads((pipeline.out / "verify" / "verification.json").read_text())
        assert report["boundary"]["max_residual"] <= 1e-6

    def test_split_phase_regressors_saved(self, finished_run):
        pipeline, _ = finished_run
        for name in ("nu_i", "nu_ii", "mu_bar_i", "mu_bar_ii"):
            assert (pipeline.out / "fit" / f"{name}.json").exists()

    def test_return_maps_stable_between_gaits(self, finished_run):
        pipeline, _ = finished_run
        rows = json.loads((pipeline.out / "verify" / "verification.json").read_text())["poincare"]
        interpolated = [r for r in rows if float(r["section"][6:-1]) in pipeline.config.verification.poincare_speeds]
        assert len(interpolated) >= 5
        assert all(r["stable"] for r in rows)

    def test_push_recovery(self, finished_run):
        pipeline, _ = finished_run
        push = stage_metrics(pipeline, "simulate")["push"]
        assert push["recovery_steps"] is not None and push["recovery_steps"] <= 5

    def test_walk_tracks_speed(self, finished_run):
        pipeline, _ = finished_run
        speeds = np.loadtxt(pipeline.out / "simulate" / "walk_speeds.csv", delimiter=",", skiprows=1)[:, 1]
        assert abs(speeds[-1] - 0.6) <= 0.05
