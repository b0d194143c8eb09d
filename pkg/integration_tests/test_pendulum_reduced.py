"""
Reduced-order cart-pendulum library with the backstepping insertion map and
the embedding controller under an input disturbance.
"""
import json

import numpy as np
import pytest

from integration_tests.utils import stage_metrics

CONFIG_NAME = "pendulum_reduced"
DISTURBANCE_START = 11.5


@pytest.mark.slow
class TestReducedEmbedding:

    def test_all_stages_pass(self, finished_run):
        _, summary = finished_run
        assert set(summary.stages.values()) == {"ok"}
        assert summary.metrics.total_trajectories == 25

    def test_insertion_stabilizes_x1(self, finished_run):
        pipeline, _ = finished_run
        insertion = stage_metrics(pipeline, "optimize")["insertion"]
        assert insertion["kind"] == "linear-backstepping"
        assert insertion["x1_max_real_eigenvalue"] < 0

    def test_boundary_condition_imposed(self, finished_run):
        pipeline, _ = finished_run
        report = json.loads((pipeline.out / "verify" / "verification.json").read_text())
        assert report["boundary"]["passed"]

    def test_features_stay_injective(self, finished_run):
        _, summary = finished_run
        assert summary.metrics.min_sigma2 >= 0.5

    def test_output_decays_and_recovers(self, finished_run):
        pipeline, _ = finished_run
        data = np.loadtxt(pipeline.out / "simulate" / "embedding_disturbance_output.csv", delimiter=",", skiprows=1)
        t, norms = data[:, 0], data[:, 1]
        assert norms[(t > 8.0) & (t < DISTURBANCE_START)].max() <= 1e-2
        assert norms[t > DISTURBANCE_START].max() > norms[(t > 8.0) & (t < DISTURBANCE_START)].max()
        assert norms[-1] <= 1e-2

    def test_state_regulated(self, finished_run):
        pipeline, _ = finished_run
        assert stage_metrics(pipeline, "simulate")["embedding_disturbance"]["final_norm"] <= 0.05
