"""
Tests for the Monte Carlo harness and its reports.
"""
import os

import numpy as np
import pytest

from models.schemas import ExperimentConfig, NoiseConfig, SimConfig
from services.dataset_io import read_table
from services.esgvi import VariationalEstimate
from services.map_solver import MapEstimate
from services.metrics import summarize
from services.montecarlo import (
    dataset_graph, estimate_dataset, fit_models, run_estimators, run_monte_carlo, write_report,
)
from services.noise import AsymCauchyNoise, GmmNoise, SkewLaplaceNoise, save_noise_model
from services.simulator import simulate_trajectory, trial_seeds


def small_experiment(**overrides):
    document = {
        "seed": 5,
        "sim": SimConfig(trials=2, poses=10),
        "noise": NoiseConfig(fit_samples=500, gmm_components=2),
    }
    document.update(overrides)
    return ExperimentConfig(**document)


@pytest.fixture(scope="module")
def experiment():
    return small_experiment()


@pytest.fixture(scope="module")
def models(experiment):
    fit_seed, _ = trial_seeds(experiment.seed, experiment.sim.trials)
    return fit_models(experiment, fit_seed)


class TestModels:
    def test_one_model_per_method(self, models):
        assert isinstance(models["map-c"], AsymCauchyNoise)
        assert isinstance(models["map-gmm"], GmmNoise)
        assert isinstance(models["esgvi"], SkewLaplaceNoise)
        assert len(models["map-gmm"].params.components) == 2

    def test_warm_start_adds_the_cauchy_model(self, experiment):
        models = fit_models(experiment, 0, methods=["esgvi"])
        assert sorted(models) == ["esgvi", "map-c"]

    def test_model_paths_override_fitting(self, tmp_path, experiment, models):
        path = str(tmp_path / "esgvi.json")
        save_noise_model(models["map-c"], path)
        configured = small_experiment(noise=NoiseConfig(fit_samples=500, model_paths={"esgvi": path}))
        assert fit_models(configured, 0, methods=["esgvi"])["esgvi"] == models["map-c"]


class TestEstimators:
    def test_every_method_runs_with_monotone_traces(self, experiment, models):
        dataset = simulate_trajectory(experiment)
        graph = dataset_graph(dataset, experiment, models["map-c"])
        outcomes = run_estimators(graph, experiment, models, experiment.methods)
        assert isinstance(outcomes["map-c"], MapEstimate)
        assert isinstance(outcomes["map-gmm"], MapEstimate)
        assert isinstance(outcomes["esgvi"], VariationalEstimate)
        assert outcomes["esgvi"].converged
        for outcome in outcomes.values():
            values = np.array([report.loss for report in outcome.trace])
            assert np.all(np.diff(values) <= 1e-12 * np.maximum(1.0, np.abs(values[:-1])))

    def test_estimate_dataset_without_truth(self, experiment, models):
        dataset = simulate_trajectory(experiment)
        dataset.truth = None
        estimate = estimate_dataset(dataset, experiment, "map-gmm", models)
        assert len(estimate.trajectory) == experiment.sim.poses + 1


class TestMonteCarlo:
    def test_results_are_ordered_by_trial_then_method(self, experiment, models):
        results = run_monte_carlo(experiment, models=models, progress=False)
        assert [(r.trial, r.estimator) for r in results] == [
            (trial, method) for trial in range(2) for method in experiment.methods
        ]
        assert not any(r.failed for r in results)
        assert [r.trial for r in results if r.estimator == "esgvi" and r.failed] == []
        assert all(np.isfinite(r.anees) for r in results)

    def test_reruns_write_identical_reports(self, tmp_path, experiment, models):
        paths = []
        for run in ("first", "second"):
            results = run_monte_carlo(experiment, models=models, progress=False)
            paths.append(write_report(results, str(tmp_path / run), {"config_hash": "h", "seed": 5}))
        for first, second in zip(*paths):
            with open(first, "rb") as a, open(second, "rb") as b:
                assert a.read() == b.read()

    def test_report_layout(self, tmp_path, experiment, models):
        results = run_monte_carlo(experiment, models=models, progress=False)
        summary_path, aggregate_path = write_report(results, str(tmp_path))
        summary = read_table(summary_path)
        aggregate = read_table(aggregate_path, sep="\t")
        assert list(summary.columns[:5]) == ["estimator", "trial", "rmse_rot_rad", "rmse_trans_m", "anees"]
        assert aggregate["estimator"].tolist() == experiment.methods
        assert (aggregate["trials"] == 2).all()
        assert os.path.basename(aggregate_path) == "aggregate.tsv"

    def test_parallel_run_matches_serial(self, experiment, models):
        serial = run_monte_carlo(experiment, jobs=1, models=models, progress=False)
        parallel = run_monte_carlo(experiment, jobs=2, models=models, progress=False)
        np.testing.assert_array_equal([r.rmse_trans for r in serial], [r.rmse_trans for r in parallel])


@pytest.mark.slow
def test_default_configuration_reproduces_the_estimator_ordering():
    experiment = ExperimentConfig()
    results = run_monte_carlo(experiment, jobs=os.cpu_count() or 1, progress=False)
    assert not any(r.failed for r in results)
    _, aggregate = summarize(results)
    table = aggregate.set_index("estimator")
    assert table.loc["esgvi", "rmse_trans_m"] <= table.loc["map-c", "rmse_trans_m"]
    assert table.loc["esgvi", "rmse_rot_rad"] <= 1.1 * table.loc["map-c", "rmse_rot_rad"]
    assert table["anees"].between(0.7, 1.3).all()
