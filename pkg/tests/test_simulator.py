"""
Tests for the trajectory and range simulator.
"""
import numpy as np
import pytest

from models.schemas import ExperimentConfig, GraphConfig, SimConfig
from services.graph import build_graph
from services.noise import GaussianNoise
from services.simulator import (
    corrupt_ranges, draw_range_residuals, make_rng, prior_covariance, simulate_trajectory, trial_seeds,
)


def experiment(**sim_overrides):
    sim = {"poses": 20, "trials": 2}
    sim.update(sim_overrides)
    return ExperimentConfig(seed=7, sim=SimConfig(**sim))


class TestTrajectory:
    def test_constant_twist_traces_a_circle(self):
        cfg = experiment(speed_modulation=0.0, yaw_rate_modulation=0.0, odometry_noise=False)
        truth = simulate_trajectory(cfg).truth
        radius = cfg.sim.speed / cfg.sim.yaw_rate
        center = np.array([cfg.sim.start[1], cfg.sim.start[2] + radius])
        distances = np.linalg.norm(truth.states.translation - center, axis=1)
        np.testing.assert_allclose(distances, radius, atol=1e-9)

    def test_zero_yaw_rate_drives_straight(self):
        cfg = experiment(speed_modulation=0.0, yaw_rate=0.0, yaw_rate_modulation=0.0, odometry_noise=False)
        truth = simulate_trajectory(cfg).truth
        np.testing.assert_allclose(truth.states.translation[:, 1], cfg.sim.start[2], atol=1e-12)
        assert truth.states.translation[-1, 0] == pytest.approx(cfg.sim.start[1] + cfg.sim.speed * 2.0)

    def test_noise_free_odometry_has_no_lateral_velocity(self):
        dataset = simulate_trajectory(experiment(odometry_noise=False))
        assert np.all(dataset.odometry.u[:, 2] == 0.0)

    def test_truth_on_state_grid(self):
        dataset = simulate_trajectory(experiment())
        assert len(dataset.truth) == 21
        np.testing.assert_allclose(np.diff(dataset.truth.timestamps), 0.1)
        assert len(dataset.odometry) == 200


class TestRanges:
    def test_row_count_and_order(self):
        cfg = experiment()
        ranges = simulate_trajectory(cfg).ranges
        epochs = 200 // 10 + 1
        assert len(ranges) == epochs * len(cfg.sim.tags) * len(cfg.sim.anchors)
        keys = np.column_stack([ranges.t, ranges.tag_id, ranges.anchor_id])
        assert np.all(np.lexsort(keys.T[::-1]) == np.arange(len(ranges)))

    def test_corruption_statistics(self):
        clean = np.zeros(200_000)
        noisy, flags = corrupt_ranges(clean, 0.1, 0.25, (1.0, 6.0), seed=3)
        assert flags.mean() == pytest.approx(0.25, abs=0.005)
        assert noisy[~flags].std() == pytest.approx(0.1, rel=0.01)
        assert noisy[flags].mean() == pytest.approx(0.35, abs=0.005)

    def test_no_corruption(self):
        _, flags = corrupt_ranges(np.zeros(1000), 0.1, 0.0, (1.0, 6.0), seed=3)
        assert not flags.any()

    def test_residual_draws_are_right_skewed(self):
        residuals = draw_range_residuals(SimConfig(), 50_000, seed=4)
        assert np.mean(residuals) > 0.0
        assert np.mean(residuals > 0.3) > np.mean(residuals < -0.3)

    def test_dataset_builds_a_graph(self):
        cfg = experiment()
        dataset = simulate_trajectory(cfg)
        prior = (dataset.truth.states[0], prior_covariance(dataset, cfg.graph.prior_sigmas))
        graph = build_graph(dataset.odometry, dataset.ranges, dataset.anchors, dataset.tags, prior,
                            GaussianNoise.from_sigma(0.1), cfg.graph.q_c)
        assert graph.n_states == len(dataset.truth)
        assert graph.counts()["range"] == len(dataset.ranges)


class TestSeeding:
    def test_same_seed_same_dataset(self):
        first = simulate_trajectory(experiment())
        second = simulate_trajectory(experiment())
        np.testing.assert_array_equal(first.ranges.range, second.ranges.range)
        np.testing.assert_array_equal(first.odometry.u, second.odometry.u)
        assert first.meta == second.meta

    def test_different_seed_differs(self):
        cfg = experiment()
        _, seeds = trial_seeds(cfg.seed, 2)
        a = simulate_trajectory(cfg, seeds[0])
        b = simulate_trajectory(cfg, seeds[1])
        assert not np.array_equal(a.ranges.range, b.ranges.range)

    def test_trial_seeds_are_reproducible(self):
        fit_a, trials_a = trial_seeds(11, 3)
        fit_b, trials_b = trial_seeds(11, 3)
        assert len(trials_a) == 3
        assert make_rng(fit_a).random() == make_rng(fit_b).random()
        assert make_rng(trials_a[2]).random() == make_rng(trials_b[2]).random()

    def test_generators_pass_through(self):
        rng = np.random.default_rng(0)
        assert make_rng(rng) is rng

    def test_prior_is_perturbed_from_truth(self):
        dataset = simulate_trajectory(experiment())
        assert dataset.meta["prior_mean"] != dataset.truth.states[0].to_vector().tolist()
        assert dataset.meta["prior_sigmas"] == GraphConfig().prior_sigmas
