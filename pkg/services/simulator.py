"""
Simulation service for the estimation toolkit.
Generates a planar robot trajectory driven by a smooth body-twist profile,
noisy odometry, and tag-to-anchor UWB ranges with NLOS-style positive
corruption. Output is a Dataset, so simulated runs and converted real logs
go through the same estimator path.
"""
import logging
from typing import Optional, Tuple, Union

import numpy as np

from config import config
from models.dataset import Dataset, OdometryStream, RangeStream, Trajectory
from models.schemas import ExperimentConfig, SimConfig
from services.graph import process_covariance
from services.liegroup import Pose2, exp_map, retract

# Configure logging
logging.basicConfig(level=config.LOG_LEVEL, format=config.LOG_FORMAT)
logger = logging.getLogger(__name__)

# Independent child streams of one trial seed
STREAMS = ("profile", "odometry", "corruption", "prior")

# Simulated runs are Datasets with truth, nlos flags and the prior in meta
SimOutput = Dataset

SeedLike = Union[int, np.random.SeedSequence, np.random.Generator, None]


def make_rng(seed: SeedLike) -> np.random.Generator:
    """Counter-based generator (Philox) from an int or a SeedSequence; generators pass through."""
    if isinstance(seed, np.random.Generator):
        return seed
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(seed)
    return np.random.Generator(np.random.Philox(seed))


def trial_seeds(master_seed: int, n_trials: int) -> Tuple[np.random.SeedSequence, list]:
    """Split a master seed into a noise-fit stream and one stream per trial."""
    children = np.random.SeedSequence(master_seed).spawn(n_trials + 1)
    return children[0], children[1:]


def nominal_inputs(sim: SimConfig, t: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Sum-of-sinusoids body twist (omega, v_x, 0) with random phases."""
    phases = rng.uniform(0.0, 2.0 * np.pi, size=2)
    period_v, period_w = sim.modulation_periods
    speed = sim.speed * (1.0 + sim.speed_modulation * np.sin(2.0 * np.pi * t / period_v + phases[0]))
    yaw_rate = sim.yaw_rate + sim.yaw_rate_modulation * np.sin(2.0 * np.pi * t / period_w + phases[1])
    return np.column_stack([yaw_rate, speed, np.zeros_like(t)])


def integrate(start: Pose2, u: np.ndarray, dt: float) -> Pose2:
    """X_{i+1} = X_i ⊕_r dt·u_i for every record; returns N+1 poses."""
    increments = exp_map(dt * np.asarray(u, dtype=float))
    poses = [start]
    for i in range(len(u)):
        poses.append(poses[-1].compose(increments[i]))
    return Pose2.stack(poses)


def corrupt_ranges(clean, sigma: float, fraction: float, lo_hi_sigmas: Tuple[float, float],
                   seed: SeedLike = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Add N(0, σ²) noise to every range and U(lo·σ, hi·σ) to a Bernoulli subset.

    Args:
        clean: Noise-free ranges.
        sigma: Gaussian range noise standard deviation.
        fraction: Probability that a measurement is corrupted.
        lo_hi_sigmas: Corruption bounds in units of sigma.
        seed: Seed or SeedSequence for the draws.

    Returns:
        Tuple (noisy ranges, boolean corruption flags).
    """
    clean = np.asarray(clean, dtype=float)
    lo, hi = lo_hi_sigmas
    rng = make_rng(seed)
    noisy = clean + sigma * rng.standard_normal(clean.shape)
    flags = rng.uniform(size=clean.shape) < fraction
    offsets = rng.uniform(lo * sigma, hi * sigma, size=clean.shape)
    noisy = noisy + np.where(flags, offsets, 0.0)
    return noisy, flags


def draw_range_residuals(sim: SimConfig, n: int, seed: SeedLike = None) -> np.ndarray:
    """Residuals y - g(X) under the simulated range noise, for noise-model fitting."""
    residuals, _ = corrupt_ranges(
        np.zeros(n), sim.range_sigma, sim.corruption_fraction,
        (sim.corruption_low_sigmas, sim.corruption_high_sigmas), seed,
    )
    return residuals


def simulate_trajectory(experiment: ExperimentConfig, seed: SeedLike = None) -> SimOutput:
    """
    Simulate one trial: truth, odometry, ranges and a perturbed prior.

    Truth is integrated at the odometry rate with the noiseless inputs; the
    recorded odometry adds w ~ N(0, Q_c'/dt) with Q_c' the inflated process
    densities of the graph configuration. Ranges are taken at the range rate
    for every tag-anchor pair.

    Args:
        experiment: Experiment configuration (sim and graph sections).
        seed: Trial seed; defaults to ``experiment.seed``.

    Returns:
        Dataset with truth at the state rate, nlos flags on the ranges and
        ``prior_mean``/``prior_sigmas`` in meta.
    """
    sim, graph = experiment.sim, experiment.graph
    seed = experiment.seed if seed is None else seed
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(seed)
    rngs = dict(zip(STREAMS, (make_rng(s) for s in seed.spawn(len(STREAMS)))))

    stride = max(1, int(round(sim.odometry_rate_hz / graph.state_rate_hz)))
    n_records = sim.poses * stride
    dt = 1.0 / sim.odometry_rate_hz
    t = np.arange(n_records) / sim.odometry_rate_hz

    u = nominal_inputs(sim, t, rngs["profile"])
    start = Pose2.from_vector(np.asarray(sim.start, dtype=float))
    path = integrate(start, u, dt)

    measured = u.copy()
    if sim.odometry_noise:
        q = process_covariance(1.0, graph.q_c, graph.lateral_inflation) / dt
        measured += rngs["odometry"].multivariate_normal(np.zeros(3), q, size=n_records, method="cholesky")

    state_index = np.arange(sim.poses + 1) * stride
    truth = Trajectory(state_index / sim.odometry_rate_hz, path[state_index])

    range_stride = max(1, int(round(sim.odometry_rate_hz / sim.range_rate_hz)))
    epochs = np.arange(0, n_records + 1, range_stride)
    anchor_ids = sorted(a.id for a in sim.anchors)
    tag_ids = sorted(tg.id for tg in sim.tags)
    anchors = {a.id: np.array([a.x, a.y]) for a in sim.anchors}
    tags = {tg.id: np.array([tg.x, tg.y]) for tg in sim.tags}

    rows_t, rows_tag, rows_anchor, clean = [], [], [], []
    for tag_id in tag_ids:
        positions = path[epochs].act(tags[tag_id])
        for anchor_id in anchor_ids:
            rows_t.append(epochs / sim.odometry_rate_hz)
            rows_tag.append(np.full(epochs.size, tag_id))
            rows_anchor.append(np.full(epochs.size, anchor_id))
            clean.append(np.linalg.norm(positions - anchors[anchor_id], axis=-1))
    t_r, tag_r, anchor_r, clean_r = (np.concatenate(v) for v in (rows_t, rows_tag, rows_anchor, clean))
    order = np.lexsort((anchor_r, tag_r, t_r))
    noisy, flags = corrupt_ranges(
        clean_r[order], sim.range_sigma, sim.corruption_fraction,
        (sim.corruption_low_sigmas, sim.corruption_high_sigmas), rngs["corruption"],
    )
    ranges = RangeStream(t_r[order], tag_r[order], anchor_r[order], noisy, flags)

    prior_cov = np.diag(np.square(graph.prior_sigmas))
    offset = rngs["prior"].multivariate_normal(np.zeros(3), prior_cov)
    prior_mean = retract(truth.states[0], offset, graph.side)

    meta = {
        "prior_mean": prior_mean.to_vector().tolist(),
        "prior_sigmas": list(graph.prior_sigmas),
        "nlos_fraction": float(flags.mean()) if flags.size else 0.0,
    }
    logger.info(
        f"Simulated {sim.poses} poses, {n_records} odometry records, {len(ranges)} ranges "
        f"({int(flags.sum())} corrupted)"
    )
    return Dataset(anchors, tags, OdometryStream(t, measured), ranges, truth, meta)


def prior_covariance(dataset: Dataset, default_sigmas) -> np.ndarray:
    """Prior covariance from meta ``prior_sigmas``, falling back to the configured sigmas."""
    sigmas: Optional[list] = dataset.meta.get("prior_sigmas")
    return np.diag(np.square(np.asarray(sigmas if sigmas is not None else default_sigmas, dtype=float)))
