"""
Monte Carlo service for the estimation toolkit.
Runs the three estimators (MAP-C, MAP-GMM, ESGVI) on simulated trials,
scores them against truth and writes the per-trial and aggregate reports.
The dataset-to-estimate pipeline used here is shared with ``cli estimate``.
"""
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from config import config
from models.dataset import Dataset
from models.schemas import ExperimentConfig
from services.dataset_io import prior_pose, write_table
from services.esgvi import EsgviSolver, VariationalEstimate
from services.exceptions import EstimationError
from services.graph import FactorGraph, build_graph
from services.liegroup import Pose2
from services.map_solver import MapEstimate, map_solve
from services.metrics import TrialResult, align_trajectories, evaluate_trial, summarize
from services.noise import NoiseModel, fit_noise_model, load_noise_model
from services.simulator import draw_range_residuals, prior_covariance, simulate_trajectory, trial_seeds

# Configure logging
logging.basicConfig(level=config.LOG_LEVEL, format=config.LOG_FORMAT)
logger = logging.getLogger(__name__)

METHOD_KINDS = {"map-c": "asym_cauchy", "map-gmm": "gmm"}

Estimate = Union[VariationalEstimate, MapEstimate]


def method_kind(method: str, experiment: ExperimentConfig) -> str:
    return experiment.noise.esgvi_model if method == "esgvi" else METHOD_KINDS[method]


def fit_models(experiment: ExperimentConfig, seed=None, residuals: Optional[np.ndarray] = None,
               methods: Optional[Sequence[str]] = None) -> Dict[str, NoiseModel]:
    """
    Range noise model per method, loaded from ``model_paths`` or fitted.

    Fitting uses one pre-draw of ``noise.fit_samples`` simulated residuals
    unless ``residuals`` are given.
    """
    methods = list(methods or experiment.methods)
    if experiment.solver.warm_start and "esgvi" in methods and "map-c" not in methods:
        methods.append("map-c")
    models: Dict[str, NoiseModel] = {}
    for method in methods:
        path = experiment.noise.model_paths.get(method)
        if path:
            models[method] = load_noise_model(path)
            continue
        if residuals is None:
            residuals = draw_range_residuals(experiment.sim, experiment.noise.fit_samples, seed)
        fit = fit_noise_model(method_kind(method, experiment), residuals, experiment.noise.gmm_components,
                              experiment.seed)
        logger.info(f"Fitted {fit.model.type} model for {method}: log-likelihood {fit.log_likelihood:.3f}")
        models[method] = fit.model
    return models


def dataset_graph(dataset: Dataset, experiment: ExperimentConfig, model: NoiseModel) -> FactorGraph:
    """Factor graph of a dataset, with the prior from meta or the identity pose."""
    graph_cfg = experiment.graph
    mean = prior_pose(dataset)
    if mean is None:
        mean = Pose2.identity()
    prior = (mean, prior_covariance(dataset, graph_cfg.prior_sigmas))
    return build_graph(
        dataset.odometry, dataset.ranges, dataset.anchors, dataset.tags, prior, model,
        graph_cfg.q_c, graph_cfg.lateral_inflation, graph_cfg.state_rate_hz, graph_cfg.side,
        graph_cfg.numerical_jacobians,
    )


def run_estimators(graph: FactorGraph, experiment: ExperimentConfig, models: Dict[str, NoiseModel],
                   methods: Sequence[str]) -> Dict[str, Any]:
    """
    Run each method on the graph; failures are returned as exceptions.

    ESGVI starts from the MAP-C solution when ``solver.warm_start`` is set,
    otherwise from dead reckoning.
    """
    init = graph.dead_reckon()
    results: Dict[str, Any] = {}
    map_c: Optional[MapEstimate] = None
    for method in methods:
        try:
            if method == "esgvi":
                start = init
                if experiment.solver.warm_start:
                    if map_c is None:
                        map_c = map_solve(graph, init, models["map-c"], experiment.map_solver)
                    start = map_c.trajectory
                solver = EsgviSolver(graph.with_range_model(models["esgvi"]), experiment.solver)
                results[method] = solver.solve(start)
            else:
                results[method] = map_solve(graph, init, models[method], experiment.map_solver)
                if method == "map-c":
                    map_c = results[method]
        except EstimationError as e:
            logger.warning(f"{method} failed: {e}")
            results[method] = e
    return results


def run_trial(experiment: ExperimentConfig, models: Dict[str, NoiseModel], trial: int,
              seed: np.random.SeedSequence) -> List[TrialResult]:
    """Simulate one trial, run every configured method and score it."""
    methods = experiment.methods
    try:
        dataset = simulate_trajectory(experiment, seed)
        graph = dataset_graph(dataset, experiment, models[methods[0]])
    except EstimationError as e:
        logger.warning(f"Trial {trial} could not be set up: {e}")
        return [TrialResult.failure(method, trial, str(e)) for method in methods]

    rows = []
    for method, outcome in run_estimators(graph, experiment, models, methods).items():
        if isinstance(outcome, Exception):
            rows.append(TrialResult.failure(method, trial, str(outcome)))
            continue
        try:
            truth = align_trajectories(outcome.trajectory, dataset.truth)
            rows.append(evaluate_trial(
                method, trial, outcome.trajectory, truth, outcome.covariances, experiment.graph.side,
                outcome.converged, outcome.iterations,
            ))
        except EstimationError as e:
            logger.warning(f"Trial {trial} {method} could not be scored: {e}")
            rows.append(TrialResult.failure(method, trial, str(e)))
    return rows


def _run_trial_args(args: Tuple) -> List[TrialResult]:
    return run_trial(*args)


def run_monte_carlo(experiment: ExperimentConfig, jobs: int = 1,
                    models: Optional[Dict[str, NoiseModel]] = None,
                    progress: bool = True) -> List[TrialResult]:
    """
    Run ``sim.trials`` independent trials.

    Args:
        experiment: Experiment configuration.
        jobs: Worker processes; 1 runs in-process.
        models: Noise models per method; fitted from a pre-draw when omitted.
        progress: Show a tqdm progress bar.

    Returns:
        TrialResult rows ordered by trial, then method.
    """
    fit_seed, seeds = trial_seeds(experiment.seed, experiment.sim.trials)
    if models is None:
        models = fit_models(experiment, fit_seed)
    tasks = [(experiment, models, i, s) for i, s in enumerate(seeds)]
    logger.info(f"Running {len(tasks)} Monte Carlo trials with {jobs} job(s)")

    if jobs <= 1:
        batches = [run_trial(*task) for task in tqdm(tasks, disable=not progress, desc="trials")]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as executor:
            batches = list(tqdm(executor.map(_run_trial_args, tasks), total=len(tasks),
                                disable=not progress, desc="trials"))
    results = [row for batch in batches for row in batch]
    failed = sum(r.failed for r in results)
    if failed:
        logger.warning(f"{failed} estimator runs failed across {len(tasks)} trials")
    return results


def write_report(results: Sequence[TrialResult], output_dir: str,
                 provenance: Optional[Dict[str, Any]] = None) -> Tuple[str, str]:
    """Write summary.csv (per-trial rows) and aggregate.tsv (one row per estimator)."""
    trials, aggregate = summarize(results)
    summary_path = os.path.join(output_dir, "summary.csv")
    aggregate_path = os.path.join(output_dir, "aggregate.tsv")
    write_table(trials, summary_path, provenance)
    write_table(aggregate, aggregate_path, provenance, sep="\t")
    return summary_path, aggregate_path


def estimate_dataset(dataset: Dataset, experiment: ExperimentConfig, method: str,
                     models: Dict[str, NoiseModel]) -> Estimate:
    """Run one method on a dataset; estimation errors propagate."""
    graph = dataset_graph(dataset, experiment, models[method])
    outcome = run_estimators(graph, experiment, models, [method])[method]
    if isinstance(outcome, Exception):
        raise outcome
    return outcome