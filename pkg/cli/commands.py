"""
Command-line surface for the UWB variational estimation toolkit.
Provides the simulate, fit-noise, estimate, evaluate and montecarlo commands.
"""
import logging
import os
from typing import Optional

import click

from cli.error_handlers import register_error_handlers
from config import config
from models.schemas import ExperimentConfig, config_hash, load_experiment_config
from services.dataset_io import (
    read_dataset, read_estimate, read_provenance, read_residuals, read_truth, write_dataset,
    write_estimate, write_json, write_residuals,
)
from services.esgvi import write_trace_csv
from services.metrics import align_trajectories, evaluate_trial
from services.montecarlo import estimate_dataset, fit_models, run_monte_carlo, write_report
from services.noise import NOISE_KINDS, fit_document, fit_noise_model
from services.simulator import draw_range_residuals, simulate_trajectory, trial_seeds

# Configure logging
logging.basicConfig(level=config.LOG_LEVEL, format=config.LOG_FORMAT)
logger = logging.getLogger(__name__)

METHODS = ("esgvi", "map-c", "map-gmm")

config_option = click.option(
    "--config", "config_path", type=click.Path(dir_okay=False), default=None,
    help="Experiment configuration JSON (defaults to config/default_experiment.json).",
)
seed_option = click.option("--seed", type=int, default=None, help="Override the configured master seed.")
output_option = click.option("--output", "output", type=click.Path(), default=None, help="Output directory.")


def _experiment(config_path: Optional[str], seed: Optional[int]) -> ExperimentConfig:
    experiment = load_experiment_config(config_path)
    if seed is not None:
        experiment = experiment.model_copy(update={"seed": seed})
    return experiment


def _provenance(experiment: ExperimentConfig) -> dict:
    return {"config_hash": config_hash(experiment), "seed": experiment.seed}


@click.group()
def cli():
    """Variational and robust MAP estimation for UWB range localization."""


@cli.command()
@config_option
@seed_option
@output_option
@register_error_handlers
def simulate(config_path, seed, output):
    """Simulate one trial and write the dataset plus a residual file for fit-noise."""
    experiment = _experiment(config_path, seed)
    output = output or os.path.join(experiment.output_dir, "dataset")
    provenance = _provenance(experiment)

    dataset = simulate_trajectory(experiment)
    write_dataset(dataset, output, provenance)
    fit_seed, _ = trial_seeds(experiment.seed, 1)
    residuals = draw_range_residuals(experiment.sim, experiment.noise.fit_samples, fit_seed)
    write_residuals(residuals, os.path.join(output, "residuals.csv"), provenance)
    click.echo(f"Wrote {len(dataset.odometry)} odometry records and {len(dataset.ranges)} ranges to {output}")


@cli.command("fit-noise")
@click.argument("residuals", type=click.Path(dir_okay=False))
@click.option("--kind", type=click.Choice(NOISE_KINDS), default="skew_laplace", show_default=True)
@click.option("--components", type=int, default=3, show_default=True, help="Mixture size for gmm.")
@seed_option
@output_option
@register_error_handlers
def fit_noise(residuals, kind, components, seed, output):
    """Fit a range noise model to a residual file and write its JSON document."""
    samples = read_residuals(residuals)
    fit = fit_noise_model(kind, samples, components, seed or 0)
    output = output or os.path.dirname(os.path.abspath(residuals))
    path = os.path.join(output, f"{kind}.json")
    provenance = read_provenance(residuals)
    provenance["seed"] = seed if seed is not None else provenance.get("seed", 0)
    write_json(fit_document(fit), path, provenance)
    click.echo(f"{kind}: log-likelihood {fit.log_likelihood:.6f} over {fit.n_samples} samples -> {path}")


@cli.command()
@click.argument("dataset_dir", type=click.Path(file_okay=False))
@config_option
@click.option("--method", type=click.Choice(METHODS), default="esgvi", show_default=True)
@seed_option
@output_option
@register_error_handlers
def estimate(dataset_dir, config_path, method, seed, output):
    """Run one estimator on a dataset directory."""
    experiment = _experiment(config_path, seed)
    output = output or os.path.join(experiment.output_dir, method)
    provenance = _provenance(experiment)

    dataset = read_dataset(dataset_dir)
    fit_seed, _ = trial_seeds(experiment.seed, 1)
    models = fit_models(experiment, fit_seed, methods=[method])
    result = estimate_dataset(dataset, experiment, method, models)

    write_estimate(output, result.trajectory, result.covariances, provenance)
    write_trace_csv(result.trace, os.path.join(output, "trace.csv"), provenance)
    status = "converged" if result.converged else "stopped without converging"
    click.echo(f"{method} {status} after {result.iterations} iterations -> {output}")


@cli.command()
@click.argument("estimate_dir", type=click.Path(file_okay=False))
@click.argument("truth", type=click.Path())
@config_option
@click.option("--method", default="estimate", show_default=True, help="Estimator label for the report.")
@output_option
@register_error_handlers
def evaluate(estimate_dir, truth, config_path, method, output):
    """Score an estimate directory against ground truth."""
    experiment = _experiment(config_path, None)
    trajectory, covariances = read_estimate(estimate_dir)
    aligned = align_trajectories(trajectory, read_truth(truth))
    result = evaluate_trial(method, 0, trajectory, aligned, covariances, experiment.graph.side)
    provenance = read_provenance(os.path.join(estimate_dir, "trajectory.csv"))
    summary_path, _ = write_report([result], output or estimate_dir, provenance)
    click.echo(
        f"{method}: RMSE rot {result.rmse_rot:.4f} rad, trans {result.rmse_trans:.4f} m, "
        f"aNEES {result.anees:.3f} -> {summary_path}"
    )


@cli.command()
@config_option
@seed_option
@click.option("--jobs", type=int, default=config.JOBS, show_default=True, help="Parallel trial workers.")
@output_option
@register_error_handlers
def montecarlo(config_path, seed, jobs, output):
    """Run the Monte Carlo comparison and write the summary report."""
    experiment = _experiment(config_path, seed)
    output = output or experiment.output_dir
    provenance = _provenance(experiment)

    fit_seed, _ = trial_seeds(experiment.seed, experiment.sim.trials)
    models = fit_models(experiment, fit_seed)
    for method, model in models.items():
        write_json({"model": model.model_dump(mode="json", by_alias=True)},
                   os.path.join(output, "models", f"{method}.json"), provenance)

    results = run_monte_carlo(experiment, jobs=jobs, models=models)
    _, aggregate_path = write_report(results, output, provenance)
    failed = sum(r.failed for r in results)
    click.echo(f"{len(results)} estimator runs ({failed} failed) -> {aggregate_path}")
