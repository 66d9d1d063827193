"""
Metrics service for the estimation toolkit.
RMSE split into rotation and translation, aNEES with chi-square consistency
bounds, truth alignment, and the per-trial / aggregate summary tables.
"""
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.stats import chi2

from config import config
from models.dataset import Trajectory
from services.exceptions import CovarianceNotSPD, LengthMismatch, TimestampMisalignment
from services.liegroup import Pose2, Side, State, local, wrap_angle

# Configure logging
logging.basicConfig(level=config.LOG_LEVEL, format=config.LOG_FORMAT)
logger = logging.getLogger(__name__)

COMPONENTS = {"rotation": slice(0, 1), "translation": slice(1, 3)}
TRIAL_COLUMNS = ["estimator", "trial", "rmse_rot_rad", "rmse_trans_m", "anees"]
AGGREGATE_COLUMNS = [
    "estimator", "rmse_rot_rad", "rmse_trans_m", "anees", "anees_lo", "anees_hi", "trials", "failed",
]


@dataclass(eq=False)
class TrialResult:
    """Metrics of one estimator on one trial."""
    estimator: str
    trial: int
    errors: np.ndarray
    covariances: np.ndarray
    rmse_rot: float
    rmse_trans: float
    anees: float
    converged: bool = True
    iterations: int = 0
    failed: bool = False
    message: str = ""

    @property
    def n_poses(self) -> int:
        return int(self.errors.shape[0])

    @classmethod
    def failure(cls, estimator: str, trial: int, message: str) -> "TrialResult":
        empty = np.zeros((0, 3))
        return cls(estimator, trial, empty, np.zeros((0, 3, 3)), np.nan, np.nan, np.nan,
                   converged=False, failed=True, message=message)


def _as_list(value) -> list:
    if isinstance(value, (list, tuple)):
        return list(value)
    return [value]


def _states(value) -> State:
    return value.states if isinstance(value, Trajectory) else value


def pose_errors(estimate, truth, side: Union[Side, str] = Side.RIGHT) -> np.ndarray:
    """
    Per-pose errors X̂ ⊖ X with the rotation entry wrapped to (-π, π].

    Args:
        estimate: Estimated Trajectory or batched state.
        truth: Ground truth of the same length.
        side: Perturbation side the covariances were reported in.

    Returns:
        (K+1, n) array of errors.
    """
    x_hat, x = _states(estimate), _states(truth)
    if len(x_hat) != len(x):
        raise LengthMismatch(f"Estimate has {len(x_hat)} states but truth has {len(x)}")
    errors = np.asarray(local(x_hat, x, side), dtype=float)
    if isinstance(x_hat, Pose2):
        errors = errors.copy()
        errors[..., 0] = wrap_angle(errors[..., 0])
    return errors


def _stack_errors(estimates, truths, side) -> List[np.ndarray]:
    estimates, truths = _as_list(estimates), _as_list(truths)
    if len(estimates) != len(truths):
        raise LengthMismatch(f"{len(estimates)} estimates but {len(truths)} truths")
    return [pose_errors(e, t, side) for e, t in zip(estimates, truths)]


def rmse_from_errors(errors: Sequence[np.ndarray], component: str) -> float:
    columns = COMPONENTS[component]
    squared = np.concatenate([np.sum(np.square(e[:, columns]), axis=1) for e in errors])
    return float(np.sqrt(squared.mean())) if squared.size else float("nan")


def rmse(estimates, truths, component: str = "translation", side: Union[Side, str] = Side.RIGHT) -> float:
    """
    Root-mean-squared error over all trials and poses.

    Args:
        estimates: One trajectory or a list of trajectories.
        truths: Matching ground truth.
        component: ``rotation`` (rad) or ``translation`` (m).
        side: Side used for X̂ ⊖ X.
    """
    if component not in COMPONENTS:
        raise ValueError(f"Unknown component {component!r}")
    return rmse_from_errors(_stack_errors(estimates, truths, side), component)


def nees(errors: np.ndarray, covariances: np.ndarray) -> np.ndarray:
    """Per-pose eᵀΣ⁻¹e via Cholesky solves."""
    covariances = np.asarray(covariances, dtype=float)
    if covariances.shape[0] != errors.shape[0]:
        raise LengthMismatch(f"{errors.shape[0]} errors but {covariances.shape[0]} covariances")
    try:
        factor = np.linalg.cholesky(covariances)
    except np.linalg.LinAlgError as e:
        raise CovarianceNotSPD("Covariance for aNEES is not positive definite") from e
    whitened = np.linalg.solve(factor, errors[..., None])[..., 0]
    return np.sum(np.square(whitened), axis=-1)


def anees_from_errors(errors: Sequence[np.ndarray], covariances: Sequence[np.ndarray]) -> float:
    values = np.concatenate([nees(e, c) for e, c in zip(errors, covariances)])
    n_x = errors[0].shape[-1] if len(errors) else 3
    return float(values.mean() / n_x) if values.size else float("nan")


def anees(estimates, truths, covariances, side: Union[Side, str] = Side.RIGHT) -> float:
    """(1/(N·K·n_x)) Σ eᵀΣ⁻¹e over all trials and poses."""
    errors = _stack_errors(estimates, truths, side)
    covariances = _as_list(covariances)
    if len(covariances) != len(errors):
        raise LengthMismatch(f"{len(errors)} trials but {len(covariances)} covariance sets")
    return anees_from_errors(errors, covariances)


def anees_bounds(n_poses: int, n_x: int = 3, confidence: float = 0.95) -> Tuple[float, float]:
    """Two-sided chi-square interval for the aNEES of ``n_poses`` poses."""
    if not 0.0 < confidence < 1.0:
        raise ValueError("confidence must lie in (0, 1)")
    dof = n_poses * n_x
    alpha = 1.0 - confidence
    return float(chi2.ppf(alpha / 2.0, dof) / dof), float(chi2.ppf(1.0 - alpha / 2.0, dof) / dof)


def align_trajectories(estimate: Trajectory, truth: Trajectory,
                       tolerance: Optional[float] = None) -> Trajectory:
    """
    Truth resampled onto the estimate timestamps by nearest neighbour.

    Args:
        estimate: Estimated trajectory.
        truth: Ground-truth trajectory.
        tolerance: Maximum timestamp gap; defaults to the configured fraction
            of the estimate's median period.

    Returns:
        Truth trajectory with the estimate's timestamps.
    """
    t_est, t_true = estimate.timestamps, truth.timestamps
    if tolerance is None:
        period = float(np.median(np.diff(t_est))) if t_est.size > 1 else float("inf")
        tolerance = config.ALIGNMENT_TOLERANCE_FRACTION * period
    index = np.clip(np.searchsorted(t_true, t_est), 0, t_true.size - 1)
    before = np.clip(index - 1, 0, t_true.size - 1)
    index = np.where(np.abs(t_true[before] - t_est) <= np.abs(t_true[index] - t_est), before, index)
    gap = np.abs(t_true[index] - t_est)
    if np.any(gap > tolerance + 1e-9):
        raise TimestampMisalignment(
            f"Estimate and truth timestamps differ by up to {gap.max():.6g} s (tolerance {tolerance:.6g} s)",
            {"max_gap": float(gap.max()), "tolerance": float(tolerance)},
        )
    return Trajectory(t_est, truth.states[index])


def evaluate_trial(estimator: str, trial: int, estimate: Trajectory, truth: Trajectory,
                   covariances: np.ndarray, side: Union[Side, str] = Side.RIGHT,
                   converged: bool = True, iterations: int = 0) -> TrialResult:
    """Metrics of one estimate against truth."""
    errors = pose_errors(estimate, truth, side)
    return TrialResult(
        estimator, trial, errors, np.asarray(covariances, dtype=float),
        rmse_from_errors([errors], "rotation"), rmse_from_errors([errors], "translation"),
        anees_from_errors([errors], [covariances]), converged, iterations,
    )


def summarize(results: Sequence[TrialResult]) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """
    Per-trial rows and per-estimator aggregates.

    Aggregates pool squared errors and NEES terms over all poses of the
    successful trials, so they equal the values computed on the pooled data.
    The aNEES bounds use the median trajectory length.

    Returns:
        Tuple (trial frame, aggregate frame).
    """
    trials = pd.DataFrame(
        [[r.estimator, r.trial, r.rmse_rot, r.rmse_trans, r.anees, r.converged, r.failed] for r in results],
        columns=TRIAL_COLUMNS + ["converged", "failed"],
    )
    rows = []
    for estimator in dict.fromkeys(r.estimator for r in results):
        group = [r for r in results if r.estimator == estimator]
        ok = [r for r in group if not r.failed]
        weights = np.array([r.n_poses for r in ok], dtype=float)
        if ok and weights.sum() > 0:
            rot = np.sqrt(np.sum(weights * np.square([r.rmse_rot for r in ok])) / weights.sum())
            trans = np.sqrt(np.sum(weights * np.square([r.rmse_trans for r in ok])) / weights.sum())
            value = np.sum(weights * np.array([r.anees for r in ok])) / weights.sum()
            lo, hi = anees_bounds(int(np.median(weights)))
        else:
            rot = trans = value = lo = hi = np.nan
        rows.append([
            estimator, float(rot), float(trans), float(value), lo, hi, len(group), len(group) - len(ok),
        ])
    aggregate = pd.DataFrame(rows, columns=AGGREGATE_COLUMNS)
    if len(aggregate):
        logger.info("Summary:\n" + aggregate.to_string(index=False))
    return trials, aggregate
