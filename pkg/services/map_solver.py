"""
MAP solver service for the estimation toolkit.
Levenberg-Marquardt on the trajectory manifold for the robust MAP baselines
(asymmetric Cauchy and GMM range losses), with a Laplace approximation of
the marginal covariances at the optimum.
"""
import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from config import config
from models.dataset import Trajectory
from models.schemas import MapSolverConfig
from services.esgvi import IterationReport
from services.exceptions import InfoNotSPD, NotConverged
from services.graph import BlockSparseInfo, FactorGraph
from services.liegroup import retract
from services.noise import NoiseModel

# Configure logging
logging.basicConfig(level=config.LOG_LEVEL, format=config.LOG_FORMAT)
logger = logging.getLogger(__name__)

ZERO_RESIDUAL = 1e-12


@dataclass(eq=False)
class MapEstimate:
    """MAP trajectory with Laplace marginals from the undamped final Hessian."""
    trajectory: Trajectory
    info: Optional[BlockSparseInfo]
    covariances: np.ndarray
    cross_covariances: np.ndarray
    objective: float
    converged: bool
    iterations: int
    trace: List[IterationReport] = field(default_factory=list)

    @property
    def states(self):
        return self.trajectory.states


def robust_weight(residual, model: NoiseModel):
    """
    IRLS weight w(r) = φ'(r)/r, with the r → 0 limit taken as φ''(0).

    Args:
        residual: Scalar or array of residuals.
        model: Range noise model supplying φ.

    Returns:
        Weights with the shape of ``residual``.
    """
    r = np.asarray(residual, dtype=float)
    small = np.abs(r) < ZERO_RESIDUAL
    safe = np.where(small, 1.0, r)
    weight = np.where(small, model.curvature(np.zeros_like(r)), model.gradient(safe) / safe)
    return weight if weight.ndim else float(weight)


def _damped(info: BlockSparseInfo, damping: float) -> BlockSparseInfo:
    """H + λ·diag(H), block by block."""
    damped = info.copy()
    n = info.block_dim
    scale = np.maximum(np.einsum('kii->ki', info.diag), ZERO_RESIDUAL)
    damped.diag[:, np.arange(n), np.arange(n)] += damping * scale
    return damped


class MapSolver:
    """Service running Levenberg-Marquardt on a factor graph."""

    def __init__(self, graph: FactorGraph, solver_config: Optional[MapSolverConfig] = None):
        self.graph = graph
        self.config = solver_config or MapSolverConfig()

    def solve(self, init: Trajectory) -> MapEstimate:
        """
        Minimize the total factor energy from ``init``.

        Args:
            init: Initial trajectory.

        Returns:
            MapEstimate; ``converged`` is False when the iteration budget ran
            out (NotConverged is raised instead in strict mode).
        """
        cfg = self.config
        graph = self.graph
        states = init.states
        energy, info, gradient = graph.linearize(states)
        damping = cfg.initial_damping
        trace = [IterationReport(0, energy, 0.0, 0)]
        converged = False
        stalled = False
        accepted = 0
        logger.info(f"MAP start: objective {energy:.6f}")

        for _ in range(cfg.max_iterations):
            backtracks = 0
            step = None
            while damping <= cfg.max_damping:
                try:
                    delta = -_damped(info, damping).solve(gradient)
                except InfoNotSPD:
                    damping *= cfg.damping_increase
                    backtracks += 1
                    continue
                if np.abs(delta).max() < cfg.step_tolerance:
                    converged = True
                    break
                candidate = retract(states, delta, graph.side)
                candidate_energy = graph.total_energy(candidate)
                if candidate_energy <= energy:
                    step = (delta, candidate)
                    damping = max(damping * cfg.damping_decrease, 1e-15)
                    break
                damping *= cfg.damping_increase
                backtracks += 1
            if converged:
                break
            if step is None:
                stalled = True
                break
            delta, states = step
            accepted += 1
            energy, info, gradient = graph.linearize(states)
            trace.append(IterationReport(accepted, energy, float(np.abs(delta).max()), backtracks))

        trajectory = init.with_states(states)
        try:
            diag, cross = info.covariance_blocks()
            laplace = info
        except InfoNotSPD as e:
            logger.warning(f"Final MAP Hessian is not positive definite: {e}")
            diag = np.full_like(info.diag, np.nan)
            cross = np.full_like(info.lower, np.nan)
            laplace = None
        estimate = MapEstimate(trajectory, laplace, diag, cross, energy, converged, accepted, trace)

        if not converged:
            if stalled:
                message = f"MAP damping exceeded {cfg.max_damping:g} without a decrease at objective {energy:.6f}"
            else:
                message = f"MAP did not converge within {cfg.max_iterations} iterations"
            if cfg.strict:
                logger.error(message)
                raise NotConverged(message, estimate=estimate)
            logger.warning(message)
        logger.info(f"MAP finished after {accepted} accepted steps, objective {energy:.6f}")
        return estimate


def map_solve(graph: FactorGraph, init: Trajectory, loss: Optional[NoiseModel] = None,
              solver_config: Optional[MapSolverConfig] = None) -> MapEstimate:
    """Solve the MAP problem, optionally swapping the range loss first."""
    if loss is not None:
        graph = graph.with_range_model(loss)
    return MapSolver(graph, solver_config).solve(init)
