"""
ESGVI service for the estimation toolkit.
Exactly sparse Gaussian variational inference over matrix-Lie-group states:
derivative-free Stein blocks from cubature, a block-tridiagonal solve, a
backtracking line search on the loss functional, and retraction of the mean.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.linalg import cho_solve

from config import config
from models.dataset import Trajectory
from models.schemas import SolverConfig
from services.cubature import CubatureRule, MlgGaussian, make_rule, sigma_points
from services.dataset_io import write_table
from services.exceptions import InfoNotSPD, LengthMismatch, LineSearchFailed
from services.graph import BlockSparseInfo, Factor, FactorGraph, Projection
from services.liegroup import Side, State, retract

# Configure logging
logging.basicConfig(level=config.LOG_LEVEL, format=config.LOG_FORMAT)
logger = logging.getLogger(__name__)

TRACE_COLUMNS = ["iteration", "loss", "step_norm", "backtracks", "clamps"]


@dataclass(frozen=True)
class IterationReport:
    """One row of a convergence trace; shared by ESGVI and the MAP baselines."""
    iteration: int
    loss: float
    step_norm: float
    backtracks: int
    clamps: int = 0


def trace_frame(reports: Sequence[IterationReport]) -> pd.DataFrame:
    return pd.DataFrame([[getattr(r, c) for c in TRACE_COLUMNS] for r in reports], columns=TRACE_COLUMNS)


def write_trace_csv(reports: Sequence[IterationReport], path: str, provenance: Optional[dict] = None) -> None:
    write_table(trace_frame(reports), path, provenance)


@dataclass(eq=False)
class VariationalEstimate:
    """
    Gaussian posterior approximation: mean trajectory, information matrix and
    the marginal covariance blocks recovered from it.
    """
    trajectory: Trajectory
    info: BlockSparseInfo
    covariances: np.ndarray
    cross_covariances: np.ndarray
    side: Side
    loss: float = float("nan")
    converged: bool = False
    iterations: int = 0
    trace: List[IterationReport] = field(default_factory=list)

    @property
    def states(self) -> State:
        return self.trajectory.states

    def joint_covariance(self, k: int) -> np.ndarray:
        """Joint covariance of states (k-1, k)."""
        top = np.hstack([self.covariances[k - 1], self.cross_covariances[k - 1]])
        bottom = np.hstack([self.cross_covariances[k - 1].T, self.covariances[k]])
        return np.vstack([top, bottom])

    def marginal(self, keys: Tuple[int, ...]) -> MlgGaussian:
        return _marginal(self.states, self.covariances, self.cross_covariances, keys, self.side)


def _marginal(states: State, diag: np.ndarray, cross: np.ndarray, keys: Tuple[int, ...],
              side: Side) -> MlgGaussian:
    if len(keys) == 1:
        k = keys[0]
        return MlgGaussian(states[k], diag[k], side)
    i, j = keys
    top = np.hstack([diag[i], cross[i]])
    bottom = np.hstack([cross[i].T, diag[j]])
    return MlgGaussian((states[i], states[j]), np.vstack([top, bottom]), side)


def marginal_covariances(info: BlockSparseInfo) -> Tuple[np.ndarray, np.ndarray]:
    """
    Per-state covariance blocks and (k-1, k) cross blocks of Σ = (Σ⁻¹)⁻¹.

    Uses the block-tridiagonal forward factorization followed by the backward
    covariance recursion, so only the tridiagonal band of Σ is formed.
    """
    return info.covariance_blocks()


def _group_energy(factors: Sequence[Factor]) -> Callable:
    if len(factors) == 1:
        return factors[0].energy

    def energy(*states):
        return sum(f.energy(*states) for f in factors)

    return energy


def stein_blocks(q: MlgGaussian, rule: CubatureRule, phi: Callable) -> Tuple[float, np.ndarray, np.ndarray]:
    """
    Cubature Stein forms of the factor gradient and Hessian.

    Returns:
        Tuple (E[φ], Σ⁻¹E[δφ], Σ⁻¹E[δδᵀφ]Σ⁻¹ − Σ⁻¹E[φ]) with φ centered
        before weighting.
    """
    points = sigma_points(q, rule)
    values = np.asarray(phi(*points.states), dtype=float)
    expectation = float(points.weights @ values)
    centered = points.weights * (values - expectation)
    chol = (q.cholesky(), True)
    first = centered @ points.deviations
    second = np.einsum('l,li,lj->ij', centered, points.deviations, points.deviations)
    gradient = cho_solve(chol, first)
    hessian = cho_solve(chol, cho_solve(chol, second).T)
    return expectation, gradient, 0.5 * (hessian + hessian.T)


def condition_block(hessian: np.ndarray, floor: float = 1e-9) -> Tuple[np.ndarray, bool]:
    """
    Clamp the eigenvalues of a symmetric block from below.

    Returns:
        Tuple (conditioned block, whether the input was indefinite).
    """
    eigenvalues, vectors = np.linalg.eigh(hessian)
    scale = max(1.0, float(np.abs(eigenvalues).max()))
    indefinite = bool(eigenvalues.min() < -1e-10 * scale)
    if eigenvalues.min() >= floor:
        return hessian, indefinite
    clamped = np.maximum(eigenvalues, floor)
    return (vectors * clamped) @ vectors.T, indefinite


def factor_blocks(factor: Union[Factor, Sequence[Factor]], marginal: MlgGaussian,
                  rule: CubatureRule, floor: float = 1e-9) -> Tuple[float, np.ndarray, np.ndarray]:
    """
    Expected energy, gradient block and Hessian block of a factor.

    Args:
        factor: A factor, or several factors over the same states.
        marginal: Marginal over the factor's states (joint for process factors).
        rule: Cubature rule matching the marginal dimension.
        floor: Eigenvalue floor applied to the Hessian block.

    Returns:
        Tuple (E[φ], gradient, Hessian).
    """
    factors = [factor] if isinstance(factor, Factor) else list(factor)
    for f in factors:
        if getattr(f, "side", None) is not None:
            marginal.require_side(f.side)
    expectation, gradient, hessian = stein_blocks(marginal, rule, _group_energy(factors))
    hessian, _ = condition_block(hessian, floor)
    return expectation, gradient, hessian


class EsgviSolver:
    """Service running ESGVI on a factor graph."""

    def __init__(self, graph: FactorGraph, solver_config: Optional[SolverConfig] = None):
        """
        Initialize the solver.

        Args:
            graph: Factor graph to solve.
            solver_config: Iteration settings; defaults when omitted.
        """
        self.graph = graph
        self.config = solver_config or SolverConfig()
        self.side = graph.side
        logger.info(
            f"Initialized ESGVI solver on {graph.n_states} states, rules "
            f"{self.config.unary_rule}/{self.config.binary_rule}"
        )

    def _rule(self, q: MlgGaussian) -> CubatureRule:
        name = self.config.unary_rule if len(q.components) == 1 else self.config.binary_rule
        return make_rule(name, q.dim)

    def _expected_energy(self, states: State, diag: np.ndarray, cross: np.ndarray) -> float:
        total = 0.0
        for keys, factors in self.graph.groups:
            q = _marginal(states, diag, cross, keys, self.side)
            points = sigma_points(q, self._rule(q))
            total += float(points.weights @ np.asarray(_group_energy(factors)(*points.states)))
        return total

    def loss(self, states: State, info: BlockSparseInfo) -> Tuple[float, np.ndarray, np.ndarray]:
        """
        Loss functional V(q) = E_q[φ] + ½ ln|Σ⁻¹| and the marginals it used.

        Returns:
            Tuple (V, covariance blocks, cross covariance blocks).
        """
        diag, cross = info.covariance_blocks()
        value = self._expected_energy(states, diag, cross) + 0.5 * info.log_det()
        return value, diag, cross

    def estimate_from(self, trajectory: Trajectory, info: BlockSparseInfo) -> VariationalEstimate:
        value, diag, cross = self.loss(trajectory.states, info)
        return VariationalEstimate(trajectory, info, diag, cross, self.side, value)

    def _candidate(self, states: State, info: BlockSparseInfo) -> Optional[Tuple[float, np.ndarray, np.ndarray]]:
        try:
            value, diag, cross = self.loss(states, info)
        except InfoNotSPD:
            return None
        return (value, diag, cross) if np.isfinite(value) else None

    def iterate(self, estimate: VariationalEstimate) -> Tuple[VariationalEstimate, IterationReport, float]:
        """
        One ESGVI pass: Stein blocks, scatter-add, solve, line search, retract.

        The line search backtracks the mean step under the new information
        matrix, then tries the information update alone, then the mean step
        under the previous information matrix. The first candidate that does
        not increase the loss is accepted.

        Args:
            estimate: Current estimate with up-to-date marginals and loss.

        Returns:
            Tuple (updated estimate, iteration report, full-step ‖δμ‖∞).
        """
        graph = self.graph
        states = estimate.states
        info = BlockSparseInfo(graph.n_states, graph.block_dim)
        gradient = np.zeros((graph.n_states, graph.block_dim))
        clamps = 0
        for keys, factors in graph.groups:
            q = estimate.marginal(keys)
            _, g, h = stein_blocks(q, self._rule(q), _group_energy(factors))
            h, indefinite = condition_block(h, self.config.hessian_floor)
            clamps += int(indefinite)
            projection = Projection(keys, graph.block_dim)
            info.add_projected(projection, h)
            for key, piece in projection.split_vector(g):
                gradient[key] += piece
        if clamps:
            logger.warning(f"Clamped {clamps} indefinite Hessian blocks")

        delta = -info.solve(gradient)
        step_norm = float(np.abs(delta).max())
        decrement = 0.5 * float(np.sum(-gradient * delta))

        shrink = self.config.line_search_shrink
        alphas = [shrink ** i for i in range(self.config.max_backtracks + 1)]
        schedule = [(info, a) for a in alphas] + [(info, 0.0)] + [(estimate.info, a) for a in alphas]
        slack = 1e-12 * max(1.0, abs(estimate.loss))
        best = np.inf
        for backtracks, (candidate_info, alpha) in enumerate(schedule):
            candidate_states = retract(states, alpha * delta, self.side) if alpha else states
            outcome = self._candidate(candidate_states, candidate_info)
            if outcome is None:
                continue
            value, diag, cross = outcome
            best = min(best, value)
            if value <= estimate.loss + slack:
                updated = VariationalEstimate(
                    estimate.trajectory.with_states(candidate_states), candidate_info, diag, cross,
                    self.side, value, iterations=estimate.iterations + 1, trace=estimate.trace,
                )
                report = IterationReport(updated.iterations, value, alpha * step_norm, backtracks, clamps)
                return updated, report, step_norm

        raise LineSearchFailed(
            f"No decrease of the loss after {len(schedule)} line search candidates",
            {"loss": estimate.loss, "best_loss": best, "step_norm": step_norm, "decrement": decrement},
        )

    def _stalled(self, failure: LineSearchFailed, last_change: float) -> bool:
        """A failed line search ends the run when the loss has already settled."""
        details = failure.details
        scale = max(1.0, abs(details["loss"]))
        return (
            details["step_norm"] < self.config.step_tolerance
            or last_change <= self.config.stall_tolerance
            or details["decrement"] <= self.config.stall_tolerance * scale
        )

    def solve(self, init: Trajectory, init_info: Optional[BlockSparseInfo] = None) -> VariationalEstimate:
        """
        Iterate to convergence from an initial trajectory.

        Args:
            init: Initial mean trajectory.
            init_info: Initial information matrix; the Gauss-Newton Hessian at
                ``init`` when omitted.

        Returns:
            The converged VariationalEstimate with its convergence trace.
        """
        if len(init) != self.graph.n_states:
            raise LengthMismatch(
                f"Initial trajectory has {len(init)} states, graph has {self.graph.n_states}"
            )
        if init_info is None:
            _, init_info, _ = self.graph.linearize(init.states)
        estimate = self.estimate_from(init, init_info)
        estimate.trace = [IterationReport(0, estimate.loss, 0.0, 0, 0)]
        logger.info(f"ESGVI start: loss {estimate.loss:.6f}")

        last_change = np.inf
        for _ in range(self.config.max_iterations):
            previous = estimate.loss
            try:
                estimate, report, step_norm = self.iterate(estimate)
            except LineSearchFailed as e:
                if self._stalled(e, last_change):
                    logger.info(f"ESGVI line search exhausted at a settled loss {estimate.loss:.6f}")
                    estimate.converged = True
                    break
                logger.error(f"ESGVI line search failed at iteration {estimate.iterations + 1}: {e}")
                raise
            estimate.trace.append(report)
            last_change = abs(previous - estimate.loss) / max(1.0, abs(estimate.loss))
            if step_norm < self.config.step_tolerance or last_change < self.config.relative_loss_tolerance:
                estimate.converged = True
                break

        if not estimate.converged:
            logger.warning(f"ESGVI reached {self.config.max_iterations} iterations without converging")
        logger.info(f"ESGVI finished after {estimate.iterations} iterations, loss {estimate.loss:.6f}")
        return estimate


def esgvi_iterate(graph: FactorGraph, estimate: VariationalEstimate,
                  solver_config: Optional[SolverConfig] = None) -> Tuple[VariationalEstimate, IterationReport]:
    updated, report, _ = EsgviSolver(graph, solver_config).iterate(estimate)
    return updated, report


def solve(graph: FactorGraph, init: Trajectory, solver_config: Optional[SolverConfig] = None,
          init_info: Optional[BlockSparseInfo] = None) -> VariationalEstimate:
    return EsgviSolver(graph, solver_config).solve(init, init_info)


def loss_functional(graph: FactorGraph, estimate: VariationalEstimate,
                    solver_config: Optional[SolverConfig] = None) -> float:
    value, _, _ = EsgviSolver(graph, solver_config).loss(estimate.states, estimate.info)
    return value
