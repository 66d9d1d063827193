"""
Factor graph service for the estimation toolkit.
Defines the prior, process and range factors over SE(2) trajectories, the
projection of factor-local perturbations onto the trajectory, and the
block-tridiagonal information matrix the solvers share.

Factors expose their energy φ as a vectorized function of the connected
states; the variational solver only ever evaluates it. The MAP baselines
additionally use the residual Jacobians through ``Factor.gauss_newton``.
"""
import logging
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from config import config
from models.dataset import OdometryStream, RangeStream, Trajectory
from services.exceptions import (
    EmptyOdometry,
    IndexOutOfRange,
    InfoNotSPD,
    RangeBeforeFirstPose,
    TimestampMisalignment,
    UnknownId,
)
from services.liegroup import (
    Pose2,
    Side,
    State,
    adjoint,
    exp_map,
    left_jacobian,
    local,
    log_map,
    retract,
    right_jacobian,
    tangent_dim,
)
from services.noise import NoiseModel

# Configure logging
logging.basicConfig(level=config.LOG_LEVEL, format=config.LOG_FORMAT)
logger = logging.getLogger(__name__)

NUMERICAL_STEP = 1e-6
_SKEW = np.array([[0.0, -1.0], [1.0, 0.0]])


def numerical_jacobian(residual, states: Sequence[State], side: Union[Side, str] = Side.RIGHT,
                       step: float = NUMERICAL_STEP) -> List[np.ndarray]:
    """
    Central-difference Jacobians of ``residual(*states)`` with respect to the
    tangent perturbation of each state.

    Returns:
        One (m, n_i) matrix per state.
    """
    jacobians = []
    for i, state in enumerate(states):
        n = tangent_dim(state)
        columns = []
        for j in range(n):
            delta = np.zeros(n)
            delta[j] = step
            plus = list(states)
            minus = list(states)
            plus[i] = retract(state, delta, side)
            minus[i] = retract(state, -delta, side)
            diff = np.atleast_1d(residual(*plus)) - np.atleast_1d(residual(*minus))
            columns.append(diff / (2.0 * step))
        jacobians.append(np.column_stack(columns))
    return jacobians


class Factor:
    """
    Base factor: a residual r(X), a loss φ(r) and optional analytic Jacobians.

    Subclasses set ``kind`` and ``keys`` and implement ``residual``, ``loss``
    and ``loss_derivatives``.
    """

    kind = "factor"
    keys: Tuple[int, ...] = ()

    def residual(self, *states) -> np.ndarray:
        raise NotImplementedError

    def loss(self, r: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def loss_derivatives(self, r: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def jacobians(self, *states, side: Side) -> Optional[List[np.ndarray]]:
        return None

    def energy(self, *states) -> np.ndarray:
        return self.loss(self.residual(*states))

    def gauss_newton(self, states: Sequence[State], side: Union[Side, str],
                     numerical: bool = False) -> Tuple[float, np.ndarray, np.ndarray]:
        """
        Local energy, gradient Jᵀφ'(r) and Gauss-Newton Hessian JᵀκJ.

        Args:
            states: The connected states, in key order.
            side: Perturbation side of the Jacobians.
            numerical: Force central-difference Jacobians.
        """
        r = np.atleast_1d(self.residual(*states))
        jacobians = None if numerical else self.jacobians(*states, side=Side(side))
        if jacobians is None:
            jacobians = numerical_jacobian(self.residual, states, side)
        jacobian = np.hstack(jacobians)
        gradient_r, curvature_r = self.loss_derivatives(r)
        return (
            float(self.loss(r)),
            jacobian.T @ gradient_r,
            jacobian.T @ curvature_r @ jacobian,
        )


def _quadratic(r: np.ndarray, information: np.ndarray) -> np.ndarray:
    return 0.5 * np.einsum('...i,ij,...j->...', r, information, r)


@dataclass(eq=False)
class PriorFactor(Factor):
    """½ eᵀΣ₀⁻¹e with e = X ⊖ μ₀."""
    key: int
    mean: State
    covariance: np.ndarray
    side: Side = Side.RIGHT

    kind = "prior"

    def __post_init__(self):
        self.keys = (self.key,)
        self.information = np.linalg.inv(np.asarray(self.covariance, dtype=float))

    def residual(self, x):
        return local(x, self.mean, self.side)

    def loss(self, r):
        return _quadratic(r, self.information)

    def loss_derivatives(self, r):
        return self.information @ r, self.information

    def jacobians(self, x, side):
        if not isinstance(x, Pose2):
            return [np.eye(tangent_dim(x))]
        e = self.residual(x)
        if side is Side.RIGHT:
            return [np.linalg.inv(right_jacobian(e))]
        return [np.linalg.inv(left_jacobian(e))]


def process_covariance(dt: float, q_c: Sequence[float], lateral_inflation: float = 1.0) -> np.ndarray:
    """Q_k = Δt·Q_c with the lateral-velocity density scaled by ``lateral_inflation``."""
    density = np.asarray(q_c, dtype=float).copy()
    density[2] *= lateral_inflation
    return dt * np.diag(density)


@dataclass(eq=False)
class ProcessFactor(Factor):
    """½ eᵀQ⁻¹e with e = X_k ⊖ (X_{k-1} ⊕_r Δt·u)."""
    key: int
    u: np.ndarray
    dt: float
    covariance: np.ndarray
    side: Side = Side.RIGHT

    kind = "process"

    def __post_init__(self):
        self.keys = (self.key - 1, self.key)
        self.u = np.asarray(self.u, dtype=float)
        self.information = np.linalg.inv(np.asarray(self.covariance, dtype=float))
        self.increment = exp_map(self.dt * self.u)

    def predict(self, x_prev: Pose2) -> Pose2:
        return x_prev.compose(self.increment)

    def residual(self, x_prev, x_k):
        return local(x_k, self.predict(x_prev), self.side)

    def loss(self, r):
        return _quadratic(r, self.information)

    def loss_derivatives(self, r):
        return self.information @ r, self.information

    def jacobians(self, x_prev, x_k, side):
        e = self.residual(x_prev, x_k)
        jr_inv = np.linalg.inv(right_jacobian(e))
        if side is Side.RIGHT:
            return [-jr_inv @ adjoint(x_k.inverse().compose(x_prev)), jr_inv]
        return [-jr_inv, np.linalg.inv(left_jacobian(e))]


def range_predict(x: Pose2, anchor, tag_offset) -> np.ndarray:
    """Distance from the body-mounted tag to the anchor, g(X)."""
    return np.linalg.norm(x.act(tag_offset) - np.asarray(anchor, dtype=float), axis=-1)


@dataclass(eq=False)
class RangeFactor(Factor):
    """φ(y − g(X)) under the configured range noise model."""
    key: int
    measurement: float
    anchor: np.ndarray
    tag_offset: np.ndarray
    model: NoiseModel
    anchor_id: int = -1
    tag_id: int = -1

    kind = "range"

    def __post_init__(self):
        self.keys = (self.key,)
        self.anchor = np.asarray(self.anchor, dtype=float)
        self.tag_offset = np.asarray(self.tag_offset, dtype=float)

    def residual(self, x):
        return (self.measurement - range_predict(x, self.anchor, self.tag_offset))[..., None]

    def loss(self, r):
        return self.model.energy(r[..., 0])

    def loss_derivatives(self, r):
        return np.atleast_1d(self.model.gradient(r[0])), np.atleast_2d(self.model.curvature(r[0]))

    def jacobians(self, x, side):
        tag = x.act(self.tag_offset)
        d = tag - self.anchor
        u = d / np.linalg.norm(d)
        if side is Side.RIGHT:
            c = x.rotation.matrix
            dg = np.concatenate([[u @ c @ _SKEW @ self.tag_offset], u @ c])
        else:
            dg = np.concatenate([[u @ _SKEW @ tag], u])
        return [-dg[None, :]]


@dataclass(eq=False)
class LinearGaussianFactor(Factor):
    """½ rᵀWr with r = Σ A_i x_i − b over vector states."""
    factor_keys: Tuple[int, ...]
    matrices: Sequence[np.ndarray]
    offset: np.ndarray
    information: np.ndarray

    kind = "linear"

    def __post_init__(self):
        self.keys = tuple(self.factor_keys)
        self.matrices = [np.atleast_2d(np.asarray(a, dtype=float)) for a in self.matrices]
        self.offset = np.atleast_1d(np.asarray(self.offset, dtype=float))
        self.information = np.atleast_2d(np.asarray(self.information, dtype=float))

    def residual(self, *states):
        total = -self.offset
        for a, x in zip(self.matrices, states):
            total = total + np.asarray(x) @ a.T
        return total

    def loss(self, r):
        return _quadratic(r, self.information)

    def loss_derivatives(self, r):
        return self.information @ r, self.information

    def jacobians(self, *states, side):
        return list(self.matrices)


def process_energy(x_prev: Pose2, x_k: Pose2, u, dt: float, q: np.ndarray,
                   side: Union[Side, str] = Side.RIGHT) -> np.ndarray:
    return ProcessFactor(1, u, dt, q, Side(side)).energy(x_prev, x_k)


def range_energy(x: Pose2, measurement: float, anchor, tag_offset, model: NoiseModel) -> np.ndarray:
    return RangeFactor(0, measurement, anchor, tag_offset, model).energy(x)


# --- projection and information matrix --------------------------------------

@dataclass(frozen=True)
class Projection:
    """Maps a factor's stacked local perturbation onto trajectory coordinates."""
    keys: Tuple[int, ...]
    block_dim: int

    @property
    def indices(self) -> np.ndarray:
        return np.concatenate([np.arange(k * self.block_dim, (k + 1) * self.block_dim) for k in self.keys])

    def matrix(self, n_states: int) -> np.ndarray:
        """Dense P_k with x_k = P_k x."""
        p = np.zeros((len(self.keys) * self.block_dim, n_states * self.block_dim))
        p[np.arange(p.shape[0]), self.indices] = 1.0
        return p

    def split_vector(self, local_vector: np.ndarray):
        n = self.block_dim
        for a, key in enumerate(self.keys):
            yield key, local_vector[a * n:(a + 1) * n]

    def split_matrix(self, local_matrix: np.ndarray):
        n = self.block_dim
        for a, row in enumerate(self.keys):
            for b, col in enumerate(self.keys):
                yield row, col, local_matrix[a * n:(a + 1) * n, b * n:(b + 1) * n]


class BlockSparseInfo:
    """
    Symmetric block-tridiagonal information matrix.

    ``diag[k]`` holds block (k, k) and ``lower[k]`` holds block (k+1, k);
    upper blocks are the transposes and never stored.
    """

    def __init__(self, n_states: int, block_dim: int = 3):
        self.n_states = n_states
        self.block_dim = block_dim
        self.diag = np.zeros((n_states, block_dim, block_dim))
        self.lower = np.zeros((max(n_states - 1, 0), block_dim, block_dim))

    @classmethod
    def from_dense(cls, matrix: np.ndarray, block_dim: int) -> "BlockSparseInfo":
        n_states = matrix.shape[0] // block_dim
        info = cls(n_states, block_dim)
        for k in range(n_states):
            s = slice(k * block_dim, (k + 1) * block_dim)
            info.diag[k] = matrix[s, s]
            if k + 1 < n_states:
                info.lower[k] = matrix[(k + 1) * block_dim:(k + 2) * block_dim, s]
        return info

    def copy(self) -> "BlockSparseInfo":
        other = BlockSparseInfo(self.n_states, self.block_dim)
        other.diag = self.diag.copy()
        other.lower = self.lower.copy()
        return other

    def add_block(self, i: int, j: int, block: np.ndarray) -> None:
        """Add ``block`` at (i, j) and its transpose at (j, i)."""
        if not (0 <= i < self.n_states and 0 <= j < self.n_states):
            raise IndexOutOfRange(f"Block ({i}, {j}) outside {self.n_states} states")
        if i == j:
            self.diag[i] += block
        elif i == j + 1:
            self.lower[j] += block
        elif j == i + 1:
            self.lower[i] += block.T
        else:
            raise IndexOutOfRange(
                f"Block ({i}, {j}) lies outside the tridiagonal band", {"i": i, "j": j}
            )

    def add_projected(self, projection: Projection, local_matrix: np.ndarray) -> None:
        """Scatter-add P_kᵀ H P_k for a symmetric local block H."""
        for row, col, block in projection.split_matrix(local_matrix):
            if row >= col:
                self.add_block(row, col, block)

    def to_dense(self) -> np.ndarray:
        n, m = self.block_dim, self.n_states
        dense = np.zeros((n * m, n * m))
        for k in range(m):
            dense[k * n:(k + 1) * n, k * n:(k + 1) * n] = self.diag[k]
        for k in range(m - 1):
            dense[(k + 1) * n:(k + 2) * n, k * n:(k + 1) * n] = self.lower[k]
            dense[k * n:(k + 1) * n, (k + 1) * n:(k + 2) * n] = self.lower[k].T
        return dense

    def factorize(self) -> List[tuple]:
        """Cholesky factors of the forward Schur complements S_k."""
        factors = []
        for k in range(self.n_states):
            schur = self.diag[k].copy()
            if k > 0:
                schur -= self.lower[k - 1] @ cho_solve(factors[-1], self.lower[k - 1].T)
            schur = 0.5 * (schur + schur.T)
            try:
                factors.append(cho_factor(schur, lower=True))
            except LinAlgError as e:
                raise InfoNotSPD(
                    f"Information matrix is not positive definite at block {k}",
                    block=k,
                    details={"block": k, "min_eigenvalue": float(np.linalg.eigvalsh(schur).min())},
                ) from e
        return factors

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """Solve Σ⁻¹ x = rhs for a (K+1, n) right-hand side."""
        factors = self.factorize()
        z = np.array(rhs, dtype=float, copy=True)
        for k in range(1, self.n_states):
            z[k] -= self.lower[k - 1] @ cho_solve(factors[k - 1], z[k - 1])
        x = np.zeros_like(z)
        x[-1] = cho_solve(factors[-1], z[-1])
        for k in range(self.n_states - 2, -1, -1):
            x[k] = cho_solve(factors[k], z[k] - self.lower[k].T @ x[k + 1])
        return x

    def log_det(self) -> float:
        return float(sum(2.0 * np.sum(np.log(np.diag(c))) for c, _ in self.factorize()))

    def covariance_blocks(self) -> Tuple[np.ndarray, np.ndarray]:
        """
        Diagonal blocks Σ_kk and cross blocks Σ_{k,k+1} of the inverse.

        Returns:
            Tuple (diagonal (K+1, n, n), cross (K, n, n)).
        """
        factors = self.factorize()
        eye = np.eye(self.block_dim)
        diag = np.zeros_like(self.diag)
        cross = np.zeros_like(self.lower)
        diag[-1] = cho_solve(factors[-1], eye)
        for k in range(self.n_states - 2, -1, -1):
            gain = cho_solve(factors[k], self.lower[k].T)
            cross[k] = -gain @ diag[k + 1]
            diag[k] = cho_solve(factors[k], eye) + gain @ diag[k + 1] @ gain.T
        diag = 0.5 * (diag + np.swapaxes(diag, -1, -2))
        return diag, cross


def assemble_info(n_states: int, block_dim: int,
                  contributions: Iterable[Tuple[Tuple[int, ...], np.ndarray]]) -> BlockSparseInfo:
    """Scatter-add per-factor (keys, local Hessian) blocks into one matrix."""
    info = BlockSparseInfo(n_states, block_dim)
    for keys, hessian in contributions:
        info.add_projected(Projection(tuple(keys), block_dim), hessian)
    return info


# --- factor graph ------------------------------------------------------------

@dataclass(eq=False)
class FactorGraph:
    factors: List[Factor]
    n_states: int
    block_dim: int = 3
    side: Side = Side.RIGHT
    timestamps: Optional[np.ndarray] = None
    numerical_jacobians: bool = False
    anchors: Dict[int, np.ndarray] = field(default_factory=dict)
    tags: Dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.side = Side(self.side)
        for factor in self.factors:
            keys = factor.keys
            if min(keys) < 0 or max(keys) >= self.n_states:
                raise IndexOutOfRange(
                    f"{factor.kind} factor keys {keys} outside {self.n_states} states"
                )
            if max(keys) - min(keys) > 1:
                raise IndexOutOfRange(f"{factor.kind} factor keys {keys} are not adjacent")

    @cached_property
    def groups(self) -> List[Tuple[Tuple[int, ...], List[Factor]]]:
        """Factors grouped by the states they connect, in key order."""
        grouped: Dict[Tuple[int, ...], List[Factor]] = {}
        for factor in self.factors:
            grouped.setdefault(tuple(factor.keys), []).append(factor)
        return sorted(grouped.items())

    def counts(self) -> Dict[str, int]:
        out: Dict[str, int] = {}
        for factor in self.factors:
            out[factor.kind] = out.get(factor.kind, 0) + 1
        return out

    def factors_of_kind(self, kind: str) -> List[Factor]:
        return [f for f in self.factors if f.kind == kind]

    def total_energy(self, states: State) -> float:
        return float(sum(f.energy(*(states[k] for k in f.keys)) for f in self.factors))

    def linearize(self, states: State) -> Tuple[float, BlockSparseInfo, np.ndarray]:
        """
        Gauss-Newton system at ``states``.

        Returns:
            Tuple (total energy, information matrix, gradient (K+1, n)).
        """
        info = BlockSparseInfo(self.n_states, self.block_dim)
        gradient = np.zeros((self.n_states, self.block_dim))
        total = 0.0
        for factor in self.factors:
            energy, g, h = factor.gauss_newton(
                [states[k] for k in factor.keys], self.side, self.numerical_jacobians
            )
            projection = Projection(factor.keys, self.block_dim)
            info.add_projected(projection, h)
            for key, piece in projection.split_vector(g):
                gradient[key] += piece
            total += energy
        return total, info, gradient

    def with_range_model(self, model: NoiseModel) -> "FactorGraph":
        factors = [replace(f, model=model) if isinstance(f, RangeFactor) else f for f in self.factors]
        return replace(self, factors=factors)

    def dead_reckon(self) -> Trajectory:
        """Integrate the process factors forward from the prior mean."""
        prior = self.factors_of_kind("prior")[0]
        poses = [prior.mean]
        process = {f.key: f for f in self.factors_of_kind("process")}
        for k in range(1, self.n_states):
            poses.append(process[k].predict(poses[-1]))
        timestamps = self.timestamps if self.timestamps is not None else np.arange(self.n_states, dtype=float)
        return Trajectory(timestamps, Pose2.stack(poses))


def _preintegrate(u: np.ndarray, dts: np.ndarray) -> np.ndarray:
    """Compound per-record increments into one body twist over the segment."""
    increments = exp_map(dts[:, None] * u)
    total = increments[0]
    for i in range(1, len(dts)):
        total = total.compose(increments[i])
    return log_map(total) / dts.sum()


def pose_grid(odometry: OdometryStream, state_rate: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Pose timestamps on the odometry clock, downsampled to ``state_rate``.

    Returns:
        Tuple (pose times (K+1,), per-record durations, segment start indices).
        A single record has no measured duration and yields the start pose only.
    """
    t = np.asarray(odometry.t, dtype=float)
    if t.size == 1:
        return t.copy(), np.zeros(1), np.zeros(1, dtype=int)
    period = float(np.median(np.diff(t)))
    dts = np.append(np.diff(t), period)
    stride = max(1, int(round(1.0 / (state_rate * period))))
    starts = np.arange(0, t.size, stride)
    times = np.append(t[starts], t[-1] + period)
    return times, dts, starts


def build_graph(odometry: OdometryStream, ranges: RangeStream, anchors: Dict[int, np.ndarray],
                tags: Dict[int, np.ndarray], prior: Tuple[Pose2, np.ndarray], range_model: NoiseModel,
                q_c: Sequence[float], lateral_inflation: float = 10.0, state_rate: float = 10.0,
                side: Union[Side, str] = Side.RIGHT, numerical_jacobians: bool = False) -> FactorGraph:
    """
    Build the trajectory factor graph from odometry and range streams.

    Odometry between pose timestamps is pre-integrated into one input per
    process factor; each range is attached to the pose with the nearest
    timestamp.

    Args:
        odometry: Body twist records at the odometry rate.
        ranges: Tag-anchor range records.
        anchors: Anchor id to absolute position.
        tags: Tag id to body-frame offset.
        prior: Prior mean and covariance on the first pose.
        range_model: Noise model for every range factor.
        q_c: Continuous-time process noise densities (omega, v_x, v_y).
        lateral_inflation: Scale on the lateral-velocity density.
        state_rate: Pose rate in Hz.
        side: Perturbation side used by every factor.
        numerical_jacobians: Use central differences in the MAP linearization.

    Returns:
        The assembled FactorGraph.
    """
    side = Side(side)
    if len(odometry) == 0:
        raise EmptyOdometry("Odometry stream is empty")
    times, dts, starts = pose_grid(odometry, state_rate)
    n_states = times.size

    factors: List[Factor] = [PriorFactor(0, prior[0], np.asarray(prior[1], dtype=float), side)]
    bounds = np.append(starts, len(odometry))
    u = np.asarray(odometry.u, dtype=float)
    for k in range(1, n_states):
        segment = slice(bounds[k - 1], bounds[k])
        dt = float(times[k] - times[k - 1])
        factors.append(ProcessFactor(
            k, _preintegrate(u[segment], dts[segment]), dt,
            process_covariance(dt, q_c, lateral_inflation), side,
        ))

    if len(ranges):
        period = float(np.median(np.diff(times))) if n_states > 1 else 1.0 / state_rate
        t = np.asarray(ranges.t, dtype=float)
        early = t < times[0] - 1e-9
        if np.any(early):
            raise RangeBeforeFirstPose(
                f"{int(early.sum())} range measurements precede the first pose at t={times[0]}",
                {"first_range_t": float(t.min()), "first_pose_t": float(times[0])},
            )
        if n_states > 1:
            nearest = np.clip(np.searchsorted(times, t), 1, n_states - 1)
            nearest = np.where(np.abs(t - times[nearest - 1]) <= np.abs(times[nearest] - t), nearest - 1, nearest)
        else:
            nearest = np.zeros(t.size, dtype=int)
        gap = np.abs(times[nearest] - t)
        if np.any(gap > 0.5 * period + 1e-9):
            raise TimestampMisalignment(
                "Range measurement farther than half a state period from any pose",
                {"max_gap": float(gap.max()), "period": period},
            )
        for i, key in enumerate(nearest):
            tag_id, anchor_id = int(ranges.tag_id[i]), int(ranges.anchor_id[i])
            if anchor_id not in anchors:
                raise UnknownId(f"Unknown anchor id {anchor_id}", {"anchor_id": anchor_id})
            if tag_id not in tags:
                raise UnknownId(f"Unknown tag id {tag_id}", {"tag_id": tag_id})
            factors.append(RangeFactor(
                int(key), float(ranges.range[i]), anchors[anchor_id], tags[tag_id], range_model,
                anchor_id, tag_id,
            ))

    graph = FactorGraph(factors, n_states, 3, side, times, numerical_jacobians, dict(anchors), dict(tags))
    logger.info(f"Built factor graph with {n_states} poses: {graph.counts()}")
    return graph
