"""
Cubature service for the estimation toolkit.
Sigma-point rules and expectation evaluation over matrix-Lie-group (MLG)
Gaussian marginals.

Sigma points are placed at X̄ ⊕ (L α) with L the lower Cholesky factor of Σ.
Expectation callables receive every sigma point at once: a function of one
state is called with a batched Pose2 (or an (L, n) array for vector states)
and must return one value per point.
"""
import logging
from dataclasses import dataclass
from functools import lru_cache
from itertools import product
from typing import Callable, List, Tuple, Union

import numpy as np
from numpy.polynomial.hermite_e import hermegauss

from config import config
from services.exceptions import ConfigError, CovarianceNotSPD, DimensionTooLarge, SideMismatch
from services.liegroup import Pose2, Rot2, Side, State, adjoint, local, retract, tangent_dim

# Configure logging
logging.basicConfig(level=config.LOG_LEVEL, format=config.LOG_FORMAT)
logger = logging.getLogger(__name__)

MAX_GAUSS_HERMITE_DIM = 8
RULE_NAMES = ("gauss_hermite", "spherical")


@dataclass(frozen=True, eq=False)
class CubatureRule:
    """Unit sigma points α (L, n) and weights w (L,) for a standard normal."""
    name: str
    unit_points: np.ndarray
    weights: np.ndarray

    @property
    def dim(self) -> int:
        return self.unit_points.shape[1]

    def __len__(self) -> int:
        return self.unit_points.shape[0]


def gauss_hermite_rule(dim: int, order: int = 3) -> CubatureRule:
    """
    Tensor-product Gauss-Hermite rule with three points per axis.

    Args:
        dim: Perturbation dimension, between 1 and 8.
        order: Points per axis; only 3 is supported.

    Returns:
        A rule with 3**dim points whose weights sum to one.
    """
    if order != 3:
        raise ConfigError(f"Only third-order Gauss-Hermite is supported, got order {order}")
    if dim < 1 or dim > MAX_GAUSS_HERMITE_DIM:
        raise DimensionTooLarge(
            f"Gauss-Hermite rule dimension must be in [1, {MAX_GAUSS_HERMITE_DIM}], got {dim}",
            {"dim": dim, "points": 3 ** dim},
        )
    nodes, node_weights = hermegauss(order)
    node_weights = node_weights / node_weights.sum()
    index = np.array(list(product(range(order), repeat=dim)))
    points = nodes[index]
    weights = np.prod(node_weights[index], axis=1)
    return CubatureRule("gauss_hermite", points, weights / weights.sum())


def spherical_rule(dim: int) -> CubatureRule:
    """Third-degree spherical rule: 2n points at ±√n e_i, equal weights."""
    if dim < 1:
        raise DimensionTooLarge(f"Spherical rule dimension must be positive, got {dim}")
    eye = np.sqrt(dim) * np.eye(dim)
    points = np.vstack([eye, -eye])
    return CubatureRule("spherical", points, np.full(2 * dim, 1.0 / (2 * dim)))


@lru_cache(maxsize=None)
def make_rule(name: str, dim: int) -> CubatureRule:
    if name == "gauss_hermite":
        return gauss_hermite_rule(dim)
    if name == "spherical":
        return spherical_rule(dim)
    raise ConfigError(f"Unknown cubature rule: {name}", {"allowed": list(RULE_NAMES)})


@dataclass(frozen=True, eq=False)
class MlgGaussian:
    """
    Gaussian over the perturbation of a group mean: X = X̄ ⊕ δ, δ ~ N(0, Σ).

    ``mean`` is a single state or a tuple of states for a joint marginal; the
    covariance is then the block matrix over the stacked perturbations.
    """
    mean: Union[State, Tuple[State, ...]]
    covariance: np.ndarray
    side: Side = Side.RIGHT

    @property
    def components(self) -> Tuple[State, ...]:
        return self.mean if isinstance(self.mean, tuple) else (self.mean,)

    @property
    def dims(self) -> List[int]:
        return [tangent_dim(x) for x in self.components]

    @property
    def dim(self) -> int:
        return sum(self.dims)

    def cholesky(self) -> np.ndarray:
        covariance = np.asarray(self.covariance, dtype=float)
        if covariance.shape != (self.dim, self.dim):
            raise CovarianceNotSPD(
                f"Covariance shape {covariance.shape} does not match dimension {self.dim}"
            )
        try:
            return np.linalg.cholesky(covariance)
        except np.linalg.LinAlgError as e:
            raise CovarianceNotSPD("Marginal covariance is not positive definite") from e

    def require_side(self, side: Union[Side, str]) -> None:
        if Side(side) is not self.side:
            raise SideMismatch(
                f"Marginal uses {self.side.value} perturbations, caller expects {Side(side).value}"
            )

    def with_side(self, side: Union[Side, str]) -> "MlgGaussian":
        """Re-express a single-pose marginal with the other perturbation side."""
        side = Side(side)
        if side is self.side:
            return self
        if isinstance(self.mean, tuple) or not isinstance(self.mean, Pose2):
            raise SideMismatch("Side conversion is only defined for a single Pose2 marginal")
        ad = adjoint(self.mean)
        if side is Side.RIGHT:
            ad = np.linalg.inv(ad)
        return MlgGaussian(self.mean, ad @ self.covariance @ ad.T, side)

    def split(self, stacked: np.ndarray) -> List[np.ndarray]:
        """Split (..., n) stacked perturbations into per-state pieces."""
        return np.split(stacked, np.cumsum(self.dims)[:-1], axis=-1)


@dataclass(frozen=True, eq=False)
class SigmaPoints:
    weights: np.ndarray
    states: Tuple[State, ...]
    deviations: np.ndarray


def _broadcast_state(state: State, count: int) -> State:
    if isinstance(state, Pose2):
        return Pose2(
            Rot2(np.broadcast_to(state.rotation.matrix, (count, 2, 2)).copy()),
            np.broadcast_to(state.translation, (count, 2)).copy(),
        )
    state = np.asarray(state, dtype=float)
    return np.broadcast_to(state, (count,) + state.shape).copy()


def sigma_points(q: MlgGaussian, rule: CubatureRule) -> SigmaPoints:
    """Batched group sigma points with deviations X^ℓ ⊖ X̄ (stacked, (L, n))."""
    if rule.dim != q.dim:
        raise DimensionTooLarge(f"Rule dimension {rule.dim} does not match marginal dimension {q.dim}")
    offsets = rule.unit_points @ q.cholesky().T
    states, deviations = [], []
    for mean, delta in zip(q.components, q.split(offsets)):
        batched_mean = _broadcast_state(mean, len(rule))
        point = retract(batched_mean, delta, q.side)
        states.append(point)
        deviations.append(local(point, batched_mean, q.side))
    return SigmaPoints(rule.weights, tuple(states), np.concatenate(deviations, axis=-1))


def group_sigma_points(q: MlgGaussian, rule: CubatureRule) -> List[Tuple[float, State]]:
    """Sigma points as (weight, state) pairs, one per rule point."""
    points = sigma_points(q, rule)
    out = []
    for index, weight in enumerate(points.weights):
        state = tuple(s[index] for s in points.states)
        out.append((float(weight), state if len(state) > 1 else state[0]))
    return out


def _evaluate(points: SigmaPoints, f: Callable) -> np.ndarray:
    return np.asarray(f(*points.states), dtype=float)


def expect_scalar(q: MlgGaussian, rule: CubatureRule, f: Callable) -> float:
    """E[f(X)] ≈ Σ w f(X^ℓ)."""
    points = sigma_points(q, rule)
    return float(points.weights @ _evaluate(points, f))


def expect_vector(q: MlgGaussian, rule: CubatureRule, f: Callable) -> np.ndarray:
    """E[(X ⊖ X̄) f(X)]."""
    points = sigma_points(q, rule)
    values = points.weights * _evaluate(points, f)
    return values @ points.deviations


def expect_matrix(q: MlgGaussian, rule: CubatureRule, f: Callable) -> np.ndarray:
    """E[(X ⊖ X̄)(X ⊖ X̄)ᵀ f(X)]."""
    points = sigma_points(q, rule)
    values = points.weights * _evaluate(points, f)
    return np.einsum('l,li,lj->ij', values, points.deviations, points.deviations)
