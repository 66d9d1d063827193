"""
Lie group service for the estimation toolkit.
Provides SO(2)/SE(2) elements, the hat/vee and exp/log maps, and the
right/left oplus and ominus operators used by every other service.

Twist ordering is fixed as (theta, x, y): rotation first, then translation.
All covariances in the toolkit follow this ordering. Every operation
broadcasts over leading batch dimensions so sigma points are processed in a
single vectorized call.
"""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Sequence, Union

import numpy as np

from config import config
from services.exceptions import NotInAlgebra

# Configure logging
logging.basicConfig(level=config.LOG_LEVEL, format=config.LOG_FORMAT)
logger = logging.getLogger(__name__)

SMALL_ANGLE = 1e-6
# (theta - sin theta) / theta^2 cancels badly well above SMALL_ANGLE
JACOBIAN_SERIES_ANGLE = 1e-1
RENORMALIZE_EVERY = 1000
ALGEBRA_TOLERANCE = 1e-12


class Side(str, Enum):
    """Perturbation side for oplus/ominus."""
    RIGHT = "right"
    LEFT = "left"


def wrap_angle(theta):
    """Wrap angles to (-pi, pi]."""
    theta = np.asarray(theta, dtype=float)
    return np.pi - np.mod(np.pi - theta, 2.0 * np.pi)


def _rotation_matrix(theta: np.ndarray) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.stack([np.stack([c, -s], axis=-1), np.stack([s, c], axis=-1)], axis=-2)


@dataclass(frozen=True, eq=False)
class Rot2:
    """Planar rotation C_ab stored as a (..., 2, 2) matrix."""

    matrix: np.ndarray
    compositions: int = 0

    @classmethod
    def from_angle(cls, angle) -> "Rot2":
        return cls(_rotation_matrix(np.asarray(angle, dtype=float)))

    @classmethod
    def identity(cls, batch_shape: tuple = ()) -> "Rot2":
        return cls(np.broadcast_to(np.eye(2), tuple(batch_shape) + (2, 2)).copy())

    @property
    def angle(self) -> np.ndarray:
        return wrap_angle(np.arctan2(self.matrix[..., 1, 0], self.matrix[..., 0, 0]))

    @property
    def batch_shape(self) -> tuple:
        return self.matrix.shape[:-2]

    def compose(self, other: "Rot2") -> "Rot2":
        count = max(self.compositions, other.compositions) + 1
        rotation = Rot2(self.matrix @ other.matrix, count)
        if count >= RENORMALIZE_EVERY:
            return rotation.renormalized()
        return rotation

    def renormalized(self) -> "Rot2":
        """Project back onto SO(2) with the orthogonal polar factor."""
        m = self.matrix
        angle = np.arctan2(m[..., 1, 0] - m[..., 0, 1], m[..., 0, 0] + m[..., 1, 1])
        return Rot2.from_angle(angle)

    def inverse(self) -> "Rot2":
        return Rot2(np.swapaxes(self.matrix, -1, -2), self.compositions)

    def rotate(self, vectors) -> np.ndarray:
        vectors = np.asarray(vectors, dtype=float)
        return np.einsum('...ij,...j->...i', self.matrix, vectors)

    def __getitem__(self, index) -> "Rot2":
        return Rot2(self.matrix[index], self.compositions)


@dataclass(frozen=True, eq=False)
class Pose2:
    """SE(2) element: rotation C_ab and translation r^{zw}_a (meters)."""

    rotation: Rot2
    translation: np.ndarray

    @classmethod
    def identity(cls, batch_shape: tuple = ()) -> "Pose2":
        return cls(Rot2.identity(batch_shape), np.zeros(tuple(batch_shape) + (2,)))

    @classmethod
    def from_vector(cls, vector) -> "Pose2":
        """Build from the canonical (theta, x, y) wire form."""
        vector = np.asarray(vector, dtype=float)
        return cls(Rot2.from_angle(vector[..., 0]), vector[..., 1:3].copy())

    @classmethod
    def from_matrix(cls, matrix) -> "Pose2":
        matrix = np.asarray(matrix, dtype=float)
        return cls(Rot2(matrix[..., :2, :2].copy()), matrix[..., :2, 2].copy())

    @classmethod
    def stack(cls, poses: Sequence["Pose2"]) -> "Pose2":
        return cls(
            Rot2(np.stack([p.rotation.matrix for p in poses])),
            np.stack([p.translation for p in poses]),
        )

    @property
    def batch_shape(self) -> tuple:
        return self.rotation.batch_shape

    @property
    def angle(self) -> np.ndarray:
        return self.rotation.angle

    def to_vector(self) -> np.ndarray:
        """Canonical (theta, x, y) wire form."""
        return np.concatenate([self.angle[..., None], self.translation], axis=-1)

    def as_matrix(self) -> np.ndarray:
        out = np.zeros(self.batch_shape + (3, 3))
        out[..., :2, :2] = self.rotation.matrix
        out[..., :2, 2] = self.translation
        out[..., 2, 2] = 1.0
        return out

    def compose(self, other: "Pose2") -> "Pose2":
        return Pose2(
            self.rotation.compose(other.rotation),
            self.rotation.rotate(other.translation) + self.translation,
        )

    __matmul__ = compose

    def inverse(self) -> "Pose2":
        inv_rotation = self.rotation.inverse()
        return Pose2(inv_rotation, -inv_rotation.rotate(self.translation))

    def act(self, points) -> np.ndarray:
        """Transform body-frame points into the absolute frame."""
        return self.rotation.rotate(points) + self.translation

    def __getitem__(self, index) -> "Pose2":
        return Pose2(self.rotation[index], self.translation[index])

    def __len__(self) -> int:
        return self.batch_shape[0]

    def __repr__(self) -> str:
        return f"Pose2({np.array2string(self.to_vector(), precision=6)})"


State = Union[Pose2, np.ndarray]


def _v_coefficients(theta: np.ndarray):
    """Return sin(t)/t and (1 - cos(t))/t with a series below SMALL_ANGLE."""
    small = np.abs(theta) < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta ** 2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, theta / 2.0 - theta ** 3 / 24.0, 2.0 * np.sin(safe / 2.0) ** 2 / safe)
    return a, b


def hat(xi) -> np.ndarray:
    """Map a twist (theta, x, y) to its se(2) matrix."""
    xi = np.asarray(xi, dtype=float)
    out = np.zeros(xi.shape[:-1] + (3, 3))
    out[..., 0, 1] = -xi[..., 0]
    out[..., 1, 0] = xi[..., 0]
    out[..., 0, 2] = xi[..., 1]
    out[..., 1, 2] = xi[..., 2]
    return out


def vee(m) -> np.ndarray:
    """Map an se(2) matrix back to its twist (theta, x, y)."""
    m = np.asarray(m, dtype=float)
    if m.shape[-2:] != (3, 3):
        raise NotInAlgebra(f"Expected a 3x3 matrix, got shape {m.shape}")
    bottom = np.abs(m[..., 2, :]).max()
    diagonal = max(np.abs(m[..., 0, 0]).max(), np.abs(m[..., 1, 1]).max())
    skew = np.abs(m[..., 0, 1] + m[..., 1, 0]).max()
    if bottom > ALGEBRA_TOLERANCE or diagonal > ALGEBRA_TOLERANCE or skew > ALGEBRA_TOLERANCE:
        raise NotInAlgebra(
            "Matrix is not in se(2)",
            {"bottom_row": float(bottom), "diagonal": float(diagonal), "skew": float(skew)},
        )
    return np.stack([m[..., 1, 0], m[..., 0, 2], m[..., 1, 2]], axis=-1)


def exp_map(xi) -> Pose2:
    """Closed-form SE(2) exponential of a twist."""
    xi = np.asarray(xi, dtype=float)
    theta, rho = xi[..., 0], xi[..., 1:3]
    a, b = _v_coefficients(theta)
    translation = np.stack(
        [a * rho[..., 0] - b * rho[..., 1], b * rho[..., 0] + a * rho[..., 1]], axis=-1
    )
    return Pose2(Rot2.from_angle(theta), translation)


def log_map(pose: Pose2) -> np.ndarray:
    """SE(2) logarithm; the rotation component lies in (-pi, pi]."""
    theta = pose.angle
    a, b = _v_coefficients(theta)
    det = a ** 2 + b ** 2
    t = pose.translation
    rho_x = (a * t[..., 0] + b * t[..., 1]) / det
    rho_y = (-b * t[..., 0] + a * t[..., 1]) / det
    return np.stack([theta, rho_x, rho_y], axis=-1)


def oplus(pose: Pose2, xi, side: Union[Side, str] = Side.RIGHT) -> Pose2:
    """Right: X exp(xi^). Left: exp(xi^) X."""
    increment = exp_map(xi)
    if Side(side) is Side.RIGHT:
        return pose.compose(increment)
    return increment.compose(pose)


def ominus(y: Pose2, x: Pose2, side: Union[Side, str] = Side.RIGHT) -> np.ndarray:
    """Right: log(X^-1 Y)^v. Left: log(Y X^-1)^v."""
    if Side(side) is Side.RIGHT:
        return log_map(x.inverse().compose(y))
    return log_map(y.compose(x.inverse()))


def right_jacobian(xi) -> np.ndarray:
    """Right Jacobian of the SE(2) exponential in (theta, x, y) ordering."""
    xi = np.asarray(xi, dtype=float)
    theta, rho1, rho2 = xi[..., 0], xi[..., 1], xi[..., 2]
    a, b = _v_coefficients(theta)

    series = np.abs(theta) < JACOBIAN_SERIES_ANGLE
    safe = np.where(series, 1.0, theta)
    t2 = theta ** 2
    d = np.where(
        series,
        theta / 6.0 - theta * t2 / 120.0 + theta * t2 ** 2 / 5040.0 - theta * t2 ** 3 / 362880.0,
        (safe - np.sin(safe)) / safe ** 2,
    )
    small = np.abs(theta) < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    e = np.where(small, 0.5 - t2 / 24.0, 2.0 * np.sin(safe / 2.0) ** 2 / safe ** 2)

    out = np.zeros(xi.shape[:-1] + (3, 3))
    out[..., 0, 0] = 1.0
    out[..., 1, 0] = rho1 * d - rho2 * e
    out[..., 1, 1] = a
    out[..., 1, 2] = b
    out[..., 2, 0] = rho1 * e + rho2 * d
    out[..., 2, 1] = -b
    out[..., 2, 2] = a
    return out


def left_jacobian(xi) -> np.ndarray:
    return right_jacobian(-np.asarray(xi, dtype=float))


def adjoint(pose: Pose2) -> np.ndarray:
    """Adjoint matrix of an SE(2) element in (theta, x, y) ordering."""
    out = np.zeros(pose.batch_shape + (3, 3))
    out[..., 0, 0] = 1.0
    out[..., 1, 0] = pose.translation[..., 1]
    out[..., 2, 0] = -pose.translation[..., 0]
    out[..., 1:, 1:] = pose.rotation.matrix
    return out


# --- generic state helpers ---------------------------------------------------
# Vector states (ndarray) use plain addition and subtraction, so the solvers
# run unchanged on Euclidean test problems.

def retract(state: State, delta, side: Union[Side, str] = Side.RIGHT) -> State:
    if isinstance(state, Pose2):
        return oplus(state, delta, side)
    return np.asarray(state, dtype=float) + np.asarray(delta, dtype=float)


def local(y: State, x: State, side: Union[Side, str] = Side.RIGHT) -> np.ndarray:
    if isinstance(y, Pose2):
        return ominus(y, x, side)
    return np.asarray(y, dtype=float) - np.asarray(x, dtype=float)


def tangent_dim(state: State) -> int:
    if isinstance(state, Pose2):
        return 3
    return int(np.asarray(state).shape[-1])
