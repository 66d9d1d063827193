"""
Dataset models for the UWB variational estimation toolkit.
Trajectories, odometry and range streams, and the dataset bundle shared by
the simulator, the estimators and the file IO layer.
"""
from dataclasses import dataclass, field
from typing import Any, Dict, Optional

import numpy as np
import pandas as pd

from services.exceptions import DatasetFormatError, LengthMismatch
from services.liegroup import Pose2, State

TRUTH_COLUMNS = ["t", "theta", "x", "y"]


@dataclass(frozen=True, eq=False)
class Trajectory:
    """
    Ordered states X_0..X_K with strictly increasing timestamps.

    ``states`` is a batched Pose2 of length K+1, or a (K+1, n) array for
    vector-state problems.
    """
    timestamps: np.ndarray
    states: State

    def __post_init__(self):
        timestamps = np.asarray(self.timestamps, dtype=float)
        object.__setattr__(self, "timestamps", timestamps)
        if timestamps.ndim != 1 or timestamps.size < 1:
            raise DatasetFormatError("Trajectory needs at least one timestamp")
        if np.any(np.diff(timestamps) <= 0.0):
            raise DatasetFormatError("Trajectory timestamps must be strictly increasing")
        if len(self.states) != timestamps.size:
            raise LengthMismatch(
                f"Trajectory has {timestamps.size} timestamps but {len(self.states)} states"
            )

    def __len__(self) -> int:
        return self.timestamps.size

    def __getitem__(self, k) -> State:
        return self.states[k]

    @property
    def is_pose(self) -> bool:
        return isinstance(self.states, Pose2)

    def with_states(self, states: State) -> "Trajectory":
        return Trajectory(self.timestamps, states)

    def to_frame(self) -> pd.DataFrame:
        if not self.is_pose:
            columns = [f"x{i}" for i in range(self.states.shape[1])]
            frame = pd.DataFrame(np.asarray(self.states), columns=columns)
            frame.insert(0, "t", self.timestamps)
            return frame
        return pd.DataFrame(
            np.column_stack([self.timestamps, self.states.to_vector()]), columns=TRUTH_COLUMNS
        )

    @classmethod
    def from_frame(cls, frame: pd.DataFrame) -> "Trajectory":
        missing = set(TRUTH_COLUMNS) - set(frame.columns)
        if missing:
            raise DatasetFormatError(f"Trajectory table is missing columns {sorted(missing)}")
        return cls(
            frame["t"].to_numpy(dtype=float),
            Pose2.from_vector(frame[["theta", "x", "y"]].to_numpy(dtype=float)),
        )


@dataclass(frozen=True, eq=False)
class OdometryStream:
    """Body-frame twist inputs u = (omega, v_x, v_y), each held until the next record."""
    t: np.ndarray
    u: np.ndarray

    def __len__(self) -> int:
        return self.t.size


@dataclass(frozen=True, eq=False)
class RangeStream:
    t: np.ndarray
    tag_id: np.ndarray
    anchor_id: np.ndarray
    range: np.ndarray
    nlos: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return self.t.size

    @classmethod
    def empty(cls) -> "RangeStream":
        return cls(np.zeros(0), np.zeros(0, dtype=int), np.zeros(0, dtype=int), np.zeros(0))


@dataclass(eq=False)
class Dataset:
    """Anchors, tags, odometry, ranges and optional ground truth for one run."""
    anchors: Dict[int, np.ndarray]
    tags: Dict[int, np.ndarray]
    odometry: OdometryStream
    ranges: RangeStream
    truth: Optional[Trajectory] = None
    meta: Dict[str, Any] = field(default_factory=dict)
