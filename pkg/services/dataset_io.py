"""
Dataset IO service for the estimation toolkit.
Reads and writes the CSV/JSON dataset directory shared by simulated and real
logs, estimate files, and any table carrying a provenance header.

Every CSV starts with a ``# config_hash=<hex> seed=<n>`` comment line and
stores floats with 17 significant digits.
"""
import json
import logging
import os
from typing import Any, Dict, Optional, Tuple

import numpy as np
import pandas as pd

from config import config
from models.dataset import TRUTH_COLUMNS, Dataset, OdometryStream, RangeStream, Trajectory
from services.exceptions import DatasetFormatError, LengthMismatch, UnknownId
from services.liegroup import Pose2

# Configure logging
logging.basicConfig(level=config.LOG_LEVEL, format=config.LOG_FORMAT)
logger = logging.getLogger(__name__)

ANCHOR_COLUMNS = ["id", "x", "y"]
TAG_COLUMNS = ["id", "x", "y"]
ODOMETRY_COLUMNS = ["t", "omega", "v_x", "v_y"]
RANGE_COLUMNS = ["t", "tag_id", "anchor_id", "range"]
RESIDUAL_COLUMNS = ["residual"]
COVARIANCE_COLUMNS = [f"cov_{i}{j}" for i in range(3) for j in range(3)]

DATASET_FILES = {
    "anchors": "anchors.csv",
    "tags": "tags.csv",
    "odometry": "odometry.csv",
    "ranges": "ranges.csv",
    "truth": "truth.csv",
    "meta": "meta.json",
}


def provenance_line(provenance: Optional[Dict[str, Any]]) -> str:
    provenance = provenance or {}
    return f"# config_hash={provenance.get('config_hash', 'none')} seed={provenance.get('seed', 'none')}\n"


def write_table(frame: pd.DataFrame, path: str, provenance: Optional[Dict[str, Any]] = None,
                sep: str = ",") -> None:
    """Write a CSV (or TSV) with the provenance header and full-precision floats."""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", newline="") as f:
        f.write(provenance_line(provenance))
        frame.to_csv(f, index=False, sep=sep, float_format=config.CSV_FLOAT_FORMAT)
    logger.info(f"Wrote {len(frame)} rows to {path}")


def read_table(path: str, columns=None, sep: str = ",") -> pd.DataFrame:
    """Read a provenance-headed CSV and check its columns."""
    try:
        frame = pd.read_csv(path, comment="#", sep=sep, float_precision="round_trip")
    except FileNotFoundError as e:
        raise DatasetFormatError(f"Missing file {path}") from e
    except pd.errors.EmptyDataError as e:
        raise DatasetFormatError(f"File {path} is empty") from e
    except pd.errors.ParserError as e:
        raise DatasetFormatError(f"Cannot parse {path}: {e}") from e
    if columns is not None:
        missing = [c for c in columns if c not in frame.columns]
        if missing:
            raise DatasetFormatError(f"{path} is missing columns {missing}", {"missing": missing})
    return frame


def read_provenance(path: str) -> Dict[str, str]:
    with open(path) as f:
        first = f.readline().strip()
    if not first.startswith("#"):
        return {}
    return dict(item.split("=", 1) for item in first.lstrip("# ").split() if "=" in item)


def write_json(document: Dict[str, Any], path: str, provenance: Optional[Dict[str, Any]] = None) -> None:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    payload = dict(document)
    payload.update(provenance or {})
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
    logger.info(f"Wrote {path}")


def _check_monotone(values: np.ndarray, name: str, strict: bool = False) -> None:
    steps = np.diff(values)
    if np.any(steps < 0) or (strict and np.any(steps == 0)):
        raise DatasetFormatError(f"Timestamps in {name} are not monotone")


def _landmarks(frame: pd.DataFrame, name: str) -> Dict[int, np.ndarray]:
    if frame["id"].duplicated().any():
        raise DatasetFormatError(f"Duplicate ids in {name}")
    return {int(row.id): np.array([row.x, row.y], dtype=float) for row in frame.itertuples(index=False)}


def _landmark_frame(landmarks: Dict[int, np.ndarray]) -> pd.DataFrame:
    rows = [[int(k), float(v[0]), float(v[1])] for k, v in sorted(landmarks.items())]
    frame = pd.DataFrame(rows, columns=ANCHOR_COLUMNS)
    return frame.astype({"id": int})


def _dataset_path(directory: str, key: str) -> str:
    return os.path.join(directory, DATASET_FILES[key])


def write_dataset(dataset: Dataset, directory: str, provenance: Optional[Dict[str, Any]] = None) -> None:
    """Write a dataset directory (anchors, tags, odometry, ranges, truth, meta)."""
    os.makedirs(directory, exist_ok=True)
    write_table(_landmark_frame(dataset.anchors), _dataset_path(directory, "anchors"), provenance)
    write_table(_landmark_frame(dataset.tags), _dataset_path(directory, "tags"), provenance)
    odometry = pd.DataFrame(np.column_stack([dataset.odometry.t, dataset.odometry.u]), columns=ODOMETRY_COLUMNS)
    write_table(odometry, _dataset_path(directory, "odometry"), provenance)
    ranges = pd.DataFrame({
        "t": dataset.ranges.t,
        "tag_id": np.asarray(dataset.ranges.tag_id, dtype=int),
        "anchor_id": np.asarray(dataset.ranges.anchor_id, dtype=int),
        "range": dataset.ranges.range,
    })
    if dataset.ranges.nlos is not None:
        ranges["nlos"] = np.asarray(dataset.ranges.nlos, dtype=int)
    write_table(ranges, _dataset_path(directory, "ranges"), provenance)
    if dataset.truth is not None:
        write_table(dataset.truth.to_frame(), _dataset_path(directory, "truth"), provenance)
    write_json(dataset.meta, _dataset_path(directory, "meta"), provenance)


def read_dataset(directory: str) -> Dataset:
    """
    Load a dataset directory and validate ids and timestamp order.

    Args:
        directory: Directory written by ``write_dataset`` or converted from a log.

    Returns:
        The Dataset; ``truth`` is None when truth.csv is absent.
    """
    anchors = _landmarks(read_table(_dataset_path(directory, "anchors"), ANCHOR_COLUMNS), "anchors")
    tags = _landmarks(read_table(_dataset_path(directory, "tags"), TAG_COLUMNS), "tags")

    odometry_frame = read_table(_dataset_path(directory, "odometry"), ODOMETRY_COLUMNS)
    odometry = OdometryStream(
        odometry_frame["t"].to_numpy(dtype=float),
        odometry_frame[["omega", "v_x", "v_y"]].to_numpy(dtype=float),
    )
    _check_monotone(odometry.t, "odometry", strict=True)

    range_frame = read_table(_dataset_path(directory, "ranges"), RANGE_COLUMNS)
    ranges = RangeStream(
        range_frame["t"].to_numpy(dtype=float),
        range_frame["tag_id"].to_numpy(dtype=int),
        range_frame["anchor_id"].to_numpy(dtype=int),
        range_frame["range"].to_numpy(dtype=float),
        range_frame["nlos"].to_numpy(dtype=bool) if "nlos" in range_frame.columns else None,
    )
    _check_monotone(ranges.t, "ranges")
    for column, known, name in ((ranges.anchor_id, anchors, "anchor"), (ranges.tag_id, tags, "tag")):
        unknown = sorted(set(int(i) for i in np.unique(column)) - set(known))
        if unknown:
            raise UnknownId(f"Ranges reference unknown {name} id {unknown[0]}", {name: unknown})

    truth = None
    if os.path.exists(_dataset_path(directory, "truth")):
        truth = Trajectory.from_frame(read_table(_dataset_path(directory, "truth"), TRUTH_COLUMNS))

    meta: Dict[str, Any] = {}
    if os.path.exists(_dataset_path(directory, "meta")):
        with open(_dataset_path(directory, "meta")) as f:
            meta = json.load(f)
    logger.info(
        f"Loaded dataset from {directory}: {len(odometry)} odometry records, {len(ranges)} ranges"
    )
    return Dataset(anchors, tags, odometry, ranges, truth, meta)


def write_estimate(directory: str, trajectory: Trajectory, covariances: np.ndarray,
                   provenance: Optional[Dict[str, Any]] = None) -> None:
    """Write trajectory.csv (t, theta, x, y) and covariance.csv (t, cov_ij)."""
    write_table(trajectory.to_frame(), os.path.join(directory, "trajectory.csv"), provenance)
    covariance = pd.DataFrame(np.asarray(covariances).reshape(len(trajectory), 9), columns=COVARIANCE_COLUMNS)
    covariance.insert(0, "t", trajectory.timestamps)
    write_table(covariance, os.path.join(directory, "covariance.csv"), provenance)


def read_estimate(directory: str) -> Tuple[Trajectory, np.ndarray]:
    trajectory = Trajectory.from_frame(read_table(os.path.join(directory, "trajectory.csv"), TRUTH_COLUMNS))
    frame = read_table(os.path.join(directory, "covariance.csv"), ["t"] + COVARIANCE_COLUMNS)
    if len(frame) != len(trajectory):
        raise LengthMismatch(
            f"Estimate has {len(trajectory)} poses but {len(frame)} covariance rows"
        )
    return trajectory, frame[COVARIANCE_COLUMNS].to_numpy(dtype=float).reshape(-1, 3, 3)


def read_truth(path: str) -> Trajectory:
    if os.path.isdir(path):
        path = os.path.join(path, DATASET_FILES["truth"])
    return Trajectory.from_frame(read_table(path, TRUTH_COLUMNS))


def write_residuals(residuals: np.ndarray, path: str, provenance: Optional[Dict[str, Any]] = None) -> None:
    write_table(pd.DataFrame({"residual": np.asarray(residuals, dtype=float)}), path, provenance)


def read_residuals(path: str) -> np.ndarray:
    return read_table(path, RESIDUAL_COLUMNS)["residual"].to_numpy(dtype=float)


def prior_pose(dataset: Dataset) -> Optional[Pose2]:
    """Prior mean stored in meta.json as [theta, x, y], if any."""
    if "prior_mean" not in dataset.meta:
        return None
    return Pose2.from_vector(np.asarray(dataset.meta["prior_mean"], dtype=float))
