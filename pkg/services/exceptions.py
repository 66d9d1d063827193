"""
Error codes and exception types shared by the estimation services.
"""
from typing import Any, Optional


class ErrorCodes:
    """Error codes for the estimation toolkit."""
    # Configuration errors
    CONFIG_PARSE_ERROR = "CONFIG_PARSE_ERROR"
    CONFIG_SCHEMA_ERROR = "CONFIG_SCHEMA_ERROR"

    # Data errors
    DEGENERATE_DATA = "DEGENERATE_DATA"
    EMPTY_ODOMETRY = "EMPTY_ODOMETRY"
    RANGE_BEFORE_FIRST_POSE = "RANGE_BEFORE_FIRST_POSE"
    UNKNOWN_ID = "UNKNOWN_ID"
    TIMESTAMP_MISALIGNMENT = "TIMESTAMP_MISALIGNMENT"
    LENGTH_MISMATCH = "LENGTH_MISMATCH"
    DATASET_FORMAT_ERROR = "DATASET_FORMAT_ERROR"

    # Solver errors
    INFO_NOT_SPD = "INFO_NOT_SPD"
    COVARIANCE_NOT_SPD = "COVARIANCE_NOT_SPD"
    LINE_SEARCH_FAILED = "LINE_SEARCH_FAILED"
    NOT_CONVERGED = "NOT_CONVERGED"

    # Contract violations
    NOT_IN_ALGEBRA = "NOT_IN_ALGEBRA"
    DIMENSION_TOO_LARGE = "DIMENSION_TOO_LARGE"
    INDEX_OUT_OF_RANGE = "INDEX_OUT_OF_RANGE"
    SIDE_MISMATCH = "SIDE_MISMATCH"


class EstimationError(Exception):
    """Base class for every error raised by the toolkit."""

    code = "ESTIMATION_ERROR"

    def __init__(self, message: str, details: Optional[Any] = None):
        super().__init__(message)
        self.message = message
        self.details = details

    def to_dict(self):
        return {"code": self.code, "message": self.message, "details": self.details}


# --- configuration -----------------------------------------------------------

class ConfigError(EstimationError):
    code = ErrorCodes.CONFIG_SCHEMA_ERROR


class ConfigParseError(ConfigError):
    code = ErrorCodes.CONFIG_PARSE_ERROR


# --- data --------------------------------------------------------------------

class DataError(EstimationError):
    code = ErrorCodes.DATASET_FORMAT_ERROR


class DegenerateData(DataError):
    code = ErrorCodes.DEGENERATE_DATA


class EmptyOdometry(DataError):
    code = ErrorCodes.EMPTY_ODOMETRY


class RangeBeforeFirstPose(DataError):
    code = ErrorCodes.RANGE_BEFORE_FIRST_POSE


class UnknownId(DataError):
    code = ErrorCodes.UNKNOWN_ID


class TimestampMisalignment(DataError):
    code = ErrorCodes.TIMESTAMP_MISALIGNMENT


class LengthMismatch(DataError):
    code = ErrorCodes.LENGTH_MISMATCH


class DatasetFormatError(DataError):
    code = ErrorCodes.DATASET_FORMAT_ERROR


# --- solver ------------------------------------------------------------------

class SolverError(EstimationError):
    code = ErrorCodes.NOT_CONVERGED


class InfoNotSPD(SolverError):
    """Raised when a Schur complement of the information matrix is not SPD."""

    code = ErrorCodes.INFO_NOT_SPD

    def __init__(self, message: str, block: Optional[int] = None, details: Optional[Any] = None):
        super().__init__(message, details if details is not None else {"block": block})
        self.block = block


class CovarianceNotSPD(SolverError):
    code = ErrorCodes.COVARIANCE_NOT_SPD


class LineSearchFailed(SolverError):
    code = ErrorCodes.LINE_SEARCH_FAILED


class NotConverged(SolverError):
    """Carries the best iterate found so far in ``estimate``."""

    code = ErrorCodes.NOT_CONVERGED

    def __init__(self, message: str, estimate: Any = None):
        super().__init__(message)
        self.estimate = estimate


# --- contract violations -----------------------------------------------------

class NotInAlgebra(EstimationError):
    code = ErrorCodes.NOT_IN_ALGEBRA


class DimensionTooLarge(EstimationError):
    code = ErrorCodes.DIMENSION_TOO_LARGE


class IndexOutOfRange(EstimationError):
    code = ErrorCodes.INDEX_OUT_OF_RANGE


class SideMismatch(EstimationError):
    code = ErrorCodes.SIDE_MISMATCH
