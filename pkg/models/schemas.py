"""
Experiment configuration schemas for the UWB variational estimation toolkit.
Validates the JSON experiment document and computes its provenance hash.
"""
import hashlib
import json
import logging
import math
from typing import Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from config import config
from services.exceptions import ConfigError, ConfigParseError

# Configure logging
logging.basicConfig(level=config.LOG_LEVEL, format=config.LOG_FORMAT)
logger = logging.getLogger(__name__)

RuleName = Literal["gauss_hermite", "spherical"]


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class Landmark(StrictModel):
    id: int
    x: float
    y: float


class SolverConfig(StrictModel):
    """ESGVI iteration settings."""
    max_iterations: int = Field(200, gt=0)
    step_tolerance: float = Field(1e-6, gt=0)
    relative_loss_tolerance: float = Field(1e-9, gt=0)
    stall_tolerance: float = Field(1e-5, gt=0)
    line_search_shrink: float = Field(0.5, gt=0, lt=1)
    max_backtracks: int = Field(20, ge=0)
    unary_rule: RuleName = "gauss_hermite"
    binary_rule: RuleName = "gauss_hermite"
    hessian_floor: float = Field(1e-9, ge=0)
    warm_start: bool = True


class MapSolverConfig(StrictModel):
    """Levenberg-Marquardt settings for the MAP baselines."""
    max_iterations: int = Field(200, gt=0)
    step_tolerance: float = Field(1e-8, gt=0)
    initial_damping: float = Field(1e-4, gt=0)
    damping_increase: float = Field(10.0, gt=1)
    damping_decrease: float = Field(0.1, gt=0, lt=1)
    max_damping: float = Field(1e10, gt=0)
    strict: bool = False


class GraphConfig(StrictModel):
    state_rate_hz: float = Field(10.0, gt=0)
    q_c: List[float] = Field(default_factory=lambda: [1e-3, 4e-3, 4e-3], min_length=3, max_length=3)
    lateral_inflation: float = Field(10.0, gt=0)
    prior_sigmas: List[float] = Field(default_factory=lambda: [0.05, 0.1, 0.1], min_length=3, max_length=3)
    side: Literal["right", "left"] = "right"
    numerical_jacobians: bool = False

    @field_validator("q_c", "prior_sigmas")
    @classmethod
    def _positive(cls, value):
        if any(v <= 0 for v in value):
            raise ValueError("entries must be positive")
        return value


class SimConfig(StrictModel):
    trials: int = Field(50, gt=0)
    poses: int = Field(400, gt=0)
    odometry_rate_hz: float = Field(100.0, gt=0)
    range_rate_hz: float = Field(10.0, gt=0)
    anchors: List[Landmark] = Field(default_factory=lambda: [
        Landmark(id=0, x=0.0, y=0.0), Landmark(id=1, x=6.3, y=0.0),
        Landmark(id=2, x=6.3, y=6.3), Landmark(id=3, x=0.0, y=6.3),
    ])
    tags: List[Landmark] = Field(default_factory=lambda: [
        Landmark(id=0, x=0.3, y=0.25), Landmark(id=1, x=0.3, y=-0.25),
        Landmark(id=2, x=-0.3, y=0.25), Landmark(id=3, x=-0.3, y=-0.25),
    ])
    start: List[float] = Field(default_factory=lambda: [0.0, 3.15, 1.88], min_length=3, max_length=3)
    speed: float = Field(0.4, ge=0)
    speed_modulation: float = Field(0.25, ge=0, lt=1)
    yaw_rate: float = 2.0 * math.pi / 20.0
    yaw_rate_modulation: float = Field(0.1, ge=0)
    modulation_periods: List[float] = Field(default_factory=lambda: [7.0, 11.0], min_length=2, max_length=2)
    odometry_noise: bool = True
    range_sigma: float = Field(0.1, gt=0)
    corruption_fraction: float = Field(0.25, ge=0, le=1)
    corruption_low_sigmas: float = Field(1.0, ge=0)
    corruption_high_sigmas: float = Field(6.0, ge=0)

    @model_validator(mode="after")
    def _check_rates(self):
        if self.corruption_low_sigmas > self.corruption_high_sigmas:
            raise ValueError("corruption_low_sigmas must not exceed corruption_high_sigmas")
        if self.range_rate_hz > self.odometry_rate_hz:
            raise ValueError("range_rate_hz must not exceed odometry_rate_hz")
        if not self.anchors or not self.tags:
            raise ValueError("at least one anchor and one tag are required")
        return self


class NoiseConfig(StrictModel):
    fit_samples: int = Field(5000, ge=100)
    gmm_components: int = Field(3, ge=1)
    esgvi_model: Literal["skew_laplace", "gaussian", "asym_cauchy", "gmm"] = "skew_laplace"
    model_paths: Dict[str, str] = Field(default_factory=dict)

    @field_validator("model_paths")
    @classmethod
    def _known_methods(cls, value):
        unknown = set(value) - {"esgvi", "map-c", "map-gmm"}
        if unknown:
            raise ValueError(f"unknown methods {sorted(unknown)}")
        return value


class ExperimentConfig(StrictModel):
    seed: int = Field(2024, ge=0)
    output_dir: str = config.OUTPUT_DIR
    methods: List[Literal["map-c", "map-gmm", "esgvi"]] = Field(
        default_factory=lambda: ["map-c", "map-gmm", "esgvi"], min_length=1
    )
    sim: SimConfig = Field(default_factory=SimConfig)
    graph: GraphConfig = Field(default_factory=GraphConfig)
    noise: NoiseConfig = Field(default_factory=NoiseConfig)
    solver: SolverConfig = Field(default_factory=SolverConfig)
    map_solver: MapSolverConfig = Field(default_factory=MapSolverConfig)


def _locate(text: str, loc) -> Optional[int]:
    """Best-effort line number of a field path in the JSON text."""
    lines = text.splitlines()
    line = 0
    found = None
    for part in loc:
        if not isinstance(part, str):
            continue
        for i in range(line, len(lines)):
            if f'"{part}"' in lines[i]:
                line, found = i, i + 1
                break
    return found


def _schema_details(error: ValidationError, text: str) -> List[Dict]:
    return [
        {"field": ".".join(str(p) for p in e["loc"]), "message": e["msg"], "line": _locate(text, e["loc"])}
        for e in error.errors(include_url=False)
    ]


def parse_experiment_config(text: str, source: str = "<string>") -> ExperimentConfig:
    """
    Parse and validate an experiment document.

    Args:
        text: JSON text.
        source: Name used in error messages.

    Returns:
        The validated ExperimentConfig.
    """
    try:
        document = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigParseError(
            f"{source}:{e.lineno}:{e.colno}: invalid JSON ({e.msg})",
            {"line": e.lineno, "column": e.colno},
        ) from e
    try:
        return ExperimentConfig.model_validate(document)
    except ValidationError as e:
        details = _schema_details(e, text)
        fields = ", ".join(
            f"{d['field']} (line {d['line']})" if d["line"] else d["field"] for d in details
        )
        raise ConfigError(f"{source}: invalid configuration at {fields}", details) from e


def load_experiment_config(path: Optional[str] = None) -> ExperimentConfig:
    path = path or config.DEFAULT_EXPERIMENT_CONFIG
    try:
        with open(path) as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"Cannot read configuration file {path}: {e}") from e
    experiment = parse_experiment_config(text, path)
    logger.info(f"Loaded experiment configuration from {path} (hash {config_hash(experiment)[:12]})")
    return experiment


def config_hash(experiment: ExperimentConfig) -> str:
    """SHA-256 of the canonical JSON dump."""
    canonical = json.dumps(experiment.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
