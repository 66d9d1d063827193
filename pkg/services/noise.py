"""
Noise model service for the estimation toolkit.
Holds the range likelihood models (Gaussian, Skew-Laplace, asymmetric Cauchy
and Gaussian mixture), their negative-log energies, sampling, and maximum
likelihood fitting from residual samples.

Energies drop additive normalization constants, so objective values are only
comparable between runs that use the same model.
"""
import json
import logging
from dataclasses import dataclass
from typing import Annotated, List, Literal, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, PositiveFloat, TypeAdapter, ValidationError, model_validator
from scipy.optimize import minimize
from scipy.special import logsumexp

from config import config
from services.exceptions import ConfigError, DegenerateData

# Configure logging
logging.basicConfig(level=config.LOG_LEVEL, format=config.LOG_FORMAT)
logger = logging.getLogger(__name__)

EM_TOLERANCE = 1e-8
EM_MAX_ITERATIONS = 500
EM_MAX_RESTARTS = 5
COLLAPSED_VARIANCE = 1e-12
MIN_FIT_SAMPLES = 100
LOG_2PI = np.log(2.0 * np.pi)


def _as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


# --- parameter types ---------------------------------------------------------

class GaussianParams(BaseModel):
    """Zero-mean Gaussian; ``variance`` is a scalar or a full SPD matrix."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    variance: Union[PositiveFloat, List[List[float]]]

    @model_validator(mode="after")
    def _check_spd(self):
        if isinstance(self.variance, list):
            matrix = np.asarray(self.variance, dtype=float)
            if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
                raise ValueError("variance matrix must be square")
            if np.abs(matrix - matrix.T).max() > 1e-12:
                raise ValueError("variance matrix must be symmetric")
            try:
                np.linalg.cholesky(matrix)
            except np.linalg.LinAlgError as e:
                raise ValueError("variance matrix must be positive definite") from e
        return self

    @property
    def is_scalar(self) -> bool:
        return not isinstance(self.variance, list)


class SkewLaplaceParams(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid", populate_by_name=True)

    sigma: PositiveFloat
    lam: float = Field(alias="lambda")

    @property
    def alpha(self) -> float:
        return float(np.sqrt(1.0 + (self.lam / self.sigma) ** 2))


class AsymCauchyParams(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    c_minus: PositiveFloat
    c_plus: PositiveFloat

    @property
    def alpha(self) -> float:
        return 2.0 / (np.pi * (self.c_plus + self.c_minus))


class GmmComponent(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    weight: float = Field(ge=0.0)
    mean: float
    variance: PositiveFloat


class GmmParams(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    components: List[GmmComponent] = Field(min_length=1)

    @model_validator(mode="after")
    def _check_weights(self):
        total = sum(c.weight for c in self.components)
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"mixture weights sum to {total!r}, expected 1")
        return self

    def arrays(self):
        weights = np.array([c.weight for c in self.components])
        means = np.array([c.mean for c in self.components])
        variances = np.array([c.variance for c in self.components])
        return weights, means, variances


# --- energies and densities --------------------------------------------------

def gaussian_energy(residual, p: GaussianParams):
    """½ rᵀ V⁻¹ r; scalar models broadcast over arrays of residuals."""
    r = np.asarray(residual, dtype=float)
    if p.is_scalar:
        return 0.5 * r ** 2 / p.variance
    information = np.linalg.inv(np.asarray(p.variance))
    return 0.5 * np.einsum('...i,ij,...j->...', r, information, r)


def skew_laplace_energy(residual, p: SkewLaplaceParams):
    r = np.asarray(residual, dtype=float)
    return -(p.lam * r / p.sigma ** 2 - p.alpha * np.abs(r) / p.sigma)


def skew_laplace_pdf(residual, p: SkewLaplaceParams):
    return np.exp(-skew_laplace_energy(residual, p)) / (2.0 * p.sigma * p.alpha)


def _cauchy_scale(r: np.ndarray, p: AsymCauchyParams) -> np.ndarray:
    return np.where(r < 0.0, p.c_minus, p.c_plus)


def asym_cauchy_energy(residual, p: AsymCauchyParams):
    r = np.asarray(residual, dtype=float)
    return np.log1p((r / _cauchy_scale(r, p)) ** 2)


def asym_cauchy_pdf(residual, p: AsymCauchyParams):
    return p.alpha * np.exp(-asym_cauchy_energy(residual, p))


def _gmm_log_terms(r: np.ndarray, p: GmmParams) -> np.ndarray:
    weights, means, variances = p.arrays()
    r = r[..., None]
    with np.errstate(divide="ignore"):
        log_weights = np.log(weights)
    return log_weights - 0.5 * (LOG_2PI + np.log(variances)) - 0.5 * (r - means) ** 2 / variances


def gmm_energy(residual, p: GmmParams):
    """−ln Σ w_j N(r | μ_j, Σ_j), evaluated with log-sum-exp."""
    r = np.asarray(residual, dtype=float)
    return -logsumexp(_gmm_log_terms(r, p), axis=-1)


def _gmm_responsibilities(r: np.ndarray, p: GmmParams) -> np.ndarray:
    terms = _gmm_log_terms(r, p)
    return np.exp(terms - logsumexp(terms, axis=-1, keepdims=True))


# --- model documents ---------------------------------------------------------
# Each model is a {type, params} document; the methods below give the
# solvers a single interface over all four likelihoods.

class GaussianNoise(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    type: Literal["gaussian"] = "gaussian"
    params: GaussianParams

    @classmethod
    def from_sigma(cls, sigma: float) -> "GaussianNoise":
        return cls(params=GaussianParams(variance=float(sigma) ** 2))

    def energy(self, r):
        return gaussian_energy(r, self.params)

    def pdf(self, r):
        if not self.params.is_scalar:
            matrix = np.asarray(self.params.variance)
            norm = np.sqrt(np.linalg.det(2.0 * np.pi * matrix))
            return np.exp(-self.energy(r)) / norm
        return np.exp(-self.energy(r)) / np.sqrt(2.0 * np.pi * self.params.variance)

    def gradient(self, r):
        r = np.asarray(r, dtype=float)
        if self.params.is_scalar:
            return r / self.params.variance
        return r @ np.linalg.inv(np.asarray(self.params.variance))

    def curvature(self, r):
        r = np.asarray(r, dtype=float)
        if self.params.is_scalar:
            return np.full_like(r, 1.0 / self.params.variance)
        return np.linalg.inv(np.asarray(self.params.variance))

    def sample(self, rng, size=None):
        rng = _as_rng(rng)
        if self.params.is_scalar:
            return rng.normal(0.0, np.sqrt(self.params.variance), size)
        matrix = np.asarray(self.params.variance)
        return rng.multivariate_normal(np.zeros(matrix.shape[0]), matrix, size)


class SkewLaplaceNoise(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    type: Literal["skew_laplace"] = "skew_laplace"
    params: SkewLaplaceParams

    def energy(self, r):
        return skew_laplace_energy(r, self.params)

    def pdf(self, r):
        return skew_laplace_pdf(r, self.params)

    def gradient(self, r):
        p = self.params
        return -p.lam / p.sigma ** 2 + p.alpha * np.sign(r) / p.sigma

    def curvature(self, r):
        # IRLS weight of the |r| kink, capped inside one scale of the origin
        p = self.params
        return p.alpha / (p.sigma * np.maximum(np.abs(np.asarray(r, dtype=float)), p.sigma))

    def sample(self, rng, size=None):
        rng = _as_rng(rng)
        p = self.params
        kappa = p.lam / p.sigma
        b_plus = p.sigma * (p.alpha + kappa)
        b_minus = p.sigma * (p.alpha - kappa)
        positive = rng.random(size) < b_plus / (b_plus + b_minus)
        magnitude = rng.standard_exponential(size)
        return np.where(positive, b_plus * magnitude, -b_minus * magnitude)


class AsymCauchyNoise(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    type: Literal["asym_cauchy"] = "asym_cauchy"
    params: AsymCauchyParams

    def energy(self, r):
        return asym_cauchy_energy(r, self.params)

    def pdf(self, r):
        return asym_cauchy_pdf(r, self.params)

    def gradient(self, r):
        r = np.asarray(r, dtype=float)
        c = _cauchy_scale(r, self.params)
        return 2.0 * r / (c ** 2 + r ** 2)

    def curvature(self, r):
        r = np.asarray(r, dtype=float)
        c = _cauchy_scale(r, self.params)
        return 2.0 / (c ** 2 + r ** 2)

    def sample(self, rng, size=None):
        rng = _as_rng(rng)
        p = self.params
        negative = rng.random(size) < p.c_minus / (p.c_minus + p.c_plus)
        magnitude = np.abs(rng.standard_cauchy(size))
        return np.where(negative, -p.c_minus * magnitude, p.c_plus * magnitude)


class GmmNoise(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    type: Literal["gmm"] = "gmm"
    params: GmmParams

    def energy(self, r):
        return gmm_energy(r, self.params)

    def pdf(self, r):
        return np.exp(-self.energy(r))

    def gradient(self, r):
        r = np.asarray(r, dtype=float)
        _, means, variances = self.params.arrays()
        gamma = _gmm_responsibilities(r, self.params)
        return np.sum(gamma * (r[..., None] - means) / variances, axis=-1)

    def curvature(self, r):
        r = np.asarray(r, dtype=float)
        _, _, variances = self.params.arrays()
        gamma = _gmm_responsibilities(r, self.params)
        return np.sum(gamma / variances, axis=-1)

    def sample(self, rng, size=None):
        rng = _as_rng(rng)
        weights, means, variances = self.params.arrays()
        index = rng.choice(len(weights), size=size, p=weights)
        return rng.normal(means[index], np.sqrt(variances[index]))


NoiseModel = Annotated[
    Union[GaussianNoise, SkewLaplaceNoise, AsymCauchyNoise, GmmNoise],
    Field(discriminator="type"),
]
_noise_adapter = TypeAdapter(NoiseModel)

NOISE_KINDS = ("gaussian", "skew_laplace", "asym_cauchy", "gmm")


def log_likelihood(model: NoiseModel, samples) -> float:
    """Sample log-likelihood, normalization included."""
    density = model.pdf(np.asarray(samples, dtype=float))
    with np.errstate(divide="ignore"):
        return float(np.sum(np.log(density)))


def sample(model: NoiseModel, rng, size=None):
    """Draw residuals from any noise model; ``rng`` is a seed or a Generator."""
    return model.sample(rng, size)


# --- fitting -----------------------------------------------------------------

def _check_samples(samples, minimum: int) -> np.ndarray:
    samples = np.asarray(samples, dtype=float).ravel()
    if samples.size < minimum:
        raise DegenerateData(
            f"Need at least {minimum} samples, got {samples.size}", {"samples": int(samples.size)}
        )
    if not np.all(np.isfinite(samples)):
        raise DegenerateData("Samples contain non-finite values")
    if np.ptp(samples) == 0.0:
        raise DegenerateData("Samples are constant", {"value": float(samples[0])})
    return samples


def fit_gaussian(samples) -> GaussianParams:
    samples = _check_samples(samples, 2)
    return GaussianParams(variance=float(np.mean(samples ** 2)))


def fit_skew_laplace(samples) -> SkewLaplaceParams:
    """
    Maximum likelihood Skew-Laplace fit.

    Starts from the moment-matched guess (mean = 2λ, E[r²] = 8λ² + 2σ²) and
    refines with Nelder-Mead over (ln σ, λ).

    Args:
        samples: Residual samples (at least 100, finite).

    Returns:
        The fitted parameters.
    """
    samples = _check_samples(samples, MIN_FIT_SAMPLES)
    lam0 = np.mean(samples) / 2.0
    second = np.mean(samples ** 2) - 8.0 * lam0 ** 2
    if second > 0.0:
        sigma0 = np.sqrt(second / 2.0)
    else:
        sigma0 = np.median(np.abs(samples - np.median(samples))) / np.log(2.0)
    sigma0 = max(sigma0, 1e-6 * np.std(samples))

    def objective(theta):
        p = SkewLaplaceParams(sigma=float(np.exp(theta[0])), lam=float(theta[1]))
        return -float(np.sum(np.log(skew_laplace_pdf(samples, p))))

    start = np.array([np.log(sigma0), lam0])
    result = minimize(objective, start, method="Nelder-Mead",
                      options={"xatol": 1e-10, "fatol": 1e-10, "maxiter": 4000})
    best = result.x if result.fun <= objective(start) else start
    params = SkewLaplaceParams(sigma=float(np.exp(best[0])), lam=float(best[1]))
    logger.info(f"Fitted Skew-Laplace sigma={params.sigma:.6g}, lambda={params.lam:.6g}")
    return params


def fit_asym_cauchy(samples) -> AsymCauchyParams:
    """Maximum likelihood fit of (c⁻, c⁺) with Nelder-Mead over the log scales."""
    samples = _check_samples(samples, MIN_FIT_SAMPLES)
    overall = np.median(np.abs(samples))
    negative, positive = samples[samples < 0.0], samples[samples >= 0.0]
    c_minus0 = np.median(-negative) if negative.size else overall
    c_plus0 = np.median(positive) if positive.size else overall
    floor = 1e-6 * np.std(samples)

    def objective(theta):
        p = AsymCauchyParams(c_minus=float(np.exp(theta[0])), c_plus=float(np.exp(theta[1])))
        return -float(np.sum(np.log(asym_cauchy_pdf(samples, p))))

    start = np.log([max(c_minus0, floor), max(c_plus0, floor)])
    result = minimize(objective, start, method="Nelder-Mead",
                      options={"xatol": 1e-10, "fatol": 1e-10, "maxiter": 4000})
    best = result.x if result.fun <= objective(start) else start
    params = AsymCauchyParams(c_minus=float(np.exp(best[0])), c_plus=float(np.exp(best[1])))
    logger.info(f"Fitted asymmetric Cauchy c-={params.c_minus:.6g}, c+={params.c_plus:.6g}")
    return params


def gmm_em(samples, weights, means, variances,
           tolerance: float = EM_TOLERANCE, max_iterations: int = EM_MAX_ITERATIONS):
    """
    Run EM for a scalar Gaussian mixture from the given initial components.

    Returns:
        Tuple (weights, means, variances, trace) where trace holds the
        log-likelihood before every M-step and after the final one.
    """
    x = np.asarray(samples, dtype=float)[:, None]
    weights, means, variances = (np.array(a, dtype=float) for a in (weights, means, variances))
    trace = []
    for _ in range(max_iterations):
        terms = np.log(weights) - 0.5 * (LOG_2PI + np.log(variances)) - 0.5 * (x - means) ** 2 / variances
        norm = logsumexp(terms, axis=1, keepdims=True)
        trace.append(float(norm.sum()))
        if len(trace) > 1 and trace[-1] - trace[-2] < tolerance:
            break
        gamma = np.exp(terms - norm)
        counts = gamma.sum(axis=0)
        weights = counts / counts.sum()
        means = (gamma * x).sum(axis=0) / counts
        variances = (gamma * (x - means) ** 2).sum(axis=0) / counts
        if np.any(~np.isfinite(variances)) or np.any(variances < COLLAPSED_VARIANCE):
            return weights, means, variances, trace
    return weights, means, variances, trace


def fit_gmm_em(samples, n_components: int = 3, seed: int = 0) -> GmmParams:
    """
    Fit a scalar Gaussian mixture by EM.

    Components start at evenly spaced sample quantiles. A collapsed component
    triggers a restart with jittered means.

    Args:
        samples: Residual samples (at least 10 per component).
        n_components: Number of mixture components.
        seed: Seed for the restart jitter.

    Returns:
        Mixture parameters sorted by ascending mean.
    """
    if n_components < 1:
        raise DegenerateData(f"n_components must be at least 1, got {n_components}")
    samples = _check_samples(samples, 10 * n_components)
    rng = np.random.default_rng(seed)
    spread = np.std(samples)
    base_means = np.quantile(samples, (np.arange(n_components) + 0.5) / n_components)

    for attempt in range(EM_MAX_RESTARTS + 1):
        means = base_means.copy()
        if attempt > 0:
            means += rng.normal(0.0, 0.1 * spread, n_components)
        weights, means, variances, trace = gmm_em(
            samples, np.full(n_components, 1.0 / n_components), means,
            np.full(n_components, np.var(samples)),
        )
        if np.all(np.isfinite(variances)) and np.all(variances >= COLLAPSED_VARIANCE):
            order = np.argsort(means)
            weights = weights[order] / weights.sum()
            components = [
                GmmComponent(weight=float(w), mean=float(m), variance=float(v))
                for w, m, v in zip(weights, means[order], variances[order])
            ]
            # renormalize the last weight so the sum is exact
            residual_weight = 1.0 - sum(c.weight for c in components[:-1])
            components[-1] = components[-1].model_copy(update={"weight": max(residual_weight, 0.0)})
            logger.info(f"EM converged after {len(trace)} iterations, log-likelihood {trace[-1]:.6f}")
            return GmmParams(components=components)
        logger.warning(f"GMM component collapsed on attempt {attempt + 1}, restarting with jitter")

    raise DegenerateData(
        f"GMM component collapsed after {EM_MAX_RESTARTS} restarts",
        {"n_components": n_components},
    )


@dataclass(frozen=True)
class FitResult:
    """A fitted noise model and its sample log-likelihood."""
    model: NoiseModel
    log_likelihood: float
    n_samples: int


def fit_noise_model(kind: str, samples, n_components: int = 3, seed: int = 0) -> FitResult:
    """
    Fit a noise model of the given kind to residual samples.

    Args:
        kind: One of "gaussian", "skew_laplace", "asym_cauchy", "gmm".
        samples: Residual samples.
        n_components: Mixture size for "gmm".
        seed: EM restart seed for "gmm".

    Returns:
        FitResult with the model and its log-likelihood.
    """
    samples = np.asarray(samples, dtype=float).ravel()
    if kind == "gaussian":
        model = GaussianNoise(params=fit_gaussian(samples))
    elif kind == "skew_laplace":
        model = SkewLaplaceNoise(params=fit_skew_laplace(samples))
    elif kind == "asym_cauchy":
        model = AsymCauchyNoise(params=fit_asym_cauchy(samples))
    elif kind == "gmm":
        model = GmmNoise(params=fit_gmm_em(samples, n_components, seed))
    else:
        raise ConfigError(f"Unknown noise model kind: {kind}", {"allowed": list(NOISE_KINDS)})
    return FitResult(model=model, log_likelihood=log_likelihood(model, samples), n_samples=int(samples.size))


# --- persistence -------------------------------------------------------------

def noise_model_to_json(model: NoiseModel) -> str:
    return model.model_dump_json(by_alias=True, indent=2)


def noise_model_from_json(text: str) -> NoiseModel:
    """Parse a model document, or the ``model`` entry of a fit document."""
    try:
        document = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"Noise model is not valid JSON: {e.msg}", {"line": e.lineno, "column": e.colno}) from e
    if isinstance(document, dict) and "model" in document:
        document = document["model"]
    try:
        return _noise_adapter.validate_python(document)
    except ValidationError as e:
        raise ConfigError("Invalid noise model document", json.loads(e.json(include_url=False))) from e


def save_noise_model(model: NoiseModel, path: str) -> None:
    with open(path, "w") as f:
        f.write(noise_model_to_json(model))
    logger.info(f"Saved {model.type} noise model to {path}")


def fit_document(fit: FitResult, provenance=None) -> dict:
    """Fit output: the model document plus its log-likelihood and sample count."""
    document = {
        "model": fit.model.model_dump(mode="json", by_alias=True),
        "log_likelihood": fit.log_likelihood,
        "n_samples": fit.n_samples,
    }
    document.update(provenance or {})
    return document


def load_noise_model(path: str) -> NoiseModel:
    try:
        with open(path) as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"Cannot read noise model {path}: {e}") from e
    model = noise_model_from_json(text)
    logger.info(f"Loaded {model.type} noise model from {path}")
    return model