"""
Tests for the range noise models and their fitting.
"""
import json

import numpy as np
import pytest
from pydantic import ValidationError
from scipy.integrate import quad

from services.exceptions import ConfigError, DegenerateData
from services.noise import (
    AsymCauchyNoise, AsymCauchyParams, GaussianNoise, GmmComponent, GmmNoise, GmmParams, SkewLaplaceNoise,
    SkewLaplaceParams, fit_asym_cauchy, fit_document, fit_gmm_em, fit_noise_model, fit_skew_laplace,
    gmm_em, load_noise_model, log_likelihood, noise_model_from_json, noise_model_to_json, save_noise_model,
)


def skew_laplace(sigma=0.1, lam=0.02):
    return SkewLaplaceNoise(params=SkewLaplaceParams(sigma=sigma, lam=lam))


def cauchy(c_minus=0.1, c_plus=0.3):
    return AsymCauchyNoise(params=AsymCauchyParams(c_minus=c_minus, c_plus=c_plus))


def mixture():
    return GmmNoise(params=GmmParams(components=[
        GmmComponent(weight=0.7, mean=0.0, variance=0.01),
        GmmComponent(weight=0.3, mean=0.35, variance=0.04),
    ]))


class TestEnergies:
    def test_gaussian_energy(self):
        model = GaussianNoise.from_sigma(0.5)
        assert model.energy(1.0) == pytest.approx(2.0)
        assert model.gradient(1.0) == pytest.approx(4.0)

    def test_skew_laplace_energy_is_asymmetric(self):
        model = skew_laplace(sigma=1.0, lam=0.5)
        alpha = np.sqrt(1.25)
        assert model.energy(1.0) == pytest.approx(alpha - 0.5)
        assert model.energy(-1.0) == pytest.approx(alpha + 0.5)

    def test_skew_laplace_reduces_to_laplace(self):
        model = skew_laplace(sigma=0.2, lam=0.0)
        assert model.energy(0.3) == pytest.approx(model.energy(-0.3))
        assert model.energy(0.3) == pytest.approx(1.5)

    def test_cauchy_uses_side_scale(self):
        model = cauchy(c_minus=0.1, c_plus=0.3)
        assert model.energy(-0.1) == pytest.approx(np.log(2.0))
        assert model.energy(0.3) == pytest.approx(np.log(2.0))

    def test_gmm_energy_matches_direct_sum(self):
        model = mixture()
        r = 0.2
        direct = 0.7 * np.exp(-0.5 * r ** 2 / 0.01) / np.sqrt(2 * np.pi * 0.01)
        direct += 0.3 * np.exp(-0.5 * (r - 0.35) ** 2 / 0.04) / np.sqrt(2 * np.pi * 0.04)
        assert model.energy(r) == pytest.approx(-np.log(direct), rel=1e-12)

    def test_gmm_energy_is_finite_far_in_the_tail(self):
        assert np.isfinite(mixture().energy(50.0))

    @pytest.mark.parametrize("model", [skew_laplace(), cauchy(), mixture(), GaussianNoise.from_sigma(0.1)])
    def test_gradient_matches_finite_differences(self, model):
        for r in (-0.37, 0.05, 0.41):
            h = 1e-6
            numeric = (model.energy(r + h) - model.energy(r - h)) / (2 * h)
            assert float(model.gradient(r)) == pytest.approx(numeric, rel=1e-5, abs=1e-8)

    @pytest.mark.parametrize("model", [skew_laplace(), cauchy(), mixture()])
    def test_curvature_is_positive(self, model):
        r = np.linspace(-2.0, 2.0, 41)
        assert np.all(model.curvature(r) > 0.0)


class TestDensities:
    @pytest.mark.parametrize("model", [skew_laplace(), cauchy(), mixture(), GaussianNoise.from_sigma(0.2)])
    def test_pdf_integrates_to_one(self, model):
        total, _ = quad(lambda r: float(model.pdf(r)), -np.inf, np.inf, limit=200)
        assert total == pytest.approx(1.0, abs=1e-5)

    def test_skew_laplace_sample_mean(self):
        model = skew_laplace(sigma=0.1, lam=0.03)
        draws = model.sample(np.random.default_rng(1), 200_000)
        assert draws.mean() == pytest.approx(0.06, abs=0.002)
        assert np.mean(draws ** 2) == pytest.approx(2 * 0.01 + 8 * 0.03 ** 2, rel=0.02)

    def test_cauchy_sample_sign_split(self):
        model = cauchy(c_minus=0.1, c_plus=0.3)
        draws = model.sample(np.random.default_rng(2), 100_000)
        assert np.mean(draws < 0.0) == pytest.approx(0.25, abs=0.01)

    def test_log_likelihood_sums_log_pdf(self):
        model = skew_laplace()
        samples = np.array([-0.1, 0.0, 0.2])
        assert log_likelihood(model, samples) == pytest.approx(np.sum(np.log(model.pdf(samples))))


class TestFitting:
    def test_skew_laplace_recovers_parameters(self):
        truth = skew_laplace(sigma=0.1, lam=0.04)
        samples = truth.sample(np.random.default_rng(3), 20_000)
        fitted = fit_skew_laplace(samples)
        assert fitted.sigma == pytest.approx(0.1, rel=0.05)
        assert fitted.lam == pytest.approx(0.04, abs=0.005)

    def test_skew_laplace_fit_on_right_skewed_data_is_positive(self):
        rng = np.random.default_rng(4)
        samples = 0.1 * rng.standard_normal(5000)
        corrupted = rng.random(5000) < 0.25
        samples[corrupted] += rng.uniform(0.1, 0.6, corrupted.sum())
        assert fit_skew_laplace(samples).lam > 0.0

    def test_skew_laplace_needs_enough_samples(self):
        with pytest.raises(DegenerateData):
            fit_skew_laplace(np.linspace(-1, 1, 50))

    @pytest.mark.parametrize("kind", ["gaussian", "skew_laplace", "asym_cauchy", "gmm"])
    def test_constant_samples_are_degenerate(self, kind):
        # the float mean of constant samples can miss the value, leaving a tiny non-zero variance
        with pytest.raises(DegenerateData):
            fit_noise_model(kind, np.full(500, 0.3))

    def test_asym_cauchy_recovers_scales(self):
        truth = cauchy(c_minus=0.1, c_plus=0.3)
        fitted = fit_asym_cauchy(truth.sample(np.random.default_rng(5), 20_000))
        assert fitted.c_minus == pytest.approx(0.1, rel=0.1)
        assert fitted.c_plus == pytest.approx(0.3, rel=0.1)

    def test_em_log_likelihood_is_non_decreasing(self):
        samples = mixture().sample(np.random.default_rng(6), 5000)
        _, _, _, trace = gmm_em(samples, [0.5, 0.5], [-0.1, 0.5], [0.05, 0.05])
        assert np.all(np.diff(trace) >= -1e-9)

    def test_gmm_fit_recovers_two_components(self):
        samples = mixture().sample(np.random.default_rng(7), 20_000)
        fitted = fit_gmm_em(samples, n_components=2, seed=0)
        weights, means, variances = fitted.arrays()
        assert weights.sum() == pytest.approx(1.0, abs=1e-12)
        assert means[0] == pytest.approx(0.0, abs=0.02)
        assert means[1] == pytest.approx(0.35, abs=0.06)
        assert weights[0] == pytest.approx(0.7, abs=0.08)

    def test_gmm_fit_with_one_component_is_gaussian_ml(self):
        samples = np.random.default_rng(8).normal(0.2, 0.3, 2000)
        weights, means, variances = fit_gmm_em(samples, n_components=1).arrays()
        assert weights[0] == pytest.approx(1.0)
        assert means[0] == pytest.approx(samples.mean(), abs=1e-8)
        assert variances[0] == pytest.approx(samples.var(), rel=1e-6)

    def test_fit_result_reports_log_likelihood(self):
        samples = skew_laplace().sample(np.random.default_rng(9), 1000)
        result = fit_noise_model("gaussian", samples)
        assert result.n_samples == 1000
        assert result.log_likelihood == pytest.approx(log_likelihood(result.model, samples))

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            fit_noise_model("student_t", np.zeros(10))


class TestDocuments:
    def test_mixture_weights_must_sum_to_one(self):
        with pytest.raises(ValidationError):
            GmmParams(components=[GmmComponent(weight=0.5, mean=0.0, variance=1.0)])

    def test_skew_laplace_document_uses_lambda_key(self):
        document = json.loads(noise_model_to_json(skew_laplace(sigma=0.1, lam=0.02)))
        assert document == {"type": "skew_laplace", "params": {"sigma": 0.1, "lambda": 0.02}}

    def test_model_file_round_trip(self, tmp_path):
        path = tmp_path / "model.json"
        save_noise_model(mixture(), str(path))
        loaded = load_noise_model(str(path))
        assert loaded == mixture()

    def test_fit_document_loads_as_model(self, tmp_path):
        result = fit_noise_model("asym_cauchy", cauchy().sample(np.random.default_rng(10), 2000))
        path = tmp_path / "fit.json"
        path.write_text(json.dumps(fit_document(result, {"seed": 3})))
        assert load_noise_model(str(path)) == result.model

    def test_invalid_document(self):
        with pytest.raises(ConfigError):
            noise_model_from_json('{"type": "gmm", "params": {"components": []}}')

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_noise_model(str(tmp_path / "absent.json"))
