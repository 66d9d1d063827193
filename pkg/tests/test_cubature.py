"""
Tests for sigma-point rules and MLG expectations.
"""
import numpy as np
import pytest

from services.cubature import (
    MlgGaussian, expect_matrix, expect_scalar, expect_vector, gauss_hermite_rule, group_sigma_points,
    make_rule, sigma_points, spherical_rule,
)
from services.exceptions import ConfigError, CovarianceNotSPD, DimensionTooLarge, SideMismatch
from services.liegroup import Pose2, Side, local


def random_spd(rng, n, scale=0.05):
    a = rng.normal(size=(n, n))
    return scale * (a @ a.T + n * np.eye(n)) / n


class TestRules:
    @pytest.mark.parametrize("dim", [1, 3, 6])
    def test_gauss_hermite_moments(self, dim):
        rule = gauss_hermite_rule(dim)
        assert len(rule) == 3 ** dim
        assert rule.weights.sum() == pytest.approx(1.0, abs=1e-14)
        np.testing.assert_allclose(rule.weights @ rule.unit_points, np.zeros(dim), atol=1e-14)
        second = np.einsum('l,li,lj->ij', rule.weights, rule.unit_points, rule.unit_points)
        np.testing.assert_allclose(second, np.eye(dim), atol=1e-13)
        fourth = rule.weights @ rule.unit_points[:, 0] ** 4
        assert fourth == pytest.approx(3.0)

    def test_spherical_moments(self):
        rule = spherical_rule(4)
        assert len(rule) == 8
        second = np.einsum('l,li,lj->ij', rule.weights, rule.unit_points, rule.unit_points)
        np.testing.assert_allclose(second, np.eye(4), atol=1e-14)

    def test_dimension_limit(self):
        with pytest.raises(DimensionTooLarge):
            gauss_hermite_rule(9)

    def test_only_third_order(self):
        with pytest.raises(ConfigError):
            gauss_hermite_rule(2, order=5)

    def test_make_rule_caches(self):
        assert make_rule("gauss_hermite", 3) is make_rule("gauss_hermite", 3)
        with pytest.raises(ConfigError):
            make_rule("unscented", 3)


class TestVectorExpectations:
    def test_quadratic_form_gives_trace(self, rng):
        mean = rng.normal(size=3)
        covariance = random_spd(rng, 3)
        a = random_spd(rng, 3, scale=1.0)
        q = MlgGaussian(mean, covariance)

        def quadratic(x):
            d = x - mean
            return np.einsum('li,ij,lj->l', d, a, d)

        value = expect_scalar(q, make_rule("gauss_hermite", 3), quadratic)
        assert value == pytest.approx(np.trace(a @ covariance), abs=1e-10)

    def test_second_moment_with_unit_function(self, rng):
        covariance = random_spd(rng, 2)
        q = MlgGaussian(np.zeros(2), covariance)
        result = expect_matrix(q, make_rule("spherical", 2), lambda x: np.ones(len(x)))
        np.testing.assert_allclose(result, covariance, atol=1e-12)

    def test_linear_function_gives_covariance_product(self, rng):
        covariance = random_spd(rng, 3)
        b = np.array([1.0, -2.0, 0.5])
        q = MlgGaussian(np.ones(3), covariance)
        result = expect_vector(q, make_rule("gauss_hermite", 3), lambda x: (x - 1.0) @ b)
        np.testing.assert_allclose(result, covariance @ b, atol=1e-12)

    def test_joint_marginal_cross_block(self, rng):
        covariance = random_spd(rng, 4)
        q = MlgGaussian((np.zeros(2), np.ones(2)), covariance)
        assert q.dims == [2, 2]
        result = expect_matrix(q, make_rule("gauss_hermite", 4), lambda x, y: np.ones(len(x)))
        np.testing.assert_allclose(result[:2, 2:], covariance[:2, 2:], atol=1e-12)

    def test_rule_dimension_must_match(self, rng):
        q = MlgGaussian(np.zeros(3), np.eye(3))
        with pytest.raises(DimensionTooLarge):
            sigma_points(q, make_rule("gauss_hermite", 2))

    def test_covariance_must_be_spd(self):
        q = MlgGaussian(np.zeros(2), np.array([[1.0, 2.0], [2.0, 1.0]]))
        with pytest.raises(CovarianceNotSPD):
            q.cholesky()


class TestGroupExpectations:
    @pytest.mark.parametrize("side", [Side.RIGHT, Side.LEFT])
    def test_quadratic_in_perturbation_gives_trace(self, rng, side):
        mean = Pose2.from_vector([0.7, 1.0, -2.0])
        covariance = random_spd(rng, 3)
        a = random_spd(rng, 3, scale=1.0)
        q = MlgGaussian(mean, covariance, side)

        def quadratic(x):
            d = local(x, mean, side)
            return np.einsum('li,ij,lj->l', d, a, d)

        value = expect_scalar(q, make_rule("gauss_hermite", 3), quadratic)
        assert value == pytest.approx(np.trace(a @ covariance), abs=1e-10)

    def test_deviations_recover_offsets(self, rng):
        covariance = random_spd(rng, 3)
        q = MlgGaussian(Pose2.from_vector([2.0, 0.0, 1.0]), covariance)
        rule = make_rule("gauss_hermite", 3)
        points = sigma_points(q, rule)
        np.testing.assert_allclose(points.deviations, rule.unit_points @ q.cholesky().T, atol=1e-12)

    def test_group_sigma_points_pairs(self):
        q = MlgGaussian(Pose2.identity(), 0.01 * np.eye(3))
        pairs = group_sigma_points(q, make_rule("spherical", 3))
        assert len(pairs) == 6
        assert sum(w for w, _ in pairs) == pytest.approx(1.0)
        assert isinstance(pairs[0][1], Pose2)

    def test_side_mismatch(self):
        q = MlgGaussian(Pose2.identity(), np.eye(3), Side.RIGHT)
        with pytest.raises(SideMismatch):
            q.require_side(Side.LEFT)

    def test_side_conversion_round_trip(self, rng):
        covariance = random_spd(rng, 3)
        q = MlgGaussian(Pose2.from_vector([0.4, 3.0, -1.0]), covariance, Side.RIGHT)
        back = q.with_side(Side.LEFT).with_side(Side.RIGHT)
        np.testing.assert_allclose(back.covariance, covariance, atol=1e-12)
        assert q.with_side(Side.LEFT).side is Side.LEFT
