"""
Tests for the SE(2) Lie group service.
"""
import numpy as np
import pytest
from scipy.linalg import expm, logm

from services.exceptions import NotInAlgebra
from services.liegroup import (
    Pose2, Rot2, Side, adjoint, exp_map, hat, left_jacobian, local, log_map, ominus, oplus, retract,
    right_jacobian, vee, wrap_angle,
)


class TestHatVee:
    def test_vee_inverts_hat(self, random_twists):
        np.testing.assert_allclose(vee(hat(random_twists)), random_twists, atol=1e-15)

    def test_hat_layout(self):
        m = hat([0.5, 1.0, 2.0])
        expected = np.array([[0.0, -0.5, 1.0], [0.5, 0.0, 2.0], [0.0, 0.0, 0.0]])
        np.testing.assert_array_equal(m, expected)

    def test_vee_rejects_matrix_outside_algebra(self):
        m = hat([0.1, 0.2, 0.3])
        m[2, 2] = 1.0
        with pytest.raises(NotInAlgebra):
            vee(m)

    def test_vee_rejects_non_skew_rotation_block(self):
        m = hat([0.1, 0.2, 0.3])
        m[0, 1] += 1e-6
        with pytest.raises(NotInAlgebra):
            vee(m)


class TestExpLog:
    def test_exp_matches_matrix_exponential(self, random_twists):
        for xi in random_twists[:16]:
            np.testing.assert_allclose(exp_map(xi).as_matrix(), expm(hat(xi)), atol=1e-12)

    def test_log_inverts_exp(self, random_twists):
        np.testing.assert_allclose(log_map(exp_map(random_twists)), random_twists, atol=1e-10)

    def test_log_matches_matrix_logarithm(self):
        xi = np.array([0.7, -0.3, 1.2])
        np.testing.assert_allclose(vee(np.real(logm(exp_map(xi).as_matrix()))), xi, atol=1e-10)

    def test_small_angle_series_is_continuous(self):
        for theta in (1e-7, 1e-9, 0.0):
            xi = np.array([theta, 0.4, -0.2])
            np.testing.assert_allclose(exp_map(xi).as_matrix(), expm(hat(xi)), atol=1e-14)

    def test_log_angle_is_wrapped(self):
        pose = Pose2.from_vector([np.pi, 1.0, 0.0])
        assert log_map(pose)[0] == pytest.approx(np.pi)
        pose = Pose2.from_vector([-np.pi + 1e-3, 0.0, 0.0])
        assert -np.pi < log_map(pose)[0] <= np.pi


class TestPose2:
    def test_vector_round_trip_wraps_angle(self):
        pose = Pose2.from_vector([3.0 * np.pi / 2.0, 1.0, 2.0])
        np.testing.assert_allclose(pose.to_vector(), [-np.pi / 2.0, 1.0, 2.0], atol=1e-15)

    def test_compose_with_inverse_is_identity(self, random_twists):
        poses = exp_map(random_twists)
        identity = poses.compose(poses.inverse())
        expected = np.broadcast_to(np.eye(3), (len(random_twists), 3, 3))
        np.testing.assert_allclose(identity.as_matrix(), expected, atol=1e-12)

    def test_matrix_round_trip(self):
        pose = Pose2.from_vector([0.3, -1.0, 4.0])
        np.testing.assert_allclose(Pose2.from_matrix(pose.as_matrix()).to_vector(), pose.to_vector())

    def test_act_transforms_points(self):
        pose = Pose2.from_vector([np.pi / 2.0, 1.0, 0.0])
        np.testing.assert_allclose(pose.act([1.0, 0.0]), [1.0, 1.0], atol=1e-15)

    def test_batch_indexing_and_stack(self, random_twists):
        poses = exp_map(random_twists)
        assert len(poses) == len(random_twists)
        restacked = Pose2.stack([poses[i] for i in range(5)])
        np.testing.assert_allclose(restacked.as_matrix(), poses[:5].as_matrix())

    def test_rotation_stays_orthonormal_after_long_composition(self):
        step = Rot2.from_angle(0.001)
        rotation = Rot2.identity()
        for _ in range(2500):
            rotation = rotation.compose(step)
        m = rotation.matrix
        np.testing.assert_allclose(m @ m.T, np.eye(2), atol=1e-12)
        assert rotation.angle == pytest.approx(wrap_angle(2.5), abs=1e-9)


class TestOplusOminus:
    @pytest.mark.parametrize("side", [Side.RIGHT, Side.LEFT])
    def test_ominus_inverts_oplus(self, side, random_twists):
        x = exp_map(random_twists)
        xi = 0.5 * np.roll(random_twists, 1, axis=0)
        xi[:, 0] = np.clip(xi[:, 0], -1.5, 1.5)
        np.testing.assert_allclose(ominus(oplus(x, xi, side), x, side), xi, atol=1e-10)

    def test_right_and_left_differ_by_adjoint(self):
        x = Pose2.from_vector([0.8, 1.0, -2.0])
        xi = np.array([0.1, 0.2, 0.3])
        left = oplus(x, adjoint(x) @ xi, Side.LEFT)
        np.testing.assert_allclose(left.as_matrix(), oplus(x, xi, Side.RIGHT).as_matrix(), atol=1e-12)

    def test_vector_states_use_addition(self):
        x = np.array([1.0, 2.0])
        assert np.array_equal(retract(x, [0.5, -1.0]), [1.5, 1.0])
        assert np.array_equal(local(np.array([3.0, 3.0]), x), [2.0, 1.0])


class TestJacobians:
    @pytest.mark.parametrize("theta", [0.9, 0.05, 1e-8])
    def test_right_jacobian_matches_finite_differences(self, theta):
        xi = np.array([theta, 0.7, -0.4])
        h = 1e-6
        numeric = np.zeros((3, 3))
        for j in range(3):
            d = np.zeros(3)
            d[j] = h
            numeric[:, j] = (ominus(exp_map(xi + d), exp_map(xi)) - ominus(exp_map(xi - d), exp_map(xi))) / (2 * h)
        np.testing.assert_allclose(right_jacobian(xi), numeric, atol=1e-8)

    def test_left_jacobian_is_right_jacobian_of_negated_twist(self, random_twists):
        np.testing.assert_allclose(left_jacobian(random_twists), right_jacobian(-random_twists))

    def test_left_jacobian_relation(self):
        xi = np.array([0.4, 1.0, 2.0])
        np.testing.assert_allclose(left_jacobian(xi), adjoint(exp_map(xi)) @ right_jacobian(xi), atol=1e-12)

    def test_wrap_angle_range(self):
        angles = wrap_angle(np.array([np.pi, -np.pi, 3 * np.pi, 0.0]))
        np.testing.assert_allclose(angles, [np.pi, np.pi, np.pi, 0.0])
