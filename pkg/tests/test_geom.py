import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shadow2d.geom import (
    AxisAngle,
    GeomError,
    Pose,
    Quat,
    compose,
    pitch_of,
    projected_gravity,
    quat_angle_between,
    quat_conj,
    quat_from_pitch,
    quat_im_norm,
    quat_mul,
    quat_slerp,
    quat_to_axis_angle,
    quat_to_mat,
    relative_pose,
    rotate_vec,
    yaw_correction,
)


def qz(angle):
    return Quat(math.cos(angle / 2), 0.0, 0.0, math.sin(angle / 2))


def qy(angle):
    return Quat(math.cos(angle / 2), 0.0, math.sin(angle / 2), 0.0)


def random_quat(rng):
    v = rng.standard_normal(4)
    return Quat(*v)


unit_quats = st.builds(
    lambda w, x, y, z: Quat(w, x, y, z),
    *[st.floats(-1, 1).filter(lambda v: abs(v) > 1e-3) for _ in range(4)],
)


class TestQuatBasics:
    def test_constructor_normalizes(self):
        q = Quat(2.0, 0.0, 0.0, 0.0)
        assert abs(q.w - 1.0) < 1e-9

    def test_zero_quat_rejected(self):
        with pytest.raises(GeomError):
            Quat(0.0, 0.0, 0.0, 0.0)

    def test_canonicalize_flips_sign(self):
        q = Quat(-0.5, 0.5, 0.5, 0.5).canonicalize()
        assert q.w >= 0
        assert abs(q.x + 0.5) < 1e-9

    def test_identity_mul(self):
        q = qz(0.7)
        r = quat_mul(Quat.identity(), q)
        assert np.allclose(r.wxyz(), q.wxyz())

    def test_mul_composition_matches_matrix_oracle(self):
        # qz(90) * qz(90) == qz(180), and generally R(a*b) == R(a) @ R(b)
        r = quat_mul(qz(math.pi / 2), qz(math.pi / 2))
        assert np.allclose(r.wxyz(), qz(math.pi).wxyz(), atol=1e-12)
        rng = np.random.default_rng(0)
        for _ in range(50):
            a, b = random_quat(rng), random_quat(rng)
            assert np.allclose(
                quat_to_mat(quat_mul(a, b)), quat_to_mat(a) @ quat_to_mat(b), atol=1e-12
            )

    def test_mul_conj_is_identity(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            q = random_quat(rng)
            r = quat_mul(q, quat_conj(q)).canonicalize()
            assert np.allclose(r.wxyz(), [1, 0, 0, 0], atol=1e-12)

    def test_conj(self):
        assert np.allclose(quat_conj(Quat.identity()).wxyz(), [1, 0, 0, 0])
        assert np.allclose(quat_conj(qz(math.pi / 2)).wxyz(), qz(-math.pi / 2).wxyz())
        q = random_quat(np.random.default_rng(2))
        assert np.allclose(quat_conj(quat_conj(q)).wxyz(), q.wxyz())

    @settings(max_examples=200, deadline=None)
    @given(unit_quats, unit_quats, unit_quats)
    def test_mul_associative(self, a, b, c):
        lhs = quat_mul(quat_mul(a, b), c)
        rhs = quat_mul(a, quat_mul(b, c))
        assert np.allclose(lhs.wxyz(), rhs.wxyz(), atol=1e-12)


class TestRotateVec:
    def test_identity(self):
        v = np.array([0.3, -0.1, 2.0])
        assert np.allclose(rotate_vec(Quat.identity(), v), v)

    def test_matches_matrix_oracle(self):
        assert np.allclose(rotate_vec(qz(math.pi / 2), [1, 0, 0]), [0, 1, 0], atol=1e-12)
        rng = np.random.default_rng(3)
        for _ in range(100):
            q = random_quat(rng)
            v = rng.standard_normal(3)
            assert np.allclose(rotate_vec(q, v), quat_to_mat(q) @ v, atol=1e-12)

    def test_zero_vector(self):
        q = random_quat(np.random.default_rng(4))
        assert np.allclose(rotate_vec(q, np.zeros(3)), np.zeros(3))

    def test_norm_preserved(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            q, v = random_quat(rng), rng.standard_normal(3)
            assert abs(np.linalg.norm(rotate_vec(q, v)) - np.linalg.norm(v)) < 1e-9


class TestRelativePose:
    def test_same_pose_is_identity(self):
        p = Pose(np.array([1.0, 2.0, 3.0]), qz(0.3))
        rel = relative_pose(p, p)
        assert np.allclose(rel.p, 0, atol=1e-12)
        assert np.allclose(rel.q.canonicalize().wxyz(), [1, 0, 0, 0], atol=1e-12)

    def test_identity_base(self):
        target = Pose(np.array([1.0, 0.0, 0.0]), Quat.identity())
        rel = relative_pose(Pose.identity(), target)
        assert np.allclose(rel.p, [1, 0, 0])

    def test_yawed_base_matrix_oracle(self):
        base = Pose(np.zeros(3), qz(math.pi / 2))
        target = Pose(np.array([1.0, 0.0, 0.0]), Quat.identity())
        rel = relative_pose(base, target)
        oracle = quat_to_mat(base.q).T @ target.p
        assert np.allclose(rel.p, oracle, atol=1e-12)
        assert np.allclose(rel.p, [0, -1, 0], atol=1e-12)

    def test_round_trip_recovers_delta(self):
        rng = np.random.default_rng(6)
        for _ in range(100):
            base = Pose(rng.standard_normal(3), random_quat(rng))
            delta = Pose(rng.standard_normal(3), random_quat(rng))
            rel = relative_pose(base, compose(base, delta))
            assert np.allclose(rel.p, delta.p, atol=1e-9)
            assert (
                quat_angle_between(rel.q, delta.q) < 1e-9
            )


class TestYawCorrection:
    def test_equal_quats_give_identity(self):
        q = random_quat(np.random.default_rng(7))
        out = yaw_correction(q, q)
        assert np.allclose(out.wxyz(), [1, 0, 0, 0], atol=1e-12)

    def test_pure_yaw_recovered(self):
        # closed form of the yaw extraction for a pure-yaw mismatch of pi/2
        q_ref = Quat.identity()
        q_robot = qz(math.pi / 2)
        out = yaw_correction(q_ref, q_robot)
        assert np.allclose(out.wxyz(), qz(math.pi / 2).wxyz(), atol=1e-12)

    def test_pure_pitch_gives_identity(self):
        # z and y components vanish => atan2(0, 1) == 0
        out = yaw_correction(Quat.identity(), qy(0.9))
        assert np.allclose(out.wxyz(), [1, 0, 0, 0], atol=1e-12)

    def test_output_shape_is_pure_yaw(self):
        rng = np.random.default_rng(8)
        for _ in range(200):
            out = yaw_correction(random_quat(rng), random_quat(rng))
            assert out.x == 0.0 and out.y == 0.0
            assert abs(np.linalg.norm(out.wxyz()) - 1.0) < 1e-12

    def test_pure_yaw_residual_is_pitch_roll_free(self):
        # for a pure-yaw mismatch the correction cancels it entirely
        rng = np.random.default_rng(9)
        for _ in range(200):
            psi_angle = rng.uniform(-math.pi + 1e-6, math.pi - 1e-6)
            q_ref = random_quat(rng)
            q_robot = quat_mul(qz(psi_angle), q_ref)
            corr = yaw_correction(q_ref, q_robot)
            residual = quat_mul(corr, quat_conj(quat_mul(q_robot, quat_conj(q_ref))))
            assert abs(residual.z) < 1e-9


class TestQuatImNorm:
    def test_values(self):
        assert quat_im_norm(Quat.identity()) == 0.0
        assert abs(quat_im_norm(qz(math.pi)) - 1.0) < 1e-12
        assert abs(quat_im_norm(qz(1.0)) - math.sin(0.5)) < 1e-12

    @settings(max_examples=200, deadline=None)
    @given(unit_quats)
    def test_equals_sin_half_angle(self, q):
        q = q.canonicalize()
        assert abs(quat_im_norm(q) - math.sin(q.angle() / 2)) < 1e-12


class TestProjectedGravity:
    def test_identity(self):
        assert np.allclose(projected_gravity(Quat.identity()), [0, 0, -1])

    def test_pitch_90(self):
        g = projected_gravity(qy(math.pi / 2))
        assert np.allclose(np.abs(g), [1, 0, 0], atol=1e-12)

    def test_unit_norm_and_matrix_oracle(self):
        rng = np.random.default_rng(10)
        for _ in range(100):
            q = random_quat(rng)
            g = projected_gravity(q)
            assert abs(np.linalg.norm(g) - 1.0) < 1e-12
            assert np.allclose(g, quat_to_mat(q).T @ [0, 0, -1], atol=1e-12)


class TestAxisAngleAndSlerp:
    def test_axis_angle_round_trip(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            q = random_quat(rng).canonicalize()
            aa = quat_to_axis_angle(q)
            assert np.linalg.norm(aa.v) <= math.pi + 1e-12
            q2 = Quat.from_axis_angle(aa.v)
            assert quat_angle_between(q, q2) < 1e-9

    def test_slerp_endpoints_and_midpoint(self):
        a, b = qy(0.0), qy(1.0)
        assert quat_angle_between(quat_slerp(a, b, 0.0), a) < 1e-12
        assert quat_angle_between(quat_slerp(a, b, 1.0), b) < 1e-12
        assert quat_angle_between(quat_slerp(a, b, 0.5), qy(0.5)) < 1e-12

    def test_slerp_takes_short_arc(self):
        a, b = qy(0.1), qy(-0.1)
        mid = quat_slerp(a, b, 0.5)
        assert abs(pitch_of(mid)) < 1e-9

    def test_pitch_round_trip(self):
        for angle in np.linspace(-3.1, 3.1, 23):
            assert abs(pitch_of(quat_from_pitch(angle)) - angle) < 1e-12
