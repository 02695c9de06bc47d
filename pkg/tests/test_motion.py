import json
import math

import numpy as np
import pytest

from shadow2d.geom import Pose, Quat, quat_angle_between, quat_slerp
from shadow2d.kinematics import collision_points_world, load_chain_file
from shadow2d.motion import (
    MOTION_KINDS,
    MotionError,
    MotionTrajectory,
    gen_motion,
    ground_offset,
    load_motion,
    sample_keyframes,
    save_motion,
)


@pytest.fixture(scope="module")
def planar5():
    return load_chain_file("planar5")


@pytest.fixture(scope="module")
def planar2():
    return load_chain_file("planar2")


def make_traj(rng, n_frames=20, n_j=2, fps=50.0):
    pitch = rng.uniform(-1, 1, n_frames)
    quat = np.stack(
        [np.cos(pitch / 2), np.zeros(n_frames), np.sin(pitch / 2), np.zeros(n_frames)],
        axis=1,
    )
    return MotionTrajectory(
        fps=fps,
        base_pos=rng.standard_normal((n_frames, 3)),
        base_quat=quat,
        theta=rng.standard_normal((n_frames, n_j)),
    )


class TestMotionFile:
    def test_round_trip_identical(self):
        traj = make_traj(np.random.default_rng(0))
        text = save_motion(traj)
        again = save_motion(load_motion(text))
        assert text == again

    def test_bad_fps_rejected(self):
        traj = make_traj(np.random.default_rng(1))
        doc = json.loads(save_motion(traj))
        doc["fps"] = 0
        with pytest.raises(MotionError, match="fps"):
            load_motion(json.dumps(doc))

    def test_missing_field_reports_path(self):
        doc = json.loads(save_motion(make_traj(np.random.default_rng(2))))
        del doc["frames"][3]["theta"]
        with pytest.raises(MotionError, match=r"frames\[3\]"):
            load_motion(json.dumps(doc))

    def test_inconsistent_joint_dim_rejected(self):
        doc = json.loads(save_motion(make_traj(np.random.default_rng(3))))
        doc["frames"][1]["theta"] = [0.0]
        with pytest.raises(MotionError, match="joint dimension"):
            load_motion(json.dumps(doc))

    def test_non_unit_quat_rejected(self):
        doc = json.loads(save_motion(make_traj(np.random.default_rng(4))))
        doc["frames"][0]["q"] = [2.0, 0, 0, 0]
        with pytest.raises(MotionError, match="unit"):
            load_motion(json.dumps(doc))

    def test_empty_frames_rejected(self):
        with pytest.raises(MotionError, match="frames"):
            load_motion(json.dumps({"fps": 50, "frames": []}))


class TestSampling:
    def test_grid_aligned_sampling_returns_stored_frames(self):
        traj = make_traj(np.random.default_rng(5), fps=50.0)
        frames, reach = sample_keyframes(traj, 0.0, 0.02, 5)
        for k, (p, q, th) in enumerate(frames):
            assert np.allclose(p, traj.base_pos[k + 1], atol=1e-12)
            assert np.allclose(th, traj.theta[k + 1], atol=1e-12)
        assert np.allclose(reach, 0.02 * np.arange(1, 6))

    def test_clamped_beyond_duration(self):
        traj = make_traj(np.random.default_rng(6))
        frames, reach = sample_keyframes(traj, traj.duration + 1.0, 0.1, 4)
        for p, q, th in frames:
            assert np.allclose(p, traj.base_pos[-1])
            assert np.allclose(th, traj.theta[-1])
        assert np.allclose(reach, traj.duration)

    def test_interpolation_matches_bruteforce_lerp(self):
        # off-grid sampling: compare against a per-component lerp oracle
        traj = make_traj(np.random.default_rng(7), fps=50.0)
        t_int = 0.03
        frames, reach = sample_keyframes(traj, 0.0, t_int, 5)
        for k, (p, q, th) in enumerate(frames):
            t = min((k + 1) * t_int, traj.duration)
            x = t * traj.fps
            i, u = int(x), x - int(x)
            p_oracle = (1 - u) * traj.base_pos[i] + u * traj.base_pos[i + 1]
            th_oracle = (1 - u) * traj.theta[i] + u * traj.theta[i + 1]
            q_oracle = quat_slerp(
                Quat.from_wxyz(traj.base_quat[i]), Quat.from_wxyz(traj.base_quat[i + 1]), u
            )
            assert np.allclose(p, p_oracle, atol=1e-12)
            assert np.allclose(th, th_oracle, atol=1e-12)
            assert quat_angle_between(q, q_oracle) < 1e-12

    def test_reach_times_strictly_increase_until_clamp(self):
        rng = np.random.default_rng(8)
        for _ in range(100):
            traj = make_traj(rng, n_frames=int(rng.integers(2, 40)))
            t = float(rng.uniform(0, traj.duration))
            t_int = float(rng.uniform(0.01, 0.5))
            _, reach = sample_keyframes(traj, t, t_int, 5)
            assert (reach <= traj.duration + 1e-12).all()
            before_end = reach < traj.duration - 1e-12
            diffs = np.diff(reach)
            # strict increase while unclamped; ties only at the duration
            assert (diffs[before_end[1:]] > 0).all()

    def test_empty_parameters_rejected(self):
        traj = make_traj(np.random.default_rng(9))
        with pytest.raises(MotionError):
            sample_keyframes(traj, -1.0, 0.1, 5)
        with pytest.raises(MotionError):
            sample_keyframes(traj, 0.0, 0.0, 5)


class TestGroundOffset:
    def test_already_clear_gives_zero(self, planar2):
        traj = MotionTrajectory(
            fps=10,
            base_pos=np.array([[0, 0, 2.0], [0, 0, 2.5]]),
            base_quat=np.array([[1, 0, 0, 0], [1, 0, 0, 0.0]]),
            theta=np.zeros((2, 2)),
        )
        assert ground_offset(traj, planar2) == 0.0

    def test_known_depth(self, planar2):
        # tip at z = -0.03 for theta = 0 when base sits at -0.03
        traj = MotionTrajectory(
            fps=10,
            base_pos=np.array([[0, 0, -0.03]]),
            base_quat=np.array([[1.0, 0, 0, 0]]),
            theta=np.zeros((1, 2)),
        )
        assert abs(ground_offset(traj, planar2) - 0.03) < 1e-12

    def test_exhaustive_fk_scan_oracle(self, planar5):
        # random trajectory: validated by re-running FK over all frames
        rng = np.random.default_rng(10)
        pitch = rng.uniform(-1.5, 1.5, 12)
        quat = np.stack(
            [np.cos(pitch / 2), np.zeros(12), np.sin(pitch / 2), np.zeros(12)], axis=1
        )
        lim = planar5.joint_limits()
        theta = rng.uniform(lim[:, 0], lim[:, 1], (12, planar5.n_joints))
        traj = MotionTrajectory(
            fps=25,
            base_pos=rng.uniform(-0.2, 0.6, (12, 3)) * np.array([1, 0, 1]),
            base_quat=quat,
            theta=theta,
        )
        h = ground_offset(traj, planar5)
        lifted = traj.with_height_offset(h)
        lowest = min(
            collision_points_world(planar5, lifted.frame_pose(i), lifted.theta[i])[:, 2].min()
            for i in range(lifted.n_frames)
        )
        assert lowest >= -1e-9
        if h > 0:
            assert lowest < 1e-6  # smallest such h: some point touches zero


class TestGenerators:
    def test_getup_first_frame_is_lying(self, planar5):
        traj = gen_motion("getup-2d", planar5)
        q0 = Quat.from_wxyz(traj.base_quat[0])
        assert abs(2 * math.atan2(q0.y, q0.w) - math.pi / 2) < 1e-9

    def test_stand_reach_base_constant(self, planar5):
        traj = gen_motion("stand-reach", planar5)
        assert np.allclose(traj.base_pos, traj.base_pos[0], atol=1e-12)
        assert np.allclose(traj.base_quat, traj.base_quat[0], atol=1e-12)

    def test_generated_frames_clear_ground(self, planar5):
        for kind in MOTION_KINDS:
            traj = gen_motion(kind, planar5)
            assert ground_offset(traj, planar5) <= 1e-9

    def test_frame_count(self, planar5):
        traj = gen_motion("crouch", planar5, duration=2.0, fps=50)
        assert traj.n_frames == 101
        assert abs(traj.duration - 2.0) < 1e-12

    def test_unknown_kind(self, planar5):
        with pytest.raises(MotionError, match="unknown"):
            gen_motion("cartwheel", planar5)

    def test_joint_mismatch(self, planar2):
        with pytest.raises(MotionError, match="joints"):
            gen_motion("getup-2d", planar2)

    def test_bundled_getup_file_loads(self, planar5):
        from importlib import resources

        text = resources.files("shadow2d.data").joinpath("getup2d.json").read_text()
        traj = load_motion(text)
        assert traj.joint_count == planar5.n_joints
        assert traj.fps == 50.0
