"""Motion references: file format, sampling and keyframe extraction.

A trajectory stores base pose (world frame) plus a joint vector at a fixed
frame rate. Sampling between stored frames interpolates positions and joint
angles linearly and orientations along the shortest arc.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .geom import Pose, Quat, quat_from_pitch, quat_slerp
from .kinematics import KinematicChain, collision_points_world


class MotionError(ValueError):
    """Raised for motion-file schema violations (message carries the path)."""


@dataclass(frozen=True, eq=False)
class MotionTrajectory:
    fps: float
    base_pos: np.ndarray  # (F, 3)
    base_quat: np.ndarray  # (F, 4) wxyz, unit
    theta: np.ndarray  # (F, n_j)
    joint_names: tuple[str, ...] = ()

    @property
    def n_frames(self) -> int:
        return self.base_pos.shape[0]

    @property
    def joint_count(self) -> int:
        return self.theta.shape[1]

    @property
    def duration(self) -> float:
        return (self.n_frames - 1) / self.fps

    def frame_pose(self, i: int) -> Pose:
        return Pose(self.base_pos[i], Quat.from_wxyz(self.base_quat[i]))

    def sample(self, t: float) -> tuple[np.ndarray, Quat, np.ndarray]:
        """(p, q, theta) at time t, clamped to [0, duration]."""
        t = min(max(t, 0.0), self.duration)
        x = t * self.fps
        i = min(int(math.floor(x)), self.n_frames - 2) if self.n_frames > 1 else 0
        if self.n_frames == 1:
            return self.base_pos[0].copy(), Quat.from_wxyz(self.base_quat[0]), self.theta[0].copy()
        u = x - i
        p = (1.0 - u) * self.base_pos[i] + u * self.base_pos[i + 1]
        th = (1.0 - u) * self.theta[i] + u * self.theta[i + 1]
        q = quat_slerp(Quat.from_wxyz(self.base_quat[i]), Quat.from_wxyz(self.base_quat[i + 1]), u)
        return p, q, th

    def with_height_offset(self, h: float) -> "MotionTrajectory":
        base = self.base_pos.copy()
        base[:, 2] += h
        return MotionTrajectory(self.fps, base, self.base_quat, self.theta, self.joint_names)


def _validate_traj(fps, base_pos, base_quat, theta, joint_names) -> MotionTrajectory:
    if fps <= 0:
        raise MotionError(f"$.fps: must be > 0, got {fps}")
    if len(base_pos) == 0:
        raise MotionError("$.frames: must be non-empty")
    base_pos = np.asarray(base_pos, dtype=np.float64)
    base_quat = np.asarray(base_quat, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    if base_pos.ndim != 2 or base_pos.shape[1] != 3:
        raise MotionError("$.frames[*].p: expected 3 numbers per frame")
    if base_quat.ndim != 2 or base_quat.shape[1] != 4:
        raise MotionError("$.frames[*].q: expected [w,x,y,z] per frame")
    if theta.ndim != 2:
        raise MotionError("$.frames[*].theta: inconsistent joint dimension across frames")
    norms = np.linalg.norm(base_quat, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        bad = int(np.argmax(np.abs(norms - 1.0)))
        raise MotionError(f"$.frames[{bad}].q: quaternion not unit norm")
    # stored bits are kept as-is (consumers normalize); round trips stay exact
    if joint_names and len(joint_names) != theta.shape[1]:
        raise MotionError("$.joint_names: length does not match theta dimension")
    return MotionTrajectory(float(fps), base_pos, base_quat, theta, tuple(joint_names))


def load_motion(text: str) -> MotionTrajectory:
    """Parse a motion JSON document."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise MotionError(f"invalid JSON: {e}") from e
    if "fps" not in doc:
        raise MotionError("$: missing required field 'fps'")
    frames = doc.get("frames")
    if not isinstance(frames, list) or not frames:
        raise MotionError("$.frames: must be a non-empty list")
    ps, qs, ths = [], [], []
    for i, fr in enumerate(frames):
        for key in ("p", "q", "theta"):
            if key not in fr:
                raise MotionError(f"$.frames[{i}]: missing required field '{key}'")
        ps.append(fr["p"])
        qs.append(fr["q"])
        ths.append(fr["theta"])
    lens = {len(t) for t in ths}
    if len(lens) != 1:
        raise MotionError("$.frames[*].theta: inconsistent joint dimension across frames")
    return _validate_traj(doc["fps"], ps, qs, ths, doc.get("joint_names", ()))


def save_motion(traj: MotionTrajectory) -> str:
    """Serialize to the motion JSON format (round-trips exactly)."""
    doc = {
        "fps": traj.fps,
        "joint_names": list(traj.joint_names),
        "frames": [
            {
                "p": traj.base_pos[i].tolist(),
                "q": traj.base_quat[i].tolist(),
                "theta": traj.theta[i].tolist(),
            }
            for i in range(traj.n_frames)
        ],
    }
    return json.dumps(doc, indent=1)


def load_motion_file(path: str) -> MotionTrajectory:
    with open(path) as f:
        return load_motion(f.read())


def sample_keyframes(
    traj: MotionTrajectory, t: float, t_int: float, K: int
) -> tuple[list[tuple[np.ndarray, Quat, np.ndarray]], np.ndarray]:
    """K future reference frames at t + k*t_int plus their reach times.

    Sample times clamp to the trajectory duration, so reach times strictly
    increase until the trajectory end and tie at the duration afterwards.
    """
    if traj.n_frames == 0:
        raise MotionError("cannot sample an empty trajectory")
    if t < 0 or t_int <= 0 or K < 1:
        raise MotionError(f"bad sampling parameters t={t}, t_int={t_int}, K={K}")
    reach = np.minimum(t + t_int * np.arange(1, K + 1), traj.duration)
    frames = [traj.sample(r) for r in reach]
    return frames, reach


def ground_offset(traj: MotionTrajectory, chain: KinematicChain) -> float:
    """Smallest h >= 0 lifting every collision point of every frame to z >= 0."""
    if traj.joint_count != chain.n_joints:
        raise MotionError(
            f"trajectory has {traj.joint_count} joints, chain has {chain.n_joints}"
        )
    lowest = 0.0
    for i in range(traj.n_frames):
        pts = collision_points_world(chain, traj.frame_pose(i), traj.theta[i])
        if pts.shape[0]:
            lowest = min(lowest, float(pts[:, 2].min()))
    return -lowest


# --- bundled generators -----------------------------------------------------
#
# Desk-scale keypose scripts for the planar biped-analog chain. Keyposes are
# connected by piecewise-linear interpolation at a fixed frame rate; they are
# deliberately kinematic only (no dynamic feasibility is implied) and the
# generator lifts the whole trajectory so no frame penetrates the ground.

_LIE = [0.0, -0.1, 0.2, -0.1, 0.2, 0.3, -0.1]
_PUSH = [0.25, -0.9, 1.5, -0.9, 1.5, -1.55, -0.3]
_KNEEL = [0.1, -0.9, 2.36, -0.9, 2.36, 0.4, -0.2]
_CROUCH = [0.6, -0.75, 0.65, -0.75, 0.65, -0.6, -0.3]
_STAND = [0.0, -0.2, 0.4, -0.2, 0.4, 0.0, -0.3]

# Keyposes are statically balanced: base heights put each pose's lowest
# collision point on the ground and the CoM stays over the supporting span
# (feet; hands+toes for the push-up; knees+tucked toes for the kneel).
_GETUP_KEYPOSES = [
    # (time fraction, base x, base z, pitch, theta)
    (0.00, 0.00, 0.10, math.pi / 2, _LIE),
    (0.18, 0.00, 0.10, math.pi / 2, _LIE),
    (0.40, 0.02, 0.30, 1.15, _PUSH),
    (0.62, 0.05, 0.235, 0.5, _KNEEL),
    (0.82, 0.09, 0.47, 0.2, _CROUCH),
    (1.00, 0.12, 0.492, 0.0, _STAND),
]

_CROUCH_KEYPOSES = [
    (0.00, 0.0, 0.492, 0.0, _STAND),
    (0.35, 0.0, 0.47, 0.2, _CROUCH),
    (0.65, 0.0, 0.47, 0.2, _CROUCH),
    (1.00, 0.0, 0.492, 0.0, _STAND),
]

_REACH_UP = [0.0, -0.2, 0.4, -0.2, 0.4, -1.6, -0.1]
_REACH_FWD = [0.0, -0.2, 0.4, -0.2, 0.4, -0.8, -0.9]

_STAND_REACH_KEYPOSES = [
    (0.00, 0.0, 0.492, 0.0, _STAND),
    (0.30, 0.0, 0.492, 0.0, _REACH_UP),
    (0.55, 0.0, 0.492, 0.0, _REACH_FWD),
    (0.80, 0.0, 0.492, 0.0, _REACH_UP),
    (1.00, 0.0, 0.492, 0.0, _STAND),
]

_GENERATORS = {
    "getup-2d": (_GETUP_KEYPOSES, 4.0),
    "crouch": (_CROUCH_KEYPOSES, 3.0),
    "stand-reach": (_STAND_REACH_KEYPOSES, 3.0),
}

MOTION_KINDS = tuple(_GENERATORS)


def gen_motion(
    kind: str,
    chain: KinematicChain,
    duration: float | None = None,
    fps: float = 50.0,
) -> MotionTrajectory:
    """Generate a bundled motion for the planar biped-analog chain."""
    if kind not in _GENERATORS:
        raise MotionError(f"unknown motion kind '{kind}' (choose from {MOTION_KINDS})")
    keyposes, default_duration = _GENERATORS[kind]
    if duration is None:
        duration = default_duration
    if duration <= 0:
        raise MotionError(f"duration must be > 0, got {duration}")
    n_j = len(keyposes[0][4])
    if chain.n_joints != n_j:
        raise MotionError(
            f"generator '{kind}' produces {n_j} joints, chain has {chain.n_joints}"
        )

    n_frames = int(round(duration * fps)) + 1
    times = np.arange(n_frames) / fps
    fracs = np.array([k[0] for k in keyposes])
    xs = np.array([k[1] for k in keyposes])
    zs = np.array([k[2] for k in keyposes])
    pitches = np.array([k[3] for k in keyposes])
    thetas = np.array([k[4] for k in keyposes])

    u = times / duration
    base_pos = np.zeros((n_frames, 3))
    base_pos[:, 0] = np.interp(u, fracs, xs)
    base_pos[:, 2] = np.interp(u, fracs, zs)
    pitch = np.interp(u, fracs, pitches)
    base_quat = np.stack(
        [np.cos(pitch / 2), np.zeros(n_frames), np.sin(pitch / 2), np.zeros(n_frames)],
        axis=1,
    )
    theta = np.stack([np.interp(u, fracs, thetas[:, j]) for j in range(n_j)], axis=1)

    traj = MotionTrajectory(fps, base_pos, base_quat, theta, tuple(chain.joint_names()))
    return traj.with_height_offset(ground_offset(traj, chain))


def quat_pitch_array(pitch: np.ndarray) -> np.ndarray:
    """(F, 4) pure-pitch quaternions for an array of pitch angles."""
    pitch = np.asarray(pitch, dtype=np.float64)
    return np.stack(
        [np.cos(pitch / 2), np.zeros_like(pitch), np.sin(pitch / 2), np.zeros_like(pitch)],
        axis=-1,
    )
