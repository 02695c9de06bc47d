"""Quaternion and rigid-transform algebra for the shadowing stack.

Conventions
-----------
- Quaternions are scalar-first (w, x, y, z), Hamilton product convention.
- Every constructor normalizes; ``canonicalize`` additionally flips the sign
  so that w >= 0, resolving the double cover.
- Rotations act on column vectors: ``rotate_vec(q, v) == R(q) @ v``.
- Axis-angle vectors encode axis * angle with the angle wrapped to [0, pi]
  after canonicalization.
- Everything here is float64; callers that want float32 down-convert.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

_UNIT_TOL = 1e-9


class GeomError(ValueError):
    pass


class Quat:
    """Unit quaternion, scalar-first."""

    __slots__ = ("w", "x", "y", "z")

    def __init__(self, w: float, x: float, y: float, z: float):
        n = math.sqrt(w * w + x * x + y * y + z * z)
        if n < 1e-12:
            raise GeomError("cannot normalize a zero quaternion")
        self.w = w / n
        self.x = x / n
        self.y = y / n
        self.z = z / n

    @staticmethod
    def identity() -> "Quat":
        return Quat(1.0, 0.0, 0.0, 0.0)

    @staticmethod
    def from_axis_angle(v) -> "Quat":
        """Quaternion for a rotation vector (axis * angle, radians)."""
        v = np.asarray(v, dtype=np.float64)
        angle = float(np.linalg.norm(v))
        if angle < 1e-12:
            return Quat.identity()
        axis = v / angle
        s = math.sin(angle / 2.0)
        return Quat(math.cos(angle / 2.0), s * axis[0], s * axis[1], s * axis[2])

    @staticmethod
    def from_wxyz(arr) -> "Quat":
        arr = np.asarray(arr, dtype=np.float64)
        if arr.shape != (4,):
            raise GeomError(f"expected quaternion of shape (4,), got {arr.shape}")
        return Quat(arr[0], arr[1], arr[2], arr[3])

    def wxyz(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z], dtype=np.float64)

    def canonicalize(self) -> "Quat":
        """Sign-flipped copy with w >= 0 (same rotation)."""
        if self.w < 0.0:
            return Quat(-self.w, -self.x, -self.y, -self.z)
        return Quat(self.w, self.x, self.y, self.z)

    def angle(self) -> float:
        """Rotation angle in [0, pi]."""
        q = self.canonicalize()
        return 2.0 * math.atan2(math.sqrt(q.x * q.x + q.y * q.y + q.z * q.z), q.w)

    def __repr__(self) -> str:
        return f"Quat({self.w:.9g}, {self.x:.9g}, {self.y:.9g}, {self.z:.9g})"


@dataclass(frozen=True)
class AxisAngle:
    """Rotation vector: direction = axis, magnitude = angle (radians)."""

    v: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "v", np.asarray(self.v, dtype=np.float64).reshape(3))


@dataclass(frozen=True)
class Pose:
    """Rigid transform: position p (meters) and orientation q."""

    p: np.ndarray
    q: Quat = field(default_factory=Quat.identity)

    def __post_init__(self):
        object.__setattr__(self, "p", np.asarray(self.p, dtype=np.float64).reshape(3))

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.zeros(3), Quat.identity())


def quat_mul(a: Quat, b: Quat) -> Quat:
    """Hamilton product a * b."""
    return Quat(
        a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
        a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
        a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
        a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
    )


def quat_conj(q: Quat) -> Quat:
    return Quat(q.w, -q.x, -q.y, -q.z)


def quat_to_mat(q: Quat) -> np.ndarray:
    """3x3 rotation matrix of q."""
    w, x, y, z = q.w, q.x, q.y, q.z
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ],
        dtype=np.float64,
    )


def rotate_vec(q: Quat, v) -> np.ndarray:
    """Rotate vector v by q (norm-preserving)."""
    v = np.asarray(v, dtype=np.float64).reshape(3)
    # q * (0, v) * conj(q), expanded to avoid building matrices.
    t = 2.0 * np.cross([q.x, q.y, q.z], v)
    return v + q.w * t + np.cross([q.x, q.y, q.z], t)


def quat_to_axis_angle(q: Quat) -> AxisAngle:
    """Rotation vector with angle in [0, pi]."""
    q = q.canonicalize()
    im = np.array([q.x, q.y, q.z])
    s = np.linalg.norm(im)
    if s < 1e-12:
        return AxisAngle(np.zeros(3))
    angle = 2.0 * math.atan2(s, q.w)
    return AxisAngle(im / s * angle)


def quat_im_norm(q: Quat) -> float:
    """Norm of the imaginary part, equals sin(angle / 2) for canonical q."""
    return math.sqrt(q.x * q.x + q.y * q.y + q.z * q.z)


def quat_angle_between(a: Quat, b: Quat) -> float:
    """Geodesic angle between two orientations, in [0, pi]."""
    rel = quat_mul(quat_conj(a.canonicalize()), b.canonicalize())
    return rel.angle()


def compose(a: Pose, b: Pose) -> Pose:
    """Pose of b expressed through a (a then b)."""
    return Pose(a.p + rotate_vec(a.q, b.p), quat_mul(a.q, b.q))


def relative_pose(base: Pose, target: Pose) -> Pose:
    """Target pose re-expressed in the base frame.

    p_out = R(base.q)^T (target.p - base.p), q_out = conj(base.q) * target.q,
    canonicalized.
    """
    p = rotate_vec(quat_conj(base.q), target.p - base.p)
    q = quat_mul(quat_conj(base.q), target.q).canonicalize()
    return Pose(p, q)


def yaw_correction(q_ref: Quat, q_robot: Quat) -> Quat:
    """Pure-yaw quaternion aligning a command heading with the robot heading.

    Composes the mismatch q_robot * conj(q_ref), extracts its yaw with the
    two-argument arctangent and returns the yaw-only rotation. Pitch of
    exactly +-90 degrees in the mismatch is ill-conditioned (gimbal) and is
    not special-cased.
    """
    qc = quat_mul(q_robot, quat_conj(q_ref))
    gamma = math.atan2(
        2.0 * (qc.w * qc.z + qc.x * qc.y),
        1.0 - 2.0 * (qc.y * qc.y + qc.z * qc.z),
    )
    return Quat(math.cos(gamma / 2.0), 0.0, 0.0, math.sin(gamma / 2.0))


def projected_gravity(q: Quat) -> np.ndarray:
    """World down direction (0, 0, -1) expressed in the frame of q."""
    return rotate_vec(quat_conj(q), np.array([0.0, 0.0, -1.0]))


def quat_slerp(a: Quat, b: Quat, u: float) -> Quat:
    """Shortest-arc spherical interpolation, u in [0, 1]."""
    aw = a.wxyz()
    bw = b.wxyz()
    dot = float(aw @ bw)
    if dot < 0.0:  # take the short way around
        bw = -bw
        dot = -dot
    if dot > 1.0 - 1e-10:
        out = aw + u * (bw - aw)
        return Quat.from_wxyz(out)
    theta = math.acos(min(dot, 1.0))
    s = math.sin(theta)
    out = (math.sin((1.0 - u) * theta) / s) * aw + (math.sin(u * theta) / s) * bw
    return Quat.from_wxyz(out)


def pitch_of(q: Quat) -> float:
    """Twist of q about the +y axis (the planar pitch angle).

    For quaternions that are pure y-rotations this is the exact rotation
    angle; otherwise it is the swing-twist decomposition's twist component.
    """
    q = q.canonicalize()
    return 2.0 * math.atan2(q.y, q.w)


def quat_from_pitch(pitch: float) -> Quat:
    return Quat(math.cos(pitch / 2.0), 0.0, math.sin(pitch / 2.0), 0.0)
