"""Grouped reward terms and the keyframe-relative termination check.

Rewards come in three groups (task / regularization / safety). Terms inside
a group are kernelized error magnitudes multiplied together, so every group
lands in (0, 1] and no term can be traded away entirely. The task group is
sparse: it is only evaluated at the step where a keyframe is due.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .commands import CommandFrame
from .geom import Pose, quat_angle_between, quat_conj, quat_im_norm, quat_mul
from .kinematics import KinematicChain


PSI_EXP_CAP = 230.0  # keeps three-kernel products strictly positive in float64


def psi(a: float, b: float) -> float:
    """Gaussian-style kernel exp(-a / b^2); a >= 0 maps to (0, 1].

    The exponent is capped so that products of a few kernels never
    underflow to exactly zero for finite inputs.
    """
    return math.exp(-min(max(a, 0.0) / (b * b), PSI_EXP_CAP))


def psi_vec(a: np.ndarray, b: float) -> np.ndarray:
    """Vectorized psi with the same exponent cap."""
    return np.exp(-np.minimum(np.maximum(a, 0.0) / (b * b), PSI_EXP_CAP))


@dataclass(frozen=True)
class RewardConfig:
    base_pos_width: float = 0.4
    base_orient_width: float = 0.8
    joint_width: float = 0.3
    action_rate_width: float = 1.0
    joint_acc_width: float = 500.0
    joint_vel_width: float = 15.0
    pos_limit_width: float = 0.1
    torque_limit_width: float = 0.1
    torque_margin: float = 0.9

    def validate(self) -> "RewardConfig":
        for name in (
            "base_pos_width",
            "base_orient_width",
            "joint_width",
            "action_rate_width",
            "joint_acc_width",
            "joint_vel_width",
            "pos_limit_width",
            "torque_limit_width",
        ):
            if getattr(self, name) <= 0:
                raise ValueError(f"reward.{name}: kernel width must be > 0")
        return self


@dataclass(frozen=True)
class TerminationConfig:
    pos_threshold: float = 0.5
    orient_threshold: float = 1.0
    joint_threshold: float = 1.0
    # 'geodesic' compares the rotation angle between actual and commanded
    # orientation against orient_threshold; 'literal' keeps the raw
    # imaginary-part-norm test (fires when the norm drops below im_threshold).
    quat_im_mode: str = "geodesic"
    im_threshold: float = 0.8
    # 'any' terminates when one joint deviates past the threshold; 'all'
    # requires every joint to deviate.
    joint_mode: str = "any"

    def validate(self) -> "TerminationConfig":
        if min(self.pos_threshold, self.orient_threshold, self.joint_threshold) <= 0:
            raise ValueError("termination thresholds must be > 0")
        if self.quat_im_mode not in ("geodesic", "literal"):
            raise ValueError(f"termination.quat_im_mode: bad mode '{self.quat_im_mode}'")
        if self.joint_mode not in ("any", "all"):
            raise ValueError(f"termination.joint_mode: bad mode '{self.joint_mode}'")
        return self


@dataclass(frozen=True)
class RobotState:
    """Minimal state slice the reward/termination functions need."""

    base: Pose
    theta: np.ndarray
    theta_dot: np.ndarray | None = None


@dataclass(frozen=True)
class TerminationResult:
    terminate: bool
    cause: str | None  # 'position' | 'orientation' | 'joint' | None


def task_reward(
    state: RobotState,
    cmd: CommandFrame,
    world_ref: Pose,
    cfg: RewardConfig = RewardConfig(),
) -> float:
    """Product of base-position, base-orientation and joint tracking kernels."""
    pos_err = float(np.linalg.norm(state.base.p - world_ref.p))
    ang_err = quat_angle_between(state.base.q, world_ref.q)
    joint_err = float(np.linalg.norm(state.theta - cmd.theta_ref))
    return (
        psi(pos_err, cfg.base_pos_width)
        * psi(ang_err, cfg.base_orient_width)
        * psi(joint_err, cfg.joint_width)
    )


def regularization_reward(
    state: RobotState,
    prev_state: RobotState,
    action: np.ndarray,
    prev_action: np.ndarray,
    dt: float,
    cfg: RewardConfig = RewardConfig(),
) -> float:
    """Product of action-rate, joint-acceleration and joint-velocity kernels."""
    if dt <= 0:
        raise ValueError(f"dt must be > 0, got {dt}")
    rate = float(np.linalg.norm(np.asarray(action) - np.asarray(prev_action)))
    acc = float(np.linalg.norm((state.theta_dot - prev_state.theta_dot) / dt))
    vel = float(np.linalg.norm(state.theta_dot))
    return (
        psi(rate, cfg.action_rate_width)
        * psi(acc, cfg.joint_acc_width)
        * psi(vel, cfg.joint_vel_width)
    )


def safety_reward(
    theta: np.ndarray,
    tau: np.ndarray,
    chain: KinematicChain,
    cfg: RewardConfig = RewardConfig(),
) -> float:
    """Product of joint-limit and torque-limit kernels (worst joint counts)."""
    lim = chain.joint_limits()
    pos_violation = np.maximum(theta - lim[:, 1], lim[:, 0] - theta)
    worst_pos = max(0.0, float(pos_violation.max())) if theta.size else 0.0
    torque_over = np.maximum(
        np.abs(tau) - cfg.torque_margin * chain.torque_limits(), 0.0
    )
    worst_torque = float(torque_over.max()) if theta.size else 0.0
    return psi(worst_pos, cfg.pos_limit_width) * psi(worst_torque, cfg.torque_limit_width)


def check_termination(
    state: RobotState,
    cmd: CommandFrame,
    world_ref: Pose,
    cfg: TerminationConfig = TerminationConfig(),
) -> TerminationResult:
    """Keyframe-relative failure test, evaluated only at reach timesteps.

    Conditions are checked in order position, orientation, joint; the cause
    names the first one that fires.
    """
    if float(np.linalg.norm(state.base.p - world_ref.p)) > cfg.pos_threshold:
        return TerminationResult(True, "position")
    if cfg.quat_im_mode == "geodesic":
        if quat_angle_between(state.base.q, world_ref.q) > cfg.orient_threshold:
            return TerminationResult(True, "orientation")
    else:
        rel = quat_mul(quat_conj(state.base.q.canonicalize()), world_ref.q.canonicalize())
        if quat_im_norm(rel) < cfg.im_threshold:
            return TerminationResult(True, "orientation")
    dev = np.abs(state.theta - cmd.theta_ref)
    joint_fail = bool(dev.max() > cfg.joint_threshold) if cfg.joint_mode == "any" else bool(
        dev.min() > cfg.joint_threshold
    )
    if joint_fail:
        return TerminationResult(True, "joint")
    return TerminationResult(False, None)
