"""Keyframe motion commands: assembly, refresh and feature packing.

A command sequence holds K future keyframes plus one state-target token.
Base targets are re-expressed in the robot base frame once, when the
sequence is (re)built; joint/link errors and the two clock attributes are
refreshed every step against the live robot state.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .geom import Pose, Quat, quat_to_axis_angle, relative_pose
from .kinematics import KinematicChain, link_positions_in_base
from .motion import MotionTrajectory, sample_keyframes


@dataclass(frozen=True, eq=False)
class CommandFrame:
    """One motion target token, all quantities in the robot base frame."""

    p_b: np.ndarray  # (3,) target base position
    aa_b: np.ndarray  # (3,) target base orientation, axis-angle
    theta_ref: np.ndarray  # (n_j,) target joint vector
    links_b: np.ndarray  # (n_t, 3) target link positions
    joint_err: np.ndarray  # (n_j,) theta_ref - theta
    link_err: np.ndarray  # (n_t, 3) links_b - current link positions
    t_passed: float
    t_left: float
    is_state_target: bool = False

    def features(self) -> np.ndarray:
        return np.concatenate(
            [
                self.p_b,
                self.aa_b,
                self.theta_ref,
                self.links_b.ravel(),
                self.joint_err,
                self.link_err.ravel(),
                [self.t_passed, self.t_left],
            ]
        )


def frame_width(n_joints: int, n_targets: int) -> int:
    """Feature width of one command token."""
    return 8 + 2 * n_joints + 6 * n_targets


@dataclass(frozen=True, eq=False)
class CommandSequence:
    frames: tuple[CommandFrame, ...]  # K keyframes followed by the state-target
    t_refresh: float  # absolute time the base targets were expressed at
    reach_times: np.ndarray  # (K,) absolute seconds
    world_refs: tuple[Pose, ...]  # (K,) world-frame base targets, for reward/termination

    @property
    def n_keyframes(self) -> int:
        return len(self.frames) - 1

    @property
    def state_target_index(self) -> int:
        return len(self.frames) - 1

    def t_lefts(self) -> np.ndarray:
        return np.array([f.t_left for f in self.frames[:-1]])

    def tokens(self) -> np.ndarray:
        """(K+1, D) feature matrix fed to the command encoder."""
        return np.stack([f.features() for f in self.frames])


@dataclass(frozen=True)
class BodyState:
    """Robot quantities the command interface reads."""

    base: Pose
    theta: np.ndarray


def build_command_sequence(
    traj: MotionTrajectory,
    chain: KinematicChain,
    state: BodyState,
    now: float,
    t_int: float,
    K: int = 5,
) -> CommandSequence:
    """Sample K future keyframes and express their base targets in the base frame."""
    if traj.joint_count != chain.n_joints:
        raise ValueError(
            f"trajectory has {traj.joint_count} joints, chain has {chain.n_joints}"
        )
    refs, reach = sample_keyframes(traj, now, t_int, K)
    links_now = link_positions_in_base(chain, state.theta)
    frames = []
    world_refs = []
    for (p_ref, q_ref, th_ref), r in zip(refs, reach):
        rel = relative_pose(state.base, Pose(p_ref, q_ref))
        links_ref = link_positions_in_base(chain, th_ref)
        frames.append(
            CommandFrame(
                p_b=rel.p,
                aa_b=quat_to_axis_angle(rel.q).v,
                theta_ref=th_ref,
                links_b=links_ref,
                joint_err=th_ref - state.theta,
                link_err=links_ref - links_now,
                t_passed=0.0,
                t_left=float(r) - now,
            )
        )
        world_refs.append(Pose(p_ref, q_ref))
    frames.append(_state_target(state, links_now, chain))
    return CommandSequence(tuple(frames), now, reach, tuple(world_refs))


def _state_target(state: BodyState, links_now: np.ndarray, chain: KinematicChain) -> CommandFrame:
    n_j = chain.n_joints
    return CommandFrame(
        p_b=np.zeros(3),
        aa_b=np.zeros(3),
        theta_ref=state.theta.copy(),
        links_b=links_now,
        joint_err=np.zeros(n_j),
        link_err=np.zeros_like(links_now),
        t_passed=0.0,
        t_left=0.0,
        is_state_target=True,
    )


def refresh_errors(
    seq: CommandSequence,
    state: BodyState,
    chain: KinematicChain,
    now: float,
) -> CommandSequence:
    """Update the live error and clock attributes; base targets stay frozen."""
    links_now = link_positions_in_base(chain, state.theta)
    t_passed = now - seq.t_refresh
    frames = []
    for i, f in enumerate(seq.frames):
        if f.is_state_target:
            # The state target tracks the live state, so its errors stay zero.
            frames.append(
                replace(
                    f,
                    theta_ref=state.theta.copy(),
                    links_b=links_now,
                    t_passed=t_passed,
                )
            )
        else:
            frames.append(
                replace(
                    f,
                    joint_err=f.theta_ref - state.theta,
                    link_err=f.links_b - links_now,
                    t_passed=t_passed,
                    t_left=float(seq.reach_times[i]) - now,
                )
            )
    return CommandSequence(tuple(frames), seq.t_refresh, seq.reach_times, seq.world_refs)
