"""shadow2d: keyframe motion shadowing on a planar robot.

A desk-scale stack for training a low-level control policy that follows
sequences of timed motion keyframes: quaternion/pose geometry, a serial
kinematic chain model, a keyframe command interface with grouped rewards,
a planar penalty-contact simulator, a from-scratch autodiff/NN layer, and
multi-critic PPO with advantage mixing.
"""

from .commands import BodyState, CommandFrame, CommandSequence, build_command_sequence, refresh_errors
from .geom import AxisAngle, Pose, Quat
from .kinematics import KinematicChain, forward_kinematics, link_positions_in_base, load_chain, load_chain_file
from .motion import MotionTrajectory, gen_motion, ground_offset, load_motion, sample_keyframes, save_motion
from .networks import CriticNet, EncoderConfig, NetworkConfig, PolicyNet, select_embedding
from .rewards import (
    RewardConfig,
    RobotState,
    TerminationConfig,
    check_termination,
    psi,
    regularization_reward,
    safety_reward,
    task_reward,
)
from .rl import PPOConfig, compute_gae, evaluate, mix_advantages, ppo_update, single_critic_reward, train
from .sim2d import DomainRand, EnvConfig, PlanarEnv, SimState, VecPlanarEnv, contact_force, pd_torque
from .tensor import Tensor, no_grad

__version__ = "0.1.0"
