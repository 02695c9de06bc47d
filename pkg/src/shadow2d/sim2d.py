"""Planar (x-z-pitch) articulated environment with penalty ground contact.

The dynamics are deliberately decoupled: joints integrate as inertial
double-integrators driven by PD torques, and the base is a single rigid
body driven by gravity plus penalty contact forces, rotating about its
configuration-dependent center of mass. This keeps the contact-driven
get-up problem (pushing on the ground moves and rotates the trunk) while
avoiding full articulated dynamics; it is a documented fidelity limitation.

Everything is vectorized over environments. Per-env physics touches only
per-env rows and there are no cross-env reductions, so stepping env slices
on worker threads is bit-identical to stepping the full batch at once.

World heights are lifted by the motion's ground offset: the environment
plays the reference as if it had been raised just enough that no reference
frame penetrates the ground.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .commands import CommandFrame, CommandSequence, frame_width
from .geom import Pose, Quat, pitch_of, quat_from_pitch
from .kinematics import KinematicChain
from .motion import MotionTrajectory, ground_offset
from .rewards import RewardConfig, TerminationConfig, psi_vec


class SimError(RuntimeError):
    pass


@dataclass(frozen=True)
class EnvConfig:
    dt_policy: float = 0.02  # 50 Hz policy rate
    substeps: int = 4  # physics at 200 Hz
    gravity: float = 9.81
    kp: tuple | float = 60.0  # per-joint or scalar PD gains
    kd: tuple | float = 2.0
    contact_kn: float = 5000.0  # normal stiffness N/m
    contact_cn: float = 50.0  # normal damping
    contact_kt: float = 200.0  # tangential viscous gain
    friction_mu: float = 0.8
    base_inertia: float | None = None  # default: total mass * 0.1 m^2
    spawn_height_offset: float = 0.04
    init_ratio_range: tuple[float, float] = (0.0, 0.6)
    t_int_range: tuple[float, float] = (0.1, 0.3)
    K: int = 5
    history: int = 5
    action_scale: float = 0.5

    def validate(self) -> "EnvConfig":
        if self.dt_policy <= 0 or self.substeps < 1:
            raise ValueError("env.dt_policy/substeps must be positive")
        if min(self.contact_cn, self.contact_kt) < 0 or self.contact_kn <= 0:
            raise ValueError("env contact parameters must be non-negative, kn positive")
        if not 0 <= self.init_ratio_range[0] <= self.init_ratio_range[1] <= 1:
            raise ValueError("env.init_ratio_range must be within [0, 1]")
        if self.t_int_range[0] <= 0 or self.t_int_range[0] > self.t_int_range[1]:
            raise ValueError("env.t_int_range must be positive and ordered")
        if self.K < 1 or self.history < 1:
            raise ValueError("env.K and env.history must be >= 1")
        return self

    @property
    def dt_sub(self) -> float:
        return self.dt_policy / self.substeps


@dataclass(frozen=True)
class DomainRand:
    mass_scale: tuple[float, float] = (0.8, 1.2)
    com_offset: tuple[float, float] = (-0.02, 0.02)
    kp_scale: tuple[float, float] = (0.9, 1.1)
    kd_scale: tuple[float, float] = (0.9, 1.1)
    motor_delay: tuple[float, float] = (0.0, 0.03)

    def sample(self, rng: np.random.Generator) -> "DomainRandSample":
        return DomainRandSample(
            mass_scale=float(rng.uniform(*self.mass_scale)),
            com_offset=float(rng.uniform(*self.com_offset)),
            kp_scale=float(rng.uniform(*self.kp_scale)),
            kd_scale=float(rng.uniform(*self.kd_scale)),
            motor_delay=float(rng.uniform(*self.motor_delay)),
        )

    @staticmethod
    def identity() -> "DomainRandSample":
        return DomainRandSample(1.0, 0.0, 1.0, 1.0, 0.0)


@dataclass(frozen=True)
class DomainRandSample:
    mass_scale: float
    com_offset: float  # shifts the CoM along base x
    kp_scale: float
    kd_scale: float
    motor_delay: float  # seconds


@dataclass(frozen=True)
class RandomizedParams:
    link_masses: np.ndarray
    com_offset: float
    kp: np.ndarray
    kd: np.ndarray
    delay_substeps: int


@dataclass
class SimState:
    """Single-environment snapshot (y, roll and yaw are identically zero)."""

    base: Pose
    base_linvel: np.ndarray  # (3,), y component 0
    base_angvel: np.ndarray  # (3,), only the pitch rate is nonzero
    theta: np.ndarray
    theta_dot: np.ndarray
    prev_action: np.ndarray
    prev_prev_action: np.ndarray
    prev_theta_dot: np.ndarray
    time: float
    consumed_index: int


def pd_torque(kp, kd, theta_target, theta, theta_dot, tau_max) -> np.ndarray:
    """PD torque clamped to +-tau_max."""
    raw = np.asarray(kp) * (np.asarray(theta_target) - np.asarray(theta)) - np.asarray(
        kd
    ) * np.asarray(theta_dot)
    return np.clip(raw, -np.asarray(tau_max), np.asarray(tau_max))


def contact_force(point_pos, point_vel, cfg: EnvConfig) -> np.ndarray:
    """Penalty ground force on one point, world frame (x, y, z).

    Normal: spring-damper, clamped non-adhesive. Tangential: viscous drag
    clamped by the Coulomb cone. Zero whenever the point is above ground.
    """
    x, _, z = np.asarray(point_pos, dtype=np.float64)
    vx, _, vz = np.asarray(point_vel, dtype=np.float64)
    d = max(0.0, -z)
    if d == 0.0:
        return np.zeros(3)
    fz = max(0.0, cfg.contact_kn * d - cfg.contact_cn * vz)
    ft = float(np.clip(-cfg.contact_kt * vx, -cfg.friction_mu * fz, cfg.friction_mu * fz))
    return np.array([ft, 0.0, fz])


def apply_domain_rand(
    chain: KinematicChain,
    cfg: EnvConfig,
    sample: DomainRandSample,
    rand: DomainRand = DomainRand(),
) -> RandomizedParams:
    """Expand a randomization sample into concrete dynamic parameters."""
    for value, interval in (
        (sample.mass_scale, rand.mass_scale),
        (sample.com_offset, rand.com_offset),
        (sample.kp_scale, rand.kp_scale),
        (sample.kd_scale, rand.kd_scale),
        (sample.motor_delay, rand.motor_delay),
    ):
        if not interval[0] - 1e-12 <= value <= interval[1] + 1e-12:
            raise ValueError(f"domain-rand sample {value} outside interval {interval}")
    masses = np.array([l.mass for l in chain.links]) * sample.mass_scale
    kp = np.broadcast_to(np.asarray(cfg.kp, dtype=np.float64), (chain.n_joints,)).copy()
    kd = np.broadcast_to(np.asarray(cfg.kd, dtype=np.float64), (chain.n_joints,)).copy()
    delay = int(round(sample.motor_delay / cfg.dt_sub))
    if delay > 2 * cfg.substeps:
        raise ValueError(
            f"motor delay of {delay} substeps exceeds the supported 2 * substeps"
        )
    return RandomizedParams(
        link_masses=masses,
        com_offset=sample.com_offset,
        kp=kp * sample.kp_scale,
        kd=kd * sample.kd_scale,
        delay_substeps=delay,
    )


def _wrap_angle(a):
    return (a + np.pi) % (2 * np.pi) - np.pi


class _PlanarChain:
    """Chain compiled to flat arrays for batched planar FK."""

    def __init__(self, chain: KinematicChain):
        self.chain = chain
        L = len(chain.links)
        self.n_links = L
        self.parent = np.array([-1 if l.parent is None else l.parent for l in chain.links])
        self.org_xz = np.array([[l.origin.p[0], l.origin.p[2]] for l in chain.links])
        self.org_pitch = np.zeros(L)
        self.axis_sign = np.zeros(L)
        self.joint_of_link = np.full(L, -1, dtype=int)
        j = 0
        for i, l in enumerate(chain.links):
            q = l.origin.q
            if math.hypot(q.x, q.z) > 1e-9:
                raise SimError(
                    f"link '{l.name}': origin orientation must be a pure pitch "
                    "rotation for the planar simulator"
                )
            self.org_pitch[i] = pitch_of(q)
            if l.joint_type == "revolute":
                if abs(abs(l.axis[1]) - 1.0) > 1e-9:
                    raise SimError(
                        f"link '{l.name}': revolute axis must be +-y for the planar simulator"
                    )
                self.axis_sign[i] = math.copysign(1.0, l.axis[1])
                self.joint_of_link[i] = j
                j += 1
        self.n_joints = j
        self.link_masses = np.array([l.mass for l in chain.links])
        cps, cp_link = [], []
        for i, l in enumerate(chain.links):
            for cp in l.collision_points:
                cps.append([cp[0], cp[2]])
                cp_link.append(i)
        self.cp_xz = np.array(cps) if cps else np.zeros((0, 2))
        self.cp_link = np.array(cp_link, dtype=int) if cp_link else np.zeros(0, dtype=int)
        name_to_idx = {l.name: i for i, l in enumerate(chain.links)}
        self.target_idx = np.array([name_to_idx[n] for n in chain.target_links], dtype=int)
        # y offsets are invariant under pitch rotations: constant per link
        link_y = np.zeros(L)
        for i, l in enumerate(chain.links):
            link_y[i] = l.origin.p[1] + (0.0 if l.parent is None else link_y[l.parent])
        self.target_y = link_y[self.target_idx]
        self.limits = chain.joint_limits()
        self.tau_max = chain.torque_limits()
        self.inertia = chain.joint_inertias()
        self.friction = chain.joint_frictions()
        self.default_pose = chain.default_pose.copy()

    def fk_local(self, theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Base-frame link positions (N, L, 2) and pitches (N, L)."""
        N = theta.shape[0]
        pos = np.zeros((N, self.n_links, 2))
        pitch = np.zeros((N, self.n_links))
        for l in range(1, self.n_links):
            par = self.parent[l]
            ang = pitch[:, par]
            c, s = np.cos(ang), np.sin(ang)
            ox, oz = self.org_xz[l]
            pos[:, l, 0] = pos[:, par, 0] + ox * c + oz * s
            pos[:, l, 1] = pos[:, par, 1] - ox * s + oz * c
            pitch[:, l] = ang + self.org_pitch[l]
            jj = self.joint_of_link[l]
            if jj >= 0:
                pitch[:, l] += self.axis_sign[l] * theta[:, jj]
        return pos, pitch

    def collision_local(self, pos: np.ndarray, pitch: np.ndarray) -> np.ndarray:
        """Collision points in the base frame from fk_local output, (N, P, 2)."""
        lp = pitch[:, self.cp_link]
        c, s = np.cos(lp), np.sin(lp)
        px, pz = self.cp_xz[:, 0], self.cp_xz[:, 1]
        out = np.empty((pos.shape[0], self.cp_xz.shape[0], 2))
        out[:, :, 0] = pos[:, self.cp_link, 0] + px * c + pz * s
        out[:, :, 1] = pos[:, self.cp_link, 1] - px * s + pz * c
        return out

    def points_local(self, theta: np.ndarray) -> np.ndarray:
        pos, pitch = self.fk_local(theta)
        return self.collision_local(pos, pitch)

    def target_positions(self, theta: np.ndarray) -> np.ndarray:
        """(N, n_targets, 2) target-link positions in the base frame."""
        pos, _ = self.fk_local(theta)
        return pos[:, self.target_idx]


class _TrajArrays:
    """Trajectory projected to the plane and compiled to arrays."""

    def __init__(self, traj: MotionTrajectory, chain: KinematicChain):
        self.fps = traj.fps
        self.duration = traj.duration
        self.p_xz = traj.base_pos[:, [0, 2]].copy()
        pitch = np.array([pitch_of(Quat.from_wxyz(q)) for q in traj.base_quat])
        self.pitch = np.unwrap(pitch)
        self.theta = traj.theta.copy()
        self.n_frames = traj.n_frames
        self.ground_offset = ground_offset(traj, chain)
        self.traj = traj

    def sample(self, t: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Vectorized (p_xz, pitch, theta) at clamped times t (any shape)."""
        t = np.clip(np.asarray(t, dtype=np.float64), 0.0, self.duration)
        x = t * self.fps
        i = np.minimum(x.astype(int), max(self.n_frames - 2, 0))
        i1 = np.minimum(i + 1, self.n_frames - 1)
        u = x - i
        uu = u[..., None]
        p = (1 - uu) * self.p_xz[i] + uu * self.p_xz[i1]
        th = (1 - uu) * self.theta[i] + uu * self.theta[i1]
        pt = (1 - u) * self.pitch[i] + u * self.pitch[i1]
        return p, pt, th


class VecPlanarEnv:
    """Batch of planar environments sharing a chain and a motion set.

    ``step`` consumes raw policy actions, advances the physics, dispenses
    the three reward streams, handles keyframe consumption / termination /
    truncation and auto-resets finished environments.
    """

    def __init__(
        self,
        chain: KinematicChain,
        cfg: EnvConfig,
        trajectories: list[MotionTrajectory],
        num_envs: int,
        seed: int = 0,
        reward_cfg: RewardConfig = RewardConfig(),
        term_cfg: TerminationConfig = TerminationConfig(),
        rand_cfg: DomainRand = DomainRand(),
        randomize: bool = True,
        n_workers: int | None = None,
        dtype=np.float64,
    ):
        cfg.validate()
        reward_cfg.validate()
        term_cfg.validate()
        if term_cfg.quat_im_mode != "geodesic":
            # Only the default orientation test is vectorized here; the
            # literal imaginary-part mode lives in rewards.check_termination.
            raise SimError("VecPlanarEnv supports termination.quat_im_mode='geodesic' only")
        if not trajectories:
            raise SimError("need at least one motion trajectory")
        for t in trajectories:
            if t.joint_count != chain.n_joints:
                raise SimError(
                    f"trajectory has {t.joint_count} joints, chain has {chain.n_joints}"
                )
        self.chain = chain
        self.pchain = _PlanarChain(chain)
        self.cfg = cfg
        self.reward_cfg = reward_cfg
        self.term_cfg = term_cfg
        self.rand_cfg = rand_cfg
        self.randomize = randomize
        self.trajs = [_TrajArrays(t, chain) for t in trajectories]
        self.N = num_envs
        self.n_j = chain.n_joints
        self.n_t = chain.n_targets
        self.dtype = dtype
        if n_workers is None:
            n_workers = int(os.environ.get("SHADOW_THREADS", "1"))
        self.n_workers = max(1, min(n_workers, num_envs))
        self._pool = (
            ThreadPoolExecutor(max_workers=self.n_workers) if self.n_workers > 1 else None
        )

        ss = np.random.SeedSequence(seed)
        self.env_rngs = [np.random.Generator(np.random.PCG64(s)) for s in ss.spawn(num_envs)]

        N, n_j, K, H = num_envs, self.n_j, cfg.K, cfg.history
        P = self.pchain.cp_xz.shape[0]
        self.base_xz = np.zeros((N, 2))
        self.base_pitch = np.zeros(N)
        self.vel_xz = np.zeros((N, 2))
        self.pitch_rate = np.zeros(N)
        self.theta = np.zeros((N, n_j))
        self.theta_dot = np.zeros((N, n_j))
        self.prev_theta_dot = np.zeros((N, n_j))
        self.prev_action = np.zeros((N, n_j))
        self.prev_prev_action = np.zeros((N, n_j))
        self.time = np.zeros(N)
        self.steps = np.zeros(N, dtype=int)
        self.consumed_count = np.zeros(N, dtype=int)
        self.traj_idx = np.zeros(N, dtype=int)
        self.t_int = np.full(N, cfg.t_int_range[0])
        self.target_ring = np.zeros((N, 3, n_j))  # recent policy targets (motor delay)
        self.ring_head = np.zeros(N, dtype=int)
        self.delay_sub = np.zeros(N, dtype=int)
        self.mass_scale = np.ones(N)
        self.com_off = np.zeros(N)
        self.kp_eff = np.zeros((N, n_j))
        self.kd_eff = np.zeros((N, n_j))
        self.applied_tau = np.zeros((N, n_j))
        self.contact_sum = np.zeros((N, 2))
        self.prev_pts_w = np.zeros((N, P, 2))
        self.kf_reach = np.zeros((N, K))
        self.kf_theta = np.zeros((N, K, n_j))
        self.kf_world_xz = np.zeros((N, K, 2))
        self.kf_world_pitch = np.zeros((N, K))
        self.kf_p_b = np.zeros((N, K, 2))  # frozen base-frame targets (x, z)
        self.kf_pitch_b = np.zeros((N, K))
        self.kf_links_b = np.zeros((N, K, self.n_t, 2))
        self.t_refresh = np.zeros(N)
        self.links_b_now = np.zeros((N, self.n_t, 2))
        self.hist = np.zeros((N, H, self.obs_frame_width))

        self.reset_indices(np.arange(num_envs))

    # -- widths ---------------------------------------------------------

    @property
    def obs_frame_width(self) -> int:
        return 3 + 3 + 3 * self.n_j

    @property
    def obs_width(self) -> int:
        return self.cfg.history * self.obs_frame_width

    @property
    def token_width(self) -> int:
        return frame_width(self.n_j, self.n_t)

    # -- reset ------------------------------------------------------------

    def reset_indices(self, idx: np.ndarray):
        """Re-initialize the given environments from their own RNG streams."""
        cfg = self.cfg
        idx = np.asarray(idx, dtype=int)
        for i in idx:
            rng = self.env_rngs[i]
            ti = int(rng.integers(len(self.trajs)))
            traj = self.trajs[ti]
            ratio = float(rng.uniform(*cfg.init_ratio_range))
            t0 = math.floor(ratio * traj.duration / cfg.dt_policy) * cfg.dt_policy
            sample = self.rand_cfg.sample(rng) if self.randomize else DomainRand.identity()
            params = apply_domain_rand(self.chain, cfg, sample, self.rand_cfg)
            # pre-sampled keyframe interval, snapped to the policy grid
            t_int = float(rng.uniform(*cfg.t_int_range))
            t_int = max(1, round(t_int / cfg.dt_policy)) * cfg.dt_policy

            p, pitch, theta = traj.sample(np.array([t0]))
            self.traj_idx[i] = ti
            self.base_xz[i, 0] = p[0, 0]
            self.base_xz[i, 1] = p[0, 1] + traj.ground_offset + cfg.spawn_height_offset
            self.base_pitch[i] = _wrap_angle(pitch[0])
            self.theta[i] = theta[0]
            self.vel_xz[i] = 0.0
            self.pitch_rate[i] = 0.0
            self.theta_dot[i] = 0.0
            self.prev_theta_dot[i] = 0.0
            a0 = (theta[0] - self.pchain.default_pose) / cfg.action_scale
            self.prev_action[i] = a0
            self.prev_prev_action[i] = a0
            self.time[i] = t0
            self.steps[i] = 0
            self.consumed_count[i] = 0
            self.t_int[i] = t_int
            self.mass_scale[i] = sample.mass_scale
            self.com_off[i] = params.com_offset
            self.kp_eff[i] = params.kp
            self.kd_eff[i] = params.kd
            self.delay_sub[i] = params.delay_substeps
            tgt0 = np.clip(
                theta[0], self.pchain.limits[:, 0], self.pchain.limits[:, 1]
            )
            self.target_ring[i] = tgt0[None, :]
            self.ring_head[i] = 0
            self.applied_tau[i] = 0.0
            self.contact_sum[i] = 0.0
        self._rebuild_commands(idx)
        pos, pitch = self.pchain.fk_local(self.theta[idx])
        self.links_b_now[idx] = pos[:, self.pchain.target_idx]
        self.prev_pts_w[idx] = self._points_world(idx, self.pchain.collision_local(pos, pitch))
        self.hist[idx] = self._proprio_frame(idx)[:, None, :]

    # -- command machinery ---------------------------------------------------

    def _rebuild_commands(self, idx: np.ndarray):
        """Resample all K keyframes at the current time and freeze base targets."""
        cfg = self.cfg
        for ti in np.unique(self.traj_idx[idx]):
            traj = self.trajs[ti]
            sub = idx[self.traj_idx[idx] == ti]
            now = self.time[sub]
            reach = now[:, None] + self.t_int[sub][:, None] * np.arange(1, cfg.K + 1)
            reach = np.minimum(reach, traj.duration)
            p, pitch, theta = traj.sample(reach)
            p = p.copy()
            p[:, :, 1] += traj.ground_offset
            self.kf_reach[sub] = reach
            self.kf_theta[sub] = theta
            self.kf_world_xz[sub] = p
            self.kf_world_pitch[sub] = _wrap_angle(pitch)
            bp = self.base_pitch[sub][:, None]
            c, s = np.cos(bp), np.sin(bp)
            dx = p[:, :, 0] - self.base_xz[sub, 0][:, None]
            dz = p[:, :, 1] - self.base_xz[sub, 1][:, None]
            # base-frame re-expression: R(-pitch) @ (dx, dz)
            self.kf_p_b[sub, :, 0] = dx * c - dz * s
            self.kf_p_b[sub, :, 1] = dx * s + dz * c
            self.kf_pitch_b[sub] = _wrap_angle(pitch - self.base_pitch[sub][:, None])
            for k in range(cfg.K):
                self.kf_links_b[sub, k] = self.pchain.target_positions(theta[:, k])
            self.t_refresh[sub] = self.time[sub]

    def t_lefts(self) -> np.ndarray:
        """(N, K) time left to each keyframe (command clock attribute)."""
        return self.kf_reach - self.time[:, None]

    def tokens(self, dtype=None) -> np.ndarray:
        """(N, K+1, D) command token features for every environment."""
        return self._tokens_for(np.arange(self.N), dtype)

    def _tokens_for(self, idx: np.ndarray, dtype=None) -> np.ndarray:
        cfg = self.cfg
        n_j, n_t, K = self.n_j, self.n_t, cfg.K
        M = len(idx)
        out = np.zeros((M, K + 1, self.token_width))
        links_now = self.links_b_now[idx]
        t_passed = self.time[idx] - self.t_refresh[idx]
        t_left = self.kf_reach[idx] - self.time[idx][:, None]
        out[:, :K, 0] = self.kf_p_b[idx, :, 0]
        out[:, :K, 2] = self.kf_p_b[idx, :, 1]
        out[:, :K, 4] = self.kf_pitch_b[idx]  # axis-angle about +y
        col = 6
        out[:, :K, col : col + n_j] = self.kf_theta[idx]
        col += n_j
        lb = self.kf_links_b[idx]
        out[:, :K, col : col + 3 * n_t : 3] = lb[:, :, :, 0]
        out[:, :K, col + 1 : col + 3 * n_t + 1 : 3] = self.pchain.target_y
        out[:, :K, col + 2 : col + 3 * n_t + 2 : 3] = lb[:, :, :, 1]
        col += 3 * n_t
        out[:, :K, col : col + n_j] = self.kf_theta[idx] - self.theta[idx][:, None, :]
        col += n_j
        le = lb - links_now[:, None, :, :]
        out[:, :K, col : col + 3 * n_t : 3] = le[:, :, :, 0]
        out[:, :K, col + 2 : col + 3 * n_t + 2 : 3] = le[:, :, :, 1]
        col += 3 * n_t
        out[:, :K, col] = t_passed[:, None]
        out[:, :K, col + 1] = t_left
        # state-target token: targets = current values, errors = 0, t_left = 0
        st = out[:, K, :]
        st[:, 6 : 6 + n_j] = self.theta[idx]
        st[:, 6 + n_j : 6 + n_j + 3 * n_t : 3] = links_now[:, :, 0]
        st[:, 6 + n_j + 1 : 6 + n_j + 3 * n_t + 1 : 3] = self.pchain.target_y
        st[:, 6 + n_j + 2 : 6 + n_j + 3 * n_t + 2 : 3] = links_now[:, :, 1]
        st[:, col] = t_passed
        if dtype is None:
            dtype = self.dtype
        return out.astype(dtype, copy=False)

    # -- observation ----------------------------------------------------------

    def _proprio_frame(self, idx: np.ndarray) -> np.ndarray:
        """One history slot: [angvel(3), projected gravity(3), theta, theta_dot,
        prev_action]; base linear velocity is deliberately excluded."""
        M = len(idx)
        out = np.zeros((M, self.obs_frame_width))
        out[:, 1] = self.pitch_rate[idx]
        pitch = self.base_pitch[idx]
        out[:, 3] = np.sin(pitch)
        out[:, 5] = -np.cos(pitch)
        n_j = self.n_j
        out[:, 6 : 6 + n_j] = self.theta[idx]
        out[:, 6 + n_j : 6 + 2 * n_j] = self.theta_dot[idx]
        out[:, 6 + 2 * n_j :] = self.prev_action[idx]
        return out

    def observations(self, dtype=None) -> np.ndarray:
        if dtype is None:
            dtype = self.dtype
        return self.hist.reshape(self.N, -1).astype(dtype, copy=True)

    # -- physics ------------------------------------------------------------

    def _points_world(self, idx: np.ndarray, pts_local: np.ndarray) -> np.ndarray:
        c = np.cos(self.base_pitch[idx])[:, None]
        s = np.sin(self.base_pitch[idx])[:, None]
        out = np.empty_like(pts_local)
        out[:, :, 0] = self.base_xz[idx, 0][:, None] + pts_local[:, :, 0] * c + pts_local[:, :, 1] * s
        out[:, :, 1] = self.base_xz[idx, 1][:, None] - pts_local[:, :, 0] * s + pts_local[:, :, 1] * c
        return out

    def _com_world(self, sl, link_pos_local: np.ndarray) -> np.ndarray:
        m = self.pchain.link_masses[None, :, None]
        com_local = (link_pos_local * m).sum(axis=1) / self.pchain.link_masses.sum()
        com_local[:, 0] += self.com_off[sl]
        c = np.cos(self.base_pitch[sl])
        s = np.sin(self.base_pitch[sl])
        out = np.empty_like(com_local)
        out[:, 0] = self.base_xz[sl, 0] + com_local[:, 0] * c + com_local[:, 1] * s
        out[:, 1] = self.base_xz[sl, 1] - com_local[:, 0] * s + com_local[:, 1] * c
        return out

    def _step_physics_slice(self, sl: slice, actions: np.ndarray):
        cfg = self.cfg
        h = cfg.dt_sub
        pch = self.pchain
        idx = np.arange(sl.start, sl.stop)
        target = np.clip(
            pch.default_pose + cfg.action_scale * actions[sl],
            pch.limits[:, 0],
            pch.limits[:, 1],
        )
        head = self.ring_head[sl].copy()
        self.target_ring[idx, (head + 1) % 3] = target
        self.ring_head[sl] = head + 1
        step_idx = head + 1
        total_mass = pch.link_masses.sum() * self.mass_scale[sl]
        base_inertia_default = (
            self.cfg.base_inertia
            if self.cfg.base_inertia is not None
            else 0.1 * pch.link_masses.sum()
        )
        inertia = base_inertia_default * self.mass_scale[sl]
        inertia_j = pch.inertia[None, :] * self.mass_scale[sl][:, None]

        for s in range(cfg.substeps):
            # delayed PD target: the newest target issued >= delay substeps ago
            global_sub = (step_idx - 1) * cfg.substeps + s
            eff_step = np.clip((global_sub - self.delay_sub[sl]) // cfg.substeps + 1, 0, step_idx)
            eff_target = self.target_ring[idx, eff_step % 3]
            tau = pd_torque(
                self.kp_eff[sl],
                self.kd_eff[sl],
                eff_target,
                self.theta[sl],
                self.theta_dot[sl],
                pch.tau_max,
            )
            # joint double-integrator with viscous friction, semi-implicit Euler
            tdd = (tau - pch.friction[None, :] * self.theta_dot[sl]) / inertia_j
            self.theta_dot[sl] = self.theta_dot[sl] + h * tdd
            self.theta[sl] = self.theta[sl] + h * self.theta_dot[sl]
            over = np.abs(self.theta[sl]) > 2 * np.pi
            if over.any():
                self.theta[sl] = np.where(
                    over, self.theta[sl] - np.sign(self.theta[sl]) * 2 * np.pi, self.theta[sl]
                )

            link_pos, link_pitch = pch.fk_local(self.theta[sl])
            pts_local = pch.collision_local(link_pos, link_pitch)
            pts_w = self._points_world(idx, pts_local)
            # point velocity across the previous integration step (finite
            # difference; captures both base and joint motion, one substep
            # of lag)
            vel = (pts_w - self.prev_pts_w[sl]) / h
            self.prev_pts_w[sl] = pts_w
            depth = np.maximum(0.0, -pts_w[:, :, 1])
            active = depth > 0.0
            fz = np.maximum(0.0, cfg.contact_kn * depth - cfg.contact_cn * vel[:, :, 1]) * active
            lim = cfg.friction_mu * fz
            fx = np.clip(-cfg.contact_kt * vel[:, :, 0], -lim, lim)
            com_w = self._com_world(sl, link_pos)
            fx_tot = fx.sum(axis=1)
            fz_tot = fz.sum(axis=1)
            rx = pts_w[:, :, 0] - com_w[:, 0][:, None]
            rz = pts_w[:, :, 1] - com_w[:, 1][:, None]
            torque = (rz * fx - rx * fz).sum(axis=1)

            self.vel_xz[sl, 0] += h * fx_tot / total_mass
            self.vel_xz[sl, 1] += h * (fz_tot / total_mass - cfg.gravity)
            self.pitch_rate[sl] += h * torque / inertia
            dphi = h * self.pitch_rate[sl]
            self.base_pitch[sl] = _wrap_angle(self.base_pitch[sl] + dphi)
            # the base origin orbits the CoM as the trunk rotates
            ox = self.base_xz[sl, 0] - com_w[:, 0]
            oz = self.base_xz[sl, 1] - com_w[:, 1]
            cd, sd = np.cos(dphi), np.sin(dphi)
            self.base_xz[sl, 0] = com_w[:, 0] + ox * cd + oz * sd
            self.base_xz[sl, 1] = com_w[:, 1] - ox * sd + oz * cd
            self.base_xz[sl] += h * self.vel_xz[sl]

            if s == cfg.substeps - 1:
                self.applied_tau[sl] = tau
                self.contact_sum[sl, 0] = fx_tot
                self.contact_sum[sl, 1] = fz_tot
                self.links_b_now[sl] = link_pos[:, pch.target_idx]

    # -- step ---------------------------------------------------------------

    def step(self, actions: np.ndarray):
        """Advance every environment one policy step.

        Returns (obs, tokens, rewards (N, 3), terminated, truncated, info).
        Finished environments are auto-reset; their terminal observation and
        episode stats are reported through ``info``.
        """
        actions = np.asarray(actions, dtype=np.float64)
        if actions.shape != (self.N, self.n_j):
            raise SimError(f"actions shape {actions.shape} != {(self.N, self.n_j)}")

        if self._pool is not None:
            bounds = np.linspace(0, self.N, self.n_workers + 1).astype(int)
            slices = [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
            list(self._pool.map(lambda s: self._step_physics_slice(s, actions), slices))
        else:
            self._step_physics_slice(slice(0, self.N), actions)

        self.time += self.cfg.dt_policy
        self.steps += 1

        joint_acc = (self.theta_dot - self.prev_theta_dot) / self.cfg.dt_policy

        diverged = ~(
            np.isfinite(self.base_xz).all(axis=1)
            & np.isfinite(self.theta).all(axis=1)
            & np.isfinite(self.theta_dot).all(axis=1)
            & np.isfinite(self.base_pitch)
        )

        rewards = np.zeros((self.N, 3))
        rc = self.reward_cfg
        rate = np.linalg.norm(actions - self.prev_action, axis=1)
        acc = np.linalg.norm(joint_acc, axis=1)
        vel = np.linalg.norm(self.theta_dot, axis=1)
        rewards[:, 1] = (
            psi_vec(rate, rc.action_rate_width)
            * psi_vec(acc, rc.joint_acc_width)
            * psi_vec(vel, rc.joint_vel_width)
        )
        if self.n_j:
            viol = np.maximum(
                self.theta - self.pchain.limits[None, :, 1],
                self.pchain.limits[None, :, 0] - self.theta,
            ).max(axis=1)
            tover = np.maximum(
                np.abs(self.applied_tau) - rc.torque_margin * self.pchain.tau_max[None, :],
                0.0,
            ).max(axis=1)
        else:
            viol = np.zeros(self.N)
            tover = np.zeros(self.N)
        rewards[:, 2] = psi_vec(viol, rc.pos_limit_width) * psi_vec(
            tover, rc.torque_limit_width
        )

        # keyframe consumption: sparse task reward + termination check
        due = self.time + 1e-9 >= self.kf_reach[:, 0]
        terminated = np.zeros(self.N, dtype=bool)
        truncated = np.zeros(self.N, dtype=bool)
        consumed = np.full(self.N, -1, dtype=int)
        term_cause = np.zeros(self.N, dtype=int)  # 0 none, 1 pos, 2 orient, 3 joint
        if due.any():
            d = np.flatnonzero(due)
            pos_err = np.linalg.norm(self.base_xz[d] - self.kf_world_xz[d, 0], axis=1)
            ang_err = np.abs(_wrap_angle(self.base_pitch[d] - self.kf_world_pitch[d, 0]))
            joint_dev = np.abs(self.theta[d] - self.kf_theta[d, 0]).reshape(len(d), -1)
            joint_norm = np.linalg.norm(self.theta[d] - self.kf_theta[d, 0], axis=1)
            rewards[d, 0] = (
                psi_vec(pos_err, rc.base_pos_width)
                * psi_vec(ang_err, rc.base_orient_width)
                * psi_vec(joint_norm, rc.joint_width)
            )
            tc = self.term_cfg
            pos_fail = pos_err > tc.pos_threshold
            orient_fail = ang_err > tc.orient_threshold
            if self.n_j == 0:
                joint_fail = np.zeros(len(d), dtype=bool)
            elif tc.joint_mode == "any":
                joint_fail = joint_dev.max(axis=1) > tc.joint_threshold
            else:
                joint_fail = joint_dev.min(axis=1) > tc.joint_threshold
            fail = pos_fail | orient_fail | joint_fail
            term_cause[d] = np.where(
                pos_fail, 1, np.where(orient_fail, 2, np.where(joint_fail, 3, 0))
            )
            terminated[d] = fail
            consumed[d] = self.consumed_count[d]
            self.consumed_count[d] += 1
            durations = np.array([self.trajs[t].duration for t in self.traj_idx[d]])
            exhausted = self.kf_reach[d, 0] >= durations - 1e-9
            truncated[d] = exhausted & ~fail
            alive = d[~fail & ~exhausted]
            if alive.size:
                self._rebuild_commands(alive)

        terminated |= diverged

        info = {
            "applied_torque": self.applied_tau.copy(),
            "contact_force_sum": self.contact_sum.copy(),
            "consumed_keyframe": consumed,
            "joint_acc": joint_acc,
            "max_joint_acc": np.abs(joint_acc).max(axis=1) if self.n_j else np.zeros(self.N),
            "diverged": diverged,
            "termination_cause": term_cause,
            "time": self.time.copy(),
        }

        done = terminated | truncated
        live = ~done
        if live.any():
            li = np.flatnonzero(live)
            self.hist[li, :-1] = self.hist[li, 1:]
            self.prev_prev_action[li] = self.prev_action[li]
            self.prev_action[li] = actions[li]
            self.prev_theta_dot[li] = self.theta_dot[li]
            self.hist[li, -1] = self._proprio_frame(li)
        if done.any():
            dd = np.flatnonzero(done)
            info["done_indices"] = dd
            info["episode_success"] = truncated[dd] & ~terminated[dd]
            info["episode_length"] = self.steps[dd].copy()
            term_hist = self.hist[dd].copy()
            # terminal observation: roll in the final frame before resetting
            self.prev_action[dd] = actions[dd]
            self.prev_theta_dot[dd] = self.theta_dot[dd]
            term_hist[:, :-1] = term_hist[:, 1:]
            term_hist[:, -1] = self._proprio_frame(dd)
            info["terminal_obs"] = term_hist.reshape(len(dd), -1).astype(self.dtype)
            info["terminal_tokens"] = self._tokens_for(dd)
            info["terminal_t_lefts"] = self.kf_reach[dd] - self.time[dd][:, None]
            self.reset_indices(dd)
        else:
            info["done_indices"] = np.zeros(0, dtype=int)

        obs = self.observations()
        tokens = self.tokens()
        return obs, tokens, rewards, terminated, truncated, info

    # -- single-env views -------------------------------------------------------

    def get_state(self, i: int) -> SimState:
        return SimState(
            base=Pose(
                np.array([self.base_xz[i, 0], 0.0, self.base_xz[i, 1]]),
                quat_from_pitch(self.base_pitch[i]),
            ),
            base_linvel=np.array([self.vel_xz[i, 0], 0.0, self.vel_xz[i, 1]]),
            base_angvel=np.array([0.0, self.pitch_rate[i], 0.0]),
            theta=self.theta[i].copy(),
            theta_dot=self.theta_dot[i].copy(),
            prev_action=self.prev_action[i].copy(),
            prev_prev_action=self.prev_prev_action[i].copy(),
            prev_theta_dot=self.prev_theta_dot[i].copy(),
            time=float(self.time[i]),
            consumed_index=int(self.consumed_count[i]),
        )

    def command_sequence(self, i: int) -> CommandSequence:
        """Materialize env i's command state as a CommandSequence."""
        K = self.cfg.K
        frames = []
        world_refs = []
        links_now3 = np.zeros((self.n_t, 3))
        links_now3[:, 0] = self.links_b_now[i, :, 0]
        links_now3[:, 1] = self.pchain.target_y
        links_now3[:, 2] = self.links_b_now[i, :, 1]
        t_passed = float(self.time[i] - self.t_refresh[i])
        for k in range(K):
            links3 = np.zeros((self.n_t, 3))
            links3[:, 0] = self.kf_links_b[i, k, :, 0]
            links3[:, 1] = self.pchain.target_y
            links3[:, 2] = self.kf_links_b[i, k, :, 1]
            frames.append(
                CommandFrame(
                    p_b=np.array([self.kf_p_b[i, k, 0], 0.0, self.kf_p_b[i, k, 1]]),
                    aa_b=np.array([0.0, self.kf_pitch_b[i, k], 0.0]),
                    theta_ref=self.kf_theta[i, k].copy(),
                    links_b=links3,
                    joint_err=self.kf_theta[i, k] - self.theta[i],
                    link_err=links3 - links_now3,
                    t_passed=t_passed,
                    t_left=float(self.kf_reach[i, k] - self.time[i]),
                )
            )
            world_refs.append(
                Pose(
                    np.array([self.kf_world_xz[i, k, 0], 0.0, self.kf_world_xz[i, k, 1]]),
                    quat_from_pitch(self.kf_world_pitch[i, k]),
                )
            )
        frames.append(
            CommandFrame(
                p_b=np.zeros(3),
                aa_b=np.zeros(3),
                theta_ref=self.theta[i].copy(),
                links_b=links_now3,
                joint_err=np.zeros(self.n_j),
                link_err=np.zeros((self.n_t, 3)),
                t_passed=t_passed,
                t_left=0.0,
                is_state_target=True,
            )
        )
        return CommandSequence(
            tuple(frames),
            float(self.t_refresh[i]),
            self.kf_reach[i].copy(),
            tuple(world_refs),
        )


class PlanarEnv:
    """Single-environment convenience wrapper over the vectorized core."""

    def __init__(self, chain, cfg, trajectory, seed=0, **kw):
        self.vec = VecPlanarEnv(chain, cfg, [trajectory], 1, seed=seed, **kw)

    def reset(self) -> tuple[SimState, CommandSequence]:
        self.vec.reset_indices(np.array([0]))
        return self.state, self.sequence

    @property
    def state(self) -> SimState:
        return self.vec.get_state(0)

    @property
    def sequence(self) -> CommandSequence:
        return self.vec.command_sequence(0)

    def observe(self) -> np.ndarray:
        return self.vec.observations()[0]

    def step(self, action: np.ndarray):
        """Returns (state, (r1, r2, r3), terminated, truncated, info)."""
        obs, tokens, rew, term, trunc, info = self.vec.step(np.asarray(action)[None, :])
        return self.state, tuple(rew[0]), bool(term[0]), bool(trunc[0]), info
