"""PPO with one critic per reward group and advantage mixing.

Three reward streams (task / regularization / safety) feed three critics
of identical structure. Each stream gets its own generalized advantage
estimate; the policy gradient uses their weighted, per-stream-normalized
mix. The single-critic baseline collapses the streams into one scalar
reward using the same weights and runs the identical machinery with one
critic, which makes the two modes bit-comparable in the degenerate case
w = [1, 0, 0] with zeroed auxiliary streams.
"""

from __future__ import annotations

import math
import time as _time
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .networks import (
    CriticNet,
    NetworkConfig,
    PolicyNet,
    gaussian_entropy,
    gaussian_log_prob,
    zero_grads,
)
from .optim import AdamW, clip_grad_norm
from .sim2d import VecPlanarEnv
from .tensor import Tensor, no_grad

STREAM_NAMES = ("task", "regularization", "safety")


@dataclass(frozen=True)
class PPOConfig:
    lr: float = 1e-4
    clip: float = 0.2
    entropy_coef: float = 0.0
    desired_kl: float = 0.01
    max_grad_norm: float = 1.0
    num_minibatches: int = 4
    gamma: float = 0.99
    lam: float = 0.95
    mixing_weights: tuple[float, float, float] = (0.7, 0.1, 0.2)
    epochs: int = 5
    rollout_length: int = 24
    num_envs: int = 64
    norm_eps: float = 1e-8
    value_coef: float = 1.0
    value_target: str = "gae_return"  # or "td_one_step"
    lr_range: tuple[float, float] = (1e-6, 1e-2)
    checkpoint_every: int = 200

    def validate(self) -> "PPOConfig":
        if not (0 < self.gamma <= 1 and 0 < self.lam <= 1):
            raise ValueError("ppo.gamma and ppo.lam must be in (0, 1]")
        if sum(abs(w) for w in self.mixing_weights) <= 0:
            raise ValueError("ppo.mixing_weights must not all be zero")
        if (self.rollout_length * self.num_envs) % self.num_minibatches != 0:
            raise ValueError("ppo.num_minibatches must divide rollout_length * num_envs")
        if self.value_target not in ("gae_return", "td_one_step"):
            raise ValueError(f"ppo.value_target: bad mode '{self.value_target}'")
        return self


def compute_gae(rewards, values, bootstrap, dones, gamma, lam, next_values=None):
    """Generalized advantage estimation over a [T, N] rollout.

    ``next_values`` (optional, [T, N]) carries the value of the successor
    state per step: 0 where terminated, the terminal-state value where
    truncated, V(s_{t+1}) otherwise. Without it, successor values are taken
    from ``values`` shifted by one step and ``bootstrap`` at the end, with
    zeros at episode boundaries.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones)
    if rewards.shape != values.shape or rewards.shape != dones.shape:
        raise ValueError(
            f"shape mismatch: rewards {rewards.shape}, values {values.shape}, "
            f"dones {dones.shape}"
        )
    T_, N = rewards.shape
    if next_values is None:
        next_values = np.empty_like(values)
        next_values[:-1] = values[1:]
        next_values[-1] = np.asarray(bootstrap, dtype=np.float64)
        next_values = next_values * (~dones.astype(bool))
    adv = np.zeros_like(rewards)
    last = np.zeros(N)
    not_done = ~dones.astype(bool)
    for t in range(T_ - 1, -1, -1):
        delta = rewards[t] + gamma * next_values[t] - values[t]
        last = delta + gamma * lam * not_done[t] * last
        adv[t] = last
    return adv


def mix_advantages(advantages: list[np.ndarray], weights, eps: float = 1e-8) -> np.ndarray:
    """Weighted sum of per-stream advantages, each batch-normalized.

    Normalization uses the population statistics of each stream over the
    whole batch. The guard kicks in only for (near-)constant streams, so
    the mix is exactly invariant to positive affine transformations of any
    stream with non-degenerate spread.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if len(advantages) != len(weights):
        raise ValueError(f"{len(advantages)} streams but {len(weights)} weights")
    out = np.zeros_like(np.asarray(advantages[0], dtype=np.float64))
    for a, w in zip(advantages, weights):
        a = np.asarray(a, dtype=np.float64)
        if a.shape != out.shape:
            raise ValueError(f"advantage shape mismatch: {a.shape} vs {out.shape}")
        out = out + w * ((a - a.mean()) / max(a.std(), eps))
    return out


def single_critic_reward(r1, r2, r3, weights) -> np.ndarray:
    """Scalar reward stream for the single-critic baseline."""
    w = np.asarray(weights, dtype=np.float64)
    return w[0] * np.asarray(r1) + w[1] * np.asarray(r2) + w[2] * np.asarray(r3)


def critic_loss(values: Tensor, targets: np.ndarray) -> Tensor:
    """Mean squared error of one critic against its stream targets."""
    diff = values - Tensor(np.asarray(targets), dtype=values.dtype)
    return T.mean(T.square(diff))


class RolloutBuffer:
    """Fixed-size [T, N] storage for one PPO iteration."""

    def __init__(self, T_, N, obs_w, token_shape, n_actions, n_streams, dtype):
        self.T = T_
        self.N = N
        self.n_streams = n_streams
        self.obs = np.zeros((T_, N, obs_w), dtype=dtype)
        self.tokens = np.zeros((T_, N, *token_shape), dtype=dtype)
        self.t_lefts = np.zeros((T_, N, token_shape[0] - 1))
        self.actions = np.zeros((T_, N, n_actions))
        self.log_probs = np.zeros((T_, N))
        self.means = np.zeros((T_, N, n_actions))
        self.stds = np.zeros((T_, n_actions))
        self.rewards = np.zeros((T_, N, 3))
        self.dones = np.zeros((T_, N), dtype=bool)
        self.values = np.zeros((T_, N, n_streams))
        self.next_values = np.zeros((T_, N, n_streams))
        self.ptr = 0

    @property
    def batch(self) -> int:
        return self.T * self.N


class ActorCritic:
    """Policy plus one critic per reward stream, each with its own optimizer."""

    def __init__(self, obs_w, token_w, n_actions, net_cfg: NetworkConfig, ppo_cfg: PPOConfig,
                 n_streams: int, seed: int, dtype=np.float32):
        self.n_streams = n_streams
        self.net_cfg = net_cfg
        self.dtype = dtype
        pol_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 1])))
        self.policy = PolicyNet(obs_w, token_w, n_actions, net_cfg, pol_rng, dtype)
        self.critics = []
        for i in range(n_streams):
            rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 2 + i])))
            self.critics.append(CriticNet(obs_w, token_w, net_cfg, rng, dtype))
        wd = 0.01
        self.opt_policy = AdamW(self.policy.params, lr=ppo_cfg.lr, weight_decay=wd)
        self.opt_critics = [AdamW(c.params, lr=ppo_cfg.lr, weight_decay=wd) for c in self.critics]

    def set_lr(self, lr: float):
        self.opt_policy.lr = lr
        for o in self.opt_critics:
            o.lr = lr

    def all_params(self) -> dict[str, Tensor]:
        out = {f"policy.{k}": v for k, v in self.policy.params.items()}
        for i, c in enumerate(self.critics):
            out.update({f"critic{i}.{k}": v for k, v in c.params.items()})
        return out

    def act(self, obs, tokens, t_lefts, rng: np.random.Generator):
        """Sample actions; returns (actions, log_probs, means, stds) as float64."""
        with no_grad():
            mean_t, std_t = self.policy.forward(
                Tensor(obs, dtype=self.dtype), Tensor(tokens, dtype=self.dtype), t_lefts
            )
        mean = mean_t.data.astype(np.float64)
        std = std_t.data.astype(np.float64)
        noise = rng.standard_normal(mean.shape)
        actions = mean + std * noise
        z = (actions - mean) / std
        logp = -0.5 * (z * z).sum(axis=-1) - np.log(std).sum() - 0.5 * mean.shape[-1] * math.log(2 * math.pi)
        return actions, logp, mean, std

    def act_mean(self, obs, tokens, t_lefts):
        with no_grad():
            mean_t, _ = self.policy.forward(
                Tensor(obs, dtype=self.dtype), Tensor(tokens, dtype=self.dtype), t_lefts
            )
        return mean_t.data.astype(np.float64)

    def value_estimates(self, obs, tokens, t_lefts) -> np.ndarray:
        """(B, n_streams) critic values, no gradients."""
        with no_grad():
            cols = [
                c.forward(Tensor(obs, dtype=self.dtype), Tensor(tokens, dtype=self.dtype), t_lefts).data
                for c in self.critics
            ]
        return np.stack(cols, axis=-1).astype(np.float64)


def ppo_update(buffer: RolloutBuffer, ac: ActorCritic, cfg: PPOConfig,
               rng: np.random.Generator) -> dict:
    """One PPO optimization phase over a full rollout buffer.

    Advantages are computed per stream, normalized and mixed once; epochs
    and minibatches then optimize the clipped surrogate plus the per-stream
    critic losses. The learning rate adapts to the measured KL divergence
    against the pre-update policy.
    """
    n_streams = ac.n_streams
    advs = []
    targets = []
    for i in range(n_streams):
        if n_streams == 1:
            rew = single_critic_reward(
                buffer.rewards[:, :, 0], buffer.rewards[:, :, 1], buffer.rewards[:, :, 2],
                cfg.mixing_weights,
            )
        else:
            rew = buffer.rewards[:, :, i]
        a = compute_gae(
            rew, buffer.values[:, :, i], buffer.next_values[-1, :, i],
            buffer.dones, cfg.gamma, cfg.lam, next_values=buffer.next_values[:, :, i],
        )
        advs.append(a)
        if cfg.value_target == "gae_return":
            targets.append(a + buffer.values[:, :, i])
        else:
            targets.append(rew + cfg.gamma * buffer.next_values[:, :, i])
    weights = cfg.mixing_weights if n_streams > 1 else (1.0,)
    mixed = mix_advantages(advs, weights, cfg.norm_eps)

    B = buffer.batch
    obs = buffer.obs.reshape(B, -1)
    tokens = buffer.tokens.reshape(B, *buffer.tokens.shape[2:])
    t_lefts = buffer.t_lefts.reshape(B, -1)
    actions = buffer.actions.reshape(B, -1)
    logp_old = buffer.log_probs.reshape(B)
    mean_old = buffer.means.reshape(B, -1)
    mixed_flat = mixed.reshape(B)
    target_flat = [t.reshape(B) for t in targets]
    std_old = np.repeat(buffer.stds[:, None, :], buffer.N, axis=1).reshape(B, -1)

    mb = B // cfg.num_minibatches
    stats = {
        "loss_surrogate": 0.0,
        "loss_critics": [0.0] * n_streams,
        "approx_kl": 0.0,
        "entropy": 0.0,
    }
    n_updates = 0
    lr = ac.opt_policy.lr
    for _ in range(cfg.epochs):
        perm = rng.permutation(B)
        for m in range(cfg.num_minibatches):
            sel = perm[m * mb : (m + 1) * mb]
            obs_t = Tensor(obs[sel], dtype=ac.dtype)
            tok_t = Tensor(tokens[sel], dtype=ac.dtype)
            tl = t_lefts[sel]
            mean_t, std_t = ac.policy.forward(obs_t, tok_t, tl)
            logp_new = gaussian_log_prob(mean_t, std_t, actions[sel])
            entropy = gaussian_entropy(std_t)

            adv = mixed_flat[sel]
            ratio = T.exp(logp_new - Tensor(logp_old[sel], dtype=logp_new.dtype))
            adv_t = Tensor(adv, dtype=ratio.dtype)
            clipped = T.clip_const(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip)
            surr = -T.mean(T.minimum(ratio * adv_t, clipped * adv_t))
            loss = surr - cfg.entropy_coef * entropy
            c_losses = []
            for i, critic in enumerate(ac.critics):
                v = critic.forward(obs_t, tok_t, tl)
                cl = critic_loss(v, target_flat[i][sel])
                c_losses.append(cl)
                loss = loss + cfg.value_coef * cl
            if not np.isfinite(loss.data):
                raise FloatingPointError(
                    f"non-finite PPO loss ({loss.data}); aborting update"
                )

            zero_grads(ac.policy.params)
            for c in ac.critics:
                zero_grads(c.params)
            loss.backward()

            for params, opt in [(ac.policy.params, ac.opt_policy)] + [
                (c.params, o) for c, o in zip(ac.critics, ac.opt_critics)
            ]:
                grads = {k: p.grad for k, p in params.items() if p.grad is not None}
                clip_grad_norm(grads, cfg.max_grad_norm)
                opt.step(grads)

            # analytic KL(old || new) of the diagonal Gaussians
            mu_n = mean_t.data.astype(np.float64)
            sd_n = np.broadcast_to(std_t.data.astype(np.float64), mu_n.shape)
            mu_o = mean_old[sel]
            sd_o = std_old[sel]
            kl = (
                np.log(sd_n / sd_o)
                + (sd_o**2 + (mu_o - mu_n) ** 2) / (2.0 * sd_n**2)
                - 0.5
            ).sum(axis=-1).mean()
            if cfg.desired_kl is not None and cfg.desired_kl > 0:
                if kl > 2.0 * cfg.desired_kl:
                    lr = max(cfg.lr_range[0], lr / 1.5)
                elif kl < cfg.desired_kl / 2.0 and kl > 0.0:
                    lr = min(cfg.lr_range[1], lr * 1.5)
                ac.set_lr(lr)

            stats["loss_surrogate"] += surr.item()
            for i, cl in enumerate(c_losses):
                stats["loss_critics"][i] += cl.item()
            stats["approx_kl"] += float(kl)
            stats["entropy"] += entropy.item()
            n_updates += 1

    for k in ("loss_surrogate", "approx_kl", "entropy"):
        stats[k] /= n_updates
    stats["loss_critics"] = [v / n_updates for v in stats["loss_critics"]]
    stats["lr"] = lr
    return stats


METRICS_COLUMNS = (
    "iter",
    "env_steps",
    "success_rate",
    "mean_ep_len",
    "mean_r_task",
    "mean_r_reg",
    "mean_r_safety",
    "loss_surrogate",
    "loss_v1",
    "loss_v2",
    "loss_v3",
    "approx_kl",
    "lr",
    "max_joint_acc",
)


def collect_rollout(env: VecPlanarEnv, ac: ActorCritic, T_: int,
                    rng: np.random.Generator, episode_stats: deque) -> RolloutBuffer:
    """Roll the vectorized environment for T_ steps and fill a buffer."""
    buf = RolloutBuffer(
        T_, env.N, env.obs_width, (env.cfg.K + 1, env.token_width), env.n_j,
        ac.n_streams, ac.dtype,
    )
    obs = env.observations(ac.dtype)
    tokens = env.tokens(ac.dtype)
    t_lefts = env.t_lefts()
    live_prev = None
    max_acc_sum = 0.0
    for t in range(T_):
        actions, logp, mean, std = ac.act(obs, tokens, t_lefts, rng)
        values = ac.value_estimates(obs, tokens, t_lefts)
        if t > 0 and live_prev is not None and live_prev.any():
            buf.next_values[t - 1][live_prev] = values[live_prev]
        buf.obs[t] = obs
        buf.tokens[t] = tokens
        buf.t_lefts[t] = t_lefts
        buf.actions[t] = actions
        buf.log_probs[t] = logp
        buf.means[t] = mean
        buf.stds[t] = std
        buf.values[t] = values

        obs, tokens, rewards, terminated, truncated, info = env.step(actions)
        t_lefts = env.t_lefts()
        buf.rewards[t] = rewards
        done = terminated | truncated
        buf.dones[t] = done
        max_acc_sum += float(info["max_joint_acc"].mean())

        dd = info["done_indices"]
        if dd.size:
            # bootstrap truncated episodes with the terminal-state values
            trunc_mask = truncated[dd] & ~terminated[dd]
            if trunc_mask.any():
                ti = np.flatnonzero(trunc_mask)
                term_v = ac.value_estimates(
                    info["terminal_obs"][ti], info["terminal_tokens"][ti],
                    info["terminal_t_lefts"][ti],
                )
                buf.next_values[t][dd[ti]] = term_v
            for s, l in zip(info["episode_success"], info["episode_length"]):
                episode_stats.append((bool(s), int(l)))
        live_prev = ~done

    if live_prev.any():
        values = ac.value_estimates(obs, tokens, t_lefts)
        buf.next_values[T_ - 1][live_prev] = values[live_prev]
    buf.ptr = T_
    buf.mean_max_joint_acc = max_acc_sum / T_
    return buf


def train(
    env: VecPlanarEnv,
    ac: ActorCritic,
    cfg: PPOConfig,
    iterations: int,
    seed: int,
    on_iteration=None,
    stop_success: float | None = None,
) -> list[dict]:
    """Iterate collect/update and return one metrics row per iteration.

    Deterministic for a fixed (seed, config); the environment carries its
    own per-env streams, so results do not depend on worker threading.
    ``on_iteration(it, row)`` runs after each row (checkpointing hook).
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 7])))
    episode_stats: deque = deque(maxlen=200)
    rows = []
    env_steps = 0
    for it in range(1, iterations + 1):
        buf = collect_rollout(env, ac, cfg.rollout_length, rng, episode_stats)
        stats = ppo_update(buf, ac, cfg, rng)
        env_steps += buf.batch
        succ = (
            float(np.mean([s for s, _ in episode_stats])) if episode_stats else 0.0
        )
        ep_len = (
            float(np.mean([l for _, l in episode_stats])) if episode_stats else 0.0
        )
        c_losses = stats["loss_critics"] + [float("nan")] * (3 - len(stats["loss_critics"]))
        row = {
            "iter": it,
            "env_steps": env_steps,
            "success_rate": succ,
            "mean_ep_len": ep_len,
            "mean_r_task": float(buf.rewards[:, :, 0].mean()),
            "mean_r_reg": float(buf.rewards[:, :, 1].mean()),
            "mean_r_safety": float(buf.rewards[:, :, 2].mean()),
            "loss_surrogate": stats["loss_surrogate"],
            "loss_v1": c_losses[0],
            "loss_v2": c_losses[1],
            "loss_v3": c_losses[2],
            "approx_kl": stats["approx_kl"],
            "lr": stats["lr"],
            "max_joint_acc": buf.mean_max_joint_acc,
        }
        rows.append(row)
        if on_iteration is not None:
            on_iteration(it, row)
        if stop_success is not None and len(episode_stats) >= 50 and succ >= stop_success:
            break
    return rows


def evaluate(
    env: VecPlanarEnv,
    ac: ActorCritic,
    episodes: int,
    collect_traces: bool = True,
) -> dict:
    """Deterministic mean-action evaluation over complete episodes.

    Returns success rate, mean episode length, per-episode records and
    (optionally) per-step traces of the max joint acceleration with
    keyframe-reach markers.
    """
    if episodes < 1:
        raise ValueError(f"episodes must be >= 1, got {episodes}")
    N = env.N
    done_count = 0
    records = []
    traces = []
    slot_traces = [[] for _ in range(N)] if collect_traces else None
    obs = env.observations(ac.dtype)
    tokens = env.tokens(ac.dtype)
    t_lefts = env.t_lefts()
    guard = 0
    guard_limit = episodes * 100000
    while done_count < episodes:
        guard += N
        if guard > guard_limit:
            raise RuntimeError("evaluation did not finish within the step guard")
        actions = ac.act_mean(obs, tokens, t_lefts)
        obs, tokens, rewards, terminated, truncated, info = env.step(actions)
        t_lefts = env.t_lefts()
        if collect_traces:
            reach = info["consumed_keyframe"] >= 0
            for i in range(N):
                slot_traces[i].append((info["max_joint_acc"][i], reach[i]))
        dd = info["done_indices"]
        for j, i in enumerate(dd):
            if done_count >= episodes:
                break
            success = bool(info["episode_success"][j])
            length = int(info["episode_length"][j])
            records.append({"success": success, "length": length})
            if collect_traces:
                arr = np.array(slot_traces[i], dtype=np.float64)
                traces.append(
                    {"max_joint_acc": arr[:, 0], "reach": arr[:, 1].astype(bool)}
                )
            done_count += 1
        if collect_traces:
            for i in dd:
                slot_traces[i] = []
    report = {
        "episodes": records,
        "success_rate": float(np.mean([r["success"] for r in records])),
        "mean_episode_length": float(np.mean([r["length"] for r in records])),
    }
    return {"report": report, "traces": traces}
