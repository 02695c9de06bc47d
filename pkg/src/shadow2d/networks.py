"""Policy, critics and the transformer command encoder.

All modules are plain parameter dictionaries (name -> Tensor) plus a
forward function, so optimizers and checkpoints can treat every network as
a flat list of named tensors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class EncoderConfig:
    num_heads: int = 1
    num_layers: int = 2
    d_model: int = 128
    feedforward: int = 128
    output: int = 128

    def validate(self) -> "EncoderConfig":
        if self.d_model % self.num_heads != 0:
            raise ValueError(
                f"encoder d_model {self.d_model} not divisible by num_heads {self.num_heads}"
            )
        if min(self.num_heads, self.num_layers, self.d_model, self.feedforward, self.output) <= 0:
            raise ValueError("encoder dimensions must be positive")
        return self


@dataclass(frozen=True)
class NetworkConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    mlp_hidden: tuple[int, ...] = (512, 256, 256)
    history: int = 5  # stacked proprioception frames
    min_std: float = 0.2
    init_log_std: float = 0.0  # ln(1.0)


def _linear_params(rng: np.random.Generator, n_in: int, n_out: int, dtype) -> tuple[Tensor, Tensor]:
    bound = math.sqrt(1.0 / n_in)
    w = Tensor(rng.uniform(-bound, bound, size=(n_in, n_out)), requires_grad=True, dtype=dtype)
    b = Tensor(rng.uniform(-bound, bound, size=(n_out,)), requires_grad=True, dtype=dtype)
    return w, b


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return (x @ w) + b


class CommandEncoder:
    """Pre-norm transformer over command tokens, no positional encoding.

    The per-token clock features (t_passed, t_left) carry the ordering, so
    the encoder is deliberately permutation-equivariant.
    """

    def __init__(self, cfg: EncoderConfig, token_width: int, rng: np.random.Generator, dtype=np.float64):
        cfg.validate()
        self.cfg = cfg
        self.token_width = token_width
        d = cfg.d_model
        p: dict[str, Tensor] = {}
        p["proj_w"], p["proj_b"] = _linear_params(rng, token_width, d, dtype)
        for i in range(cfg.num_layers):
            p[f"l{i}_ln1_g"] = Tensor(np.ones(d), requires_grad=True, dtype=dtype)
            p[f"l{i}_ln1_b"] = Tensor(np.zeros(d), requires_grad=True, dtype=dtype)
            p[f"l{i}_wqkv"], p[f"l{i}_bqkv"] = _linear_params(rng, d, 3 * d, dtype)
            p[f"l{i}_wo"], p[f"l{i}_bo"] = _linear_params(rng, d, d, dtype)
            p[f"l{i}_ln2_g"] = Tensor(np.ones(d), requires_grad=True, dtype=dtype)
            p[f"l{i}_ln2_b"] = Tensor(np.zeros(d), requires_grad=True, dtype=dtype)
            p[f"l{i}_ff1_w"], p[f"l{i}_ff1_b"] = _linear_params(rng, d, cfg.feedforward, dtype)
            p[f"l{i}_ff2_w"], p[f"l{i}_ff2_b"] = _linear_params(rng, cfg.feedforward, d, dtype)
        p["lnf_g"] = Tensor(np.ones(d), requires_grad=True, dtype=dtype)
        p["lnf_b"] = Tensor(np.zeros(d), requires_grad=True, dtype=dtype)
        p["out_w"], p["out_b"] = _linear_params(rng, d, cfg.output, dtype)
        self.params = p

    def forward(self, tokens: Tensor) -> Tensor:
        """(B, T, token_width) -> (B, T, output)."""
        if tokens.shape[-1] != self.token_width:
            raise ValueError(
                f"encoder got token width {tokens.shape[-1]}, expected {self.token_width}"
            )
        cfg = self.cfg
        p = self.params
        h = cfg.num_heads
        dh = cfg.d_model // h
        x = T.relu(_linear(tokens, p["proj_w"], p["proj_b"]))
        B, S = x.shape[0], x.shape[1]
        for i in range(cfg.num_layers):
            xn = T.layer_norm(x, p[f"l{i}_ln1_g"], p[f"l{i}_ln1_b"])
            qkv = _linear(xn, p[f"l{i}_wqkv"], p[f"l{i}_bqkv"])  # (B, S, 3d)
            qkv = T.reshape(qkv, (B, S, 3, h, dh))
            qkv = T.swapaxes(T.swapaxes(qkv, 1, 2), 2, 3)  # (B, 3, h, S, dh)
            q, k, v = qkv[:, 0], qkv[:, 1], qkv[:, 2]
            scores = (q @ T.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh))
            attn = T.softmax(scores) @ v  # (B, h, S, dh)
            attn = T.reshape(T.swapaxes(attn, 1, 2), (B, S, cfg.d_model))
            x = x + _linear(attn, p[f"l{i}_wo"], p[f"l{i}_bo"])
            xn = T.layer_norm(x, p[f"l{i}_ln2_g"], p[f"l{i}_ln2_b"])
            ff = _linear(T.gelu(_linear(xn, p[f"l{i}_ff1_w"], p[f"l{i}_ff1_b"])), p[f"l{i}_ff2_w"], p[f"l{i}_ff2_b"])
            x = x + ff
        x = T.layer_norm(x, p["lnf_g"], p["lnf_b"])
        return _linear(x, p["out_w"], p["out_b"])


def select_embedding(
    embeddings: Tensor, t_lefts: np.ndarray, state_target_index: int
) -> tuple[Tensor, np.ndarray]:
    """Pick, per batch row, the token with the smallest strictly positive
    time-left value; fall back to the state target when none is positive.

    Gradients flow only through the selected tokens.
    """
    t_lefts = np.atleast_2d(np.asarray(t_lefts))
    masked = np.where(t_lefts > 0.0, t_lefts, np.inf)
    idx = masked.argmin(axis=-1)
    none_positive = ~np.isfinite(masked.min(axis=-1))
    idx = np.where(none_positive, state_target_index, idx)
    return T.take_tokens(embeddings, idx), idx


class MLP:
    def __init__(self, sizes: list[int], rng: np.random.Generator, dtype=np.float64):
        self.sizes = list(sizes)
        self.params = {}
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            self.params[f"w{i}"], self.params[f"b{i}"] = _linear_params(rng, n_in, n_out, dtype)
        self.n_layers = len(sizes) - 1

    def forward(self, x: Tensor) -> Tensor:
        for i in range(self.n_layers):
            x = _linear(x, self.params[f"w{i}"], self.params[f"b{i}"])
            if i < self.n_layers - 1:
                x = T.elu(x)
        return x


class PolicyNet:
    """Command encoder + MLP torso + diagonal Gaussian head."""

    def __init__(
        self,
        obs_width: int,
        token_width: int,
        n_actions: int,
        cfg: NetworkConfig,
        rng: np.random.Generator,
        dtype=np.float64,
    ):
        self.cfg = cfg
        self.encoder = CommandEncoder(cfg.encoder, token_width, rng, dtype)
        sizes = [cfg.encoder.output + obs_width, *cfg.mlp_hidden, n_actions]
        self.mlp = MLP(sizes, rng, dtype)
        self.log_std = Tensor(
            np.full(n_actions, cfg.init_log_std), requires_grad=True, dtype=dtype
        )
        self.params = {
            **{f"enc.{k}": v for k, v in self.encoder.params.items()},
            **{f"mlp.{k}": v for k, v in self.mlp.params.items()},
            "log_std": self.log_std,
        }

    def forward(self, obs: Tensor, tokens: Tensor, t_lefts: np.ndarray) -> tuple[Tensor, Tensor]:
        """Returns (mean (B, n_actions), std (n_actions,))."""
        emb = self.encoder.forward(tokens)
        sel, _ = select_embedding(emb, t_lefts, tokens.shape[1] - 1)
        mean_out = self.mlp.forward(T.concat([sel, obs], axis=-1))
        std = T.maximum_const(T.exp(self.log_std), self.cfg.min_std)
        return mean_out, std


class CriticNet:
    """Same structure as the policy, scalar output head."""

    def __init__(
        self,
        obs_width: int,
        token_width: int,
        cfg: NetworkConfig,
        rng: np.random.Generator,
        dtype=np.float64,
    ):
        self.cfg = cfg
        self.encoder = CommandEncoder(cfg.encoder, token_width, rng, dtype)
        sizes = [cfg.encoder.output + obs_width, *cfg.mlp_hidden, 1]
        self.mlp = MLP(sizes, rng, dtype)
        self.params = {
            **{f"enc.{k}": v for k, v in self.encoder.params.items()},
            **{f"mlp.{k}": v for k, v in self.mlp.params.items()},
        }

    def forward(self, obs: Tensor, tokens: Tensor, t_lefts: np.ndarray) -> Tensor:
        emb = self.encoder.forward(tokens)
        sel, _ = select_embedding(emb, t_lefts, tokens.shape[1] - 1)
        v = self.mlp.forward(T.concat([sel, obs], axis=-1))
        return T.reshape(v, (v.shape[0],))


_LOG_2PI = math.log(2.0 * math.pi)


def gaussian_log_prob(mean_t: Tensor, std: Tensor, action: np.ndarray) -> Tensor:
    """Per-sample log density of a diagonal Gaussian, summed over dims."""
    a = Tensor(np.asarray(action), dtype=mean_t.dtype)
    z = (a - mean_t) / std
    n = mean_t.shape[-1]
    quad = T.sum_(T.square(z), axis=-1)
    log_det = T.sum_(T.log(std))
    return -0.5 * quad - log_det - 0.5 * n * _LOG_2PI


def gaussian_entropy(std: Tensor) -> Tensor:
    """Entropy of the diagonal Gaussian policy head."""
    n = std.shape[-1]
    return T.sum_(T.log(std)) + 0.5 * n * (1.0 + _LOG_2PI)


def param_count(params: dict[str, Tensor]) -> int:
    return sum(int(np.prod(p.shape)) for p in params.values())


def zero_grads(params: dict[str, Tensor]):
    for p in params.values():
        p.zero_grad()
