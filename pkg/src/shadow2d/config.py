"""Run configuration: JSON schema, validation and object construction."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .kinematics import ChainError, KinematicChain, load_chain_file
from .motion import MOTION_KINDS, MotionTrajectory, gen_motion, load_motion_file
from .networks import EncoderConfig, NetworkConfig
from .rewards import RewardConfig, TerminationConfig
from .rl import PPOConfig
from .sim2d import DomainRand, EnvConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class MotionSpec:
    files: tuple[str, ...] = ()
    generate: tuple[dict, ...] = ()

    def validate(self, check_files: bool = True) -> "MotionSpec":
        if not self.files and not self.generate:
            raise ConfigError("motion: need at least one of 'files' or 'generate'")
        for f in self.files:
            if check_files and not os.path.exists(f):
                raise ConfigError(f"motion.files: '{f}' does not exist")
        for g in self.generate:
            if g.get("kind") not in MOTION_KINDS:
                raise ConfigError(
                    f"motion.generate: unknown kind '{g.get('kind')}' "
                    f"(choose from {MOTION_KINDS})"
                )
        return self


@dataclass(frozen=True)
class RunConfig:
    chain: str = "planar5"
    env: EnvConfig = field(default_factory=EnvConfig)
    domain_rand: DomainRand = field(default_factory=DomainRand)
    randomize: bool = True
    reward: RewardConfig = field(default_factory=RewardConfig)
    termination: TerminationConfig = field(default_factory=TerminationConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    dtype: str = "float32"
    ppo: PPOConfig = field(default_factory=PPOConfig)
    motion: MotionSpec = field(default_factory=MotionSpec)
    iterations: int = 1000
    seed: int = 0
    out_dir: str = "runs/out"

    def np_dtype(self):
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype: '{self.dtype}' not in (float32, float64)")
        return np.float32 if self.dtype == "float32" else np.float64

    def load_chain(self) -> KinematicChain:
        try:
            return load_chain_file(self.chain)
        except ChainError as e:
            raise ConfigError(f"chain: {e}") from e

    def load_motions(self, chain: KinematicChain) -> list[MotionTrajectory]:
        out = [load_motion_file(f) for f in self.motion.files]
        for g in self.motion.generate:
            out.append(
                gen_motion(
                    g["kind"], chain,
                    duration=g.get("duration"),
                    fps=g.get("fps", 50.0),
                )
            )
        for m in out:
            if m.joint_count != chain.n_joints:
                raise ConfigError(
                    f"motion has {m.joint_count} joints but chain has {chain.n_joints}"
                )
        return out


def _build(dc_type, data: dict, path: str):
    """Construct a flat dataclass from a dict, rejecting unknown keys."""
    names = {f.name for f in dataclasses.fields(dc_type)}
    kwargs = {}
    for key, value in data.items():
        if key not in names:
            raise ConfigError(f"{path}.{key}: unknown field")
        if isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return dc_type(**kwargs)
    except TypeError as e:
        raise ConfigError(f"{path}: {e}") from e


def run_config_from_dict(doc: dict, check_files: bool = True) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("$: config root must be an object")
    known = {
        "chain", "env", "domain_rand", "randomize", "reward", "termination",
        "network", "dtype", "ppo", "motion", "iterations", "seed", "out_dir",
    }
    for k in doc:
        if k not in known:
            raise ConfigError(f"$.{k}: unknown section")
    enc = doc.get("network", {}).get("encoder", {})
    network = _build(
        NetworkConfig,
        {**{k: v for k, v in doc.get("network", {}).items() if k != "encoder"}},
        "$.network",
    )
    network = dataclasses.replace(network, encoder=_build(EncoderConfig, enc, "$.network.encoder"))
    cfg = RunConfig(
        chain=doc.get("chain", "planar5"),
        env=_build(EnvConfig, doc.get("env", {}), "$.env"),
        domain_rand=_build(DomainRand, doc.get("domain_rand", {}), "$.domain_rand"),
        randomize=bool(doc.get("randomize", True)),
        reward=_build(RewardConfig, doc.get("reward", {}), "$.reward"),
        termination=_build(TerminationConfig, doc.get("termination", {}), "$.termination"),
        network=network,
        dtype=doc.get("dtype", "float32"),
        ppo=_build(PPOConfig, doc.get("ppo", {}), "$.ppo"),
        motion=_build(MotionSpec, doc.get("motion", {}), "$.motion"),
        iterations=int(doc.get("iterations", 1000)),
        seed=int(doc.get("seed", 0)),
        out_dir=doc.get("out_dir", "runs/out"),
    )
    validate_run_config(cfg, check_files=check_files)
    return cfg


def validate_run_config(cfg: RunConfig, check_files: bool = True):
    try:
        cfg.env.validate()
        cfg.reward.validate()
        cfg.termination.validate()
        cfg.network.encoder.validate()
        cfg.ppo.validate()
        cfg.motion.validate(check_files)
        cfg.np_dtype()
    except (ValueError, ConfigError) as e:
        raise ConfigError(str(e)) from e
    if cfg.iterations < 1:
        raise ConfigError(f"iterations: must be >= 1, got {cfg.iterations}")
    # the observation stack length is owned by the network section
    if cfg.env.history != cfg.network.history:
        raise ConfigError(
            f"env.history ({cfg.env.history}) must equal network.history "
            f"({cfg.network.history}); set only network.history"
        )


def load_run_config(path: str, overrides: dict | None = None) -> RunConfig:
    try:
        with open(path) as f:
            doc = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file '{path}' does not exist") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config '{path}': invalid JSON: {e}") from e
    if overrides:
        doc = {**doc, **overrides}
    # keep env.history in lockstep with network.history unless explicitly set
    net_h = doc.get("network", {}).get("history")
    if net_h is not None and "history" not in doc.get("env", {}):
        doc.setdefault("env", {})["history"] = net_h
    return run_config_from_dict(doc)


def run_config_to_dict(cfg: RunConfig) -> dict:
    def enc(obj):
        if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
            return {f.name: enc(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
        if isinstance(obj, tuple):
            return [enc(v) for v in obj]
        if isinstance(obj, np.ndarray):
            return obj.tolist()
        return obj

    return enc(cfg)
