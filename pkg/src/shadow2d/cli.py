"""Command line interface: gen-motion, train, eval, replay, plot, gradcheck.

Exit codes: 0 success, 2 configuration/input error, 3 runtime or dimension
error. Every command is deterministic given its config and seed, and all
outputs land under the requested output location. The SHADOW_THREADS
environment variable caps simulation worker threads (results are
bit-identical for any worker count).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, load_params_into, save_checkpoint
from .config import ConfigError, RunConfig, load_run_config, run_config_from_dict, run_config_to_dict
from .gradcheck import run_gradient_suite
from .kinematics import ChainError, load_chain_file
from .motion import MotionError, gen_motion, load_motion_file, save_motion
from .plotting import line_chart, write_chart
from .rl import METRICS_COLUMNS, ActorCritic, evaluate, train
from .sim2d import SimError, VecPlanarEnv


def _build_env(cfg: RunConfig, seed: int, num_envs: int | None = None,
               motions=None, chain=None) -> VecPlanarEnv:
    if chain is None:
        chain = cfg.load_chain()
    if motions is None:
        motions = cfg.load_motions(chain)
    return VecPlanarEnv(
        chain,
        cfg.env,
        motions,
        num_envs if num_envs is not None else cfg.ppo.num_envs,
        seed=seed,
        reward_cfg=cfg.reward,
        term_cfg=cfg.termination,
        rand_cfg=cfg.domain_rand,
        randomize=cfg.randomize,
        dtype=cfg.np_dtype(),
    )


def _build_actor_critic(cfg: RunConfig, env: VecPlanarEnv, mode: str, seed: int) -> ActorCritic:
    n_streams = 3 if mode == "multi" else 1
    return ActorCritic(
        env.obs_width,
        env.token_width,
        env.n_j,
        cfg.network,
        cfg.ppo,
        n_streams,
        seed,
        dtype=cfg.np_dtype(),
    )


def _format_row(row: dict) -> str:
    return ",".join(f"{row[c]:.10g}" if isinstance(row[c], float) else str(row[c])
                    for c in METRICS_COLUMNS)


def cmd_gen_motion(args) -> int:
    chain = load_chain_file(args.chain)
    traj = gen_motion(args.kind, chain, duration=args.duration, fps=args.fps)
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    with open(args.out, "w") as f:
        f.write(save_motion(traj))
    print(f"wrote {traj.n_frames} frames ({traj.duration:.2f} s) to {args.out}")
    return 0


def cmd_train(args) -> int:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.iterations is not None:
        overrides["iterations"] = args.iterations
    if args.out is not None:
        overrides["out_dir"] = args.out
    cfg = load_run_config(args.config, overrides)
    seed = cfg.seed
    os.makedirs(cfg.out_dir, exist_ok=True)
    chain = cfg.load_chain()
    motions = cfg.load_motions(chain)
    env = _build_env(cfg, seed, motions=motions, chain=chain)
    ac = _build_actor_critic(cfg, env, args.mode, seed)
    cfg_dict = run_config_to_dict(cfg)

    metrics_path = os.path.join(cfg.out_dir, "metrics.csv")
    ckpt_path = os.path.join(cfg.out_dir, "checkpoint.ckpt")
    f = open(metrics_path, "w")
    f.write("# schema=1\n")
    f.write(",".join(METRICS_COLUMNS) + "\n")
    print_every = max(1, cfg.iterations // 50)

    def save(it):
        save_checkpoint(
            ckpt_path,
            {k: p.data for k, p in ac.all_params().items()},
            cfg_dict,
            it,
            args.mode,
            rng_state={"seed": seed},
        )

    def on_iteration(it, row):
        f.write(_format_row(row) + "\n")
        f.flush()
        if it % print_every == 0 or it == cfg.iterations:
            print(
                f"iter {it:5d}  success {row['success_rate']:.3f}  "
                f"r_task {row['mean_r_task']:.4f}  kl {row['approx_kl']:.4f}  "
                f"lr {row['lr']:.2e}"
            )
        if it % cfg.ppo.checkpoint_every == 0:
            save(it)

    try:
        rows = train(env, ac, cfg.ppo, cfg.iterations, seed, on_iteration=on_iteration)
    finally:
        f.close()
    save(len(rows))
    print(f"wrote {metrics_path} and {ckpt_path}")
    return 0


def _restore(checkpoint_path: str, motion_path: str, num_envs: int, seed: int,
             randomize: bool = True):
    manifest, arrays = load_checkpoint(checkpoint_path)
    cfg = run_config_from_dict(manifest["config"], check_files=False)
    chain = cfg.load_chain()
    traj = load_motion_file(motion_path)
    if traj.joint_count != chain.n_joints:
        raise SimError(
            f"motion has {traj.joint_count} joints, checkpoint chain has {chain.n_joints}"
        )
    env = VecPlanarEnv(
        chain, cfg.env, [traj], num_envs, seed=seed,
        reward_cfg=cfg.reward, term_cfg=cfg.termination, rand_cfg=cfg.domain_rand,
        randomize=randomize, dtype=cfg.np_dtype(),
    )
    ac = _build_actor_critic(cfg, env, manifest["mode"], seed)
    load_params_into(ac.all_params(), arrays)
    return manifest, cfg, env, ac


def cmd_eval(args) -> int:
    if args.episodes < 1:
        raise ConfigError(f"--episodes must be >= 1, got {args.episodes}")
    os.makedirs(args.out, exist_ok=True)
    num_envs = min(args.episodes, 64)
    manifest, cfg, env, ac = _restore(args.checkpoint, args.motion, num_envs, args.seed)
    result = evaluate(env, ac, args.episodes)
    report = result["report"]
    report["checkpoint_iteration"] = manifest["iteration"]
    report["mode"] = manifest["mode"]
    report["seed"] = args.seed
    with open(os.path.join(args.out, "report.json"), "w") as f:
        json.dump(report, f, indent=1)
    with open(os.path.join(args.out, "traces.csv"), "w") as f:
        f.write("# schema=1\n")
        f.write("episode,step,max_joint_acc,reach\n")
        for e, tr in enumerate(result["traces"]):
            for s, (acc, reach) in enumerate(zip(tr["max_joint_acc"], tr["reach"])):
                f.write(f"{e},{s},{acc:.10g},{int(reach)}\n")
    print(
        f"evaluated {len(report['episodes'])} episodes: "
        f"success_rate {report['success_rate']:.3f}, "
        f"mean length {report['mean_episode_length']:.1f}"
    )
    return 0


def cmd_replay(args) -> int:
    manifest, cfg, env, ac = _restore(args.checkpoint, args.motion, 1, args.seed,
                                      randomize=False)
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    lines = []
    done = False
    steps = 0
    while not done and steps < 100000:
        obs = env.observations(ac.dtype)
        tokens = env.tokens(ac.dtype)
        state = env.get_state(0)
        seq = env.command_sequence(0)
        action = ac.act_mean(obs, tokens, env.t_lefts())
        _, _, rewards, term, trunc, info = env.step(action)
        done = bool(term[0] or trunc[0])
        lines.append(
            {
                "t": state.time,
                "base_p": state.base.p.tolist(),
                "base_q": state.base.q.wxyz().tolist(),
                "base_linvel": state.base_linvel.tolist(),
                "base_angvel": state.base_angvel.tolist(),
                "theta": state.theta.tolist(),
                "theta_dot": state.theta_dot.tolist(),
                "action": action[0].tolist(),
                "rewards": rewards[0].tolist(),
                "terminated": bool(term[0]),
                "truncated": bool(trunc[0]),
                "command": {
                    "t_refresh": seq.t_refresh,
                    "reach_times": seq.reach_times.tolist(),
                    "frames": [
                        {
                            "p_b": fr.p_b.tolist(),
                            "aa_b": fr.aa_b.tolist(),
                            "theta_ref": fr.theta_ref.tolist(),
                            "t_passed": fr.t_passed,
                            "t_left": fr.t_left,
                            "is_state_target": fr.is_state_target,
                        }
                        for fr in seq.frames
                    ],
                },
            }
        )
        steps += 1
    with open(args.out, "w") as f:
        for line in lines:
            f.write(json.dumps(line) + "\n")
    print(f"replayed {steps} steps to {args.out}")
    return 0


def _read_csv(path: str) -> tuple[list[str], list[list[str]]]:
    header = None
    rows = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            cells = line.split(",")
            if header is None:
                header = cells
                continue
            if len(cells) != len(header):
                raise ConfigError(
                    f"{path}:{lineno}: expected {len(header)} columns, got {len(cells)}"
                )
            try:
                [float(c) for c in cells]
            except ValueError:
                raise ConfigError(f"{path}:{lineno}: non-numeric cell") from None
            rows.append(cells)
    if header is None:
        raise ConfigError(f"{path}: empty CSV")
    return header, rows


def cmd_plot(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    metric_series = {"success": [], "acc": []}
    trace_files = []
    for path in args.metrics:
        header, rows = _read_csv(path)
        label = os.path.splitext(os.path.basename(path))[0]
        if header[:2] == ["episode", "step"]:
            trace_files.append((label, header, rows))
            continue
        if tuple(header) != METRICS_COLUMNS:
            raise ConfigError(
                f"{path}: unrecognized CSV schema (columns {header[:4]}...)"
            )
        data = np.array(rows, dtype=float)
        it = data[:, METRICS_COLUMNS.index("iter")]
        metric_series["success"].append(
            {"label": label, "x": it, "y": data[:, METRICS_COLUMNS.index("success_rate")]}
        )
        metric_series["acc"].append(
            {"label": label, "x": it, "y": data[:, METRICS_COLUMNS.index("max_joint_acc")]}
        )
    written = []
    if metric_series["success"]:
        p = os.path.join(args.out, "success_rate.svg")
        write_chart(p, line_chart(metric_series["success"], "Training success rate",
                                  "iteration", "success rate"))
        written.append(p)
        p = os.path.join(args.out, "joint_acc.svg")
        write_chart(p, line_chart(metric_series["acc"], "Mean max joint acceleration",
                                  "iteration", "rad/s^2"))
        written.append(p)
    for label, header, rows in trace_files:
        data = np.array(rows, dtype=float)
        ep0 = data[data[:, 0] == data[0, 0]]
        steps = ep0[:, 1]
        acc = ep0[:, 2]
        reach = ep0[:, 3] > 0.5
        markers = [(s, a) for s, a, r in zip(steps, acc, reach) if r]
        p = os.path.join(args.out, f"joint_acc_trace_{label}.svg")
        write_chart(
            p,
            line_chart(
                [{"label": label, "x": steps, "y": acc}],
                "Max joint acceleration (markers: keyframe reached)",
                "step", "rad/s^2", markers=markers,
            ),
        )
        written.append(p)
    if not written:
        raise ConfigError("no recognizable CSV inputs")
    for p in written:
        print(f"wrote {p}")
    return 0


def cmd_gradcheck(args) -> int:
    results = run_gradient_suite()
    worst = 0.0
    failed = 0
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{status:4s} {r.name:28s} max_rel_err {r.max_rel_err:.3e} (tol {r.tol:g})")
        worst = max(worst, r.max_rel_err)
        failed += 0 if r.passed else 1
    print(f"{len(results) - failed}/{len(results)} checks passed, worst {worst:.3e}")
    if failed:
        raise SimError(f"{failed} gradient checks failed")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="shadow2d",
        description="Keyframe motion shadowing on a planar robot: training and tools",
    )
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-motion", help="generate a bundled motion reference file")
    g.add_argument("--kind", required=True, choices=["getup-2d", "crouch", "stand-reach"])
    g.add_argument("--chain", required=True, help="chain file path or bundled name")
    g.add_argument("--out", required=True, help="output motion JSON path")
    g.add_argument("--duration", type=float, default=None)
    g.add_argument("--fps", type=float, default=50.0)
    g.set_defaults(func=cmd_gen_motion)

    t = sub.add_parser("train", help="train a shadowing policy")
    t.add_argument("--config", required=True)
    t.add_argument("--mode", choices=["multi", "single"], default="multi")
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--iterations", type=int, default=None)
    t.add_argument("--out", default=None, help="override the config output directory")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--motion", required=True)
    e.add_argument("--episodes", type=int, required=True)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", default="eval_out")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("replay", help="dump a deterministic rollout as JSON lines")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--motion", required=True)
    r.add_argument("--out", required=True, help="output frames.json path")
    r.add_argument("--seed", type=int, default=0)
    r.set_defaults(func=cmd_replay)

    pl = sub.add_parser("plot", help="render SVG charts from metrics/trace CSVs")
    pl.add_argument("--metrics", nargs="+", required=True)
    pl.add_argument("--out", required=True)
    pl.set_defaults(func=cmd_plot)

    gc = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    gc.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args) or 0
    except (ConfigError, ChainError, MotionError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (SimError, CheckpointError, FloatingPointError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
