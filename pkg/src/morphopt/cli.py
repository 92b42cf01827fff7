"""Command-line entry points.

Four commands tie the pipeline together: meta-train produces a
design-conditioned policy checkpoint, optimize searches the design space
with CMA-ES on top of that checkpoint, cost-map sweeps a design grid, and
eval scores one design. Every command is reproducible from (config, seed,
checkpoint): file outputs carry no timestamps, wall-clock timing goes to
stderr only, and worker count never changes results.

Exit codes: 0 success, 2 configuration error, 3 checkpoint error,
4 runtime divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from dataclasses import replace

import numpy as np

from .config import load_config
from .designopt import (
    COST_METRICS,
    UndefinedMetricError,
    cost_map,
    mcot,
    optimize_design,
)
from .env import Env, EnvPool, observation_dim
from .maml import MetaHyper, inner_adapt, load_meta_checkpoint, meta_train
from .morphology import ConfigurationError, DesignParams, build_robot
from .nn import CheckpointError, forward
from .ppo import evaluate_policy
from .seeding import rng_for
from .sim import SimulationDiverged
from .terrain import DIFFICULTY_PRESETS, TERRAIN_KINDS

__all__ = ["main"]

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_CHECKPOINT = 3
EXIT_DIVERGED = 4

OUTPUT_DIR_ENV = "MORPHOPT_OUTPUT_DIR"

METRIC_ALIASES = {
    "velocity": "velocity_tracking",
    "torque": "weighted_torque",
    "power": "weighted_power",
    "mcot": "mcot",
}


# --------------------------------------------------------------------------
# shared helpers


def _resolve_outdir(args, cfg) -> str:
    outdir = os.environ.get(OUTPUT_DIR_ENV) or args.output_dir or cfg.output_dir
    os.makedirs(outdir, exist_ok=True)
    return outdir


def _resolve_metric(name: str | None, cfg) -> str:
    if name is None:
        return cfg.metric
    return METRIC_ALIASES.get(name, name)


def _resolve_terrain(spec: str | None, cfg):
    """--terrain KIND[:PRESET] or bare PRESET; None keeps the config value."""
    if spec is None:
        return cfg.terrain
    kind, _, preset = spec.partition(":")
    terrain = cfg.terrain
    if kind in TERRAIN_KINDS:
        terrain = replace(terrain, kind=kind)
    elif kind in DIFFICULTY_PRESETS and not preset:
        kind, preset = "", kind
    else:
        raise ConfigurationError(
            f"terrain must be KIND[:PRESET] with kind in {TERRAIN_KINDS} "
            f"and preset in {tuple(DIFFICULTY_PRESETS)}"
        )
    if preset:
        if preset not in DIFFICULTY_PRESETS:
            raise ConfigurationError(f"unknown difficulty preset {preset!r}")
        terrain = replace(terrain, difficulty=DIFFICULTY_PRESETS[preset])
    return terrain


def _load_policy(path, cfg):
    """Load a meta checkpoint and check it against the config's observation width."""
    try:
        layout, params, extra = load_meta_checkpoint(path)
    except (ValueError, OSError) as err:
        raise CheckpointError(f"cannot load policy checkpoint {path}: {err}") from err
    expected = observation_dim(cfg.space.dim)
    if layout.obs_dim != expected:
        raise CheckpointError(
            f"checkpoint expects {layout.obs_dim}-wide observations but the "
            f"config's design space needs {expected}"
        )
    return layout, params, extra


def _write_json(path, payload):
    with open(path, "w") as handle:
        json.dump(payload, handle, indent=2, sort_keys=True)
        handle.write("\n")


def _design_from_values(values, cfg) -> DesignParams:
    if len(values) not in (2, 4):
        raise ConfigurationError("--design takes 2 or 4 numbers")
    if len(values) != cfg.space.dim:
        raise ConfigurationError(
            f"--design has {len(values)} numbers but the design space is {cfg.space.dim}-D"
        )
    design = cfg.space.to_design(np.asarray(values, dtype=np.float64))
    if not cfg.space.contains(design):
        raise ConfigurationError(f"design {values} lies outside the design space")
    return design


# --------------------------------------------------------------------------
# commands


def cmd_meta_train(args) -> int:
    cfg = load_config(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    outdir = _resolve_outdir(args, cfg)
    hyper = cfg.meta if args.updates is None else replace(cfg.meta, updates=args.updates)

    started = time.perf_counter()
    layout, params, log = meta_train(
        cfg.space, hyper,
        seed=seed, terrain=cfg.terrain, env_config=cfg.env, ppo_hyper=cfg.ppo,
        checkpoint_dir=outdir, resume_from=args.resume,
        log_file=os.path.join(outdir, "meta_train_log.jsonl"),
        progress=lambda rec: print(
            f"update {rec['update']:5d}  difficulty {rec['difficulty']:.3f}  "
            f"adapted reward {rec['adapted_mean_reward']:+.4f}"
        ),
    )
    print(f"final checkpoint: {os.path.join(outdir, 'meta_final.ckpt')}")
    print(f"updates run: {len(log)}")
    print(f"wall time: {time.perf_counter() - started:.1f}s", file=sys.stderr)
    return EXIT_OK


def cmd_optimize(args) -> int:
    cfg = load_config(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    outdir = _resolve_outdir(args, cfg)
    metric = _resolve_metric(args.metric, cfg)
    if metric not in COST_METRICS:
        raise ConfigurationError(f"unknown metric {args.metric!r}")
    terrain = _resolve_terrain(args.terrain, cfg)
    layout, params, _ = _load_policy(args.policy, cfg)

    generations = cfg.generations if args.generations is None else args.generations
    population = cfg.population if args.population is None else args.population
    # generations = 0 still evaluates the initial population (one sampled
    # generation, recorded before any distribution update would matter)
    effective_generations = max(1, generations)

    started = time.perf_counter()
    report = optimize_design(
        layout, params, cfg.space, metric,
        seed=seed, generations=effective_generations, population=population,
        env_config=replace(cfg.env, terrain=terrain), nominal=cfg.nominal,
        inner_steps=cfg.adapt_steps, rollout_length=cfg.adapt_rollout,
        eval_transitions=cfg.eval_transitions, n_envs=cfg.eval_envs,
        penalty_weight=cfg.penalty_weight, workers=args.workers,
        progress=lambda rec: print(
            f"generation {rec['generation']:3d}  best cost {rec['best_cost']:.6f}"
        ),
    )
    if generations == 0:
        report.generations = report.generations[:1]

    report_path = os.path.join(outdir, f"optimize_{metric}.json")
    with open(report_path, "w") as handle:
        handle.write(report.to_json())
        handle.write("\n")

    csv_path = os.path.join(outdir, f"optimize_{metric}_generations.csv")
    design_cols = ["thigh_scale", "shank_scale"]
    if cfg.space.dim == 4:
        design_cols += ["hip_gear", "knee_gear"]
    with open(csv_path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["generation", "best_cost", "mean_cost", *design_cols])
        for g in report.generations:
            writer.writerow([
                g["generation"], repr(g["best_cost"]),
                repr(float(np.mean(g["fitness"]))),
                *[repr(float(x)) for x in g["best_design"]],
            ])

    best = ", ".join(f"{c}={v:.4f}" for c, v in zip(design_cols, report.best_design))
    print(f"metric: {metric}")
    print(f"best design: {best}")
    print(f"best cost (search): {report.best_cost:.6f}")
    print(f"best cost (paired re-eval): {report.best_cost_paired:.6f}")
    print(f"nominal cost (paired re-eval): {report.nominal_cost:.6f}")
    print(f"improvement vs nominal: {report.improvement_vs_nominal:.2f}%")
    print(f"report: {report_path}")
    print(f"wall time: {time.perf_counter() - started:.1f}s", file=sys.stderr)
    return EXIT_OK


def cmd_cost_map(args) -> int:
    cfg = load_config(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    outdir = _resolve_outdir(args, cfg)
    metric = _resolve_metric(args.metric, cfg)
    if metric not in COST_METRICS:
        raise ConfigurationError(f"unknown metric {args.metric!r}")
    terrain = _resolve_terrain(args.terrain, cfg)
    layout, params, _ = _load_policy(args.policy, cfg)

    started = time.perf_counter()
    matrix, argmin_cell, rows = cost_map(
        layout, params, cfg.space, metric, args.grid,
        seed=seed, env_config=replace(cfg.env, terrain=terrain),
        nominal=cfg.nominal, inner_steps=cfg.adapt_steps,
        rollout_length=cfg.adapt_rollout, eval_transitions=cfg.eval_transitions,
        n_envs=cfg.eval_envs, workers=args.workers,
    )

    csv_path = os.path.join(outdir, f"cost_map_{metric}.csv")
    with open(csv_path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["thigh_scale", "shank_scale", "cost"])
        for thigh, shank, cost in rows:
            writer.writerow([repr(thigh), repr(shank), repr(cost)])

    if argmin_cell is None:
        print("argmin: none (every cell failed)")
    else:
        i, j = argmin_cell
        print(
            f"argmin cell ({i}, {j}): thigh_scale={rows[i * args.grid + j][0]!r} "
            f"shank_scale={rows[i * args.grid + j][1]!r} cost={float(matrix[i, j])!r}"
        )
    print(f"map: {csv_path}")
    print(f"wall time: {time.perf_counter() - started:.1f}s", file=sys.stderr)
    return EXIT_OK


def _trajectory_rows(layout, params, design, cfg, terrain, seed):
    """One deterministic single-env episode under the given policy."""
    from .env import sample_command

    env = Env(config=cfg.env, nominal=cfg.nominal, design_space=cfg.space)
    command = sample_command(rng_for(seed, "traj", "cmd"), cfg.env.command_range)
    obs = env.reset(design, terrain, command, seed)
    rng = rng_for(seed, "traj", "act")
    rows = []
    for step in range(cfg.env.episode_limit):
        mean, log_sigma, _ = forward(layout, params, obs)
        action = mean  # deterministic trace
        obs, reward, done, record = env.env_step(action)
        state = env.state
        rows.append([
            step,
            *[repr(float(x)) for x in state.as_q()],
            *[repr(float(x)) for x in state.as_v()],
            *[repr(float(x)) for x in state.applied_torques],
            repr(float(reward)),
        ])
        if done:
            break
    return rows


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    outdir = _resolve_outdir(args, cfg)
    terrain = _resolve_terrain(args.terrain, cfg)
    layout, params, _ = _load_policy(args.policy, cfg)
    design = _design_from_values(args.design, cfg)
    adapt_steps = cfg.adapt_steps if args.adapt is None else args.adapt

    metrics_path = os.path.join(outdir, "eval_metrics.json")
    if args.episodes == 0:
        payload = {
            "schema": "eval-metrics-v1",
            "episodes": 0,
            "zero_sample": True,
            "design": list(map(float, args.design)),
            "adapt_steps": adapt_steps,
        }
        _write_json(metrics_path, payload)
        print(f"metrics: {metrics_path} (zero samples)")
        return EXIT_OK

    started = time.perf_counter()
    env_config = replace(cfg.env, terrain=terrain)
    pool = EnvPool(
        design, cfg.eval_envs, seed,
        config=env_config, nominal=cfg.nominal, design_space=cfg.space,
        stream=("cli-eval", "pool"),
    )
    pool.reset_all()
    adapted, _, degraded = inner_adapt(
        layout, params, pool, cfg.adapt_rollout, cfg.meta.inner_alpha,
        adapt_steps, rng_for(seed, "cli-eval", "adapt"), cfg.ppo,
    )
    result = evaluate_policy(
        layout, adapted, pool, args.episodes, rng_for(seed, "cli-eval", "episodes")
    )

    diag = result["diagnostics"]
    transitions = result["transitions"]
    err = diag["e_v"] ** 2 + diag["e_omega"] ** 2
    weight = np.minimum(np.exp(1.5 * err), 100.0)
    costs = {
        "velocity_tracking": float(np.mean(err)),
        "weighted_torque": float(np.mean(weight * diag["tau_sq"])),
        "weighted_power": float(np.mean(weight * diag["positive_power"])),
    }
    try:
        costs["mcot"] = mcot(diag, build_robot(design, cfg.nominal).total_mass)
    except UndefinedMetricError as exc:
        costs["mcot"] = None
        costs["mcot_undefined_reason"] = str(exc)

    payload = {
        "schema": "eval-metrics-v1",
        "design": list(map(float, args.design)),
        "adapt_steps": adapt_steps,
        "degraded_adaptation": bool(degraded),
        "episodes": args.episodes,
        "mean_reward": result["mean_return"],
        "episode_returns": [float(r) for r in result["returns"]],
        "fall_rate": result["fall_rate"],
        "transitions": transitions,
        "term_means": result["term_means"],
        "costs": costs,
    }
    _write_json(metrics_path, payload)
    print(f"mean reward: {result['mean_return']:.4f}")
    print(f"fall rate: {result['fall_rate']:.3f}")
    print(f"metrics: {metrics_path}")

    if args.trajectory is not None:
        rows = _trajectory_rows(layout, adapted, design, cfg, terrain, seed)
        with open(args.trajectory, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow([
                "step", "x", "z", "pitch",
                "front_hip", "front_knee", "hind_hip", "hind_knee",
                "vx", "vz", "pitch_rate",
                "front_hip_rate", "front_knee_rate", "hind_hip_rate", "hind_knee_rate",
                "torque_front_hip", "torque_front_knee", "torque_hind_hip", "torque_hind_knee",
                "reward",
            ])
            writer.writerows(rows)
        print(f"trajectory: {args.trajectory}")
    print(f"wall time: {time.perf_counter() - started:.1f}s", file=sys.stderr)
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing


def _add_common(parser):
    parser.add_argument("--config", required=True, help="experiment INI file")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--output-dir", default=None,
                        help=f"output directory (or set ${OUTPUT_DIR_ENV})")
    parser.add_argument("--workers", type=int, default=1,
                        help="parallel evaluation processes; never changes results")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="morphopt",
        description="Meta-learned locomotion policies and design-space optimization",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("meta-train", help="meta-train the design-conditioned policy")
    _add_common(p)
    p.add_argument("--updates", type=int, default=None, help="override meta.updates")
    p.add_argument("--resume", default=None, help="resume from a meta checkpoint")
    p.set_defaults(func=cmd_meta_train)

    p = sub.add_parser("optimize", help="CMA-ES over the design space")
    _add_common(p)
    p.add_argument("--policy", required=True, help="meta checkpoint")
    p.add_argument("--metric", choices=sorted(METRIC_ALIASES) + sorted(COST_METRICS),
                   default=None, help="cost metric (default from config)")
    p.add_argument("--terrain", default=None, help="KIND[:PRESET] or PRESET override")
    p.add_argument("--generations", type=int, default=None)
    p.add_argument("--population", type=int, default=None)
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("cost-map", help="cost over a design grid")
    _add_common(p)
    p.add_argument("--policy", required=True, help="meta checkpoint")
    p.add_argument("--metric", choices=sorted(METRIC_ALIASES) + sorted(COST_METRICS),
                   default=None)
    p.add_argument("--terrain", default=None, help="KIND[:PRESET] or PRESET override")
    p.add_argument("--grid", type=int, default=12, help="grid resolution per axis")
    p.set_defaults(func=cmd_cost_map)

    p = sub.add_parser("eval", help="evaluate one design")
    _add_common(p)
    p.add_argument("--policy", required=True, help="meta checkpoint")
    p.add_argument("--design", type=float, nargs="+", required=True,
                   help="thigh_scale shank_scale [hip_gear knee_gear]")
    p.add_argument("--terrain", default=None, help="KIND[:PRESET] or PRESET override")
    p.add_argument("--adapt", type=int, default=None,
                   help="inner adaptation steps (0 evaluates the raw meta-policy)")
    p.add_argument("--episodes", type=int, default=32)
    p.add_argument("--trajectory", default=None, help="write one episode's state CSV here")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as err:
        print(f"checkpoint error: {err}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except SimulationDiverged as err:
        print(f"simulation diverged: {err}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
