"""First-order meta-training for a design-conditioned policy.

Outer loop: sample a batch of designs, adapt a copy of the meta-parameters
to each with plain full-batch gradient descent on freshly collected
rollouts, then apply the summed post-adaptation gradients (evaluated at the
adapted parameters; first-order approximation) to the meta-parameters with
one Adam step. Terrain difficulty ramps linearly from zero to the
configured maximum over the first 60% of updates. The same adaptation
routine, run for more steps, is what the design optimizer calls at
evaluation time.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from .env import EnvConfig, EnvPool, observation_dim
from .morphology import DesignSpace, sample_design
from .nn import (
    AdamState,
    LossCoeffs,
    ParamLayout,
    adam_step,
    init_params,
    load_checkpoint,
    policy_loss_grad,
    save_checkpoint,
)
from .ppo import TRAIN_KEYS, PpoHyper, collect_rollouts, normalize_advantages
from .seeding import rng_for
from .terrain import TerrainParams

__all__ = [
    "MetaHyper",
    "EVAL_INNER_STEPS",
    "terrain_difficulty",
    "inner_adapt",
    "meta_update",
    "meta_train",
    "load_meta_checkpoint",
]

# inner steps used at evaluation and design-optimization time
EVAL_INNER_STEPS = 5

CHECKPOINT_INTERVAL = 25
DIFFICULTY_RAMP_FRACTION = 0.6


# --------------------------------------------------------------------------
# hyperparameters


@dataclass(frozen=True)
class MetaHyper:
    """Meta-training knobs; defaults are the desk-scale configuration."""

    updates: int = 300
    meta_batch: int = 5
    rollout_length: int = 50
    inner_alpha: float = 5e-4
    outer_beta: float = 5e-4
    inner_steps: int = 1
    n_envs: int = 64

    def __post_init__(self):
        if self.meta_batch < 1 or self.rollout_length < 1:
            raise ValueError("meta_batch and rollout_length must be at least 1")
        if self.inner_alpha < 0.0 or self.outer_beta <= 0.0:
            raise ValueError("inner_alpha must be >= 0 and outer_beta > 0")
        if self.updates < 0 or self.inner_steps < 0 or self.n_envs < 1:
            raise ValueError("updates, inner_steps and n_envs must be non-negative")


def terrain_difficulty(update: int, total_updates: int, maximum: float) -> float:
    """Linear 0 -> maximum over the first 60% of updates, flat afterwards."""
    ramp = DIFFICULTY_RAMP_FRACTION * total_updates
    if ramp <= 0.0:
        return maximum
    return maximum * min(1.0, update / ramp)


# --------------------------------------------------------------------------
# inner adaptation


def inner_adapt(
    layout: ParamLayout,
    params: np.ndarray,
    pool: EnvPool,
    rollout_length: int,
    alpha: float,
    steps: int,
    rng: np.random.Generator,
    hyper: PpoHyper | None = None,
):
    """Adapt a copy of `params` to the pool's task with `steps` full-batch
    gradient descent steps of size alpha, each on a fresh rollout batch.

    No optimizer state is carried; the caller's params are never touched.
    Returns (adapted_params, rollout_batches, degraded) where degraded
    flags a non-finite inner loss (adaptation abandoned, copy of the
    original params returned).
    """
    hyper = hyper or PpoHyper()
    coeffs = hyper.coeffs()
    adapted = params.copy()
    batches = []
    for _ in range(steps):
        batch = collect_rollouts(
            layout, adapted, pool, rollout_length, rng, hyper.gamma, hyper.lam
        )
        batches.append(batch)
        if alpha == 0.0:
            continue
        sub = {k: batch[k] for k in TRAIN_KEYS}
        sub["advantages"] = normalize_advantages(sub["advantages"])
        loss, grad, _ = policy_loss_grad(layout, adapted, sub, coeffs)
        if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
            return params.copy(), batches, True
        adapted = adapted - alpha * grad
        layout.clamp_log_sigma(adapted)
    return adapted, batches, False


# --------------------------------------------------------------------------
# outer update


def meta_update(
    layout: ParamLayout,
    params: np.ndarray,
    tasks: list,
    beta: float,
    opt_state: AdamState,
    coeffs: LossCoeffs | None = None,
):
    """Apply the summed per-task gradients to the meta-parameters.

    `tasks` holds (adapted_params, post_adaptation_batch) pairs; each
    gradient is evaluated at that task's adapted parameters (first-order
    rule) on its own advantage-normalized batch. One Adam step of size
    beta. A non-finite task gradient aborts the update unchanged.
    """
    coeffs = coeffs or PpoHyper().coeffs()
    total = np.zeros(layout.size)
    losses = []
    for adapted, batch in tasks:
        sub = {k: np.asarray(batch[k]) for k in TRAIN_KEYS}
        sub["advantages"] = normalize_advantages(sub["advantages"])
        loss, grad, _ = policy_loss_grad(layout, adapted, sub, coeffs)
        if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
            return params, opt_state, {"aborted": True, "task_losses": losses}
        total += grad
        losses.append(float(loss))
    state = replace(opt_state, m=opt_state.m.copy(), v=opt_state.v.copy())
    new_params, state = adam_step(state, params, total, beta)
    layout.clamp_log_sigma(new_params)
    return new_params, state, {"aborted": False, "task_losses": losses}


# --------------------------------------------------------------------------
# meta-training loop


def _meta_manifest(update, seed, hyper, space, terrain, n_envs):
    return {
        "kind": "meta",
        "update": update,
        "seed": seed,
        "meta_batch": hyper.meta_batch,
        "rollout_length": hyper.rollout_length,
        "inner_alpha": hyper.inner_alpha,
        "outer_beta": hyper.outer_beta,
        "inner_steps": hyper.inner_steps,
        "updates": hyper.updates,
        "n_envs": n_envs,
        "design_lower": list(space.lower),
        "design_upper": list(space.upper),
        "terrain_kind": terrain.kind,
        "max_difficulty": terrain.difficulty,
    }


def meta_train(
    space: DesignSpace,
    hyper: MetaHyper,
    *,
    seed: int = 0,
    terrain: TerrainParams | None = None,
    env_config: EnvConfig | None = None,
    ppo_hyper: PpoHyper | None = None,
    checkpoint_dir=None,
    checkpoint_interval: int = CHECKPOINT_INTERVAL,
    resume_from=None,
    log_file=None,
    progress=None,
):
    """Run the full meta-training loop.

    `terrain` fixes the kind and the maximum difficulty; the per-update
    difficulty follows the linear ramp. Checkpoints land in
    checkpoint_dir every 25 updates plus a final one; `resume_from`
    restarts at the recorded update with fresh optimizer moments.
    Returns (layout, params, log).
    """
    terrain = terrain or TerrainParams(kind="flat", difficulty=0.0)
    base_config = env_config or EnvConfig(terrain=terrain)
    ppo_hyper = ppo_hyper or PpoHyper()
    design_dim = space.lower.shape[0]
    layout = ParamLayout(observation_dim(design_dim), 6)

    start = 0
    if resume_from is not None:
        loaded_layout, params, manifest = load_checkpoint(resume_from)
        if loaded_layout.describe() != layout.describe():
            raise ValueError("checkpoint layout does not match the design space")
        start = int(manifest["extra"]["update"])
    else:
        params = init_params(layout, rng_for(seed, "meta", "init"))
    opt_state = AdamState.zeros(layout.size)

    def checkpoint(update, path):
        extra = _meta_manifest(update, seed, hyper, space, terrain, hyper.n_envs)
        save_checkpoint(path, layout, params, extra)

    log: list[dict] = []
    # truncate on fresh runs so a rerun reproduces the file byte for byte
    mode = "a" if resume_from is not None else "w"
    handle = open(log_file, mode) if log_file is not None else None
    try:
        for update in range(start, hyper.updates):
            difficulty = terrain_difficulty(update, hyper.updates, terrain.difficulty)
            config = replace(base_config, terrain=replace(terrain, difficulty=difficulty))
            tasks = []
            rewards = []
            degraded = 0
            for m in range(hyper.meta_batch):
                design = sample_design(rng_for(seed, "meta", "design", update, m), space)
                pool = EnvPool(
                    design, hyper.n_envs, seed,
                    config=config, design_space=space,
                    stream=("meta", "pool", update, m),
                )
                pool.reset_all()
                adapted, _, bad = inner_adapt(
                    layout, params, pool, hyper.rollout_length,
                    hyper.inner_alpha, hyper.inner_steps,
                    rng_for(seed, "meta", "inner", update, m), ppo_hyper,
                )
                degraded += int(bad)
                dprime = collect_rollouts(
                    layout, adapted, pool, hyper.rollout_length,
                    rng_for(seed, "meta", "outer", update, m),
                    ppo_hyper.gamma, ppo_hyper.lam,
                )
                tasks.append((adapted, dprime))
                rewards.append(dprime["mean_reward"])
            params, opt_state, stats = meta_update(
                layout, params, tasks, hyper.outer_beta, opt_state, ppo_hyper.coeffs()
            )
            term_means = {}
            for _, batch in tasks:
                for k, v in batch["term_means"].items():
                    term_means[k] = term_means.get(k, 0.0) + v / len(tasks)
            record = {
                "update": update,
                "difficulty": difficulty,
                "adapted_mean_reward": float(np.mean(rewards)),
                "terms": term_means,
                "degraded_tasks": degraded,
                "aborted": stats["aborted"],
                "loss_sum": float(np.sum(stats["task_losses"])) if stats["task_losses"] else None,
            }
            log.append(record)
            if handle is not None:
                handle.write(json.dumps(record, sort_keys=True) + "\n")
                handle.flush()
            if progress is not None:
                progress(record)
            if checkpoint_dir is not None and (update + 1) % checkpoint_interval == 0:
                checkpoint(update + 1, f"{checkpoint_dir}/meta_{update + 1:05d}.ckpt")
    finally:
        if handle is not None:
            handle.close()
    if checkpoint_dir is not None:
        checkpoint(hyper.updates, f"{checkpoint_dir}/meta_final.ckpt")
    return layout, params, log


def load_meta_checkpoint(path):
    """Load a meta checkpoint; returns (layout, params, manifest_extra)."""
    layout, params, manifest = load_checkpoint(path)
    extra = manifest.get("extra", {})
    if extra.get("kind") != "meta":
        raise ValueError("not a meta-training checkpoint")
    return layout, params, extra
