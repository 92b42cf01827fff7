"""Clipped-surrogate policy optimization with generalized advantage estimation.

Rollouts are gathered from a vectorized environment pool, advantages are
normalized once per update, and each update runs a fixed number of epochs of
shuffled minibatch Adam steps on the clipped surrogate plus a value-error
term. All gradient math lives in `nn`; this module owns batching, the
advantage recursion, and the training loops for single-design and
multi-design (design-resampling) policies.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .env import EnvConfig, EnvPool
from .morphology import DesignParams, DesignSpace, NominalSpec, sample_design
from .nn import (
    AdamState,
    LossCoeffs,
    ParamLayout,
    adam_step,
    forward,
    gaussian_log_prob,
    init_params,
    policy_loss_grad,
    sample_actions,
)
from .seeding import rng_for

__all__ = [
    "PpoHyper",
    "compute_gae",
    "collect_rollouts",
    "ppo_update",
    "train_fixed_design",
    "evaluate_policy",
]

# --------------------------------------------------------------------------
# hyperparameters


@dataclass(frozen=True)
class PpoHyper:
    """Update hyperparameters; defaults follow the training configuration."""

    gamma: float = 0.993
    lam: float = 0.95
    clip: float = 0.2
    stepsize: float = 5e-4
    value_weight: float = 0.5
    entropy_weight: float = 0.0
    minibatches: int = 10
    epochs: int = 4

    def __post_init__(self):
        if not (0.0 < self.gamma <= 1.0 and 0.0 < self.lam <= 1.0):
            raise ValueError("gamma and lam must lie in (0, 1]")
        if self.clip <= 0.0:
            raise ValueError("clip must be positive")
        if self.minibatches < 1 or self.epochs < 1:
            raise ValueError("need at least one minibatch and one epoch")

    def coeffs(self) -> LossCoeffs:
        return LossCoeffs(
            clip=self.clip,
            value_weight=self.value_weight,
            entropy_weight=self.entropy_weight,
        )


# --------------------------------------------------------------------------
# advantage estimation


def compute_gae(rewards, values, dones, bootstrap_value, gamma: float, lam: float):
    """Advantage recursion over a (T,) or (T, B) buffer.

    delta_t = r_t + gamma * v_{t+1} * (1 - done_t) - v_t
    A_t     = delta_t + gamma * lam * (1 - done_t) * A_{t+1}
    returns = advantages + values

    `bootstrap_value` stands in for v_T; a done at step t cuts the recursion
    so anything after an episode boundary never leaks backwards.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    squeeze = rewards.ndim == 1
    if squeeze:
        rewards = rewards[:, None]
        values = values[:, None]
        dones = dones[:, None]
    if not (rewards.shape == values.shape == dones.shape):
        raise ValueError("rewards, values and dones must share a shape")

    steps, batch = rewards.shape
    boot = np.broadcast_to(np.asarray(bootstrap_value, dtype=np.float64), (batch,))
    advantages = np.empty_like(rewards)
    carry = np.zeros(batch)
    next_value = boot
    for t in range(steps - 1, -1, -1):
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * live - values[t]
        carry = delta + gamma * lam * live * carry
        advantages[t] = carry
        next_value = values[t]
    returns = advantages + values
    if squeeze:
        return advantages[:, 0], returns[:, 0]
    return advantages, returns


# --------------------------------------------------------------------------
# rollout collection

DIAGNOSTIC_KEYS = ("e_v", "e_omega", "tau_sq", "positive_power", "w_t", "speed")


def collect_rollouts(
    layout: ParamLayout,
    params: np.ndarray,
    pool: EnvPool,
    steps_per_env: int,
    rng: np.random.Generator,
    gamma: float = PpoHyper.gamma,
    lam: float = PpoHyper.lam,
) -> dict:
    """Run the stochastic policy for exactly steps_per_env * n_envs transitions.

    Episodes cut by the step cap fold gamma * V(terminal_obs) into that
    step's reward before the advantage recursion; falls (and diverged
    envs, which are sanitized and flagged) bootstrap zero. Training keys
    (obs, actions, old_logp, advantages, returns) are flattened; raw
    per-step arrays ride along for logging and cost evaluation.
    """
    if steps_per_env < 1:
        raise ValueError("steps_per_env must be at least 1")
    n = pool.n_envs
    obs_buf = np.empty((steps_per_env, n, pool.obs_dim))
    act_buf = np.empty((steps_per_env, n, 6))
    logp_buf = np.empty((steps_per_env, n))
    value_buf = np.empty((steps_per_env, n))
    reward_buf = np.empty((steps_per_env, n))
    shaped_buf = np.empty((steps_per_env, n))
    done_buf = np.zeros((steps_per_env, n))
    diverged_buf = np.zeros((steps_per_env, n), dtype=bool)
    diag_buf = {k: np.empty((steps_per_env, n)) for k in DIAGNOSTIC_KEYS}
    term_sums: dict[str, float] = {}

    obs = pool.observe()
    for t in range(steps_per_env):
        mean, log_sigma, value = forward(layout, params, obs)
        actions = sample_actions(mean, log_sigma, rng)
        obs_buf[t] = obs
        act_buf[t] = actions
        logp_buf[t] = gaussian_log_prob(mean, log_sigma, actions)
        value_buf[t] = value

        obs, rewards, fell, truncated, info = pool.step(actions)
        reward_buf[t] = rewards
        shaped = rewards.copy()
        if truncated.any():
            _, _, tail = forward(layout, params, info["terminal_obs"][truncated])
            shaped[truncated] += gamma * np.atleast_1d(tail)
        shaped_buf[t] = shaped
        done_buf[t] = (fell | truncated).astype(np.float64)
        diverged_buf[t] = info["diverged"]
        for k in DIAGNOSTIC_KEYS:
            diag_buf[k][t] = info["diagnostics"][k]
        for k, v in info["terms"].items():
            term_sums[k] = term_sums.get(k, 0.0) + float(np.sum(v))

    _, _, bootstrap = forward(layout, params, obs)
    advantages, returns = compute_gae(shaped_buf, value_buf, done_buf, bootstrap, gamma, lam)

    count = steps_per_env * n
    return {
        "obs": obs_buf.reshape(count, pool.obs_dim),
        "actions": act_buf.reshape(count, 6),
        "old_logp": logp_buf.reshape(count),
        "advantages": advantages.reshape(count),
        "returns": returns.reshape(count),
        "rewards": reward_buf,
        "dones": done_buf,
        "diverged": diverged_buf,
        "diagnostics": diag_buf,
        "term_means": {k: v / count for k, v in term_sums.items()},
        "mean_reward": float(reward_buf.mean()),
    }


# --------------------------------------------------------------------------
# update step

TRAIN_KEYS = ("obs", "actions", "old_logp", "advantages", "returns")


def normalize_advantages(advantages: np.ndarray) -> np.ndarray:
    centered = advantages - advantages.mean()
    return centered / (centered.std() + 1e-8)


def ppo_update(
    layout: ParamLayout,
    params: np.ndarray,
    batch: dict,
    hyper: PpoHyper,
    opt_state: AdamState,
    rng: np.random.Generator,
):
    """One policy update: epochs x shuffled minibatches of clipped-surrogate
    Adam steps. A non-finite loss or gradient aborts the whole update and
    returns the caller's params and optimizer state untouched.
    """
    count = batch["obs"].shape[0]
    if hyper.minibatches > count:
        raise ValueError("more minibatches than transitions")
    data = {k: np.asarray(batch[k]) for k in TRAIN_KEYS}
    data["advantages"] = normalize_advantages(data["advantages"])

    coeffs = hyper.coeffs()
    new_params = params.copy()
    state = replace(opt_state, m=opt_state.m.copy(), v=opt_state.v.copy())
    collected: dict[str, list[float]] = {
        "loss": [], "policy_loss": [], "value_loss": [],
        "entropy": [], "mean_ratio": [], "clip_fraction": [],
    }
    for _ in range(hyper.epochs):
        order = rng.permutation(count)
        for chunk in np.array_split(order, hyper.minibatches):
            sub = {k: v[chunk] for k, v in data.items()}
            loss, grad, stats = policy_loss_grad(layout, new_params, sub, coeffs)
            if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
                return params, opt_state, {
                    "aborted": True,
                    "loss": float(loss),
                    "n_transitions": count,
                }
            new_params, state = adam_step(state, new_params, grad, hyper.stepsize)
            layout.clamp_log_sigma(new_params)
            for k in collected:
                collected[k].append(stats[k])

    summary = {k: float(np.mean(v)) for k, v in collected.items()}
    summary["ratio_min"] = float(np.min(collected["mean_ratio"]))
    summary["ratio_max"] = float(np.max(collected["mean_ratio"]))
    summary["aborted"] = False
    summary["n_transitions"] = count
    return new_params, state, summary


# --------------------------------------------------------------------------
# training loops


def train_fixed_design(
    design: DesignParams,
    n_updates: int,
    *,
    seed: int = 0,
    hyper: PpoHyper | None = None,
    n_envs: int = 64,
    steps_per_env: int = 50,
    env_config: EnvConfig | None = None,
    nominal: NominalSpec | None = None,
    design_space: DesignSpace | None = None,
    resample_space: DesignSpace | None = None,
    init: np.ndarray | None = None,
    progress=None,
):
    """Collect/update loop on one fixed design (or, with resample_space set,
    a fresh uniformly drawn design each update: the multi-design baseline).

    Returns (layout, params, log) where log holds one record per update.
    n_updates = 0 returns the initialization untouched.
    """
    hyper = hyper or PpoHyper()
    space = resample_space or design_space
    from .env import observation_dim

    layout = ParamLayout(observation_dim(design.dim), 6)
    if init is not None:
        if init.shape != (layout.size,):
            raise ValueError("init has the wrong parameter count")
        params = init.copy()
    else:
        params = init_params(layout, rng_for(seed, "train", "init"))
    opt_state = AdamState.zeros(layout.size)
    log: list[dict] = []

    pool = None
    for update in range(n_updates):
        if resample_space is not None:
            design = sample_design(rng_for(seed, "train", "design", update), resample_space)
            pool = None
        if pool is None:
            pool = EnvPool(
                design, n_envs, seed,
                config=env_config, nominal=nominal, design_space=space,
                stream=("train", "pool", update) if resample_space is not None else ("train", "pool"),
            )
            pool.reset_all()
        batch = collect_rollouts(
            layout, params, pool, steps_per_env,
            rng_for(seed, "train", "act", update), hyper.gamma, hyper.lam,
        )
        params, opt_state, stats = ppo_update(
            layout, params, batch, hyper, opt_state,
            rng_for(seed, "train", "shuffle", update),
        )
        record = {
            "update": update,
            "mean_reward": batch["mean_reward"],
            "terms": batch["term_means"],
            **{k: stats[k] for k in stats if k != "n_transitions"},
        }
        log.append(record)
        if progress is not None:
            progress(record)
    return layout, params, log


def evaluate_policy(
    layout: ParamLayout,
    params: np.ndarray,
    pool: EnvPool,
    episodes: int,
    rng: np.random.Generator,
    deterministic: bool = False,
    max_steps: int | None = None,
):
    """Run the pool until `episodes` episodes finish; report their returns.

    Also accumulates the per-transition cost diagnostics over every step
    taken, so one evaluation serves both reward and cost reporting.
    """
    if episodes < 1:
        raise ValueError("need at least one episode")
    limit = max_steps if max_steps is not None else (pool.config.episode_limit + 1) * episodes
    running = np.zeros(pool.n_envs)
    finished: list[float] = []
    falls: list[bool] = []
    diag_traces: dict[str, list[np.ndarray]] = {k: [] for k in DIAGNOSTIC_KEYS}
    term_sums: dict[str, float] = {}
    transitions = 0
    obs = pool.observe()
    for _ in range(limit):
        mean, log_sigma, _ = forward(layout, params, obs)
        actions = mean if deterministic else sample_actions(mean, log_sigma, rng)
        obs, rewards, fell, truncated, info = pool.step(actions)
        running += rewards
        transitions += pool.n_envs
        for k in DIAGNOSTIC_KEYS:
            diag_traces[k].append(np.array(info["diagnostics"][k]))
        for k, v in info["terms"].items():
            term_sums[k] = term_sums.get(k, 0.0) + float(np.sum(v))
        done = fell | truncated
        for i in np.nonzero(done)[0]:
            finished.append(float(running[i]))
            falls.append(bool(fell[i]))
            running[i] = 0.0
        if len(finished) >= episodes:
            break
    if len(finished) < episodes:
        raise RuntimeError("step budget exhausted before enough episodes finished")
    returns = np.asarray(finished[:episodes])
    return {
        "mean_return": float(returns.mean()),
        "returns": returns,
        "fall_rate": float(np.mean(falls[:episodes])),
        "transitions": transitions,
        "diagnostics": {k: np.stack(v) for k, v in diag_traces.items()},
        "term_means": {k: v / transitions for k, v in term_sums.items()},
    }
