"""Design-space optimization over the meta-learned policy.

A from-scratch (mu/mu_w, lambda) CMA-ES searches normalized design
coordinates; every candidate is scored by resetting the policy to the
meta-parameters, adapting it to the candidate design with a few gradient
steps, and averaging a cost metric over evaluation transitions collected
with the adapted policy. Candidates within a generation share evaluation
seeds (common random numbers) so their ranking reflects design quality
rather than episode luck. The three rollout cost functions and the
mechanical cost of transport are pure recomputations from trajectory
diagnostics.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .env import EnvConfig, EnvPool
from .maml import EVAL_INNER_STEPS, inner_adapt
from .morphology import (
    DesignParams,
    DesignSpace,
    NominalSpec,
    build_robot,
    design_to_features,
    features_to_design,
)
from .nn import ParamLayout
from .ppo import PpoHyper, collect_rollouts
from .seeding import rng_for
from .sim import GRAVITY

__all__ = [
    "UndefinedMetricError",
    "COST_METRICS",
    "cost_velocity",
    "cost_torque",
    "cost_power",
    "mcot",
    "estimate_fitness",
    "CmaState",
    "OptimizationReport",
    "cmaes_run",
    "optimize_design",
    "cost_map",
]

COST_METRICS = ("velocity_tracking", "weighted_torque", "weighted_power", "mcot")

EVAL_ROLLOUT_LENGTH = 50
EVAL_TRANSITIONS = 250
INNER_ALPHA = 5e-4
SPEED_FLOOR = 0.01
FALLBACK_SCALE = 10.0
INITIAL_FALLBACK = 1e6
SIGMA_FRACTION = 0.15


class UndefinedMetricError(ValueError):
    """The metric has no defined value on this trajectory."""


# --------------------------------------------------------------------------
# cost functions (pure recomputation from trajectory diagnostics)


def _flat(diagnostics: dict, key: str) -> np.ndarray:
    return np.asarray(diagnostics[key], dtype=np.float64).ravel()


def _tracking_weight(diagnostics: dict) -> np.ndarray:
    err = _flat(diagnostics, "e_v") ** 2 + _flat(diagnostics, "e_omega") ** 2
    return np.minimum(np.exp(1.5 * err), 100.0)


def cost_velocity(diagnostics: dict) -> float:
    """Sum of squared velocity and pitch-rate tracking errors."""
    return float(np.sum(_flat(diagnostics, "e_v") ** 2 + _flat(diagnostics, "e_omega") ** 2))


def cost_torque(diagnostics: dict) -> float:
    """Tracking-weighted sum of squared joint torques."""
    return float(np.sum(_tracking_weight(diagnostics) * _flat(diagnostics, "tau_sq")))


def cost_power(diagnostics: dict) -> float:
    """Tracking-weighted sum of positive joint mechanical power."""
    return float(np.sum(_tracking_weight(diagnostics) * _flat(diagnostics, "positive_power")))


def mcot(diagnostics: dict, total_mass: float) -> float:
    """Mean positive mechanical power / (m g mean speed)."""
    speed = float(np.mean(_flat(diagnostics, "speed")))
    if speed < SPEED_FLOOR:
        raise UndefinedMetricError(f"mean speed {speed:.4f} m/s below {SPEED_FLOOR}")
    power = float(np.mean(_flat(diagnostics, "positive_power")))
    return power / (total_mass * GRAVITY * speed)


def _metric_cost(metric: str, diagnostics: dict, transitions: int, total_mass: float) -> float:
    if metric == "velocity_tracking":
        return cost_velocity(diagnostics) / transitions
    if metric == "weighted_torque":
        return cost_torque(diagnostics) / transitions
    if metric == "weighted_power":
        return cost_power(diagnostics) / transitions
    if metric == "mcot":
        return mcot(diagnostics, total_mass)
    raise ValueError(f"unknown cost metric {metric!r}")


# --------------------------------------------------------------------------
# Monte-Carlo fitness of a single candidate design


def estimate_fitness(
    layout: ParamLayout,
    meta_params: np.ndarray,
    design: DesignParams,
    metric: str,
    *,
    space: DesignSpace,
    seed: int,
    seed_path: tuple = (),
    env_config: EnvConfig | None = None,
    nominal: NominalSpec | None = None,
    inner_steps: int = EVAL_INNER_STEPS,
    rollout_length: int = EVAL_ROLLOUT_LENGTH,
    eval_transitions: int = EVAL_TRANSITIONS,
    inner_alpha: float = INNER_ALPHA,
    n_envs: int = 32,
    ppo_hyper: PpoHyper | None = None,
    fallback_cost: float | None = None,
):
    """Adapt the meta-policy to `design`, then average the metric over
    exactly `eval_transitions` transitions collected with the adapted
    policy. Returns (cost, info); degraded adaptation, a pool where every
    environment diverged, or an undefined metric yields the fallback
    penalty (10x the running-worst cost supplied by the caller) with the
    reason in info. The meta-parameters are never mutated.
    """
    if metric not in COST_METRICS:
        raise ValueError(f"unknown cost metric {metric!r}")
    ppo_hyper = ppo_hyper or PpoHyper()
    penalty = FALLBACK_SCALE * fallback_cost if fallback_cost is not None else INITIAL_FALLBACK

    pool = EnvPool(
        design, n_envs, seed,
        config=env_config, nominal=nominal, design_space=space,
        stream=("fit", *seed_path, "pool"),
    )
    pool.reset_all()
    adapted, _, degraded = inner_adapt(
        layout, meta_params, pool, rollout_length, inner_alpha, inner_steps,
        rng_for(seed, "fit", *seed_path, "adapt"), ppo_hyper,
    )
    if degraded:
        return penalty, {"degraded": True, "reason": "non-finite inner loss"}

    steps = math.ceil(eval_transitions / n_envs)
    batch = collect_rollouts(
        layout, adapted, pool, steps,
        rng_for(seed, "fit", *seed_path, "eval"), ppo_hyper.gamma, ppo_hyper.lam,
    )
    if batch["diverged"].any(axis=0).all():
        return penalty, {"degraded": True, "reason": "all environments diverged"}

    diag = {k: v.ravel()[:eval_transitions] for k, v in batch["diagnostics"].items()}
    total_mass = build_robot(design, nominal or NominalSpec()).total_mass
    try:
        cost = _metric_cost(metric, diag, eval_transitions, total_mass)
    except UndefinedMetricError as err:
        return penalty, {"degraded": True, "reason": str(err)}
    info = {
        "degraded": False,
        "transitions": eval_transitions,
        "mean_reward": batch["mean_reward"],
        "diverged_envs": int(batch["diverged"].any(axis=0).sum()),
    }
    return float(cost), info


# --------------------------------------------------------------------------
# CMA-ES


@dataclass
class CmaState:
    """Search distribution state for one generation."""

    mean: np.ndarray
    sigma: float
    cov: np.ndarray
    p_sigma: np.ndarray
    p_c: np.ndarray
    generation: int
    population: int


@dataclass
class OptimizationReport:
    """Per-generation populations and scores plus the final incumbent."""

    generations: list = field(default_factory=list)
    best_design: np.ndarray | None = None
    best_cost: float = math.inf
    best_cost_paired: float | None = None
    improvement_vs_nominal: float | None = None
    nominal_cost: float | None = None
    evaluations: int = 0
    covariance_resets: int = 0

    def record(self, generation, designs, fitness, penalties, flags):
        best_idx = int(np.argmin(fitness))
        if fitness[best_idx] < self.best_cost:
            self.best_cost = float(fitness[best_idx])
            self.best_design = np.array(designs[best_idx])
        self.evaluations += len(fitness)
        self.generations.append({
            "generation": generation,
            "designs": np.asarray(designs),
            "fitness": np.asarray(fitness, dtype=np.float64),
            "penalties": np.asarray(penalties, dtype=np.float64),
            "flags": list(flags),
            "best_cost": float(fitness[best_idx]),
            "best_design": np.array(designs[best_idx]),
            "best_so_far": self.best_cost,
        })

    def to_json(self) -> str:
        payload = {
            "best_design": None if self.best_design is None else list(self.best_design),
            "best_cost": self.best_cost,
            "best_cost_paired": self.best_cost_paired,
            "nominal_cost": self.nominal_cost,
            "improvement_vs_nominal": self.improvement_vs_nominal,
            "evaluations": self.evaluations,
            "covariance_resets": self.covariance_resets,
            "generations": [
                {
                    "generation": g["generation"],
                    "designs": g["designs"].tolist(),
                    "fitness": g["fitness"].tolist(),
                    "penalties": g["penalties"].tolist(),
                    "flags": g["flags"],
                    "best_cost": g["best_cost"],
                    "best_design": g["best_design"].tolist(),
                    "best_so_far": g["best_so_far"],
                }
                for g in self.generations
            ],
        }
        return json.dumps(payload, indent=2, sort_keys=True)


def default_population(dim: int) -> int:
    return 4 + int(3 * math.log(dim))


def cmaes_run(
    fitness,
    initial_mean,
    initial_sigma: float,
    bounds,
    generations: int,
    population: int | None = None,
    *,
    seed: int = 0,
    penalty_weight: float = 1.0,
    batch_fitness=None,
) -> OptimizationReport:
    """Minimize `fitness(x, generation)` with (mu/mu_w, lambda) CMA-ES.

    Weighted recombination of the top half, rank-1 plus rank-mu covariance
    update, cumulative step-size adaptation. Out-of-bounds samples are
    repaired by coordinate-wise clipping; selection then uses the repaired
    candidate's fitness plus penalty_weight * squared repair distance, so
    every simulated design stays inside the box while the ranking keeps a
    gradient toward feasibility. A failed covariance factorization resets
    the covariance to identity * sigma^2 (counted in the report). Fully
    deterministic given the seed; selection depends on fitness only
    through ranks.

    `batch_fitness(points, generation) -> (costs, flags)`, when given,
    replaces per-candidate calls; `fitness` may then be None.
    """
    mean = np.asarray(initial_mean, dtype=np.float64).copy()
    n = mean.shape[0]
    lam = population if population is not None else default_population(n)
    if lam < 2:
        raise ValueError("population must be at least 2")
    if initial_sigma <= 0.0:
        raise ValueError("initial sigma must be positive")
    if bounds is not None:
        lower = np.asarray(bounds[0], dtype=np.float64)
        upper = np.asarray(bounds[1], dtype=np.float64)
        if lower.shape != (n,) or upper.shape != (n,) or np.any(lower >= upper):
            raise ValueError("bounds must be valid per-coordinate intervals")

    mu = lam // 2
    weights = np.log(mu + 0.5) - np.log(np.arange(1, mu + 1))
    weights /= weights.sum()
    mu_eff = 1.0 / np.sum(weights**2)
    cc = (4.0 + mu_eff / n) / (n + 4.0 + 2.0 * mu_eff / n)
    cs = (mu_eff + 2.0) / (n + mu_eff + 5.0)
    c1 = 2.0 / ((n + 1.3) ** 2 + mu_eff)
    cmu = min(1.0 - c1, 2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((n + 2.0) ** 2 + mu_eff))
    damps = 1.0 + 2.0 * max(0.0, math.sqrt((mu_eff - 1.0) / (n + 1.0)) - 1.0) + cs
    chi_n = math.sqrt(n) * (1.0 - 1.0 / (4.0 * n) + 1.0 / (21.0 * n**2))

    state = CmaState(
        mean=mean, sigma=float(initial_sigma), cov=np.eye(n),
        p_sigma=np.zeros(n), p_c=np.zeros(n), generation=0, population=lam,
    )
    rng = rng_for(seed, "cma", "sample")
    report = OptimizationReport()

    for gen in range(generations):
        state.cov = 0.5 * (state.cov + state.cov.T)
        try:
            np.linalg.cholesky(state.cov)
        except np.linalg.LinAlgError:
            state.cov = np.eye(n) * state.sigma**2
            report.covariance_resets += 1
        eigvals, eigvecs = np.linalg.eigh(state.cov)
        scales = np.sqrt(np.maximum(eigvals, 1e-30))

        z = rng.standard_normal((lam, n))
        steps = z @ (eigvecs * scales).T
        raw = state.mean + state.sigma * steps
        if bounds is not None:
            repaired = np.clip(raw, lower, upper)
            penalties = penalty_weight * np.sum((raw - repaired) ** 2, axis=1)
        else:
            repaired = raw
            penalties = np.zeros(lam)

        if batch_fitness is not None:
            fitnesses, flags = batch_fitness(repaired, gen)
            fitnesses = np.asarray(fitnesses, dtype=np.float64)
            flags = list(flags)
        else:
            fitnesses = np.empty(lam)
            flags = []
            for i in range(lam):
                value = fitness(repaired[i], gen)
                if isinstance(value, tuple):
                    value, flag = value
                    flags.append(flag)
                fitnesses[i] = value
            if not flags:
                flags = [None] * lam
        scores = fitnesses + penalties

        order = np.argsort(scores, kind="stable")
        selected = order[:mu]
        step_w = weights @ steps[selected]
        state.mean = state.mean + state.sigma * step_w

        inv_sqrt = (eigvecs / scales) @ eigvecs.T
        state.p_sigma = (1.0 - cs) * state.p_sigma + math.sqrt(
            cs * (2.0 - cs) * mu_eff
        ) * (inv_sqrt @ step_w)
        norm_ps = float(np.linalg.norm(state.p_sigma))
        h_sigma = norm_ps / math.sqrt(
            1.0 - (1.0 - cs) ** (2.0 * (gen + 1))
        ) < (1.4 + 2.0 / (n + 1.0)) * chi_n
        state.p_c = (1.0 - cc) * state.p_c + (
            math.sqrt(cc * (2.0 - cc) * mu_eff) * step_w if h_sigma else 0.0
        )
        rank_mu = (steps[selected].T * weights) @ steps[selected]
        state.cov = (
            (1.0 - c1 - cmu) * state.cov
            + c1 * (np.outer(state.p_c, state.p_c) + (0.0 if h_sigma else 1.0) * cc * (2.0 - cc) * state.cov)
            + cmu * rank_mu
        )
        state.sigma *= math.exp((cs / damps) * (norm_ps / chi_n - 1.0))
        state.generation = gen + 1

        report.record(gen, repaired, fitnesses, penalties, flags)
    return report


# --------------------------------------------------------------------------
# high-level design optimization and cost maps


def _candidate_cost(args):
    (index, layout, params, vector, metric, space, nominal, config,
     seed, seed_path, inner_steps, rollout_length, eval_transitions,
     n_envs, fallback) = args
    design = features_to_design(np.asarray(vector, dtype=np.float64), space)
    cost, info = estimate_fitness(
        layout, params, design, metric,
        space=space, seed=seed, seed_path=seed_path,
        env_config=config, nominal=nominal,
        inner_steps=inner_steps, rollout_length=rollout_length,
        eval_transitions=eval_transitions, n_envs=n_envs,
        fallback_cost=fallback,
    )
    return index, cost, info


def optimize_design(
    layout: ParamLayout,
    meta_params: np.ndarray,
    space: DesignSpace,
    metric: str,
    *,
    seed: int = 0,
    generations: int = 30,
    population: int = 35,
    env_config: EnvConfig | None = None,
    nominal: NominalSpec | None = None,
    inner_steps: int = EVAL_INNER_STEPS,
    rollout_length: int = EVAL_ROLLOUT_LENGTH,
    eval_transitions: int = EVAL_TRANSITIONS,
    n_envs: int = 32,
    penalty_weight: float = 1.0,
    workers: int = 1,
    progress=None,
) -> OptimizationReport:
    """CMA-ES over normalized design coordinates with per-candidate
    adaptation; candidates within a generation share evaluation seeds.

    The fallback penalty for degraded candidates is 10x the worst
    non-degraded cost seen in earlier generations, snapshotted once per
    generation so results do not depend on evaluation order or worker
    count. The report stores designs in physical units; improvement is
    (nominal - best) / |nominal| * 100 with both sides re-evaluated on a
    common held-out seed (paired comparison).
    """
    nominal = nominal or NominalSpec()
    nominal_design = space.nominal_design(nominal)
    x0 = design_to_features(nominal_design, space)
    n = x0.shape[0]
    box = (np.full(n, -1.0), np.full(n, 1.0))
    sigma0 = SIGMA_FRACTION * 2.0

    worst_seen: list[float] = []
    executor = ProcessPoolExecutor(max_workers=workers) if workers > 1 else None

    def batch_fitness(points, gen):
        fallback = max(worst_seen) if worst_seen else None
        args = [
            (
                i, layout, meta_params, points[i], metric, space, nominal,
                env_config, seed, ("gen", gen), inner_steps, rollout_length,
                eval_transitions, n_envs, fallback,
            )
            for i in range(len(points))
        ]
        costs = np.empty(len(points))
        flags = [False] * len(points)
        results = executor.map(_candidate_cost, args) if executor else map(_candidate_cost, args)
        for i, cost, info in results:
            costs[i] = cost
            flags[i] = bool(info.get("degraded", False))
            if not flags[i]:
                worst_seen.append(cost)
        if progress is not None:
            progress({"generation": gen, "best_cost": float(costs.min())})
        return costs, flags

    try:
        report = cmaes_run(
            None, x0, sigma0, box, generations, population,
            seed=seed, penalty_weight=penalty_weight, batch_fitness=batch_fitness,
        )
    finally:
        if executor is not None:
            executor.shutdown()

    # paired comparison of the incumbent against the nominal design
    best_design = features_to_design(np.asarray(report.best_design), space)
    nominal_cost, _ = estimate_fitness(
        layout, meta_params, nominal_design, metric,
        space=space, seed=seed, seed_path=("report",),
        env_config=env_config, nominal=nominal,
        inner_steps=inner_steps, rollout_length=rollout_length,
        eval_transitions=eval_transitions, n_envs=n_envs,
    )
    best_cost, _ = estimate_fitness(
        layout, meta_params, best_design, metric,
        space=space, seed=seed, seed_path=("report",),
        env_config=env_config, nominal=nominal,
        inner_steps=inner_steps, rollout_length=rollout_length,
        eval_transitions=eval_transitions, n_envs=n_envs,
    )
    report.nominal_cost = float(nominal_cost)
    report.best_cost_paired = float(best_cost)
    if nominal_cost != 0.0:
        report.improvement_vs_nominal = float(
            (nominal_cost - best_cost) / abs(nominal_cost) * 100.0
        )

    # physical units in the report, normalized coordinates stay internal
    for g in report.generations:
        g["designs"] = np.array(
            [features_to_design(v, space).as_vector() for v in g["designs"]]
        )
        g["best_design"] = features_to_design(g["best_design"], space).as_vector()
    report.best_design = best_design.as_vector()
    return report


def cost_map(
    layout: ParamLayout,
    meta_params: np.ndarray,
    space: DesignSpace,
    metric: str,
    grid: int = 12,
    *,
    seed: int = 0,
    env_config: EnvConfig | None = None,
    nominal: NominalSpec | None = None,
    inner_steps: int = EVAL_INNER_STEPS,
    rollout_length: int = EVAL_ROLLOUT_LENGTH,
    eval_transitions: int = EVAL_TRANSITIONS,
    n_envs: int = 32,
    workers: int = 1,
    progress=None,
):
    """Evaluate the adapted-policy cost on a grid x grid lattice of
    (thigh_scale, shank_scale) designs; gears stay nominal. Failed cells
    hold NaN, everything else proceeds. Returns (matrix, argmin_cell,
    rows) with rows ready for CSV as (thigh_scale, shank_scale, cost);
    ties break in favor of the first cell in row-major order.
    """
    if grid < 2:
        raise ValueError("grid must be at least 2")
    nominal = nominal or NominalSpec()
    thigh_values = np.linspace(space.lower[0], space.upper[0], grid)
    shank_values = np.linspace(space.lower[1], space.upper[1], grid)
    dim = space.lower.shape[0]

    cells = []
    for i, thigh in enumerate(thigh_values):
        for j, shank in enumerate(shank_values):
            if dim == 2:
                design = DesignParams(float(thigh), float(shank))
            else:
                design = DesignParams(
                    float(thigh), float(shank),
                    nominal.hip_gear, nominal.knee_gear,
                )
            cells.append((i, j, design))

    args = [
        (
            k, layout, meta_params, design_to_features(design, space), metric,
            space, nominal, env_config, seed, ("map", i, j),
            inner_steps, rollout_length, eval_transitions, n_envs, None,
        )
        for k, (i, j, design) in enumerate(cells)
    ]

    matrix = np.full((grid, grid), np.nan)

    def consume(k, cost, info):
        i, j, _ = cells[k]
        if not info.get("degraded", False):
            matrix[i, j] = cost
        if progress is not None:
            progress({"cell": (i, j), "cost": matrix[i, j]})

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            for k, cost, info in executor.map(_candidate_cost, args):
                consume(k, cost, info)
    else:
        for arg in args:
            consume(*_candidate_cost(arg))

    flat = matrix.ravel()
    finite = np.isfinite(flat)
    if finite.any():
        best = int(np.argmin(np.where(finite, flat, np.inf)))  # first minimum wins
        argmin_cell = (best // grid, best % grid)
    else:
        argmin_cell = None
    rows = [
        (float(thigh_values[i]), float(shank_values[j]), float(matrix[i, j]))
        for i in range(grid)
        for j in range(grid)
    ]
    return matrix, argmin_cell, rows
