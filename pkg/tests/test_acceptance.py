"""End-to-end acceptance checks.

Nine numbered checks cover the full pipeline: formula oracles, gradient
and GAE correctness, optimizer benchmarks, simulator sanity, the
meta-adaptation benefit, directional design optimization, bilevel
correctness on an analytic surrogate, and CLI determinism. Each check
emits exactly one PASS/FAIL line (bypassing output capture) and asserts
its stated tolerances. Checks 6 and 7 meta-train a desk-profile policy
first; expect roughly 40 minutes of CPU for the whole file.
"""

import json
import time

import numpy as np
import pytest

from morphopt import sim
from morphopt.cli import main
from morphopt.designopt import (
    cmaes_run,
    cost_map,
    cost_power,
    cost_torque,
    cost_velocity,
    mcot,
    optimize_design,
)
from morphopt.env import Command, EnvConfig, EnvPool, compute_reward
from morphopt.maml import EVAL_INNER_STEPS, MetaHyper, inner_adapt, meta_train
from morphopt.morphology import (
    DesignParams,
    DesignSpace,
    NominalSpec,
    RobotModel,
    build_robot,
    sample_design,
)
from morphopt.nn import LossCoeffs, ParamLayout, forward, gaussian_log_prob, init_params
from morphopt.nn import policy_loss, policy_loss_grad
from morphopt.ppo import compute_gae, evaluate_policy, train_fixed_design
from morphopt.seeding import rng_for
from morphopt.terrain import TerrainParams, generate

from support import (
    SURROGATE_MIN,
    brute_force_gae,
    fd_gradient,
    max_rel_err,
    random_diagnostics,
    random_reward_inputs,
    ref_cost_power,
    ref_cost_torque,
    ref_cost_velocity,
    ref_mcot,
    reference_reward,
    rosenbrock,
    sphere,
    surrogate_cost,
    write_tiny_ini,
)

SEED = 0
SPACE = DesignSpace.default_2d()
NOMINAL = NominalSpec()
TERRAIN = TerrainParams(kind="flat", difficulty=0.0)
CONFIG = EnvConfig(terrain=TERRAIN)


def _say(config, line):
    """Print through pytest's capture so the line reaches the terminal."""
    capman = config.pluginmanager.getplugin("capturemanager")
    if capman is None:
        print(line, flush=True)
        return
    with capman.global_and_fixture_disabled():
        print("\n" + line, flush=True)


@pytest.fixture()
def verdict(request):
    t0 = time.time()

    def _verdict(name, ok, detail):
        status = "PASS" if ok else "FAIL"
        _say(request.config, f"acceptance {name}: {status} ({detail}; {time.time() - t0:.0f}s)")
        assert ok, f"{name}: {detail}"

    return _verdict


@pytest.fixture(scope="module")
def desk_meta(request, tmp_path_factory):
    """Meta-train the desk profile once; shared by checks 6 and 7."""
    outdir = tmp_path_factory.mktemp("meta")
    t0 = time.time()
    _say(request.config, "meta-training the desk profile (300 updates, ~15 min) ...")

    def progress(rec):
        if rec["update"] % 50 == 0:
            _say(request.config,
                 f"  meta update {rec['update']}: adapted reward {rec['adapted_mean_reward']:.3f}")

    layout, params, _ = meta_train(
        SPACE, MetaHyper(updates=300, n_envs=64), seed=SEED, terrain=TERRAIN,
        checkpoint_dir=outdir, progress=progress,
    )
    return {"layout": layout, "params": params, "seconds": time.time() - t0}


# ---------------------------------------------------------------------------
# 1. reward and cost formulas against straight re-summation oracles


def test_01_cost_and_reward_formula_oracles(verdict):
    rng = rng_for(SEED, "accept", "formulas")
    worst = 0.0
    mcot_covered = 0
    for _ in range(1000):
        diag, _, _ = random_diagnostics(rng, int(rng.integers(2, 40)))
        mass = float(rng.uniform(10.0, 60.0))
        pairs = [
            (cost_velocity(diag), ref_cost_velocity(diag)),
            (cost_torque(diag), ref_cost_torque(diag)),
            (cost_power(diag), ref_cost_power(diag)),
        ]
        if float(np.mean(diag["speed"])) >= 0.01:
            pairs.append((mcot(diag, mass), ref_mcot(diag, mass)))
            mcot_covered += 1
        for got, want in pairs:
            worst = max(worst, abs(got - want) / max(abs(want), 1e-300))

    reward_worst = 0.0
    for _ in range(1000):
        args = random_reward_inputs(rng)
        total, _ = compute_reward(*args)
        reward_worst = max(reward_worst, abs(total - reference_reward(*args)))

    # constructed high-error step: exp(1.5 * 4) > 100, so the weight
    # saturates and the torque cost equals the clip value exactly
    clipped = cost_torque({"e_v": [2.0], "e_omega": [0.0], "tau_sq": [1.0]})

    ok = worst < 1e-12 and reward_worst < 1e-12 and clipped == 100.0 and mcot_covered > 500
    verdict("1 formula oracles", ok,
            f"cost rel err {worst:.2e}, reward abs err {reward_worst:.2e}, "
            f"weight clip {clipped}, mcot covered {mcot_covered}/1000")


# ---------------------------------------------------------------------------
# 2. analytic loss gradients against central finite differences


def test_02_loss_gradients_match_finite_differences(verdict):
    worst = 0.0
    for trial in range(20):
        rng = rng_for(SEED, "accept", "grad", trial)
        layout = ParamLayout(
            obs_dim=int(rng.integers(3, 9)), act_dim=int(rng.integers(1, 4)),
            hidden=(int(rng.integers(4, 9)), int(rng.integers(3, 8))),
        )
        params = init_params(layout, rng) + rng.normal(0.0, 0.05, layout.size)
        batch_size = int(rng.integers(6, 20))
        obs = rng.normal(0.0, 1.0, (batch_size, layout.obs_dim))
        mean, log_sigma, _ = forward(layout, params, obs)
        actions = mean + np.exp(log_sigma) * rng.normal(0.0, 1.0, mean.shape)
        batch = {
            "obs": obs,
            "actions": actions,
            "old_logp": gaussian_log_prob(mean, log_sigma, actions)
            + rng.normal(0.0, 0.1, batch_size),
            "advantages": rng.normal(0.0, 1.0, batch_size),
            "returns": rng.normal(0.0, 1.0, batch_size),
        }
        coeffs = LossCoeffs(entropy_weight=0.01 if trial % 2 else 0.0)
        _, grad, _ = policy_loss_grad(layout, params, batch, coeffs)
        fd = fd_gradient(lambda p: policy_loss(layout, p, batch, coeffs), params)
        worst = max(worst, max_rel_err(grad, fd))
    verdict("2 loss gradients", worst < 1e-4,
            f"max rel err {worst:.2e} over 20 random networks (tolerance 1e-4)")


# ---------------------------------------------------------------------------
# 3. recursive advantage estimator against the brute-force double sum


def test_03_gae_matches_brute_force(verdict):
    rng = rng_for(SEED, "accept", "gae")
    worst = 0.0
    for _ in range(100):
        rewards = rng.normal(0.0, 1.0, 50)
        values = rng.normal(0.0, 1.0, 50)
        dones = (rng.random(50) < 0.1).astype(np.float64)
        bootstrap = float(rng.normal(0.0, 1.0))
        gamma = float(rng.uniform(0.9, 0.999))
        lam = float(rng.uniform(0.8, 1.0))
        adv, ret = compute_gae(rewards, values, dones, bootstrap, gamma, lam)
        ref_adv, ref_ret = brute_force_gae(rewards, values, dones, bootstrap, gamma, lam)
        worst = max(worst, np.max(np.abs(adv - ref_adv)), np.max(np.abs(ret - ref_ret)))
    verdict("3 advantage estimator", worst < 1e-10,
            f"max abs err {worst:.2e} over 100 random 50-step sequences (tolerance 1e-10)")


# ---------------------------------------------------------------------------
# 4. evolution-strategy benchmarks


def test_04_cma_benchmarks(verdict):
    box2 = (np.full(2, -2.0), np.full(2, 2.0))
    target2 = np.array([0.3, -0.7])
    r2 = cmaes_run(sphere(target2), np.zeros(2), 0.5, box2, 66, seed=1)
    d2 = float(np.linalg.norm(r2.best_design - target2))

    target4 = np.array([0.5, -0.3, 0.2, -0.8])
    r4 = cmaes_run(sphere(target4), np.zeros(4), 0.5,
                   (np.full(4, -2.0), np.full(4, 2.0)), 100, seed=0)
    d4 = float(np.linalg.norm(r4.best_design - target4))

    rr = cmaes_run(rosenbrock, np.zeros(2), 0.5, box2, 833, seed=1)
    dr = float(np.linalg.norm(rr.best_design - np.array([1.0, 1.0])))

    # strictly increasing fitness transforms must leave every sampled
    # population identical: selection sees only ranks
    base = sphere(target2)
    runs = [cmaes_run(lambda x, g, f=f: f(base(x, g)), np.zeros(2), 0.5, box2, 30, seed=3)
            for f in (lambda v: v, lambda v: 2.0 * v + 3.0, np.exp)]
    invariant = all(
        np.array_equal(ga["designs"], gb["designs"])
        for other in runs[1:]
        for ga, gb in zip(runs[0].generations, other.generations)
    )

    ok = (d2 < 1e-6 and r2.evaluations <= 400
          and d4 < 1e-6 and r4.evaluations <= 800
          and dr < 1e-4 and rr.evaluations <= 5000 and invariant)
    verdict("4 evolution-strategy benchmarks", ok,
            f"sphere2 {d2:.1e} in {r2.evaluations} evals, sphere4 {d4:.1e} in "
            f"{r4.evaluations}, rosenbrock {dr:.1e} in {rr.evaluations}, "
            f"rank invariance {invariant}")


# ---------------------------------------------------------------------------
# 5. simulator sanity: ballistics, energy conservation, NaN-freedom

NOMINAL_MODEL = build_robot(DesignParams(1.0, 1.0), NOMINAL)
FLAT_FIELD = generate(TerrainParams(kind="flat"), rng_for(0, "field"))
STANDING = np.array([0.4, -0.8, -0.4, 0.8])


def test_05_simulator_sanity(verdict):
    # free fall: no contact, zero torques, 0.5 s -> v_z = -4.905 m/s
    q = np.array([0.0, 5.0, 0.0, *STANDING])
    state = sim.initial_state(q, np.zeros(7), NOMINAL_MODEL, FLAT_FIELD)
    for _ in range(200):
        state = sim.step(state, np.zeros(4), NOMINAL_MODEL, FLAT_FIELD, dt=2.5e-3)
    fall_err = abs(state.base_vel[1] - (-4.905))

    # passive single-link pendulum (pinned base, negligible shanks)
    # against the closed-form energy, 10 s
    m_t, l_t, c_t = 1.2, 0.35, 0.175
    tiny = 1e-9
    model = RobotModel(
        thigh_length=l_t, thigh_mass=m_t, thigh_com=c_t,
        thigh_inertia=m_t * l_t * l_t / 12.0,
        shank_length=0.35, shank_mass=tiny, shank_com=0.175,
        shank_inertia=tiny * 0.35 * 0.35 / 12.0,
        body_mass=20.0, body_length=0.6, body_inertia=0.6,
        gear_ratios=np.full(4, 5.6), torque_limits=np.full(4, 33.6),
        speed_limits=np.full(4, 50.0 / 5.6),
    )
    n = FLAT_FIELD.heights.shape[0]
    kernel = sim.BatchKernel(
        model=model, heights=np.full((1, n), -10.0), x0=FLAT_FIELD.x0,
        spacing=FLAT_FIELD.spacing, friction=np.array([1.0]), pinned=True,
    )
    i_pivot = model.thigh_inertia + m_t * c_t * c_t

    def pendulum_energy(q, v):
        hips, rates = q[0, [3, 5]], v[0, [3, 5]]
        return float(np.sum(0.5 * i_pivot * rates**2
                            - m_t * sim.GRAVITY * c_t * np.cos(hips)))

    pq = np.array([[0.0, 0.0, 0.0, 0.9, 0.0, -0.9, 0.0]])
    pv = np.zeros((1, 7))
    e0 = pendulum_energy(pq, pv)
    drift = 0.0
    for _ in range(4000):
        pq, pv, _ = kernel.substep(pq, pv, np.zeros((1, 4)), 2.5e-3)
        drift = max(drift, abs(pendulum_energy(pq, pv) - e0))
    drift_frac = drift / abs(e0)

    # 10^4 randomized bounded-torque steps: all-finite or explicit error
    rng = rng_for(SEED, "accept", "nan-sweep")
    field = generate(TerrainParams(kind="hills", difficulty=0.6), rng_for(1, "f"))

    def random_state():
        rq = np.array([
            rng.uniform(-1.0, 1.0), rng.uniform(0.2, 1.0), rng.uniform(-0.8, 0.8),
            *(STANDING + rng.uniform(-0.8, 0.8, 4)),
        ])
        return sim.initial_state(rq, rng.normal(0.0, 2.0, 7), NOMINAL_MODEL, field)

    state = random_state()
    steps_left, nan_hits = 0, 0
    for _ in range(10_000):
        if steps_left == 0:
            state = random_state()
            steps_left = int(rng.integers(1, 40))
        cmd = rng.uniform(-1.0, 1.0, 4) * NOMINAL_MODEL.torque_limits
        tau = sim.actuator_torque_batch(cmd, state.joint_velocities,
                                        NOMINAL_MODEL.torque_limits,
                                        NOMINAL_MODEL.speed_limits)
        try:
            state = sim.step(state, tau, NOMINAL_MODEL, field)
        except sim.SimulationDiverged:
            steps_left = 0
            continue
        steps_left -= 1
        if not (np.isfinite(state.as_q()).all() and np.isfinite(state.as_v()).all()):
            nan_hits += 1

    ok = fall_err < 0.01 and drift_frac < 0.02 and nan_hits == 0
    verdict("5 simulator sanity", ok,
            f"free-fall err {fall_err:.4f} m/s, pendulum drift {100 * drift_frac:.2f}%, "
            f"non-finite states {nan_hits}/10000")


# ---------------------------------------------------------------------------
# 6. adaptation benefit on held-out designs (paired evaluation)


def _paired_return(layout, params, design, i, deterministic=True):
    pool = EnvPool(design, 32, 77, config=CONFIG, design_space=SPACE,
                   stream=("accept", "pool", i))
    pool.reset_all()
    out = evaluate_policy(layout, params, pool, 32,
                          rng_for(SEED, "accept", "episodes", i),
                          deterministic=deterministic)
    return out["mean_return"]


def test_06_meta_adaptation_benefit(request, verdict, desk_meta):
    layout, meta_params = desk_meta["layout"], desk_meta["params"]
    heldout_rng = rng_for(SEED, "accept", "heldout")
    designs = [sample_design(heldout_rng, SPACE) for _ in range(5)]

    # the meta budget is updates x tasks x 2 collections of 64 envs x 50
    # steps; a fleet of 5 specialized policies splits it evenly
    spec_updates = (300 * 5 * 2) // 5

    wins_adapt, wins_ratio = 0, 0
    rows = []
    for i, design in enumerate(designs):
        adapt_pool = EnvPool(design, 32, 77, config=CONFIG, design_space=SPACE,
                             stream=("accept", "adapt-pool", i))
        adapt_pool.reset_all()
        adapted, _, degraded = inner_adapt(
            layout, meta_params, adapt_pool, 50, 5e-4, EVAL_INNER_STEPS,
            rng_for(SEED, "accept", "adapt", i))
        assert not degraded

        _, spec_params, _ = train_fixed_design(
            design, spec_updates, seed=1000 + i, n_envs=64,
            env_config=CONFIG, nominal=NOMINAL, design_space=SPACE)

        un = _paired_return(layout, meta_params, design, i)
        ad = _paired_return(layout, adapted, design, i)
        sp = _paired_return(layout, spec_params, design, i)
        wins_adapt += int(ad > un)
        wins_ratio += int(ad >= 0.8 * sp)
        rows.append((un, ad, sp))
        _say(request.config,
             f"  design {i}: unadapted {un:.2f}, adapted {ad:.2f}, specialized {sp:.2f}")

    total_seconds = desk_meta["seconds"]
    ok = wins_adapt >= 4 and wins_ratio >= 3
    verdict("6 adaptation benefit", ok,
            f"adapted beats unadapted on {wins_adapt}/5 [need >=4], "
            f"adapted >= 80% of specialized on {wins_ratio}/5 [need >=3]; "
            f"meta-training took {total_seconds:.0f}s")


# ---------------------------------------------------------------------------
# 7. directional design optimization on flat terrain (desk profile)


def test_07_design_optimization_direction(request, verdict, desk_meta):
    layout, meta_params = desk_meta["layout"], desk_meta["params"]
    reports = {}
    for metric in ("weighted_torque", "velocity_tracking"):
        reports[metric] = optimize_design(
            layout, meta_params, SPACE, metric, seed=SEED,
            generations=10, population=12, env_config=CONFIG, nominal=NOMINAL,
            n_envs=32, workers=1)
        _say(request.config,
             f"  {metric}: best {np.round(reports[metric].best_design, 3)}, "
             f"improvement {reports[metric].improvement_vs_nominal:.2f}%")

    torque_sum = float(np.sum(np.asarray(reports["weighted_torque"].best_design)[:2]))
    velocity_sum = float(np.sum(np.asarray(reports["velocity_tracking"].best_design)[:2]))
    improvement = reports["weighted_torque"].improvement_vs_nominal
    ok = torque_sum < velocity_sum and improvement >= 10.0
    verdict("7 design-optimization direction", ok,
            f"torque optimum sum {torque_sum:.3f} vs velocity optimum sum "
            f"{velocity_sum:.3f} [need <], torque improvement {improvement:.2f}% [need >=10]")


# ---------------------------------------------------------------------------
# 8. bilevel correctness on an analytic surrogate


def test_08_surrogate_bilevel(verdict, monkeypatch):
    grid = 12
    ts = np.linspace(0.6, 1.4, grid)
    ss = np.linspace(0.6, 1.4, grid)
    lattice = np.array([[surrogate_cost(np.array([t, s])) for s in ss] for t in ts])
    gi, gj = np.unravel_index(np.argmin(lattice), lattice.shape)
    cell = (1.4 - 0.6) / (grid - 1)

    report = cmaes_run(lambda x, gen: surrogate_cost(x), np.array([1.0, 1.0]), 0.3,
                       (np.full(2, 0.6), np.full(2, 1.4)), 40, 12, seed=SEED)
    off_t = abs(report.best_design[0] - ts[gi])
    off_s = abs(report.best_design[1] - ss[gj])

    def surrogate_estimate(layout, params, design, metric, **kwargs):
        return surrogate_cost(design.as_vector()[:2]), {"degraded": False}

    monkeypatch.setattr("morphopt.designopt.estimate_fitness", surrogate_estimate)
    layout = ParamLayout(47, 6)
    params = init_params(layout, rng_for(SEED, "accept", "surrogate"))
    matrix, argmin, _ = cost_map(layout, params, SPACE, "weighted_torque", grid=grid,
                                 seed=SEED, env_config=CONFIG, nominal=NOMINAL)
    mi, mj = argmin
    contains = (abs(ts[mi] - SURROGATE_MIN[0]) <= cell / 2
                and abs(ss[mj] - SURROGATE_MIN[1]) <= cell / 2)

    ok = off_t <= cell and off_s <= cell and contains and np.isfinite(matrix).all()
    verdict("8 surrogate bilevel", ok,
            f"search best within ({off_t:.4f}, {off_s:.4f}) of lattice argmin "
            f"[cell {cell:.4f}], map argmin cell {argmin} contains true minimum {contains}")


# ---------------------------------------------------------------------------
# 9. CLI determinism and worker-count equivalence


def test_09_cli_determinism(verdict, tmp_path, monkeypatch):
    monkeypatch.delenv("MORPHOPT_OUTPUT_DIR", raising=False)
    ini = write_tiny_ini(tmp_path / "exp.ini", tmp_path / "unused")

    def run(args, outdir, *files):
        assert main(args + ["--output-dir", str(outdir)]) == 0
        return tuple((outdir / f).read_bytes() for f in files)

    meta_files = ("meta_final.ckpt", "meta_train_log.jsonl")
    meta_a = run(["meta-train", "--config", str(ini)], tmp_path / "m1", *meta_files)
    meta_b = run(["meta-train", "--config", str(ini)], tmp_path / "m2", *meta_files)
    ckpt = str(tmp_path / "m1" / "meta_final.ckpt")

    opt_files = ("optimize_weighted_torque.json", "optimize_weighted_torque_generations.csv")
    opt = ["optimize", "--config", str(ini), "--policy", ckpt, "--metric", "torque"]
    opt_runs = [run(opt + ["--workers", str(w)], tmp_path / f"o{tag}", *opt_files)
                for tag, w in (("1", 1), ("1b", 1), ("2", 2), ("3", 3))]

    cmap = ["cost-map", "--config", str(ini), "--policy", ckpt,
            "--metric", "velocity", "--grid", "2"]
    map_runs = [run(cmap + ["--workers", str(w)], tmp_path / f"c{tag}",
                    "cost_map_velocity_tracking.csv")
                for tag, w in (("1", 1), ("1b", 1), ("2", 2))]

    ev = ["eval", "--config", str(ini), "--policy", ckpt,
          "--design", "1.1", "0.9", "--episodes", "2"]
    eval_runs = [run(ev, tmp_path / f"e{i}", "eval_metrics.json") for i in (1, 2)]

    checks = {
        "meta-train rerun": meta_a == meta_b,
        "optimize rerun": opt_runs[0] == opt_runs[1],
        "optimize workers 2": opt_runs[0] == opt_runs[2],
        "optimize workers 3": opt_runs[0] == opt_runs[3],
        "cost-map rerun": map_runs[0] == map_runs[1],
        "cost-map workers 2": map_runs[0] == map_runs[2],
        "eval rerun": eval_runs[0] == eval_runs[1],
    }
    failed = [k for k, v in checks.items() if not v]
    verdict("9 CLI determinism", not failed,
            f"{len(checks) - len(failed)}/{len(checks)} byte-identical checks"
            + (f", failed: {failed}" if failed else ""))
