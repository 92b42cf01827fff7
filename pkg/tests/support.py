"""Shared oracles and factories for the test suite.

Everything here is an independent recomputation: reference implementations
are written straight from the documented formulas (math.fsum loops, double
sums, central differences) rather than calling back into the package.
"""

import math

import numpy as np

from morphopt.env import Command
from morphopt.sim import SimState

# ---------------------------------------------------------------------------
# finite-difference gradient oracle


def fd_gradient(f, x, h=1e-5):
    """Central finite differences of a scalar function of a flat vector."""
    x = np.asarray(x, dtype=np.float64)
    g = np.empty_like(x)
    for i in range(x.size):
        up = x.copy()
        dn = x.copy()
        up[i] += h
        dn[i] -= h
        g[i] = (f(up) - f(dn)) / (2.0 * h)
    return g


def max_rel_err(a, b, floor=1e-6):
    """Worst elementwise relative error with a small-magnitude floor."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = np.maximum(floor, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / scale))


# ---------------------------------------------------------------------------
# GAE brute-force oracle


def brute_force_gae(rewards, values, dones, bootstrap, gamma, lam):
    """A_t = sum_k (gamma*lam)^(k-t) * delta_k * prod_(j<k) (1 - done_j)."""
    T = len(rewards)
    v_next = np.append(values[1:], bootstrap)
    deltas = [rewards[t] + gamma * v_next[t] * (1.0 - dones[t]) - values[t] for t in range(T)]
    adv = np.zeros(T)
    for t in range(T):
        factor = 1.0
        total = 0.0
        for k in range(t, T):
            total += factor * deltas[k]
            factor *= gamma * lam * (1.0 - dones[k])
            if factor == 0.0:
                break
        adv[t] = total
    return adv, adv + np.asarray(values)


# ---------------------------------------------------------------------------
# reward-table oracle


def reference_reward(prev, next_state, command, action_history, target_history,
                     swing_flags, foot_clearances):
    """Recompute the reward table term by term with scalar arithmetic."""
    u_t, u_prev = action_history
    q_t, q_p1, q_p2 = target_history
    r_v = math.exp(-1.5 * (command.forward_velocity - next_state.base_vel[0]) ** 2)
    r_w = math.exp(-2.0 * (command.pitch_rate - next_state.pitch_rate) ** 2)
    r_vstab = math.exp(-1.5 * next_state.base_vel[1] ** 2)
    r_wstab = 1.0
    swing = [bool(s) for s in swing_flags]
    if any(swing):
        cleared = sum(1 for s, c in zip(swing, foot_clearances) if s and c >= 0.03)
        r_fm = cleared / sum(swing)
    else:
        r_fm = 0.0
    r_bc = float(next_state.nonfoot_contact_count)
    r_ts = math.sqrt(math.fsum((a - 2.0 * b + c) ** 2 for a, b, c in zip(q_t, q_p1, q_p2)))
    r_ms = math.sqrt(math.fsum((a - b) ** 2 for a, b in zip(u_t, u_prev)))
    r_tau = math.fsum(abs(t) for t in next_state.applied_torques)
    total = (0.5 * r_v + 0.2 * r_w + 0.1 * r_vstab + 0.1 * r_wstab + 0.005 * r_fm
             - 0.5 * r_bc - 0.05 * r_ts - 0.005 * r_ms - 0.001 * r_tau)
    return total


def make_state(rng=None, **overrides):
    """A SimState with randomized (or overridden) entries."""
    rng = rng or np.random.default_rng(0)
    fields = {
        "base_pos": rng.normal(0.0, 1.0, 2),
        "pitch": float(rng.normal(0.0, 0.5)),
        "base_vel": rng.normal(0.0, 1.0, 2),
        "pitch_rate": float(rng.normal(0.0, 1.0)),
        "joint_angles": rng.normal(0.0, 0.7, 4),
        "joint_velocities": rng.normal(0.0, 3.0, 4),
        "foot_contacts": rng.random(2) < 0.5,
        "nonfoot_contact_count": int(rng.integers(0, 3)),
        "applied_torques": rng.normal(0.0, 20.0, 4),
    }
    fields.update(overrides)
    return SimState(**fields)


def random_reward_inputs(rng):
    """One randomized argument tuple for compute_reward."""
    prev = make_state(rng)
    nxt = make_state(rng)
    command = Command(float(rng.uniform(-1.0, 1.5)))
    actions = (rng.normal(0.0, 1.0, 6), rng.normal(0.0, 1.0, 6))
    targets = tuple(rng.normal(0.0, 0.6, 4) for _ in range(3))
    swing = rng.random(2) < 0.5
    clearances = rng.uniform(-0.02, 0.08, 2)
    return prev, nxt, command, actions, targets, swing, clearances


# ---------------------------------------------------------------------------
# cost-function oracles (straight re-summation with fsum)


def random_diagnostics(rng, steps):
    """Per-step diagnostics built from a raw per-joint trace, the same way
    the environment assembles them."""
    e_v = np.abs(rng.normal(0.0, 0.7, steps))
    e_w = np.abs(rng.normal(0.0, 0.5, steps))
    tau = rng.normal(0.0, 15.0, (steps, 4))
    phidot = rng.normal(0.0, 4.0, (steps, 4))
    v_x = rng.normal(0.4, 0.5, steps)
    diag = {
        "e_v": e_v,
        "e_omega": e_w,
        "tau_sq": (tau**2).sum(axis=1),
        "positive_power": np.maximum(phidot * tau, 0.0).sum(axis=1),
        "w_t": np.minimum(np.exp(1.5 * (e_v**2 + e_w**2)), 100.0),
        "speed": np.abs(v_x),
    }
    return diag, tau, phidot


def ref_cost_velocity(diag):
    return math.fsum(ev**2 + ew**2 for ev, ew in zip(diag["e_v"], diag["e_omega"]))


def ref_weight(ev, ew):
    return min(math.exp(1.5 * (ev**2 + ew**2)), 100.0)


def ref_cost_torque(diag):
    return math.fsum(
        ref_weight(ev, ew) * ts
        for ev, ew, ts in zip(diag["e_v"], diag["e_omega"], diag["tau_sq"])
    )


def ref_cost_power(diag):
    return math.fsum(
        ref_weight(ev, ew) * pp
        for ev, ew, pp in zip(diag["e_v"], diag["e_omega"], diag["positive_power"])
    )


def ref_mcot(diag, total_mass):
    mean_power = math.fsum(diag["positive_power"]) / len(diag["positive_power"])
    mean_speed = math.fsum(diag["speed"]) / len(diag["speed"])
    return mean_power / (total_mass * 9.81 * mean_speed)


def rel_close(a, b, tol=1e-12):
    return abs(a - b) <= tol * max(1.0, abs(a), abs(b))


# ---------------------------------------------------------------------------
# optimizer benchmarks and the analytic design surrogate


def sphere(target):
    def f(x, gen):
        return float(np.sum((x - target) ** 2))
    return f


def rosenbrock(x, gen):
    return float(100.0 * (x[1] - x[0] ** 2) ** 2 + (1.0 - x[0]) ** 2)


SURROGATE_MIN = np.array([0.83, 1.17])


def surrogate_cost(design_vector):
    """Closed-form bowl over [0.6, 1.4]^2 with a unique interior minimum."""
    t = design_vector[0] - SURROGATE_MIN[0]
    s = design_vector[1] - SURROGATE_MIN[1]
    return float(t * t + 1.3 * s * s + 0.4 * t * s + 2.0)


# ---------------------------------------------------------------------------
# misc helpers


class IdShuffle:
    """Stands in for a Generator when a test needs identity permutations."""

    def permutation(self, n):
        return np.arange(n)


TINY_INI = """
[experiment]
seed = 3
output_dir = {outdir}

[terrain]
kind = flat
difficulty = 0.0

[env]
episode_limit = 40

[meta]
updates = {updates}
meta_batch = 2
rollout_length = 10
train_envs = 8

[designopt]
metric = weighted_torque
generations = 2
population = 4
adapt_steps = 1
adapt_rollout = 8
eval_transitions = 32
eval_envs = 8
"""


def write_tiny_ini(path, outdir, updates=2):
    path.write_text(TINY_INI.format(outdir=outdir, updates=updates))
    return path
