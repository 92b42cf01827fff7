"""Locomotion MDP: observations, gait phases, PD action interface, reward.

The policy commands joint-target residuals around a fixed standing pose
plus per-leg phase-frequency offsets; a PD loop converts targets to
torques at every physics substep. Episodes run at 50 Hz for at most 500
control steps and terminate early when the base drops below 0.18 m above
the local terrain or |pitch| exceeds 1.2 rad.

EnvPool steps many independent environments of the same design in one
batched call; Env is the single-robot convenience wrapper.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import sim
from .morphology import ConfigurationError, DesignParams, DesignSpace, NominalSpec, build_robot, design_to_features
from .seeding import rng_for
from .terrain import TerrainParams, generate
from .sim import BatchKernel, SimState

CONTROL_DT = 0.02
EPISODE_LIMIT = 500

STANDING_POSE = np.array([0.4, -0.8, -0.4, 0.8])

PD_KP = 40.0
PD_KD = 1.0

BASE_FREQUENCY = 1.25
PHASE_OFFSETS = np.array([0.0, np.pi])

ACTION_DIM = 6
JOINT_TARGET_SCALE = 0.6
FREQUENCY_SCALE = 1.0

CLEARANCE_THRESHOLD = 0.03
FALL_HEIGHT = 0.18
FALL_PITCH = 1.2

RESET_JOINT_NOISE = 0.05
JOINT_LIMIT_RANGE = 1.4
JOINT_LIMIT_STIFFNESS = 100.0

SCAN_OFFSETS = np.array([-0.2, -0.1, 0.0, 0.1, 0.2])

COMMAND_RANGE = (-1.0, 1.5)

REWARD_WEIGHTS = {
    "velocity": 0.5,
    "pitch_rate": 0.2,
    "vertical_stability": 0.1,
    "angular_stability": 0.1,
    "foot_motion": 0.005,
    "body_collision": -0.5,
    "target_smoothness": -0.05,
    "motion_smoothness": -0.005,
    "torque": -0.001,
}


@dataclass(frozen=True)
class Command:
    """Velocity command; pitch-rate target is fixed at zero in the plane."""

    forward_velocity: float
    pitch_rate: float = 0.0

    def __post_init__(self):
        if not np.isfinite(self.forward_velocity):
            raise ConfigurationError("command must be finite")


def sample_command(rng: np.random.Generator, command_range=COMMAND_RANGE) -> Command:
    lo, hi = command_range
    if not (np.isfinite(lo) and np.isfinite(hi) and lo <= hi):
        raise ConfigurationError("invalid command range")
    return Command(float(rng.uniform(lo, hi)))


def observation_dim(design_dim: int) -> int:
    # command 1, base vel 2, pitch+rate 2, joints 4+4, phase sin/cos 4,
    # phase freq 2, prev two actions 12, contacts 2+1, scans 10, friction 1.
    return 45 + design_dim


def compute_reward(
    prev: SimState,
    next_state: SimState,
    command: Command,
    action_history,
    target_history,
    swing_flags,
    foot_clearances,
) -> tuple[float, dict]:
    """Reward for one control transition plus its per-term breakdown.

    action_history is (u_t, u_prev); target_history is (q*_t, q*_prev,
    q*_prevprev). Swing flags and foot clearances come from the gait
    phases and terrain, which the dynamic state does not carry.
    """
    u_t, u_prev = (np.asarray(a, dtype=np.float64) for a in action_history)
    q_t, q_p1, q_p2 = (np.asarray(t, dtype=np.float64) for t in target_history)
    swing = np.asarray(swing_flags, dtype=bool)
    clear = np.asarray(foot_clearances, dtype=np.float64)

    vel_err = command.forward_velocity - next_state.base_vel[0]
    rate_err = command.pitch_rate - next_state.pitch_rate

    terms = {
        "velocity": float(np.exp(-1.5 * vel_err**2)),
        "pitch_rate": float(np.exp(-2.0 * rate_err**2)),
        "vertical_stability": float(np.exp(-1.5 * next_state.base_vel[1] ** 2)),
        "angular_stability": 1.0,
        "foot_motion": float(np.mean(clear[swing] >= CLEARANCE_THRESHOLD)) if swing.any() else 0.0,
        "body_collision": float(next_state.nonfoot_contact_count),
        "target_smoothness": float(np.linalg.norm(q_t - 2.0 * q_p1 + q_p2)),
        "motion_smoothness": float(np.linalg.norm(u_t - u_prev)),
        "torque": float(np.abs(next_state.applied_torques).sum()),
    }
    total = sum(REWARD_WEIGHTS[k] * terms[k] for k in REWARD_WEIGHTS)
    return total, terms


def _standing_drops(model):
    """Vertical distance from hip to each foot at the standing pose."""
    drops = np.empty(2)
    for leg, (hip, knee) in enumerate(((0, 1), (2, 3))):
        alpha_t = STANDING_POSE[hip]
        alpha_s = alpha_t + STANDING_POSE[knee]
        drops[leg] = model.thigh_length * np.cos(alpha_t) + model.shank_length * np.cos(alpha_s)
    return drops


@dataclass
class EnvConfig:
    """Tunable environment constants; defaults match the documented values."""

    command_range: tuple[float, float] = COMMAND_RANGE
    terrain: TerrainParams = field(default_factory=TerrainParams)
    kp: float = PD_KP
    kd: float = PD_KD
    base_frequency: float = BASE_FREQUENCY
    episode_limit: int = EPISODE_LIMIT
    reset_noise: float = RESET_JOINT_NOISE
    fixed_command: float | None = None
    physics_dt: float = sim.PHYSICS_DT
    control_dt: float = CONTROL_DT
    contact_kn: float = sim.CONTACT_KN
    contact_dn: float = sim.CONTACT_DN
    contact_kt: float = sim.CONTACT_KT

    def __post_init__(self):
        if self.physics_dt <= 0.0 or self.control_dt <= 0.0:
            raise ConfigurationError("time steps must be positive")
        ratio = self.control_dt / self.physics_dt
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise ConfigurationError("control_dt must be an integer multiple of physics_dt")
        if min(self.contact_kn, self.contact_dn, self.contact_kt) < 0.0:
            raise ConfigurationError("contact constants must be non-negative")
        if self.episode_limit < 1:
            raise ConfigurationError("episode_limit must be at least 1")
        if self.command_range[0] > self.command_range[1]:
            raise ConfigurationError("command range is inverted")

    @property
    def substeps(self) -> int:
        return int(round(self.control_dt / self.physics_dt))


class EnvPool:
    """Batch of independent environments sharing one robot design.

    Each environment owns a seeded random stream used for its terrain,
    command, and reset noise, so results are independent of how many
    environments run or in what order they are reduced.
    """

    def __init__(
        self,
        design: DesignParams,
        n_envs: int,
        seed: int,
        config: EnvConfig | None = None,
        nominal: NominalSpec | None = None,
        design_space: DesignSpace | None = None,
        stream: tuple = ("env",),
    ):
        if n_envs < 1:
            raise ConfigurationError("need at least one environment")
        self.config = config or EnvConfig()
        self.nominal = nominal or NominalSpec()
        space = design_space or (DesignSpace.default_2d() if design.dim == 2 else DesignSpace.default_4d())
        self.design = design
        self.model = build_robot(design, self.nominal)
        self.features = design_to_features(design, space)
        self.n_envs = n_envs
        self.obs_dim = observation_dim(design.dim)

        self._rngs = [rng_for(seed, *stream, i) for i in range(n_envs)]
        self._drops = _standing_drops(self.model)

        n_nodes = generate(self.config.terrain, rng_for(seed, *stream, "probe")).heights.shape[0]
        self.kernel = BatchKernel(
            model=self.model,
            heights=np.zeros((n_envs, n_nodes)),
            x0=0.0,
            spacing=1.0,
            friction=np.ones(n_envs),
            k_n=self.config.contact_kn,
            d_n=self.config.contact_dn,
            k_t=self.config.contact_kt,
            joint_lower=STANDING_POSE - JOINT_LIMIT_RANGE,
            joint_upper=STANDING_POSE + JOINT_LIMIT_RANGE,
            limit_stiffness=JOINT_LIMIT_STIFFNESS,
        )

        B = n_envs
        self.q = np.zeros((B, 7))
        self.v = np.zeros((B, 7))
        self.pen = np.zeros((B, sim.N_CONTACTS))
        self.torques = np.zeros((B, 4))
        self.phases = np.zeros((B, 2))
        self.frequencies = np.full((B, 2), self.config.base_frequency)
        self.commands = np.zeros(B)
        self.steps = np.zeros(B, dtype=np.intp)
        self.actions = np.zeros((B, 2, ACTION_DIM))
        self.targets = np.tile(STANDING_POSE, (B, 3, 1))
        self._was_reset = False

    # -- per-env lifecycle ---------------------------------------------------

    def _reset_env(self, i: int):
        rng = self._rngs[i]
        terrain_field = generate(self.config.terrain, rng)
        self.kernel.heights[i] = terrain_field.heights
        self.kernel.x0 = terrain_field.x0
        self.kernel.spacing = terrain_field.spacing
        self.kernel.friction[i] = terrain_field.friction

        if self.config.fixed_command is not None:
            self.commands[i] = self.config.fixed_command
        else:
            self.commands[i] = sample_command(rng, self.config.command_range).forward_velocity

        joints = STANDING_POSE + rng.uniform(-self.config.reset_noise, self.config.reset_noise, size=4)
        self.q[i, :] = 0.0
        self.q[i, 3:] = joints
        self.v[i, :] = 0.0
        self.phases[i] = PHASE_OFFSETS
        self.frequencies[i] = self.config.base_frequency
        self.steps[i] = 0
        self.actions[i] = 0.0
        self.targets[i] = STANDING_POSE
        self.torques[i] = 0.0

        # Seat the base so the deepest foot touches the ground exactly.
        pen, _, _, _ = self.kernel.contact_state(self.q[i : i + 1], self.v[i : i + 1])
        self.q[i, 1] += pen[0, :2].max()
        pen, _, _, _ = self.kernel.contact_state(self.q[i : i + 1], self.v[i : i + 1])
        self.pen[i] = pen[0]

    def reset_all(self) -> np.ndarray:
        for i in range(self.n_envs):
            self._reset_env(i)
        self._was_reset = True
        return self._observe()

    # -- observation ---------------------------------------------------------

    def observe(self) -> np.ndarray:
        """Current observation batch, shape (n_envs, obs_dim)."""
        if not self._was_reset:
            raise RuntimeError("call reset_all() before observe()")
        return self._observe()

    def _observe(self) -> np.ndarray:
        B = self.n_envs
        obs = np.empty((B, self.obs_dim))
        obs[:, 0] = self.commands / 1.5
        obs[:, 1:3] = 0.5 * self.v[:, 0:2]
        obs[:, 3] = self.q[:, 2]
        obs[:, 4] = 0.25 * self.v[:, 2]
        obs[:, 5:9] = self.q[:, 3:] - STANDING_POSE
        obs[:, 9:13] = 0.1 * self.v[:, 3:]
        obs[:, 13:15] = np.sin(self.phases)
        obs[:, 15:17] = np.cos(self.phases)
        obs[:, 17:19] = self.frequencies - self.config.base_frequency
        obs[:, 19:25] = self.actions[:, 0]
        obs[:, 25:31] = self.actions[:, 1]
        obs[:, 31:33] = self.pen[:, :2] >= -sim.CONTACT_TOL
        obs[:, 33] = (self.pen[:, 2:] > 0.0).any(axis=1)
        obs[:, 34:44] = self._foot_scans()
        obs[:, 44] = self.kernel.friction
        obs[:, 45:] = self.features
        return np.clip(obs, -10.0, 10.0)

    def _foot_positions(self):
        pitch = self.q[:, 2]
        half = 0.5 * self.model.body_length
        out = np.empty((self.n_envs, 2, 2))
        for leg, (s, hip, knee) in enumerate(((1.0, 3, 4), (-1.0, 5, 6))):
            alpha_t = pitch + self.q[:, hip]
            alpha_s = alpha_t + self.q[:, knee]
            out[:, leg, 0] = (
                self.q[:, 0]
                + s * half * np.cos(pitch)
                + self.model.thigh_length * np.sin(alpha_t)
                + self.model.shank_length * np.sin(alpha_s)
            )
            out[:, leg, 1] = (
                self.q[:, 1]
                + s * half * np.sin(pitch)
                - self.model.thigh_length * np.cos(alpha_t)
                - self.model.shank_length * np.cos(alpha_s)
            )
        return out

    def _ground_at(self, x):
        from .sim import _terrain_height

        return _terrain_height(self.kernel.heights, self.kernel.x0, self.kernel.spacing, x)

    def _foot_scans(self):
        feet = self._foot_positions()
        scans = np.empty((self.n_envs, 10))
        for leg in range(2):
            fx = feet[:, leg, 0:1]
            base_h = self._ground_at(fx)
            around = self._ground_at(fx + SCAN_OFFSETS[None, :])
            scans[:, 5 * leg : 5 * leg + 5] = 5.0 * (around - base_h)
        return scans

    # -- stepping ------------------------------------------------------------

    def step(self, raw_actions: np.ndarray):
        """Advance every environment one control step.

        Returns (obs, rewards, dones, truncations, info). Environments that
        finish are reset automatically; their pre-reset observation is in
        info["terminal_obs"]. dones flag falls (bootstrap value 0); the
        500-step cap sets truncation instead (bootstrap from the value
        function).
        """
        if not self._was_reset:
            raise RuntimeError("call reset_all() before step()")
        acts = np.clip(np.asarray(raw_actions, dtype=np.float64), -1.0, 1.0)
        if acts.shape != (self.n_envs, ACTION_DIM):
            raise ConfigurationError(f"expected actions of shape {(self.n_envs, ACTION_DIM)}")

        targets = STANDING_POSE + JOINT_TARGET_SCALE * acts[:, :4]
        freqs = self.config.base_frequency + FREQUENCY_SCALE * acts[:, 4:]
        self.frequencies = freqs
        self.phases = self.phases + 2.0 * np.pi * freqs * self.config.control_dt

        self.actions[:, 1] = self.actions[:, 0]
        self.actions[:, 0] = acts
        self.targets[:, 2] = self.targets[:, 1]
        self.targets[:, 1] = self.targets[:, 0]
        self.targets[:, 0] = targets

        model = self.model

        def torque_fn(q, v):
            cmd = self.config.kp * (targets - q[:, 3:]) - self.config.kd * v[:, 3:]
            return sim.actuator_torque_batch(cmd, v[:, 3:], model.torque_limits, model.speed_limits)

        self.q, self.v, self.torques, self.pen = self.kernel.step_control(
            self.q, self.v, torque_fn,
            dt=self.config.physics_dt, substeps=self.config.substeps, check=False,
        )
        # Exploding but still-finite states are flagged here, one control
        # step before they could reach inf inside the substep loop.
        ok = (
            np.isfinite(self.q).all(axis=1)
            & np.isfinite(self.v).all(axis=1)
            & (np.abs(self.v).max(axis=1) < 1e7)
        )
        diverged = ~ok
        if diverged.any():
            self.q[diverged] = 0.0
            self.q[diverged, 1] = 10.0
            self.q[diverged, 3:] = STANDING_POSE
            self.v[diverged] = 0.0
            self.pen[diverged] = -1.0
            self.torques[diverged] = 0.0
        self.steps += 1

        rewards, terms, diagnostics = self._reward_batch()
        feet = self._foot_positions()

        base_clearance = self.q[:, 1] - self._ground_at(self.q[:, 0:1])[:, 0]
        fell = (base_clearance < FALL_HEIGHT) | (np.abs(self.q[:, 2]) > FALL_PITCH) | diverged
        truncated = (~fell) & (self.steps >= self.config.episode_limit)

        obs = self._observe()
        info = {
            "terms": terms,
            "diagnostics": diagnostics,
            "terminal_obs": None,
            "diverged": diverged,
            "foot_positions": feet,
        }
        finished = fell | truncated
        if finished.any():
            info["terminal_obs"] = obs.copy()
            for i in np.nonzero(finished)[0]:
                self._reset_env(i)
            fresh = self._observe()
            obs[finished] = fresh[finished]
        return obs, rewards, fell, truncated, info

    def _reward_batch(self):
        vx_err = self.commands - self.v[:, 0]
        rate_err = -self.v[:, 2]
        swing = np.sin(self.phases) > 0.0
        clearance = -self.pen[:, :2]

        clear_ok = (clearance >= CLEARANCE_THRESHOLD) & swing
        n_swing = swing.sum(axis=1)
        foot_motion = np.where(n_swing > 0, clear_ok.sum(axis=1) / np.maximum(n_swing, 1), 0.0)

        nonfoot = (self.pen[:, 2:] > 0.0).sum(axis=1).astype(np.float64)
        tsm = np.linalg.norm(self.targets[:, 0] - 2.0 * self.targets[:, 1] + self.targets[:, 2], axis=1)
        msm = np.linalg.norm(self.actions[:, 0] - self.actions[:, 1], axis=1)
        tau_abs = np.abs(self.torques).sum(axis=1)

        terms = {
            "velocity": np.exp(-1.5 * vx_err**2),
            "pitch_rate": np.exp(-2.0 * rate_err**2),
            "vertical_stability": np.exp(-1.5 * self.v[:, 1] ** 2),
            "angular_stability": np.ones(self.n_envs),
            "foot_motion": foot_motion,
            "body_collision": nonfoot,
            "target_smoothness": tsm,
            "motion_smoothness": msm,
            "torque": tau_abs,
        }
        total = np.zeros(self.n_envs)
        for k, w in REWARD_WEIGHTS.items():
            total += w * terms[k]

        e_v = np.abs(vx_err)
        e_w = np.abs(rate_err)
        w_t = np.minimum(np.exp(1.5 * (e_v**2 + e_w**2)), 100.0)
        diagnostics = {
            "e_v": e_v,
            "e_omega": e_w,
            "tau_sq": (self.torques**2).sum(axis=1),
            "positive_power": np.maximum(self.v[:, 3:] * self.torques, 0.0).sum(axis=1),
            "w_t": w_t,
            "speed": np.abs(self.v[:, 0]),
        }
        return total, terms, diagnostics


class Env:
    """Single-environment wrapper with the documented reset/step interface."""

    def __init__(
        self,
        config: EnvConfig | None = None,
        nominal: NominalSpec | None = None,
        design_space: DesignSpace | None = None,
    ):
        self.config = config or EnvConfig()
        self.nominal = nominal or NominalSpec()
        self.design_space = design_space
        self.pool: EnvPool | None = None

    def reset(
        self,
        design: DesignParams,
        terrain: TerrainParams,
        command: Command,
        seed: int,
    ) -> np.ndarray:
        cfg = replace(self.config, terrain=terrain, fixed_command=command.forward_velocity)
        self.pool = EnvPool(
            design, 1, seed,
            config=cfg, nominal=self.nominal, design_space=self.design_space,
        )
        return self.pool.reset_all()[0]

    def env_step(self, action: np.ndarray):
        if self.pool is None:
            raise RuntimeError("reset the environment first")
        obs, rewards, fell, truncated, info = self.pool.step(np.asarray(action)[None, :])
        done = bool(fell[0] or truncated[0])
        record = {
            "reward": float(rewards[0]),
            "terms": {k: float(v[0]) for k, v in info["terms"].items()},
            "diagnostics": {k: float(v[0]) for k, v in info["diagnostics"].items()},
            "done": done,
            "diverged": bool(info["diverged"][0]),
        }
        out_obs = info["terminal_obs"][0] if done and info["terminal_obs"] is not None else obs[0]
        return out_obs, float(rewards[0]), done, record

    @property
    def state(self) -> SimState:
        p = self.pool
        return sim.state_from_arrays(p.q[0], p.v[0], p.pen[0], p.torques[0])
