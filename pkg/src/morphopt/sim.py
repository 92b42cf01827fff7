"""Planar rigid-body dynamics for the sagittal-plane quadruped.

Generalized coordinates q = [x, z, pitch, fh, fk, hh, hk]: base position,
base pitch, then front hip/knee and hind hip/knee angles. Joint angles are
relative (hip to body pitch, knee to thigh). The model is a kinematic tree
of five rods: body plus two 2-link legs attached at the body ends.

Dynamics are assembled from per-body COM Jacobians (exact for planar rigid
bodies: M = sum m_i J_i^T J_i + sum I_i w_i w_i^T) and integrated with
semi-implicit Euler. Ground contact uses a penalty model with regularized
Coulomb friction at six points: both feet, both knees, both body ends.

Everything is batched over environments along the leading axis.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .morphology import RobotModel
from .terrain import Heightfield

GRAVITY = 9.81
PHYSICS_DT = 2.5e-3
N_SUBSTEPS = 8

# Penalty contact constants.
CONTACT_KN = 4.0e4
CONTACT_DN = 400.0
CONTACT_KT = 2.0e3

CONTACT_TOL = 1e-9

NQ = 7
N_CONTACTS = 6
FOOT_POINTS = (0, 1)
NONFOOT_POINTS = (2, 3, 4, 5)


class SimulationDiverged(RuntimeError):
    """Integration produced a non-finite state; the episode must end."""


@dataclass(frozen=True)
class ActuatorSpec:
    """Geared motor: stall torque and no-load speed at the motor shaft."""

    stall_torque: float
    no_load_speed: float
    gear_ratio: float

    def __post_init__(self):
        if min(self.stall_torque, self.no_load_speed, self.gear_ratio) <= 0.0:
            raise ValueError("actuator parameters must be strictly positive")


@dataclass(frozen=True)
class SimState:
    """Full dynamic state of one robot plus contact/torque bookkeeping."""

    base_pos: np.ndarray
    pitch: float
    base_vel: np.ndarray
    pitch_rate: float
    joint_angles: np.ndarray
    joint_velocities: np.ndarray
    foot_contacts: np.ndarray
    nonfoot_contact_count: int
    applied_torques: np.ndarray

    def as_q(self) -> np.ndarray:
        return np.concatenate(([self.base_pos[0], self.base_pos[1], self.pitch], self.joint_angles))

    def as_v(self) -> np.ndarray:
        return np.concatenate(([self.base_vel[0], self.base_vel[1], self.pitch_rate], self.joint_velocities))


def actuator_torque(commanded, joint_velocity, spec: ActuatorSpec):
    """Clamp a commanded torque to the gear-dependent torque-speed envelope.

    Available driving torque derates linearly from g*tau_m at zero joint
    speed to zero at the no-load joint speed w_m/g; torque opposing the
    motion (braking) is allowed up to g*tau_m at any speed.
    """
    cmd = np.asarray(commanded, dtype=np.float64)
    vel = np.asarray(joint_velocity, dtype=np.float64)
    tau_max = spec.gear_ratio * spec.stall_torque
    no_load = spec.no_load_speed / spec.gear_ratio
    drive = tau_max * np.maximum(0.0, 1.0 - np.abs(vel) / no_load)
    upper = np.where(vel > 0.0, drive, tau_max)
    lower = np.where(vel < 0.0, -drive, -tau_max)
    out = np.clip(cmd, lower, upper)
    if np.isscalar(commanded) and np.isscalar(joint_velocity):
        return float(out)
    return out


def actuator_torque_batch(commanded, joint_velocity, torque_limits, speed_limits):
    """Vectorized envelope clamp with per-joint limits (arrays broadcast)."""
    drive = torque_limits * np.maximum(0.0, 1.0 - np.abs(joint_velocity) / speed_limits)
    upper = np.where(joint_velocity > 0.0, drive, torque_limits)
    lower = np.where(joint_velocity < 0.0, -drive, -torque_limits)
    return np.clip(commanded, lower, upper)


def contact_force(
    penetration,
    tangential_velocity,
    normal_velocity,
    mu,
    k_n: float = CONTACT_KN,
    d_n: float = CONTACT_DN,
    k_t: float = CONTACT_KT,
):
    """Penalty normal force plus regularized Coulomb friction.

    N = k_n*pen + d_n*max(0, -v_n), clamped at zero; F_t viscous in the
    tangential velocity, clamped to the friction cone [-mu*N, mu*N].
    """
    pen = np.asarray(penetration, dtype=np.float64)
    vt = np.asarray(tangential_velocity, dtype=np.float64)
    vn = np.asarray(normal_velocity, dtype=np.float64)
    normal = np.maximum(0.0, k_n * pen + d_n * np.maximum(0.0, -vn))
    limit = mu * normal
    tangential = -np.clip(k_t * vt, -limit, limit)
    if np.isscalar(penetration):
        return float(normal), float(tangential)
    return normal, tangential


# ---------------------------------------------------------------------------
# Batched kinematics / dynamics kernel
# ---------------------------------------------------------------------------

# Any point on the robot is base + s*(L/2)*u(pitch) + a*d(alpha_t) + b*d(alpha_s)
# with u = (cos, sin) along the body, d(alpha) = (sin, -cos) down the leg, and
# alpha_t/alpha_s the absolute thigh/shank angles of that point's leg.
# A point row is (s, leg, a, b); leg is 0 (front), 1 (hind), or -1 (body).
# The kernel tracks one fused table: 5 COM points then the 6 contact points.


def _model_points(model: RobotModel):
    lt, ls = model.thigh_length, model.shank_length
    ct, cs = model.thigh_com, model.shank_com
    rows = [
        (0.0, -1, 0.0, 0.0),   # body COM
        (1.0, 0, ct, 0.0),     # front thigh COM
        (1.0, 0, lt, cs),      # front shank COM
        (-1.0, 1, ct, 0.0),    # hind thigh COM
        (-1.0, 1, lt, cs),     # hind shank COM
        (1.0, 0, lt, ls),      # front foot
        (-1.0, 1, lt, ls),     # hind foot
        (1.0, 0, lt, 0.0),     # front knee
        (-1.0, 1, lt, 0.0),    # hind knee
        (1.0, -1, 0.0, 0.0),   # front body end
        (-1.0, -1, 0.0, 0.0),  # hind body end
    ]
    masses = np.array(
        [model.body_mass, model.thigh_mass, model.shank_mass, model.thigh_mass, model.shank_mass]
    )
    return rows, masses


_BODY_SPIN = np.zeros((5, NQ))
_BODY_SPIN[0, 2] = 1.0                # body: pitch
_BODY_SPIN[1, [2, 3]] = 1.0           # front thigh: pitch + front hip
_BODY_SPIN[2, [2, 3, 4]] = 1.0        # front shank: + front knee
_BODY_SPIN[3, [2, 5]] = 1.0           # hind thigh
_BODY_SPIN[4, [2, 5, 6]] = 1.0        # hind shank


def _body_inertias(model: RobotModel) -> np.ndarray:
    return np.array(
        [model.body_inertia, model.thigh_inertia, model.shank_inertia, model.thigh_inertia, model.shank_inertia]
    )


class _PointTable:
    """Vectorized kinematics over a fixed (s, leg, a, b) point table.

    The Jacobian buffer is cached per batch size and overwritten on every
    call; callers must not hold it across calls.
    """

    def __init__(self, rows, half_length):
        self.n = len(rows)
        self.s = np.array([r[0] for r in rows])
        leg = np.array([r[1] for r in rows])
        self.a = np.array([r[2] for r in rows])
        self.b = np.array([r[3] for r in rows])
        self.leg0 = np.maximum(leg, 0)
        legged = np.nonzero(leg >= 0)[0]
        self.legged = legged
        self.hip_col = 3 + 2 * self.leg0[legged]
        self.knee_col = 4 + 2 * self.leg0[legged]
        self.shl = self.s * half_length
        self._jac = np.zeros((0, self.n, 2, NQ))

    def _jac_buffer(self, B):
        if self._jac.shape[0] != B:
            self._jac = np.zeros((B, self.n, 2, NQ))
            self._jac[:, :, 0, 0] = 1.0
            self._jac[:, :, 1, 1] = 1.0
        return self._jac

    def kinematics(self, q, v):
        """pos (B, P, 2), J (B, P, 2, 7), bias Jdot*qdot (B, P, 2)."""
        B = q.shape[0]
        pitch = q[:, 2]
        cp, sp = np.cos(pitch), np.sin(pitch)
        u = np.empty((B, 1, 2))
        u[:, 0, 0], u[:, 0, 1] = cp, sp
        uperp = np.empty((B, 1, 2))
        uperp[:, 0, 0], uperp[:, 0, 1] = -sp, cp

        alpha_t = pitch[:, None] + q[:, [3, 5]]
        alpha_s = alpha_t + q[:, [4, 6]]
        ct, st = np.cos(alpha_t), np.sin(alpha_t)
        cs_, ss = np.cos(alpha_s), np.sin(alpha_s)
        trig = np.empty((B, 2, 2, 4))
        trig[:, :, 0, 0], trig[:, :, 1, 0] = st, -ct      # d_t
        trig[:, :, 0, 1], trig[:, :, 1, 1] = ct, st       # d'_t
        trig[:, :, 0, 2], trig[:, :, 1, 2] = ss, -cs_     # d_s
        trig[:, :, 0, 3], trig[:, :, 1, 3] = cs_, ss      # d'_s
        per_pt = trig[:, self.leg0]
        d_t, dp_t = per_pt[..., 0], per_pt[..., 1]
        d_s, dp_s = per_pt[..., 2], per_pt[..., 3]

        a = self.a[None, :, None]
        b = self.b[None, :, None]
        shl = self.shl[None, :, None]

        pos = q[:, None, 0:2] + shl * u + a * d_t + b * d_s
        j_knee = b * dp_s
        j_leg = a * dp_t + j_knee
        j_pitch = shl * uperp + j_leg

        omega_t = (v[:, 2:3] + v[:, [3, 5]])[:, self.leg0, None]
        omega_s = omega_t + v[:, [4, 6]][:, self.leg0, None]
        bias = (-shl * v[:, 2, None, None] ** 2) * u
        bias -= (a * omega_t**2) * d_t + (b * omega_s**2) * d_s

        jac = self._jac_buffer(B)
        jac[:, :, :, 2] = j_pitch
        # Non-adjacent advanced indices put the point axis first: (K, B, 2).
        jac[:, self.legged, :, self.hip_col] = np.swapaxes(j_leg[:, self.legged], 0, 1)
        jac[:, self.legged, :, self.knee_col] = np.swapaxes(j_knee[:, self.legged], 0, 1)
        return pos, jac, bias


def _terrain_height(heights, x0, spacing, x):
    """Interpolated elevation on per-env grids; heights (B, N), x (B, P)."""
    n = heights.shape[1]
    t = np.clip((x - x0) / spacing, 0.0, n - 1.0)
    # NaN queries (mid-divergence states) must not crash the lookup; any
    # finite height keeps the NaN flowing to the caller's finiteness check.
    t = np.where(np.isnan(t), 0.0, t)
    i0 = np.minimum(t.astype(np.intp), n - 2)
    frac = t - i0
    h0 = np.take_along_axis(heights, i0, axis=1)
    h1 = np.take_along_axis(heights, i0 + 1, axis=1)
    return h0 * (1.0 - frac) + h1 * frac


@dataclass
class BatchKernel:
    """Reusable dynamics stepper for a batch of identical robots.

    One robot model, per-env terrain grids (stacked on axis 0), shared
    grid geometry. Holds no dynamic state; q/v are caller-owned arrays.
    """

    model: RobotModel
    heights: np.ndarray
    x0: float
    spacing: float
    friction: np.ndarray
    gravity: float = GRAVITY
    k_n: float = CONTACT_KN
    d_n: float = CONTACT_DN
    k_t: float = CONTACT_KT
    joint_lower: np.ndarray | None = None
    joint_upper: np.ndarray | None = None
    limit_stiffness: float = 100.0
    pinned: bool = False

    def __post_init__(self):
        rows, self.masses = _model_points(self.model)
        self.points = _PointTable(rows, 0.5 * self.model.body_length)
        self.rot_inertia = np.einsum(
            "s,si,sj->ij", _body_inertias(self.model), _BODY_SPIN, _BODY_SPIN
        )
        self.inertias = _body_inertias(self.model)
        self.mass_rows = np.repeat(self.masses, 2)[None, :, None]

    def contact_state(self, q, v):
        """Penetrations and contact-point velocities at the current state."""
        pos, jac, _ = self.points.kinematics(q, v)
        pos_c, jac_c = pos[:, 5:], jac[:, 5:]
        vel = np.einsum("bpij,bj->bpi", jac_c, v)
        ground = _terrain_height(self.heights, self.x0, self.spacing, pos_c[:, :, 0])
        pen = ground - pos_c[:, :, 1]
        return pen, vel, pos_c, jac_c

    def substep(self, q, v, torques, dt):
        """One semi-implicit Euler step; returns (q', v', penetrations)."""
        B = q.shape[0]
        pos, jac, bias = self.points.kinematics(q, v)
        jac_m = jac[:, :5].reshape(B, 10, NQ)
        pos_c, jac_c = pos[:, 5:], jac[:, 5:]
        jac_flat = jac_c.reshape(B, 2 * N_CONTACTS, NQ)

        # One fused product gives the mass matrix and the gravity + Coriolis
        # generalized force: Jw^T [J | (g_vec - bias)] with masses in Jw.
        jw_t = np.swapaxes(jac_m * self.mass_rows, 1, 2)
        grav_minus_bias = -bias[:, :5].reshape(B, 10, 1)
        grav_minus_bias[:, 1::2] -= self.gravity
        mass_force = jw_t @ np.concatenate([jac_m, grav_minus_bias], axis=2)
        mass_matrix = mass_force[:, :, :NQ] + self.rot_inertia
        force = mass_force[:, :, NQ]

        force[:, 3:] += torques
        if self.joint_lower is not None:
            joints = q[:, 3:]
            excess = np.minimum(0.0, joints - self.joint_lower) + np.maximum(0.0, joints - self.joint_upper)
            force[:, 3:] -= self.limit_stiffness * excess

        ground = _terrain_height(self.heights, self.x0, self.spacing, pos_c[:, :, 0])
        pen = ground - pos_c[:, :, 1]
        vel_c = (jac_flat @ v[:, :, None]).reshape(B, N_CONTACTS, 2)

        rhs = np.concatenate([np.swapaxes(jac_flat, 1, 2), force[:, :, None]], axis=2)
        if self.pinned:
            sol = np.zeros_like(rhs)
            sol[:, 3:, :] = np.linalg.solve(mass_matrix[:, 3:, 3:], rhs[:, 3:, :])
        else:
            sol = np.linalg.solve(mass_matrix, rhs)
        minv_jt = sol[:, :, : 2 * N_CONTACTS]
        qdd_free = sol[:, :, -1]

        # Per-point, per-axis effective masses from the operational-space
        # inverse inertia; they cap the explicit contact gains so one
        # substep can never overshoot the velocity it acts on.
        lam_inv = (jac_flat * np.swapaxes(minv_jt, 1, 2)).sum(axis=2).reshape(B, N_CONTACTS, 2)
        m_eff = 1.0 / np.maximum(lam_inv, 1e-12)
        d_n_eff = np.minimum(self.d_n, m_eff[:, :, 1] / dt)
        k_t_eff = np.minimum(self.k_t, m_eff[:, :, 0] / dt)

        active = pen > 0.0
        normal = np.maximum(0.0, self.k_n * pen + d_n_eff * np.maximum(0.0, -vel_c[:, :, 1]))
        normal *= active
        limit = self.friction[:, None] * normal
        tangential = -np.clip(k_t_eff * vel_c[:, :, 0], -limit, limit)

        f_flat = np.empty((B, 2 * N_CONTACTS, 1))
        f_flat[:, 0::2, 0] = tangential
        f_flat[:, 1::2, 0] = normal
        qdd = qdd_free + (minv_jt @ f_flat)[:, :, 0]

        v_next = v + dt * qdd
        q_next = q + dt * v_next
        return q_next, v_next, pen

    def step_control(self, q, v, torque_fn, dt=PHYSICS_DT, substeps=N_SUBSTEPS, check=True):
        """Run one control period: substeps x (torque_fn -> substep).

        torque_fn(q, v) -> (B, 4) commanded joint torques, already passed
        through the actuator envelope by the caller's closure.
        Returns q, v, last applied torques, and final penetrations. With
        check=True a non-finite result raises SimulationDiverged; with
        check=False the caller inspects the returned arrays itself.
        """
        torques = None
        pen = None
        for _ in range(substeps):
            torques = torque_fn(q, v)
            q, v, pen = self.substep(q, v, torques, dt)
        if check and not (np.isfinite(q).all() and np.isfinite(v).all()):
            raise SimulationDiverged("non-finite state after integration")
        return q, v, torques, pen

    def mechanical_energy(self, q, v):
        """Kinetic plus gravitational potential energy per environment."""
        pos, jac, _ = self.points.kinematics(q, v)
        pos_m, jac_m = pos[:, :5], jac[:, :5]
        vel = np.einsum("bsij,bj->bsi", jac_m, v)
        kinetic = 0.5 * np.einsum("s,bsi,bsi->b", self.masses, vel, vel)
        spins = np.einsum("si,bi->bs", _BODY_SPIN, v)
        kinetic += 0.5 * np.einsum("s,bs->b", self.inertias, spins**2)
        potential = self.gravity * np.einsum("s,bs->b", self.masses, pos_m[:, :, 1])
        return kinetic + potential


def _kernel_for(model: RobotModel, field: Heightfield, gravity: float) -> BatchKernel:
    return BatchKernel(
        model=model,
        heights=field.heights[None, :],
        x0=field.x0,
        spacing=field.spacing,
        friction=np.array([field.friction]),
        gravity=gravity,
    )


def step(
    state: SimState,
    joint_torques: np.ndarray,
    model: RobotModel,
    field: Heightfield,
    dt: float = PHYSICS_DT,
    gravity: float = GRAVITY,
) -> SimState:
    """Advance a single robot by one physics step with fixed torques."""
    if dt <= 0.0:
        raise ValueError("dt must be > 0")
    kernel = _kernel_for(model, field, gravity)
    q = state.as_q()[None, :]
    v = state.as_v()[None, :]
    tau = np.asarray(joint_torques, dtype=np.float64)[None, :]
    q, v, pen = kernel.substep(q, v, tau, dt)
    if not (np.isfinite(q).all() and np.isfinite(v).all()):
        raise SimulationDiverged("non-finite state after integration")
    return state_from_arrays(q[0], v[0], pen[0], tau[0])


def state_from_arrays(q, v, penetrations, torques) -> SimState:
    foot_pen = penetrations[list(FOOT_POINTS)]
    nonfoot_pen = penetrations[list(NONFOOT_POINTS)]
    return SimState(
        base_pos=q[0:2].copy(),
        pitch=float(q[2]),
        base_vel=v[0:2].copy(),
        pitch_rate=float(v[2]),
        joint_angles=q[3:].copy(),
        joint_velocities=v[3:].copy(),
        foot_contacts=foot_pen >= -CONTACT_TOL,
        nonfoot_contact_count=int(np.count_nonzero(nonfoot_pen > 0.0)),
        applied_torques=np.asarray(torques, dtype=np.float64).copy(),
    )


def initial_state(q, v, model: RobotModel, field: Heightfield) -> SimState:
    """Build a SimState with contact flags consistent with (q, v)."""
    kernel = _kernel_for(model, field, GRAVITY)
    pen, _, _, _ = kernel.contact_state(np.asarray(q)[None, :], np.asarray(v)[None, :])
    return state_from_arrays(np.asarray(q, dtype=np.float64), np.asarray(v, dtype=np.float64), pen[0], np.zeros(4))
