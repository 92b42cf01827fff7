"""Design space, task distribution, and design -> robot model mapping.

A design point is a pair of link-length scale factors (thigh, shank) and,
in 4D mode, hip/knee gear ratios. Building a robot applies the scale
factors to the nominal link lengths, scales link masses by the same
factors, and recomputes thin-rod inertias.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SCALE_BOUNDS = (0.6, 1.4)
GEAR_BOUNDS = (2.8, 12.0)


class ConfigurationError(ValueError):
    """Invalid bounds or parameter values."""


@dataclass(frozen=True)
class DesignParams:
    """One point in design space; the task of the meta-learning problem."""

    thigh_scale: float
    shank_scale: float
    hip_gear: float | None = None
    knee_gear: float | None = None

    @property
    def dim(self) -> int:
        return 2 if self.hip_gear is None else 4

    def as_vector(self) -> np.ndarray:
        if self.hip_gear is None:
            return np.array([self.thigh_scale, self.shank_scale], dtype=np.float64)
        return np.array(
            [self.thigh_scale, self.shank_scale, self.hip_gear, self.knee_gear],
            dtype=np.float64,
        )


@dataclass(frozen=True)
class DesignSpace:
    """Axis-aligned box of valid designs; dimensionality 2 or 4."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lower = np.asarray(self.lower, dtype=np.float64)
        upper = np.asarray(self.upper, dtype=np.float64)
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        if lower.shape != upper.shape or lower.ndim != 1:
            raise ConfigurationError("bounds must be 1-D arrays of equal length")
        if lower.shape[0] not in (2, 4):
            raise ConfigurationError("design space must be 2-D or 4-D")
        if not (np.isfinite(lower).all() and np.isfinite(upper).all()):
            raise ConfigurationError("bounds must be finite")
        if np.any(lower > upper):
            raise ConfigurationError("lower bound exceeds upper bound")

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    def contains(self, design: DesignParams, tol: float = 1e-9) -> bool:
        v = design.as_vector()
        if v.shape[0] != self.dim:
            return False
        return bool(np.all(v >= self.lower - tol) and np.all(v <= self.upper + tol))

    def to_design(self, vector: np.ndarray) -> DesignParams:
        v = np.asarray(vector, dtype=np.float64)
        if v.shape != (self.dim,):
            raise ConfigurationError(f"expected vector of length {self.dim}")
        if self.dim == 2:
            return DesignParams(float(v[0]), float(v[1]))
        return DesignParams(float(v[0]), float(v[1]), float(v[2]), float(v[3]))

    def nominal_design(self, nominal: "NominalSpec | None" = None) -> DesignParams:
        """Unit scales, and the nominal gear ratios when gears are searched."""
        if self.dim == 2:
            return DesignParams(1.0, 1.0)
        nominal = nominal or NominalSpec()
        return DesignParams(1.0, 1.0, nominal.hip_gear, nominal.knee_gear)

    @staticmethod
    def default_2d() -> "DesignSpace":
        lo, hi = SCALE_BOUNDS
        return DesignSpace(np.array([lo, lo]), np.array([hi, hi]))

    @staticmethod
    def default_4d() -> "DesignSpace":
        lo, hi = SCALE_BOUNDS
        glo, ghi = GEAR_BOUNDS
        return DesignSpace(np.array([lo, lo, glo, glo]), np.array([hi, hi, ghi, ghi]))


@dataclass(frozen=True)
class NominalSpec:
    """Nominal robot parameters; the design scales act on these."""

    thigh_length: float = 0.35
    shank_length: float = 0.35
    thigh_mass: float = 1.2
    shank_mass: float = 0.8
    body_mass: float = 20.0
    body_length: float = 0.6
    hip_gear: float = 5.6
    knee_gear: float = 8.0
    motor_stall_torque: float = 6.0
    motor_no_load_speed: float = 50.0

    def __post_init__(self):
        for name in (
            "thigh_length",
            "shank_length",
            "thigh_mass",
            "shank_mass",
            "body_mass",
            "body_length",
            "hip_gear",
            "knee_gear",
            "motor_stall_torque",
            "motor_no_load_speed",
        ):
            if not getattr(self, name) > 0.0:
                raise ConfigurationError(f"{name} must be strictly positive")


@dataclass(frozen=True)
class RobotModel:
    """Concrete planar quadruped derived from DesignParams x NominalSpec.

    Joint order everywhere: [front hip, front knee, hind hip, hind knee].
    """

    thigh_length: float
    thigh_mass: float
    thigh_com: float
    thigh_inertia: float
    shank_length: float
    shank_mass: float
    shank_com: float
    shank_inertia: float
    body_mass: float
    body_length: float
    body_inertia: float
    gear_ratios: np.ndarray = field(repr=False)
    torque_limits: np.ndarray = field(repr=False)
    speed_limits: np.ndarray = field(repr=False)

    @property
    def total_mass(self) -> float:
        return self.body_mass + 2.0 * (self.thigh_mass + self.shank_mass)


def _rod_inertia(mass: float, length: float) -> float:
    return mass * length * length / 12.0


def sample_design(rng: np.random.Generator, space: DesignSpace) -> DesignParams:
    """Draw each coordinate independently and uniformly within its bounds."""
    v = rng.uniform(space.lower, space.upper)
    return space.to_design(v)


def build_robot(design: DesignParams, nominal: NominalSpec) -> RobotModel:
    """Apply link scales and gear ratios to the nominal spec.

    Link mass scales with the same factor as its length (a rod's mass is
    linear in its length); inertia is the thin-rod value recomputed from
    the scaled mass and length; the COM stays at the link midpoint.
    """
    lt = design.thigh_scale * nominal.thigh_length
    ls = design.shank_scale * nominal.shank_length
    mt = design.thigh_scale * nominal.thigh_mass
    ms = design.shank_scale * nominal.shank_mass
    hip_gear = nominal.hip_gear if design.hip_gear is None else design.hip_gear
    knee_gear = nominal.knee_gear if design.knee_gear is None else design.knee_gear
    gears = np.array([hip_gear, knee_gear, hip_gear, knee_gear], dtype=np.float64)
    return RobotModel(
        thigh_length=lt,
        thigh_mass=mt,
        thigh_com=0.5 * lt,
        thigh_inertia=_rod_inertia(mt, lt),
        shank_length=ls,
        shank_mass=ms,
        shank_com=0.5 * ls,
        shank_inertia=_rod_inertia(ms, ls),
        body_mass=nominal.body_mass,
        body_length=nominal.body_length,
        body_inertia=_rod_inertia(nominal.body_mass, nominal.body_length),
        gear_ratios=gears,
        torque_limits=gears * nominal.motor_stall_torque,
        speed_limits=nominal.motor_no_load_speed / gears,
    )


def design_to_features(design: DesignParams, space: DesignSpace) -> np.ndarray:
    """Affinely map each design coordinate to [-1, 1] using the space bounds."""
    v = design.as_vector()
    span = space.upper - space.lower
    center = 0.5 * (space.upper + space.lower)
    with np.errstate(invalid="ignore"):
        feat = np.where(span > 0.0, 2.0 * (v - center) / span, 0.0)
    return feat


def features_to_design(features: np.ndarray, space: DesignSpace) -> DesignParams:
    """Inverse of design_to_features on in-bounds points."""
    f = np.asarray(features, dtype=np.float64)
    center = 0.5 * (space.upper + space.lower)
    v = center + 0.5 * f * (space.upper - space.lower)
    return space.to_design(v)
