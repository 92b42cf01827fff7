"""Parametrized 1-D heightfields: flat ground, rolling hills, discrete steps.

Hills are the sum of two sinusoids at frequencies f and 2.7 f with
amplitudes a and a/3 plus per-node uniform noise; steps are piecewise
constant plateaus with uniformly drawn height increments. A difficulty
knob in [0, 1] scales amplitude, roughness, and step height. Each
generated field carries one friction coefficient drawn per episode.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .morphology import ConfigurationError

GRID_SPACING = 0.02
GRID_EXTENT = 40.0

DIFFICULTY_PRESETS = {"easy": 0.3, "mid": 0.6, "hard": 1.0}

TERRAIN_KINDS = ("flat", "hills", "steps")


@dataclass(frozen=True)
class TerrainParams:
    """Generator knobs; amplitude/roughness/step_height are difficulty-1 maxima."""

    kind: str = "flat"
    difficulty: float = 1.0
    amplitude: float = 0.08
    frequency: float = 0.35
    roughness: float = 0.01
    step_width: float = 0.35
    step_height: float = 0.08
    friction_range: tuple[float, float] = (0.5, 1.25)

    def __post_init__(self):
        if self.kind not in TERRAIN_KINDS:
            raise ConfigurationError(f"unknown terrain kind {self.kind!r}")
        values = (
            self.difficulty,
            self.amplitude,
            self.frequency,
            self.roughness,
            self.step_width,
            self.step_height,
            *self.friction_range,
        )
        if not all(np.isfinite(v) for v in values):
            raise ConfigurationError("terrain parameters must be finite")
        if not 0.0 <= self.difficulty <= 1.0:
            raise ConfigurationError("difficulty must lie in [0, 1]")
        if min(self.amplitude, self.roughness, self.step_height) < 0.0:
            raise ConfigurationError("amplitude, roughness, step_height must be >= 0")
        if self.step_width <= 0.0 or self.frequency <= 0.0:
            raise ConfigurationError("step_width and frequency must be > 0")
        mu_min, mu_max = self.friction_range
        if not 0.0 < mu_min <= mu_max:
            raise ConfigurationError("friction range must satisfy 0 < mu_min <= mu_max")


@dataclass(frozen=True)
class Heightfield:
    """Regular elevation grid over [x0, x0 + (n-1)*spacing] plus episode friction."""

    heights: np.ndarray
    spacing: float
    x0: float
    friction: float

    def __post_init__(self):
        h = np.ascontiguousarray(np.asarray(self.heights, dtype=np.float64))
        h.setflags(write=False)
        object.__setattr__(self, "heights", h)
        if not np.isfinite(h).all():
            raise ConfigurationError("heightfield elevations must be finite")
        if self.spacing <= 0.0:
            raise ConfigurationError("grid spacing must be > 0")

    @property
    def extent(self) -> float:
        return (self.heights.shape[0] - 1) * self.spacing


def generate(params: TerrainParams, rng: np.random.Generator) -> Heightfield:
    """Build a heightfield; deterministic for a given (params, rng state)."""
    n = int(round(GRID_EXTENT / GRID_SPACING)) + 1
    x0 = -0.5 * GRID_EXTENT
    x = x0 + GRID_SPACING * np.arange(n)
    d = params.difficulty

    # Friction is drawn first so flat/hills/steps consume the stream identically.
    mu_min, mu_max = params.friction_range
    friction = float(rng.uniform(mu_min, mu_max))

    if params.kind == "flat":
        h = np.zeros(n)
    elif params.kind == "hills":
        a = d * params.amplitude
        r = d * params.roughness
        f = params.frequency
        phase1, phase2 = rng.uniform(0.0, 2.0 * np.pi, size=2)
        h = a * np.sin(2.0 * np.pi * f * x + phase1)
        h += (a / 3.0) * np.sin(2.0 * np.pi * 2.7 * f * x + phase2)
        h += rng.uniform(-r, r, size=n)
    else:
        s = d * params.step_height
        nodes_per_step = max(1, int(round(params.step_width / GRID_SPACING)))
        n_plateaus = n // nodes_per_step + 2
        increments = rng.uniform(-s, s, size=n_plateaus)
        levels = np.cumsum(increments)
        idx = np.arange(n) // nodes_per_step
        h = levels[idx]
        # Anchor the spawn region at zero elevation so resets are comparable.
        h = h - h[n // 2]

    return Heightfield(heights=h, spacing=GRID_SPACING, x0=x0, friction=friction)


def height_at(field: Heightfield, x) -> np.ndarray | float:
    """Linearly interpolated elevation; clamps to boundary values outside the extent."""
    xq = np.asarray(x, dtype=np.float64)
    t = (xq - field.x0) / field.spacing
    t = np.clip(t, 0.0, field.heights.shape[0] - 1)
    i0 = np.floor(t).astype(np.intp)
    i0 = np.minimum(i0, field.heights.shape[0] - 2)
    frac = t - i0
    out = field.heights[i0] * (1.0 - frac) + field.heights[i0 + 1] * frac
    if np.isscalar(x):
        return float(out)
    return out


def height_scan(field: Heightfield, x_center, offsets: np.ndarray) -> np.ndarray:
    """Heights at x_center + offsets, relative to the height at x_center.

    x_center may be a scalar (returns shape (k,)) or a batch of centers
    (returns shape (batch, k)).
    """
    offs = np.asarray(offsets, dtype=np.float64)
    xc = np.asarray(x_center, dtype=np.float64)
    base = height_at(field, xc)
    pts = xc[..., None] + offs
    return height_at(field, pts) - np.asarray(base)[..., None]
