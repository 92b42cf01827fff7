"""Experiment configuration.

Line-oriented key = value files with sections (INI), parsed strictly: an
unknown section or key, or a value a module invariant rejects, is a
configuration error before any computation starts. Every default equals
the documented module constant, so an empty file is the desk-scale
nominal experiment.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass

import numpy as np

from .designopt import COST_METRICS
from .env import EnvConfig
from .maml import MetaHyper
from .morphology import ConfigurationError, DesignSpace, NominalSpec
from .ppo import PpoHyper
from .terrain import TERRAIN_KINDS, TerrainParams

__all__ = ["ExperimentConfig", "load_config", "default_config"]


def _kind(value: str) -> str:
    if value not in TERRAIN_KINDS:
        raise ValueError(f"terrain kind must be one of {TERRAIN_KINDS}")
    return value


def _metric(value: str) -> str:
    if value not in COST_METRICS:
        raise ValueError(f"metric must be one of {COST_METRICS}")
    return value


# section -> key -> (converter, default)
SCHEMA = {
    "experiment": {
        "seed": (int, 0),
        "output_dir": (str, "runs"),
    },
    "design_space": {
        "dim": (int, 2),
        "scale_lower": (float, 0.6),
        "scale_upper": (float, 1.4),
        "gear_lower": (float, 2.8),
        "gear_upper": (float, 12.0),
    },
    "nominal": {
        "thigh_length": (float, 0.35),
        "shank_length": (float, 0.35),
        "thigh_mass": (float, 1.2),
        "shank_mass": (float, 0.8),
        "body_mass": (float, 20.0),
        "body_length": (float, 0.6),
        "hip_gear": (float, 5.6),
        "knee_gear": (float, 8.0),
        "motor_stall_torque": (float, 6.0),
        "motor_no_load_speed": (float, 50.0),
    },
    "terrain": {
        "kind": (_kind, "flat"),
        "difficulty": (float, 1.0),
        "amplitude": (float, 0.08),
        "frequency": (float, 0.35),
        "roughness": (float, 0.01),
        "step_width": (float, 0.35),
        "step_height": (float, 0.08),
        "friction_low": (float, 0.5),
        "friction_high": (float, 1.25),
    },
    "env": {
        "episode_limit": (int, 500),
        "command_low": (float, -1.0),
        "command_high": (float, 1.5),
        "kp": (float, 40.0),
        "kd": (float, 1.0),
        "base_frequency": (float, 1.25),
        "reset_noise": (float, 0.05),
        "physics_dt": (float, 0.0025),
        "control_dt": (float, 0.02),
        "contact_kn": (float, 4.0e4),
        "contact_dn": (float, 400.0),
        "contact_kt": (float, 2.0e3),
    },
    "ppo": {
        "gamma": (float, 0.993),
        "lam": (float, 0.95),
        "clip": (float, 0.2),
        "stepsize": (float, 5e-4),
        "value_weight": (float, 0.5),
        "entropy_weight": (float, 0.0),
        "minibatches": (int, 10),
        "epochs": (int, 4),
    },
    "meta": {
        "updates": (int, 300),
        "meta_batch": (int, 5),
        "rollout_length": (int, 50),
        "inner_alpha": (float, 5e-4),
        "outer_beta": (float, 5e-4),
        "inner_steps": (int, 1),
        "train_envs": (int, 64),
    },
    "designopt": {
        "metric": (_metric, "velocity_tracking"),
        "generations": (int, 10),
        "population": (int, 12),
        "adapt_steps": (int, 5),
        "adapt_rollout": (int, 50),
        "eval_transitions": (int, 250),
        "eval_envs": (int, 32),
        "penalty_weight": (float, 1.0),
    },
}


@dataclass
class ExperimentConfig:
    """Validated experiment settings assembled into module objects."""

    seed: int
    output_dir: str
    space: DesignSpace
    nominal: NominalSpec
    terrain: TerrainParams
    env: EnvConfig
    ppo: PpoHyper
    meta: MetaHyper
    metric: str
    generations: int
    population: int
    adapt_steps: int
    adapt_rollout: int
    eval_transitions: int
    eval_envs: int
    penalty_weight: float


def _parse_values(path) -> dict:
    parser = configparser.ConfigParser(
        interpolation=None, inline_comment_prefixes=("#", ";")
    )
    if path is not None:
        try:
            with open(path) as handle:
                parser.read_file(handle)
        except OSError as err:
            raise ConfigurationError(f"cannot read config {path}: {err}") from err
        except configparser.Error as err:
            raise ConfigurationError(f"malformed config {path}: {err}") from err
    values = {section: {k: d for k, (_, d) in keys.items()}
              for section, keys in SCHEMA.items()}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigurationError(f"unknown config section [{section}]")
        for key, raw in parser[section].items():
            if key not in SCHEMA[section]:
                raise ConfigurationError(f"unknown key {key!r} in section [{section}]")
            convert = SCHEMA[section][key][0]
            try:
                values[section][key] = convert(raw)
            except (TypeError, ValueError) as err:
                raise ConfigurationError(
                    f"bad value for [{section}] {key} = {raw!r}: {err}"
                ) from err
    return values


def _assemble(values: dict) -> ExperimentConfig:
    ds = values["design_space"]
    if ds["dim"] not in (2, 4):
        raise ConfigurationError("design_space dim must be 2 or 4")
    lower = [ds["scale_lower"], ds["scale_lower"]]
    upper = [ds["scale_upper"], ds["scale_upper"]]
    if ds["dim"] == 4:
        lower += [ds["gear_lower"], ds["gear_lower"]]
        upper += [ds["gear_upper"], ds["gear_upper"]]
    space = DesignSpace(np.array(lower), np.array(upper))

    nominal = NominalSpec(**values["nominal"])

    t = values["terrain"]
    terrain = TerrainParams(
        kind=t["kind"], difficulty=t["difficulty"], amplitude=t["amplitude"],
        frequency=t["frequency"], roughness=t["roughness"],
        step_width=t["step_width"], step_height=t["step_height"],
        friction_range=(t["friction_low"], t["friction_high"]),
    )

    e = values["env"]
    env = EnvConfig(
        command_range=(e["command_low"], e["command_high"]),
        terrain=terrain, kp=e["kp"], kd=e["kd"],
        base_frequency=e["base_frequency"], episode_limit=e["episode_limit"],
        reset_noise=e["reset_noise"], physics_dt=e["physics_dt"],
        control_dt=e["control_dt"], contact_kn=e["contact_kn"],
        contact_dn=e["contact_dn"], contact_kt=e["contact_kt"],
    )

    ppo = PpoHyper(**values["ppo"])
    m = values["meta"]
    meta = MetaHyper(
        updates=m["updates"], meta_batch=m["meta_batch"],
        rollout_length=m["rollout_length"], inner_alpha=m["inner_alpha"],
        outer_beta=m["outer_beta"], inner_steps=m["inner_steps"],
        n_envs=m["train_envs"],
    )

    d = values["designopt"]
    return ExperimentConfig(
        seed=values["experiment"]["seed"],
        output_dir=values["experiment"]["output_dir"],
        space=space, nominal=nominal, terrain=terrain, env=env,
        ppo=ppo, meta=meta,
        metric=d["metric"], generations=d["generations"],
        population=d["population"], adapt_steps=d["adapt_steps"],
        adapt_rollout=d["adapt_rollout"],
        eval_transitions=d["eval_transitions"], eval_envs=d["eval_envs"],
        penalty_weight=d["penalty_weight"],
    )


def load_config(path) -> ExperimentConfig:
    """Parse and validate an experiment file; raises ConfigurationError."""
    values = _parse_values(path)
    try:
        return _assemble(values)
    except ConfigurationError:
        raise
    except (TypeError, ValueError) as err:
        raise ConfigurationError(str(err)) from err


def default_config() -> ExperimentConfig:
    """The all-defaults experiment (desk scale, flat terrain)."""
    return _assemble(_parse_values(None))
