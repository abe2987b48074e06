"""Shared INI configuration.

One file drives every command. Defaults live here in code; a config file
overrides defaults, and command-line `--set section.key=value` pairs override
the file. Unknown sections or keys fail loudly so typos never silently fall
back to defaults.
"""

from __future__ import annotations

import configparser
import copy
from dataclasses import dataclass

from .corridor import CorridorSpec
from .denoiser import TrainConfig
from .game import GameConfig
from .guidance import GuidanceSpec
from .metrics import HISTOGRAM_DEFAULTS, HistogramSpec, KinematicLimits
from .reanchor import SolverConfig, TrustRegionParams
from .schedule import build_schedule


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "diffusion": {
        "num_steps": 100,
        "beta_min": 1e-3,
        "beta_max": 0.2,
        "variance_kind": "posterior",
    },
    "solver": {
        "max_iters": 40,
        "grad_tol": 1e-9,
        "step_init": 1.0,
        "backtrack_factor": 0.5,
        "kappa": 1.0,
        "lambda": 50.0,
    },
    "guidance": {
        "accel_weight": 0.1,
        "accel_diff_weight": 0.5,
        "steer_weight": 2.0,
        "steer_diff_weight": 5.0,
        "equality_weight": 50.0,
        "inequality_weight": 50.0,
        "heading_limit": 0.6,
        "lateral_limit": 2.0,
        "safety_clearance": 0.1,
        "speed_threshold": 0.5,
    },
    "sampler": {
        "t_low": 0,              # 0 means the default ceil(T/10)
        "updates_per_frame": 1,
        "route_depth": 3,
    },
    "scene": {
        "kind": "straight",
        "num_agents": 8,
        "num_lanes": 2,
        "lane_length": 200.0,
        "lane_spacing": 3.5,
        "half_width": 2.0,
        "point_spacing": 2.0,
        "curve_radius": 80.0,
        "curve_angle": 1.0471975511965976,
        "history_steps": 4,
        "future_steps": 16,
        "dt": 0.5,
        "speed_min": 4.0,
        "speed_max": 9.0,
        # scene diffusion schedule: short and steep so the terminal marginal
        # is noise-dominated and the rolling jump carries little residual
        "num_steps": 20,
        "beta_min": 1e-3,
        "beta_max": 0.65,
    },
    "toy": {
        "seed": 0,
        "num_samples": 5000,
        "reward_scale": 1.0,
        "denoiser": "gmm_oracle",   # gmm_oracle | mlp
    },
    "train": {
        "epochs": 100,
        "batch_size": 256,
        "lr": 1e-3,
        "hidden": "512,512",
        "time_embed_dim": 8,
        "dataset_size": 20000,
        "seed": 0,
    },
    "adversarial": {
        "alpha": 6.0,
        "max_ibr_iters": 10,
        "anchor_tol": 1e-3,
        "ego_index": 0,
        "attacker_index": -1,
        "sector_half_angle": 1.0471975511965976,
        "sector_range": 30.0,
        "gamma_weight": 15.0,
        "attacker_margin": 0.25,
    },
    "metrics": {
        "speed_limit": 30.0,
        "accel_limit": 6.0,
        "jerk_limit": 20.0,
        "yaw_rate_limit": 1.5,
        "lat_accel_limit": 8.0,
        "curvature_limit": 0.5,
        "ttc_horizon": 10.0,
        "bins": 64,
    },
}


def _cast_like(default, raw, where):
    if isinstance(default, bool):
        lowered = raw.strip().lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{where}: expected a boolean, got {raw!r}")
    try:
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{where}: expected {type(default).__name__}, got {raw!r}") from None
    return raw


@dataclass(frozen=True)
class Config:
    sections: dict

    def get(self, section, key):
        try:
            return self.sections[section][key]
        except KeyError:
            raise ConfigError(f"unknown config key [{section}] {key}") from None

    def section(self, name):
        if name not in self.sections:
            raise ConfigError(f"unknown config section [{name}]")
        return dict(self.sections[name])


def load_config(path=None, overrides=()):
    """Defaults, then the INI file at `path`, then override pairs."""
    sections = copy.deepcopy(DEFAULTS)
    if path is not None:
        parser = configparser.ConfigParser()
        read = parser.read(str(path))
        if not read:
            raise ConfigError(f"config file not found: {path}")
        for name in parser.sections():
            if name not in sections:
                raise ConfigError(f"unknown config section [{name}] in {path}")
            for key, raw in parser.items(name):
                if key not in sections[name]:
                    raise ConfigError(f"unknown config key [{name}] {key} in {path}")
                sections[name][key] = _cast_like(sections[name][key], raw,
                                                 f"[{name}] {key}")
    for pair in overrides:
        if "=" not in pair or "." not in pair.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {pair!r}")
        target, raw = pair.split("=", 1)
        name, key = target.split(".", 1)
        if name not in sections or key not in sections[name]:
            raise ConfigError(f"unknown config key [{name}] {key} in override")
        sections[name][key] = _cast_like(sections[name][key], raw, f"[{name}] {key}")
    return Config(sections=sections)


def toy_schedule(cfg):
    d = cfg.section("diffusion")
    return build_schedule(num_steps=d["num_steps"], beta_min=d["beta_min"],
                          beta_max=d["beta_max"], variance_kind=d["variance_kind"])


def scene_schedule(cfg):
    s = cfg.section("scene")
    return build_schedule(num_steps=s["num_steps"], beta_min=s["beta_min"],
                          beta_max=s["beta_max"],
                          variance_kind=cfg.get("diffusion", "variance_kind"))


def solver_settings(cfg):
    s = cfg.section("solver")
    params = TrustRegionParams(kl_budget=s["kappa"], guidance_weight=s["lambda"])
    solver = SolverConfig(max_iters=s["max_iters"], grad_tol=s["grad_tol"],
                          step_init=s["step_init"],
                          backtrack_factor=s["backtrack_factor"])
    return params, solver


def guidance_spec(cfg, **replace):
    g = cfg.section("guidance")
    g.update(replace)
    return GuidanceSpec(**g)


def corridor_spec(cfg):
    s = cfg.section("scene")
    return CorridorSpec(kind=s["kind"], num_lanes=s["num_lanes"],
                        lane_length=s["lane_length"], lane_spacing=s["lane_spacing"],
                        half_width=s["half_width"], point_spacing=s["point_spacing"],
                        curve_radius=s["curve_radius"], curve_angle=s["curve_angle"])


def game_config(cfg):
    return GameConfig(**cfg.section("adversarial"))


def train_config(cfg):
    t = cfg.section("train")
    hidden = tuple(int(h) for h in str(t["hidden"]).split(",") if h.strip())
    return TrainConfig(epochs=t["epochs"], batch_size=t["batch_size"],
                       learning_rate=t["lr"], hidden=hidden,
                       time_embed_dim=t["time_embed_dim"])


def kinematic_limits(cfg):
    m = cfg.section("metrics")
    return KinematicLimits(speed=m["speed_limit"], accel=m["accel_limit"],
                           jerk=m["jerk_limit"], yaw_rate=m["yaw_rate_limit"],
                           lat_accel=m["lat_accel_limit"],
                           curvature=m["curvature_limit"])


def histogram_specs(cfg):
    bins = cfg.get("metrics", "bins")
    return {name: HistogramSpec(bins, spec.range, name)
            for name, spec in HISTOGRAM_DEFAULTS.items()}


def config_lines(cfg):
    """Flat `section.key=value` lines, for hashing and the manifest."""
    lines = []
    for name in sorted(cfg.sections):
        for key in sorted(cfg.sections[name]):
            lines.append(f"{name}.{key}={cfg.sections[name][key]}")
    return lines
