"""Optimization-guided diffusion sampling for trajectory scenes.

The pieces: a discrete diffusion schedule and its exact reverse kernels, a
KL-bounded re-anchoring solver that moves each denoising step's target
inside a trust region, a two-phase sampler (noisy warmup, then a rolling
frame-by-frame finish), structured trajectory objectives with analytic
gradients, an adversarial ego/attacker game on top of the same solver, and
evaluation metrics for the resulting scenes.
"""

from .schedule import DiffusionSchedule, build_schedule, forward_sample, predict_x0, reverse_kernel_mean, reverse_step
from .mixture import GaussianMixture, gmm_posterior_mean
from .denoiser import (GmmOracleDenoiser, MlpDenoiser, Normalizer, TrainConfig,
                       eps_prediction_mse, load_denoiser, save_denoiser, train_denoiser)
from .scene import CHANNELS, MOTION, SceneTensor, load_scene, save_scene, set_goal_condition
from .corridor import CorridorMap, CorridorSpec, build_corridor_map, make_corridor_scene
from .reanchor import (ObjectiveReport, ReanchorResult, SolverConfig, TrustRegionParams,
                       kernel_kl, make_report, reanchor, reanchor_batch, trust_radius)
from .guidance import (ControlSequence, GuidanceError, GuidanceSpec, ObjectiveContext,
                       OtherAgent, TrajectoryObjective, assemble_objective,
                       baseline_guidance, nearest_reference, route_candidates)
from .sampler import (SamplerConfig, generate_scene, rolling_schedule,
                      rolling_zero_phase, warmup_phase)
from .game import GameConfig, GameTrace, bias_attacker_routes, se_ibr, sensitivity_term
from .toy import REGIMES, ToyWorld, make_toy_world, mode_statistics, sample_toy, toy_reward
from .metrics import (HistogramSpec, KinematicLimits, collision_report, jsd,
                      kinematic_report, offroad_report, scene_report,
                      scene_statistics, ttc_profile)
from .config import Config, ConfigError, load_config
from .manifest import RunManifest, read_manifest, write_manifest

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
