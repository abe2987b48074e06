"""Two-phase guided reverse sampling over scene tensors.

Phase one (warmup) denoises the full horizon from t = T down to a residual
level t_low, re-anchoring every step under single-agent structural guidance.
Phase two (rolling-zero) walks the physical horizon: at index tau the frames
before tau are clean, the rest sit at t_low, and only frame tau is written,
jumping from t_low to 0 through the anchored kernel with the t_low
coefficients. The per-frame variance vector of that jump assigns the written
frame level 0, whose kernel noise is zero by the sigma_0 convention, so the
jump is deterministic.

Sampling runs entirely in the denoiser's normalized model space. Clean
quantities cross the boundary through the denoiser's Normalizer: inpainted
context enters forward-noised in model units, guidance is evaluated in world
units through an affine chain rule, and the finished scene is converted back
once at the end (with inpainted entries restored bit-exactly from context).

Inpainting uses the replacement method: wherever the inpaint mask is true,
the state is overwritten with forward-noised context at the current level of
that frame, every step. Noise for the replacement is drawn full-shape
whenever any inpainting exists, which keeps random streams aligned between
runs that differ only in mask contents.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import wrap_angle
from .guidance import (GuidanceSpec, ObjectiveContext, OtherAgent, TrajectoryObjective,
                       controls_from_states, pack_decision, route_candidates,
                       unpack_decision)
from .reanchor import SolverConfig, TrustRegionParams, make_report, reanchor
from .scene import CHANNELS, MOTION
from .schedule import forward_sample, predict_x0, reverse_kernel_mean


def rolling_schedule(tau, t_low, num_frames):
    """Per-frame noise assignment after rolling index tau: 0 up to tau,
    t_low beyond."""
    tau = int(tau)
    num_frames = int(num_frames)
    t_low = int(t_low)
    if not (1 <= tau <= num_frames):
        raise ValueError(f"tau={tau} outside [1, {num_frames}]")
    if t_low < 1:
        raise ValueError("t_low must be at least 1")
    assignment = np.zeros(num_frames, dtype=int)
    assignment[tau:] = t_low
    return assignment


def default_t_low(num_steps):
    return max(1, math.ceil(0.1 * num_steps))


@dataclass(frozen=True)
class SamplerConfig:
    mode: str = "free"                    # free | goal | adversarial
    t_low: int = 0                        # 0 means ceil(0.1 T)
    warmup_spec: GuidanceSpec = field(default_factory=lambda: GuidanceSpec(enable_safety=True))
    rolling_spec: GuidanceSpec = field(default_factory=lambda: GuidanceSpec(enable_safety=True))
    params: TrustRegionParams = field(default_factory=TrustRegionParams)
    solver: SolverConfig = field(default_factory=lambda: SolverConfig(max_iters=40))
    guidance_enabled: bool = True
    updates_per_frame: int = 1
    route_depth: int = 3
    game: object = None                   # GameConfig for adversarial mode

    def __post_init__(self):
        if self.mode not in ("free", "goal", "adversarial"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.t_low < 0:
            raise ValueError("t_low must be non-negative")
        if self.updates_per_frame < 1:
            raise ValueError("updates_per_frame must be at least 1")
        if self.mode == "adversarial" and self.game is None:
            raise ValueError("adversarial mode needs a game config")

    def resolved_t_low(self, sched):
        t_low = self.t_low or default_t_low(sched.num_steps)
        if not (1 <= t_low <= sched.num_steps):
            raise ValueError(f"t_low={t_low} outside [1, {sched.num_steps}]")
        return t_low


def _impose_inpaint(x, steps, inpaint, rng):
    """Replacement inpainting at the current per-frame noise levels."""
    if inpaint is None:
        return x
    values, mask, sched = inpaint
    noise = rng.standard_normal(x.shape)
    noised = forward_sample(values, steps, noise, sched)
    out = x.copy()
    out[mask] = noised[mask]
    return out


def warmup_phase(x_init, denoiser, sched, t_low, *, rng, inpaint=None,
                 reanchor_fn=None):
    """Full-horizon reverse steps from T down to the state at t_low.

    x_init is the (N, F, C) model-space draw at level T. inpaint, when given,
    is (values_model, mask, sched). reanchor_fn(x0, x_t, t) may replace the
    anchor at every step; it must not consume rng.
    """
    x = np.asarray(x_init, dtype=float)
    for t in range(sched.num_steps, t_low, -1):
        x = _impose_inpaint(x, t, inpaint, rng)
        eps = denoiser.predict_eps(x, t)
        x0 = predict_x0(x, eps, t, sched)
        if reanchor_fn is not None:
            x0 = reanchor_fn(x0, x, t)
        mean = reverse_kernel_mean(x0, x, t, sched)
        sigma = sched.sigmas[t]
        if sigma > 0.0:
            x = mean + sigma * rng.standard_normal(x.shape)
        else:
            x = mean
    return x


def rolling_zero_phase(x_roll, denoiser, sched, t_low, *, rng, inpaint=None,
                       reanchor_fn=None, updates_per_frame=1):
    """Frame-wise refinement of the warmup output down to a clean scene.

    At index tau the model predicts clean states under the per-frame
    assignment describing the current tensor (frames before tau clean, the
    rest at t_low), the anchor is optionally re-optimized, and only frame
    tau is written through the deterministic t_low-coefficient jump.
    """
    x = np.asarray(x_roll, dtype=float).copy()
    num_frames = x.shape[1]
    coef_a = sched.anchor_coef[t_low]
    coef_c = sched.carry_coef[t_low]
    for tau in range(1, num_frames + 1):
        current = np.zeros(num_frames, dtype=int)
        current[tau - 1:] = t_low
        for _ in range(int(updates_per_frame)):
            x = _impose_inpaint(x, current, inpaint, rng)
            eps = denoiser.predict_eps(x, current)
            x0 = predict_x0(x, eps, current, sched)
            if reanchor_fn is not None:
                x0 = reanchor_fn(x0, x, t_low, tau=tau)
            x[:, tau - 1] = coef_a * x0[:, tau - 1] + coef_c * x[:, tau - 1]
    return x


def history_pose(scene, agent):
    """Pose (px, py, psi) at the agent's last inpainted frame, else frame 0."""
    rows = np.where(scene.inpaint[agent, :, 0])[0]
    frame = int(rows[-1]) if rows.size else 0
    return scene.values[agent, frame, :3].copy()


@dataclass
class _AgentSetup:
    candidates: tuple
    wheelbase: float
    length: float
    width: float
    anchored: dict          # frame -> world motion state from inpainted context


def _agent_setups(scene, corridor_map, route_depth):
    setups = []
    for a in range(scene.num_agents):
        candidates = ()
        if corridor_map is not None:
            candidates = tuple(route_candidates(corridor_map, history_pose(scene, a),
                                                depth_limit=route_depth))
        length = float(np.max(scene.values[a, scene.valid[a], 4], initial=4.5))
        width = float(np.max(scene.values[a, scene.valid[a], 5], initial=2.0))
        anchored = {}
        for f in range(scene.num_frames):
            if scene.inpaint[a, f, :4].all():
                anchored[f] = scene.values[a, f, :4].copy()
        setups.append(_AgentSetup(candidates=candidates, wheelbase=0.6 * length,
                                  length=length, width=width, anchored=anchored))
    return setups


class ModelSpaceObjective:
    """Affine bridge: evaluates a world-space objective on a model-space
    decision vector and chains the gradient back."""

    def __init__(self, base, offset, scale, num_frames):
        self.base = base
        self.offset = np.asarray(offset, dtype=float)
        self.scale = np.asarray(scale, dtype=float)
        self.num_frames = int(num_frames)

    @property
    def multiplier_weights(self):
        return getattr(self.base, "multiplier_weights", None)

    def to_world(self, decision_model):
        states, accel, steer = unpack_decision(decision_model, self.num_frames)
        return pack_decision(states * self.scale + self.offset, accel, steer)

    def __call__(self, decision_model):
        rep = self.base(self.to_world(decision_model))
        grad = np.asarray(rep.gradient, dtype=float).copy()
        n4 = 4 * self.num_frames
        grad[:n4] = (grad[:n4].reshape(self.num_frames, 4) * self.scale).ravel()
        return make_report(rep.value, grad, rep.residuals, rep.residual_frames)


def _decision_from_anchor(x0_model, agent, offset4, scale4, wheelbase, dt):
    states_model = x0_model[agent, :, MOTION.start:MOTION.stop]
    states_world = states_model * scale4 + offset4
    accel, steer = controls_from_states(states_world, dt, wheelbase)
    return pack_decision(states_model, accel, steer)


def _write_anchor(x0_model, agent, decision_model, num_frames):
    states = decision_model[:4 * num_frames].reshape(num_frames, 4)
    x0_model[agent, :, MOTION.start:MOTION.stop] = states


class SceneGuidance:
    """Per-step re-anchoring closure over all agents of a scene."""

    def __init__(self, scene, denoiser, sched, cfg, setups, diagnostics):
        self.scene = scene
        self.sched = sched
        self.cfg = cfg
        self.setups = setups
        self.diagnostics = diagnostics
        self.dt = scene.dt
        norm = denoiser.normalizer
        self.offset4 = norm.offset[MOTION.start:MOTION.stop]
        self.scale4 = norm.scale[MOTION.start:MOTION.stop]
        self.offset = norm.offset
        self.scale = norm.scale
        self.game_state = None
        # last accepted solution per agent, reused to warm-start the next
        # step's solve (the trust region still centers on the fresh anchor)
        self._warm = {}

    def _world_states(self, x_model):
        return x_model * self.scale + self.offset

    def _objective(self, agent, spec, others, extra_anchors=None, candidates=None):
        setup = self.setups[agent]
        anchored = dict(setup.anchored)
        if extra_anchors:
            anchored.update(extra_anchors)
        spec = replace(spec, anchored_states=anchored)
        context = ObjectiveContext(
            num_frames=self.scene.num_frames,
            dt=self.dt,
            wheelbase=setup.wheelbase,
            own_length=setup.length,
            own_width=setup.width,
            candidates=setup.candidates if candidates is None else candidates,
            others=others,
        )
        base = TrajectoryObjective(spec, context)
        return ModelSpaceObjective(base, self.offset4, self.scale4, self.scene.num_frames)

    def _solve_agent(self, agent, objective, x0_model, x_model, t, phase, tau):
        num_frames = self.scene.num_frames
        setup = self.setups[agent]
        decision = _decision_from_anchor(x0_model, agent, self.offset4, self.scale4,
                                         setup.wheelbase, self.dt)
        x_t_dec = np.zeros_like(decision)
        x_t_dec[:4 * num_frames] = x_model[agent, :, MOTION.start:MOTION.stop].ravel()
        ball = np.arange(4 * num_frames)
        result = reanchor(decision, x_t_dec, t, self.sched, objective,
                          self.cfg.params, self.cfg.solver, ball=ball,
                          x_init=self._warm.get(agent))
        self._warm[agent] = result.x_hat.copy()
        _write_anchor(x0_model, agent, result.x_hat, num_frames)
        report = result.report
        violation = 0.0
        for group in ("head", "road", "safe"):
            res = report.residuals.get(group)
            if res is not None and res.size:
                violation = max(violation, float(np.max(res)))
        self.diagnostics.append({
            "phase": phase,
            "step": int(t if tau is None else tau),
            "agent": int(agent),
            "kl_used": result.kl_used,
            "value": result.objective_value,
            "max_violation": violation,
            "converged": bool(result.converged),
        })
        return result

    def _game_participants(self):
        if self.cfg.mode != "adversarial":
            return ()
        return (self.cfg.game.ego_index, self.cfg.game.attacker_index)

    def others_from(self, x0_model, exclude):
        """Surrounding agents as seen through the current clean predictions."""
        world = self._world_states(x0_model)
        return tuple(
            OtherAgent(states=world[o, :, :3], length=self.setups[o].length,
                       width=self.setups[o].width)
            for o in range(self.scene.num_agents)
            if o not in exclude and self.scene.valid[o].any()
        )

    def warmup(self, x0_model, x_model, t):
        x0_model = x0_model.copy()
        participants = self._game_participants()
        for agent in range(self.scene.num_agents):
            if agent in participants:
                continue
            others = (self.others_from(x0_model, (agent,))
                      if self.cfg.warmup_spec.enable_safety else ())
            objective = self._objective(agent, self.cfg.warmup_spec, others)
            self._solve_agent(agent, objective, x0_model, x_model, t, "warmup", None)
        if participants:
            self._play_game(x0_model, x_model, t, "warmup", None)
        return x0_model

    def rolling(self, x0_model, x_model, t_low, tau=None):
        x0_model = x0_model.copy()
        # frames finalized by earlier rolling indices get soft-pinned so the
        # written frame optimizes against the history that actually happened
        pins = self._world_states(x_model)
        cleaned = range(tau - 1)
        participants = self._game_participants()
        for agent in range(self.scene.num_agents):
            if agent in participants:
                continue
            others = (self.others_from(x0_model, (agent,))
                      if self.cfg.rolling_spec.enable_safety else ())
            extra = {f: pins[agent, f, :4] for f in cleaned
                     if f not in self.setups[agent].anchored}
            objective = self._objective(agent, self.cfg.rolling_spec, others, extra)
            self._solve_agent(agent, objective, x0_model, x_model, t_low, "rolling", tau)
        if participants:
            self._play_game(x0_model, x_model, t_low, "rolling", tau)
        return x0_model

    def _play_game(self, x0_model, x_model, t, phase, tau):
        from .game import se_ibr_scene
        trace = se_ibr_scene(self, x0_model, x_model, t, phase, tau)
        if trace is not None:
            self.game_state = trace


def generate_scene(scene, denoiser, sched, cfg, rng, corridor_map=None):
    """Run both phases over a context scene; returns (SceneTensor, diagnostics).

    The scene provides context through its inpaint mask (history frames, goal
    entries); corridor_map supplies route references for the rule terms.
    Diagnostics is a list of per-solve records (phase, step, agent, kl_used,
    value, max_violation, converged).
    """
    if scene.values.shape[2] != len(CHANNELS):
        raise ValueError("scene channel layout mismatch")
    norm = denoiser.normalizer
    num_motion = MOTION.stop - MOTION.start
    if norm.offset.shape[0] != num_motion:
        raise ValueError("scene denoiser must model the four motion channels")
    # diffusion state is the motion block; sizes pass through as context
    motion_world = np.nan_to_num(scene.values[:, :, MOTION], nan=0.0)
    values_model = norm.to_model(motion_world)
    mask = scene.inpaint[:, :, MOTION] & scene.valid[:, :, None]
    inpaint = (values_model, mask, sched) if mask.any() else None

    t_low = cfg.resolved_t_low(sched)
    diagnostics = []
    reanchor_warm = reanchor_roll = None
    if cfg.guidance_enabled:
        setups = _agent_setups(scene, corridor_map, cfg.route_depth)
        if cfg.mode == "adversarial":
            from .game import bias_attacker_routes, choose_attacker
            game = cfg.game
            if game.attacker_index < 0:
                game = replace(game, attacker_index=choose_attacker(
                    scene, game.ego_index, game))
                cfg = replace(cfg, game=game)
            ego_pose = history_pose(scene, game.ego_index)
            att = game.attacker_index
            # the attacker also considers lane changes, ranked toward the
            # ego's corridor; the top route seeds its warmup reference
            cand = setups[att].candidates
            if corridor_map is not None:
                cand = tuple(route_candidates(corridor_map, history_pose(scene, att),
                                              depth_limit=cfg.route_depth,
                                              all_roots=True))
            setups[att].candidates = tuple(bias_attacker_routes(
                list(cand), ego_pose, game))
        closures = SceneGuidance(scene, denoiser, sched, cfg, setups, diagnostics)
        reanchor_warm = closures.warmup
        reanchor_roll = closures.rolling

    x = rng.standard_normal(values_model.shape)
    x = warmup_phase(x, denoiser, sched, t_low, rng=rng, inpaint=inpaint,
                     reanchor_fn=reanchor_warm)
    x = rolling_zero_phase(x, denoiser, sched, t_low, rng=rng, inpaint=inpaint,
                           reanchor_fn=reanchor_roll,
                           updates_per_frame=cfg.updates_per_frame)

    motion = norm.to_world(x)
    motion[:, :, 2] = wrap_angle(motion[:, :, 2])
    motion[mask] = scene.values[:, :, MOTION][mask]
    out_values = scene.values.copy()
    out_values[:, :, MOTION] = motion
    out = scene.with_values(out_values)
    return out, diagnostics


def diagnostics_to_csv(diagnostics, path):
    import csv
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["phase", "step", "agent", "kl_used", "value",
                         "max_violation", "converged"])
        for row in diagnostics:
            writer.writerow([row["phase"], row["step"], row["agent"],
                             repr(float(row["kl_used"])), repr(float(row["value"])),
                             repr(float(row["max_violation"])), int(row["converged"])])
