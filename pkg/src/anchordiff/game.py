"""Sensitivity-enhanced iterative best response between an ego and an attacker.

Each round the ego re-anchors under its usual guidance plus a pairwise
separation constraint against the attacker's current anchor (active only
inside the ego's responsibility sector). The penalty multipliers of that
constraint give the first-order sensitivity of the ego's optimal value to the
attacker's decision; the attacker then re-anchors under its own realism
objective plus a linear bonus along the direction that hurts the ego most,
while keeping a no-contact margin of its own. Alternation stops when both
anchors move less than a tolerance or the iteration cap is hit.

The machinery is decision-vector generic: pairwise constraints are duck-typed
objects exposing residuals and gradients with respect to both players, so the
same loop drives the analytic 1-D instance used for verification and the
full per-agent trajectory decisions of scene sampling.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import (circle_centers, footprint_radius, project_to_polyline,
                       sector_contains)
from .reanchor import make_report, reanchor


@dataclass(frozen=True)
class GameConfig:
    alpha: float = 0.3                 # aggressiveness vs realism trade-off
    max_ibr_iters: int = 10
    anchor_tol: float = 1e-3           # m, convergence threshold on anchor moves
    ego_index: int = 0
    attacker_index: int = -1           # negative: pick nearest agent at run time
    sector_half_angle: float = np.pi / 3.0
    sector_range: float = 30.0
    gamma_weight: float = 200.0        # hinge weight on the pairwise constraint
    attacker_margin: float = 0.25      # m, attacker's own extra no-contact margin

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.ego_index == self.attacker_index:
            raise ValueError("ego and attacker must be distinct agents")
        if self.max_ibr_iters < 1:
            raise ValueError("max_ibr_iters must be at least 1")
        if not (0 < self.sector_half_angle <= np.pi):
            raise ValueError("sector_half_angle must be in (0, pi]")


@dataclass
class GameTrace:
    records: list = field(default_factory=list)
    converged: bool = False

    @property
    def iterations(self):
        return len(self.records)


class ScalarGamma:
    """1-D pursuit constraint: the own player must stay at least d_min ahead,
    gamma = d_min - (x_own - x_other) <= 0."""

    def __init__(self, d_min):
        self.d_min = float(d_min)

    def residuals(self, x_own, x_other):
        return np.array([self.d_min - (x_own[0] - x_other[0])])

    def grad_own(self, x_own, x_other):
        grad = np.zeros((1, np.asarray(x_own).size))
        grad[0, 0] = -1.0
        return grad

    def grad_other(self, x_own, x_other):
        grad = np.zeros((1, np.asarray(x_other).size))
        grad[0, 0] = 1.0
        return grad


class TwoCircleGamma:
    """Per-frame two-circle separation shortfall between a pair of trajectory
    decisions, (r_own + r_other + margin) - distance, over gated frames.

    Decisions follow the guidance layout: 4 F state entries first. The frame
    gate freezes which frames participate; entries are ordered frame-major
    over the four circle pairs.
    """

    def __init__(self, own_length, own_width, other_length, other_width,
                 num_frames, clearance=0.1, margin=0.0, frame_gate=None):
        self.own_length = float(own_length)
        self.other_length = float(other_length)
        self.r_sum = (footprint_radius(own_width, clearance)
                      + footprint_radius(other_width, clearance) + float(margin))
        self.num_frames = int(num_frames)
        gate = np.ones(self.num_frames, dtype=bool) if frame_gate is None else frame_gate
        self.frame_gate = np.asarray(gate, dtype=bool).copy()

    def _states(self, decision):
        return np.asarray(decision)[:4 * self.num_frames].reshape(self.num_frames, 4)

    def _centers(self, states, length):
        return circle_centers(states[:, :2], states[:, 2],
                              np.full(self.num_frames, length))

    def _geometry(self, x_own, x_other):
        own = self._states(x_own)
        other = self._states(x_other)
        c_own = self._centers(own, self.own_length)
        c_other = self._centers(other, self.other_length)
        entries = []
        for f in np.flatnonzero(self.frame_gate):
            for k in (0, 1):
                for j in (0, 1):
                    delta = c_own[f, k] - c_other[f, j]
                    d = float(np.hypot(*delta))
                    unit = delta / d if d > 0 else np.zeros(2)
                    entries.append((f, k, j, d, unit))
        return own, other, entries

    def residuals(self, x_own, x_other):
        _, _, entries = self._geometry(x_own, x_other)
        return np.array([self.r_sum - d for (_, _, _, d, _) in entries])

    def frames(self, x_own=None, x_other=None):
        gated = np.flatnonzero(self.frame_gate)
        return np.repeat(gated, 4)

    def _grad(self, states, entries, own_side, width):
        grads = np.zeros((len(entries), width))
        sign = 1.0 if own_side else -1.0
        for i, (f, k, j, d, unit) in enumerate(entries):
            # gamma = r_sum - ||c_own - c_other||
            circle = k if own_side else j
            length = self.own_length if own_side else self.other_length
            offs = (1.0 if circle == 0 else -1.0) * length / 4.0
            psi = states[f, 2]
            tang = np.array([-np.sin(psi), np.cos(psi)])
            grads[i, 4 * f:4 * f + 2] = -sign * unit
            grads[i, 4 * f + 2] = -sign * (unit @ tang) * offs
        return grads

    def grad_own(self, x_own, x_other):
        own, _, entries = self._geometry(x_own, x_other)
        return self._grad(own, entries, True, np.asarray(x_own).size)

    def grad_other(self, x_own, x_other):
        _, other, entries = self._geometry(x_own, x_other)
        return self._grad(other, entries, False, np.asarray(x_other).size)


class _ZeroObjective:
    multiplier_weights = {}

    def __call__(self, x):
        return make_report(0.0, np.zeros_like(np.asarray(x, dtype=float)))


class ConstrainedObjective:
    """Base objective plus a gated pairwise hinge against a frozen partner
    decision, with an optional linear bonus term."""

    def __init__(self, base, gamma, partner, weight, bonus=None):
        self.base = base or _ZeroObjective()
        self.gamma = gamma
        self.partner = np.asarray(partner, dtype=float)
        self.weight = float(weight)
        self.bonus = None if bonus is None else np.asarray(bonus, dtype=float)
        weights = dict(getattr(self.base, "multiplier_weights", None) or {})
        weights["gamma"] = self.weight
        self.multiplier_weights = weights

    def __call__(self, x):
        rep = self.base(x)
        value = rep.value
        grad = np.asarray(rep.gradient, dtype=float).copy()
        res = self.gamma.residuals(x, self.partner)
        pos = np.maximum(res, 0.0)
        value -= self.weight * float(np.sum(pos**2))
        if np.any(pos > 0):
            grad -= 2.0 * self.weight * (pos @ self.gamma.grad_own(x, self.partner))
        if self.bonus is not None:
            value += float(self.bonus @ x)
            grad += self.bonus
        residuals = dict(rep.residuals)
        frames = dict(rep.residual_frames)
        residuals["gamma"] = res
        if hasattr(self.gamma, "frames"):
            frames["gamma"] = self.gamma.frames()
        return make_report(value, grad, residuals, frames)


def ego_best_response(x_tilde_e, x_t_e, t, sched, base_objective, gamma,
                      attacker_anchor, params, solver_cfg, game_cfg, ball=None,
                      x_init=None):
    """Re-anchor the ego under its guidance plus the pairwise constraint
    against the attacker's frozen anchor."""
    objective = ConstrainedObjective(base_objective, gamma, attacker_anchor,
                                     game_cfg.gamma_weight)
    return reanchor(x_tilde_e, x_t_e, t, sched, objective, params, solver_cfg,
                    ball=ball, x_init=x_init)


def sensitivity_term(mu, gamma_grad_wrt_attacker):
    """First-order change of the ego's optimal value per unit attacker
    decision: -sum_i mu_i * dgamma_i/dx_a."""
    mu = np.asarray(mu, dtype=float)
    grad = np.asarray(gamma_grad_wrt_attacker, dtype=float)
    if mu.size == 0:
        return np.zeros(grad.shape[1] if grad.ndim == 2 else 0)
    return -(mu @ grad)


def attacker_step(x_tilde_a, x_t_a, t, sched, base_objective, gamma_a,
                  ego_anchor, sensitivity, params, solver_cfg, game_cfg,
                  ball=None, x_init=None):
    """Re-anchor the attacker under its own realism objective, its no-contact
    margin against the ego, and the sensitivity bonus -alpha * s . x."""
    lam = params.guidance_weight_at(int(t))
    # the solver scales the whole objective by lam, so the raw bonus is
    # pre-divided to keep the merit contribution exactly -alpha * s . x
    bonus = -(game_cfg.alpha / lam) * np.asarray(sensitivity, dtype=float) \
        if lam > 0 else None
    objective = ConstrainedObjective(base_objective, gamma_a, ego_anchor,
                                     game_cfg.gamma_weight, bonus=bonus)
    return reanchor(x_tilde_a, x_t_a, t, sched, objective, params, solver_cfg,
                    ball=ball, x_init=x_init)


def se_ibr(x_tilde_e, x_t_e, x_tilde_a, x_t_a, t, sched, base_e, base_a,
           gamma_e, gamma_a, params, solver_cfg, game_cfg, *,
           ball_e=None, ball_a=None, gate_fn=None, x_init_e=None, x_init_a=None):
    """Alternate best responses from the model-predicted anchors.

    gate_fn(x_e, x_a) may return a per-frame responsibility mask; it is
    re-frozen at the start of every iteration. x_init_e / x_init_a warm-start
    the first round's solves. Returns (ego anchor, attacker anchor, GameTrace).
    """
    x_e = np.asarray(x_tilde_e, dtype=float).copy()
    x_a = np.asarray(x_tilde_a, dtype=float).copy()
    trace = GameTrace()
    prev_active = None
    warm_e, warm_a = x_init_e, x_init_a
    for iteration in range(1, game_cfg.max_ibr_iters + 1):
        if gate_fn is not None:
            gamma_e.frame_gate = np.asarray(gate_fn(x_e, x_a), dtype=bool)
        # later rounds warm-start from the previous responses; the trust
        # regions stay centered on the model-predicted anchors
        ego_res = ego_best_response(x_tilde_e, x_t_e, t, sched, base_e, gamma_e,
                                    x_a, params, solver_cfg, game_cfg, ball=ball_e,
                                    x_init=warm_e)
        mu = ego_res.multipliers.get("gamma", np.zeros(0))
        grad_a = gamma_e.grad_other(ego_res.x_hat, x_a)
        sens = sensitivity_term(mu, grad_a)
        att_res = attacker_step(x_tilde_a, x_t_a, t, sched, base_a, gamma_a,
                                ego_res.x_hat, sens, params, solver_cfg,
                                game_cfg, ball=ball_a,
                                x_init=warm_a)
        warm_e, warm_a = ego_res.x_hat, att_res.x_hat
        move_e = float(np.linalg.norm(ego_res.x_hat - x_e))
        move_a = float(np.linalg.norm(att_res.x_hat - x_a))
        x_e, x_a = ego_res.x_hat, att_res.x_hat
        gamma_res = ego_res.report.residuals.get("gamma", np.zeros(0))
        active = tuple(np.flatnonzero(gamma_res > 0.0))
        trace.records.append({
            "iter": iteration,
            "ego_anchor": x_e.copy(),
            "attacker_anchor": x_a.copy(),
            "mu_e": np.asarray(mu, dtype=float).copy(),
            "sensitivity": np.asarray(sens, dtype=float).copy(),
            "ego_value": ego_res.objective_value,
            "attacker_value": att_res.objective_value,
            "max_pair_violation": float(np.max(gamma_res, initial=0.0)),
            "active_set": active,
            "active_set_flipped": prev_active is not None and active != prev_active,
            "ego_move": move_e,
            "attacker_move": move_a,
        })
        prev_active = active
        if move_e < game_cfg.anchor_tol and move_a < game_cfg.anchor_tol:
            trace.converged = True
            break
    return x_e, x_a, trace


def trace_to_csv(trace, path):
    import csv
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iter", "ego_value", "attacker_value", "mu_max",
                         "sensitivity_norm", "max_pair_violation", "active_size",
                         "active_set_flipped", "ego_move", "attacker_move"])
        for rec in trace.records:
            writer.writerow([
                rec["iter"], repr(rec["ego_value"]), repr(rec["attacker_value"]),
                repr(float(np.max(rec["mu_e"], initial=0.0))),
                repr(float(np.linalg.norm(rec["sensitivity"]))),
                repr(rec["max_pair_violation"]), len(rec["active_set"]),
                int(rec["active_set_flipped"]),
                repr(rec["ego_move"]), repr(rec["attacker_move"]),
            ])


def bias_attacker_routes(candidates, ego_pose, game_cfg):
    """Stable re-rank of attacker route candidates: routes that touch the
    ego's responsibility sector come first, closest to the ego's own position
    ahead of the rest, original order breaking remaining ties."""
    if not candidates:
        return []
    ego_pose = np.asarray(ego_pose, dtype=float)
    origin, psi = ego_pose[:2], float(ego_pose[2])

    def touches(cand):
        pts = np.asarray(cand)[:, :2]
        return bool(np.any(sector_contains(origin, psi, pts,
                                           game_cfg.sector_half_angle,
                                           game_cfg.sector_range)))

    def offset(cand):
        return float(project_to_polyline(origin[None, :], np.asarray(cand))[0][0])

    keys = [(not touches(c), offset(c), i) for i, c in enumerate(candidates)]
    return [candidates[i] for _, _, i in sorted(keys)]


def choose_attacker(scene, ego, game_cfg):
    """Pick the attacker for a scene: the agent whose planned rows pass
    closest to the ego's, preferring agents inside the ego's responsibility
    sector. A rear or never-converging pick leaves the pursuit gate shut for
    the whole run, so conflict and placement both matter."""
    from .sampler import history_pose

    ego_pose = history_pose(scene, ego)
    future = ~scene.inpaint[ego, :, 0] & scene.valid[ego]
    if not future.any():
        future = scene.valid[ego]
    ego_xy = scene.values[ego, future, :2]
    best_key, best = None, None
    for agent in range(scene.num_agents):
        if agent == ego or not scene.valid[agent].any():
            continue
        pose = history_pose(scene, agent)
        inside = bool(sector_contains(ego_pose[:2], ego_pose[2], pose[None, :2],
                                      game_cfg.sector_half_angle,
                                      game_cfg.sector_range)[0])
        xy = scene.values[agent, future, :2]
        gap = float(np.min(np.hypot(*(xy - ego_xy).T)))
        key = (not inside, gap)
        if best_key is None or key < best_key:
            best_key, best = key, agent
    if best is None:
        raise ValueError("no candidate attacker: scene has no other valid agent")
    return best


def _responsibility_gate(ego_states, attacker_states, attacker_length, game_cfg):
    """Per-frame mask: any attacker circle center inside the ego's sector."""
    num_frames = ego_states.shape[0]
    centers = circle_centers(attacker_states[:, :2], attacker_states[:, 2],
                             np.full(num_frames, attacker_length))
    gate = np.zeros(num_frames, dtype=bool)
    for f in range(num_frames):
        gate[f] = bool(np.any(sector_contains(
            ego_states[f, :2], ego_states[f, 2], centers[f],
            game_cfg.sector_half_angle, game_cfg.sector_range)))
    return gate


def se_ibr_scene(closures, x0_model, x_model, t, phase, tau):
    """Run the game for one re-anchoring step of scene sampling; writes both
    players' anchors into x0_model in place and returns the trace."""
    from .sampler import _decision_from_anchor, _write_anchor

    cfg = closures.cfg
    game_cfg = cfg.game
    scene = closures.scene
    num_frames = scene.num_frames
    ego, att = game_cfg.ego_index, game_cfg.attacker_index
    spec = cfg.warmup_spec if phase == "warmup" else cfg.rolling_spec

    setup_e = closures.setups[ego]
    setup_a = closures.setups[att]

    def base_for(agent, partner, candidates=None):
        others = ()
        if spec.enable_safety:
            others = closures.others_from(x0_model, (agent, partner))
        return closures._objective(agent, spec, others, candidates=candidates)

    base_e = base_for(ego, att)
    # during warmup the attacker tracks only its top-ranked route (the one
    # biased toward the ego's sector); rolling restores the full set
    cand_a = setup_a.candidates[:1] if phase == "warmup" else None
    base_a = base_for(att, ego, candidates=cand_a)

    gamma_e = TwoCircleGamma(setup_e.length, setup_e.width, setup_a.length,
                             setup_a.width, num_frames,
                             clearance=spec.safety_clearance)
    gamma_a = TwoCircleGamma(setup_a.length, setup_a.width, setup_e.length,
                             setup_e.width, num_frames,
                             clearance=spec.safety_clearance,
                             margin=game_cfg.attacker_margin)

    offset4, scale4 = closures.offset4, closures.scale4

    def world_states_of(decision_model):
        states = np.asarray(decision_model)[:4 * num_frames].reshape(num_frames, 4)
        return states * scale4 + offset4

    def gate_fn(x_e_model, x_a_model):
        return _responsibility_gate(world_states_of(x_e_model),
                                    world_states_of(x_a_model),
                                    setup_a.length, game_cfg)

    # pairwise geometry runs on world states; wrap the model-space decisions
    class _WorldGamma:
        def __init__(self, gamma):
            self.gamma = gamma

        @property
        def frame_gate(self):
            return self.gamma.frame_gate

        @frame_gate.setter
        def frame_gate(self, value):
            self.gamma.frame_gate = value

        def _w(self, x):
            states = np.asarray(x)[:4 * num_frames].reshape(num_frames, 4)
            out = np.asarray(x, dtype=float).copy()
            out[:4 * num_frames] = (states * scale4 + offset4).ravel()
            return out

        def residuals(self, x_own, x_other):
            return self.gamma.residuals(self._w(x_own), self._w(x_other))

        def frames(self):
            return self.gamma.frames()

        def grad_own(self, x_own, x_other):
            g = self.gamma.grad_own(self._w(x_own), self._w(x_other))
            return self._chain(g)

        def grad_other(self, x_own, x_other):
            g = self.gamma.grad_other(self._w(x_own), self._w(x_other))
            return self._chain(g)

        def _chain(self, g):
            g = g.copy()
            s = np.tile(scale4, num_frames)
            g[:, :4 * num_frames] *= s[None, :]
            return g

    dec_e = _decision_from_anchor(x0_model, ego, offset4, scale4,
                                  setup_e.wheelbase, scene.dt)
    dec_a = _decision_from_anchor(x0_model, att, offset4, scale4,
                                  setup_a.wheelbase, scene.dt)
    x_t_e = np.zeros_like(dec_e)
    x_t_e[:4 * num_frames] = x_model[ego, :, 0:4].ravel()
    x_t_a = np.zeros_like(dec_a)
    x_t_a[:4 * num_frames] = x_model[att, :, 0:4].ravel()
    ball = np.arange(4 * num_frames)

    anchor_e, anchor_a, trace = se_ibr(
        dec_e, x_t_e, dec_a, x_t_a, t, sched=closures.sched,
        base_e=base_e, base_a=base_a,
        gamma_e=_WorldGamma(gamma_e), gamma_a=_WorldGamma(gamma_a),
        params=cfg.params, solver_cfg=cfg.solver, game_cfg=game_cfg,
        ball_e=ball, ball_a=ball, gate_fn=gate_fn,
        x_init_e=closures._warm.get(ego), x_init_a=closures._warm.get(att))

    closures._warm[ego] = anchor_e.copy()
    closures._warm[att] = anchor_a.copy()
    _write_anchor(x0_model, ego, anchor_e, num_frames)
    _write_anchor(x0_model, att, anchor_a, num_frames)
    last = trace.records[-1] if trace.records else {}
    for agent, value in ((ego, last.get("ego_value", 0.0)),
                         (att, last.get("attacker_value", 0.0))):
        closures.diagnostics.append({
            "phase": f"{phase}-game",
            "step": int(t if tau is None else tau),
            "agent": int(agent),
            "kl_used": float("nan"),
            "value": float(value),
            "max_violation": float(last.get("max_pair_violation", 0.0)),
            "converged": bool(trace.converged),
        })
    return trace
