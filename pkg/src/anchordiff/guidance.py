"""Structured trajectory guidance: residual families and objective assembly.

A per-agent refinement works on the decision vector

    [states (T x 4: px, py, psi, v), accel (T-1,), steer (T-1,)]

where the controls are auxiliary variables tied to the states by kinematic
bicycle residuals. The assembled objective is a maximization target

    value = -(smoothness cost)
            - w_h * (sum ||kin||^2 + sum ||state||^2)
            - w_g * (sum [head]_+^2 + sum [road]_+^2 + sum [safe]_+^2)

with [z]_+ = max(z, 0). Equality groups: kinematic consistency and anchored
state consistency. Inequality groups (g <= 0 feasible): heading deviation
beyond a tolerance, lateral offset beyond the corridor half width, and
two-circle separation shortfall against other agents. Heading and on-road
terms apply only to frames moving faster than a speed threshold. All
gradients are assembled analytically.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .geometry import circle_centers, footprint_radius, project_to_polyline, wrap_angle
from .reanchor import ObjectiveReport, make_report


class GuidanceError(ValueError):
    pass


@dataclass(frozen=True)
class GuidanceSpec:
    """Weights, limits and toggles of the guidance objective."""

    accel_weight: float = 0.1
    accel_diff_weight: float = 0.5
    steer_weight: float = 2.0
    steer_diff_weight: float = 5.0
    equality_weight: float = 50.0      # w_h
    inequality_weight: float = 50.0    # w_g
    heading_limit: float = 0.6         # rad, tolerated deviation from the lane heading
    lateral_limit: float = 2.0         # m, corridor half width for the on-road term
    safety_clearance: float = 0.1      # m, added to half widths for circle radii
    speed_threshold: float = 0.5       # m/s gate for heading/on-road terms
    anchored_states: dict = field(default_factory=dict)   # frame -> (4,) target
    enable_kinematic: bool = True
    enable_heading: bool = True
    enable_onroad: bool = True
    enable_safety: bool = False
    enable_anchors: bool = True
    barrier: str = "hinge"             # hinge | log

    def __post_init__(self):
        for name in ("accel_weight", "accel_diff_weight", "steer_weight",
                     "steer_diff_weight", "equality_weight", "inequality_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not (0.0 < self.heading_limit <= np.pi):
            raise ValueError("heading_limit must be in (0, pi]")
        if self.lateral_limit <= 0:
            raise ValueError("lateral_limit must be positive")
        if self.barrier not in ("hinge", "log"):
            raise ValueError("barrier must be 'hinge' or 'log'")


@dataclass(frozen=True)
class ControlSequence:
    accel: np.ndarray
    steer: np.ndarray
    wheelbase: float = 2.8

    def __post_init__(self):
        accel = np.asarray(self.accel, dtype=float)
        steer = np.asarray(self.steer, dtype=float)
        if accel.shape != steer.shape or accel.ndim != 1:
            raise ValueError("accel and steer must be 1-D arrays of equal length")
        if not self.wheelbase > 0:
            raise ValueError("wheelbase must be positive")
        object.__setattr__(self, "accel", accel)
        object.__setattr__(self, "steer", steer)


@dataclass(frozen=True)
class OtherAgent:
    """A fixed reference trajectory another agent occupies during a solve."""

    states: np.ndarray     # (T, >=3): px, py, psi
    length: float
    width: float


@dataclass(frozen=True)
class ObjectiveContext:
    """Everything an objective evaluation needs besides the decision vector."""

    num_frames: int
    dt: float
    wheelbase: float
    own_length: float
    own_width: float
    candidates: tuple = ()     # reference polylines for heading/on-road terms
    others: tuple = ()         # OtherAgent references for safety terms


def pack_decision(states, accel, steer):
    return np.concatenate([np.asarray(states, dtype=float).ravel(),
                           np.asarray(accel, dtype=float),
                           np.asarray(steer, dtype=float)])


def unpack_decision(decision, num_frames):
    decision = np.asarray(decision, dtype=float)
    expected = 4 * num_frames + 2 * (num_frames - 1)
    if decision.shape != (expected,):
        raise GuidanceError(
            f"decision vector has shape {decision.shape}, expected ({expected},)")
    states = decision[:4 * num_frames].reshape(num_frames, 4)
    accel = decision[4 * num_frames:4 * num_frames + num_frames - 1]
    steer = decision[4 * num_frames + num_frames - 1:]
    return states, accel, steer


def controls_from_states(states, dt, wheelbase):
    """Inverse-dynamics control estimates from a state sequence."""
    states = np.asarray(states, dtype=float)
    v = states[:, 3]
    accel = np.diff(v) / dt
    dpsi = wrap_angle(np.diff(states[:, 2]))
    steer = np.arctan(wheelbase * dpsi / (dt * np.maximum(v[:-1], 0.1)))
    steer[np.abs(v[:-1]) <= 0.1] = 0.0
    return accel, steer


def smoothness_cost(controls, spec):
    """Quadratic control effort: magnitudes plus first differences."""
    a, d = controls.accel, controls.steer
    cost = spec.accel_weight * np.sum(a**2) + spec.steer_weight * np.sum(d**2)
    if a.size >= 2:
        cost += spec.accel_diff_weight * np.sum(np.diff(a)**2)
        cost += spec.steer_diff_weight * np.sum(np.diff(d)**2)
    return float(cost)


def kinematic_residuals(states, controls, dt):
    """Bicycle-model defects between consecutive frames, shape (T-1, 4).

    Columns: x advance, y advance, heading advance (wrapped difference), and
    speed advance, each minus its model prediction.
    """
    states = np.asarray(states, dtype=float)
    if states.ndim != 2 or states.shape[1] != 4:
        raise GuidanceError(f"states must be (T, 4), got {states.shape}")
    if states.shape[0] - 1 != controls.accel.size:
        raise GuidanceError("controls must have T-1 entries")
    p, psi, v = states[:, :2], states[:, 2], states[:, 3]
    res = np.empty((states.shape[0] - 1, 4))
    res[:, 0] = p[1:, 0] - p[:-1, 0] - dt * v[:-1] * np.cos(psi[:-1])
    res[:, 1] = p[1:, 1] - p[:-1, 1] - dt * v[:-1] * np.sin(psi[:-1])
    res[:, 2] = wrap_angle(psi[1:] - psi[:-1]) - dt * (v[:-1] / controls.wheelbase) * np.tan(controls.steer)
    res[:, 3] = v[1:] - v[:-1] - dt * controls.accel
    return res


@dataclass(frozen=True)
class NearestRef:
    point: np.ndarray
    heading: float
    lateral_distance: float
    candidate_index: int
    segment_index: int


def nearest_reference(point, candidates):
    """Closest reference point over candidate polylines.

    Distance is to the polyline itself (segment projection); the reference
    heading comes from the matched segment's start vertex. Exact ties resolve
    to the earliest candidate, then the earliest segment.
    """
    if not candidates:
        raise GuidanceError("no reference candidates")
    point = np.asarray(point, dtype=float)[:2]
    best = None
    for ci, cand in enumerate(candidates):
        dist, proj, seg, _ = project_to_polyline(point[None, :], cand)
        if best is None or dist[0] < best.lateral_distance:
            best = NearestRef(
                point=proj[0],
                heading=float(np.asarray(cand)[seg[0], 2]),
                lateral_distance=float(dist[0]),
                candidate_index=ci,
                segment_index=int(seg[0]),
            )
    return best


def _references_for_frames(points, candidates):
    """Vectorized nearest references for every frame position."""
    n = points.shape[0]
    dist = np.full(n, np.inf)
    proj = np.zeros((n, 2))
    heading = np.zeros(n)
    for cand in candidates:
        cand = np.asarray(cand, dtype=float)
        d, p, seg, _ = project_to_polyline(points, cand)
        better = d < dist
        dist[better] = d[better]
        proj[better] = p[better]
        heading[better] = cand[seg[better], 2]
    return dist, proj, heading


def route_candidates(corridor_map, pose, depth_limit=3, capture_radius=None,
                     all_roots=False):
    """Forward route references from the lane nearest a pose.

    Enumerates simple successor paths from the nearest lane up to depth_limit
    lanes and concatenates their centerlines, starting at the segment nearest
    the pose. Returns [] when no lane lies within the capture radius (default
    three half widths). all_roots also expands from the other lanes inside
    the capture radius, nearest first, so lane changes become candidates.
    """
    pose = np.asarray(pose, dtype=float)
    point = pose[:2]
    if capture_radius is None:
        capture_radius = 3.0 * corridor_map.half_width

    dists = [project_to_polyline(point[None, :], lane)[0][0] for lane in corridor_map.lanes]
    order = np.argsort(dists)
    roots = [int(i) for i in order if dists[int(i)] <= capture_radius]
    if not roots:
        return []
    if not all_roots:
        roots = roots[:1]

    candidates = []
    for root in roots:
        _, _, seg, _ = project_to_polyline(point[None, :], corridor_map.lanes[root])
        root_points = corridor_map.lanes[root][int(seg[0]):]
        if root_points.shape[0] < 2:
            root_points = corridor_map.lanes[root][-2:]

        paths = []

        def expand(lane_idx, path):
            succs = [s for s in sorted(corridor_map.successors_of(lane_idx)) if s not in path]
            if len(path) >= depth_limit or not succs:
                paths.append(tuple(path))
                return
            for s in succs:
                expand(s, path + [s])

        expand(root, [root])

        for path in paths:
            pieces = [root_points]
            for lane_idx in path[1:]:
                nxt = corridor_map.lanes[lane_idx]
                if np.hypot(*(pieces[-1][-1, :2] - nxt[0, :2])) < 1e-9:
                    nxt = nxt[1:]
                if nxt.shape[0]:
                    pieces.append(nxt)
            candidates.append(np.vstack(pieces))
    return candidates


def rule_and_safety_residuals(states, spec, context):
    """Heading, on-road and separation residuals (positive = violated).

    Returns (residuals, frames, road_units, safe_geoms) where the extra pieces
    carry gradient geometry: road_units are unit vectors from the reference
    projection to the position, and safe_geoms arrays
    (frames (K,), units (K, 2), own_offset_signs (K,)) for the separation
    entries, frame-major over frames x own circle x other circle.
    """
    states = np.asarray(states, dtype=float)
    n = states.shape[0]
    residuals = {"head": np.zeros(0), "road": np.zeros(0), "safe": np.zeros(0)}
    frames = {k: np.zeros(0, dtype=int) for k in residuals}
    road_units = np.zeros((0, 2))
    head_signs = np.zeros(0)
    safe_geoms = (np.zeros(0, dtype=int), np.zeros((0, 2)), np.zeros(0))

    gated = np.where(states[:, 3] > spec.speed_threshold)[0]
    if (spec.enable_heading or spec.enable_onroad) and context.candidates and gated.size:
        dist, proj, ref_heading = _references_for_frames(states[:, :2], context.candidates)
        if spec.enable_heading:
            dev = wrap_angle(states[gated, 2] - ref_heading[gated])
            residuals["head"] = np.abs(dev) - spec.heading_limit
            frames["head"] = gated
            head_signs = np.sign(dev)
        if spec.enable_onroad:
            residuals["road"] = dist[gated] - spec.lateral_limit
            frames["road"] = gated
            road_units = np.zeros((gated.size, 2))
            away = dist[gated] > 0.0
            road_units[away] = ((states[gated, :2] - proj[gated])[away]
                                / dist[gated][away, None])

    if spec.enable_safety and context.others:
        own_radius = footprint_radius(context.own_width, spec.safety_clearance)
        own_centers = circle_centers(states[:, :2], states[:, 2], np.full(n, context.own_length))
        res_parts, frame_parts, unit_parts, sign_parts = [], [], [], []
        for other in context.others:
            ostates = np.asarray(other.states, dtype=float)
            other_radius = footprint_radius(other.width, spec.safety_clearance)
            other_centers = circle_centers(ostates[:, :2], ostates[:, 2],
                                           np.full(ostates.shape[0], other.length))
            m = min(n, ostates.shape[0])
            delta = own_centers[:m, :, None, :] - other_centers[:m, None, :, :]
            d = np.sqrt(np.sum(delta**2, axis=-1))
            units = np.zeros_like(delta)
            apart = d > 0
            units[apart] = delta[apart] / d[apart][:, None]
            res_parts.append((own_radius + other_radius - d).reshape(-1))
            frame_parts.append(np.repeat(np.arange(m), 4))
            unit_parts.append(units.reshape(-1, 2))
            sign_parts.append(np.tile([1.0, 1.0, -1.0, -1.0], m))
        residuals["safe"] = np.concatenate(res_parts)
        frames["safe"] = np.concatenate(frame_parts)
        safe_geoms = (frames["safe"], np.concatenate(unit_parts),
                      np.concatenate(sign_parts))

    return residuals, frames, (road_units, head_signs), safe_geoms


def _hinge_value_grad(res, weight, barrier):
    """Penalty value and d(penalty)/d(residual) per entry (for subtraction)."""
    res = np.asarray(res, dtype=float)
    if barrier == "hinge":
        pos = np.maximum(res, 0.0)
        return weight * float(np.sum(pos**2)), 2.0 * weight * pos
    # capped log barrier: repels the boundary from inside, flat beyond 1 m margin
    value = np.zeros_like(res)
    grad = np.zeros_like(res)
    infeasible = res >= 0.0
    near = (~infeasible) & (res > -1.0)
    value[infeasible] = np.inf
    value[near] = -np.log(-res[near])
    grad[near] = -1.0 / res[near]
    return weight * float(np.sum(value)), weight * grad


def assemble_objective(decision, spec, context):
    """Evaluate the guidance objective and its analytic gradient.

    Returns an ObjectiveReport whose value is the maximization objective above
    and whose gradient matches the decision layout. Raises GuidanceError on
    non-finite inputs or intermediates, naming the offending term.
    """
    decision = np.asarray(decision, dtype=float)
    if not np.all(np.isfinite(decision)):
        raise GuidanceError("non-finite decision vector")
    n = context.num_frames
    states, accel, steer = unpack_decision(decision, n)
    controls = ControlSequence(accel=accel, steer=steer, wheelbase=context.wheelbase)
    dt = context.dt
    w_h, w_g = spec.equality_weight, spec.inequality_weight

    g_states = np.zeros((n, 4))
    g_accel = np.zeros(max(n - 1, 0))
    g_steer = np.zeros(max(n - 1, 0))

    # smoothness (subtracted)
    value = -smoothness_cost(controls, spec)
    g_accel -= 2.0 * spec.accel_weight * accel
    g_steer -= 2.0 * spec.steer_weight * steer
    if accel.size >= 2:
        da, dd = np.diff(accel), np.diff(steer)
        g_accel[:-1] += 2.0 * spec.accel_diff_weight * da
        g_accel[1:] -= 2.0 * spec.accel_diff_weight * da
        g_steer[:-1] += 2.0 * spec.steer_diff_weight * dd
        g_steer[1:] -= 2.0 * spec.steer_diff_weight * dd

    residuals = {}
    frames = {}

    if spec.enable_kinematic and n >= 2:
        kin = kinematic_residuals(states, controls, dt)
        residuals["kin"] = kin.ravel()
        frames["kin"] = np.repeat(np.arange(n - 1), 4)
        value -= w_h * float(np.sum(kin**2))
        psi, v = states[:-1, 2], states[:-1, 3]
        cos_p, sin_p = np.cos(psi), np.sin(psi)
        tan_d = np.tan(steer)
        sec2_d = 1.0 / np.cos(steer) ** 2
        L = context.wheelbase
        k2 = 2.0 * w_h
        # x-advance residual
        g_states[1:, 0] -= k2 * kin[:, 0]
        g_states[:-1, 0] += k2 * kin[:, 0]
        g_states[:-1, 2] -= k2 * kin[:, 0] * dt * v * sin_p
        g_states[:-1, 3] += k2 * kin[:, 0] * dt * cos_p
        # y-advance residual
        g_states[1:, 1] -= k2 * kin[:, 1]
        g_states[:-1, 1] += k2 * kin[:, 1]
        g_states[:-1, 2] += k2 * kin[:, 1] * dt * v * cos_p
        g_states[:-1, 3] += k2 * kin[:, 1] * dt * sin_p
        # heading-advance residual
        g_states[1:, 2] -= k2 * kin[:, 2]
        g_states[:-1, 2] += k2 * kin[:, 2]
        g_states[:-1, 3] += k2 * kin[:, 2] * dt * tan_d / L
        g_steer += k2 * kin[:, 2] * dt * v * sec2_d / L
        # speed-advance residual
        g_states[1:, 3] -= k2 * kin[:, 3]
        g_states[:-1, 3] += k2 * kin[:, 3]
        g_accel += k2 * kin[:, 3] * dt
    else:
        residuals["kin"] = np.zeros(0)
        frames["kin"] = np.zeros(0, dtype=int)

    if spec.enable_anchors and spec.anchored_states:
        vals, frs = [], []
        for frame in sorted(spec.anchored_states):
            if not (0 <= frame < n):
                raise GuidanceError(f"anchored frame {frame} out of range")
            target = np.asarray(spec.anchored_states[frame], dtype=float)
            diff = states[frame] - target
            diff[2] = wrap_angle(diff[2])
            vals.append(diff)
            frs.extend([frame] * 4)
            value -= w_h * float(np.sum(diff**2))
            g_states[frame] -= 2.0 * w_h * diff
        residuals["state"] = np.concatenate(vals) if vals else np.zeros(0)
        frames["state"] = np.asarray(frs, dtype=int)
    else:
        residuals["state"] = np.zeros(0)
        frames["state"] = np.zeros(0, dtype=int)

    rule_res, rule_frames, (road_units, head_signs), safe_geoms = \
        rule_and_safety_residuals(states, spec, context)
    residuals.update(rule_res)
    frames.update(rule_frames)

    pen, dpen = _hinge_value_grad(rule_res["head"], w_g, spec.barrier)
    value -= pen
    g_states[rule_frames["head"], 2] -= dpen * head_signs

    pen, dpen = _hinge_value_grad(rule_res["road"], w_g, spec.barrier)
    value -= pen
    g_states[rule_frames["road"], :2] -= dpen[:, None] * road_units

    pen, dpen = _hinge_value_grad(rule_res["safe"], w_g, spec.barrier)
    value -= pen
    sframes, units, signs = safe_geoms
    if sframes.size:
        # g = r_sum - ||delta||, delta = own_center - other_center
        np.add.at(g_states[:, :2], sframes, dpen[:, None] * units)
        tang = np.stack([-np.sin(states[sframes, 2]), np.cos(states[sframes, 2])], axis=1)
        offs = signs * context.own_length / 4.0
        np.add.at(g_states[:, 2], sframes, dpen * np.sum(units * tang, axis=1) * offs)

    if not np.isfinite(value) and spec.barrier == "hinge":
        raise GuidanceError("objective value is non-finite")
    gradient = pack_decision(g_states, g_accel, g_steer)
    if not np.all(np.isfinite(gradient)):
        raise GuidanceError("objective gradient is non-finite")
    return make_report(value, gradient, residuals, frames)


class TrajectoryObjective:
    """Callable objective bound to a spec and context, for the solver."""

    def __init__(self, spec, context):
        self.spec = spec
        self.context = context
        self.multiplier_weights = {
            "head": spec.inequality_weight,
            "road": spec.inequality_weight,
            "safe": spec.inequality_weight,
        }

    def __call__(self, decision):
        return assemble_objective(decision, self.spec, self.context)


def box_projector(lower, upper):
    """Feasible-set projector for axis-aligned box constraints."""
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)

    def project(x):
        return np.clip(x, lower, upper)

    return project


def baseline_guidance(kind, state, denoiser, objective, t, sched, *,
                      scale=1.0, feasible_project=None, rng=None):
    """Toy-scale guidance baselines for comparison runs.

    state is a batch (N, C) at step t; objective maps (N, C) to per-item
    (values, gradients). Kinds:

      dps       gradient at the clean-state estimate, pushed through the
                1/sqrt(alpha_bar) map and added to the reverse mean
      ctg       gradient evaluated at the reverse mean itself
      ghc_clip  full reverse step, then projection onto the feasible set

    dps and ctg return an adjusted mean (caller adds the kernel noise);
    ghc_clip returns a finished sample and needs rng when sigma_t > 0.
    """
    from .schedule import predict_x0, reverse_kernel_mean

    state = np.asarray(state, dtype=float)
    eps = denoiser.predict_eps(state[:, None, :], t)[:, 0, :]
    x0 = predict_x0(state, eps, t, sched)
    mean = reverse_kernel_mean(x0, state, t, sched)
    if kind == "dps":
        _, grad = objective(x0)
        return mean + scale * grad / np.sqrt(sched.alpha_bars[t])
    if kind == "ctg":
        _, grad = objective(mean)
        return mean + scale * grad
    if kind == "ghc_clip":
        sample = mean
        sigma = sched.sigmas[t]
        if sigma > 0.0:
            if rng is None:
                raise ValueError("ghc_clip needs rng while sigma_t > 0")
            sample = mean + sigma * rng.standard_normal(mean.shape)
        return feasible_project(sample) if feasible_project is not None else sample
    raise ValueError(f"unknown baseline kind {kind!r}")


def write_residual_csv(report, path):
    """Dump a report's residual entries as (frame, group, index, value) rows."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", "group", "index", "value"])
        for group in sorted(report.residuals):
            res = report.residuals[group]
            frs = report.residual_frames.get(group, np.zeros(len(res), dtype=int))
            for i, val in enumerate(res):
                writer.writerow([int(frs[i]) if i < len(frs) else -1, group, i, repr(float(val))])
