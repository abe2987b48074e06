"""Scene evaluation: distributional statistics, feasibility checks, and the
per-scene validity roll-up.

Conventions: all finite differences use the scene's frame period; statistics
pool entries over valid frames of all agents (a moving-only filter is
available); a scene is valid only when it is collision free, every agent
stays on the corridor, and every agent is kinematically feasible.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .corridor import lateral_distance
from .geometry import circle_centers, footprint_radius, rects_overlap, sector_contains, wrap_angle
from .guidance import _references_for_frames

STATISTICS = ("speed", "nearest_dist", "lateral_dev", "angular_dev")

MOVING_SPEED = 0.5  # m/s


@dataclass(frozen=True)
class HistogramSpec:
    bin_count: int = 64
    range: tuple = (0.0, 1.0)
    statistic: str = "speed"

    def __post_init__(self):
        if self.bin_count < 2:
            raise ValueError("bin_count must be at least 2")
        lo, hi = self.range
        if not lo < hi:
            raise ValueError("histogram range must satisfy lo < hi")
        if self.statistic not in STATISTICS:
            raise ValueError(f"unknown statistic {self.statistic!r}")

    @property
    def edges(self):
        return np.linspace(self.range[0], self.range[1], self.bin_count + 1)


HISTOGRAM_DEFAULTS = {
    "speed": HistogramSpec(64, (0.0, 35.0), "speed"),
    "nearest_dist": HistogramSpec(64, (0.0, 100.0), "nearest_dist"),
    "lateral_dev": HistogramSpec(64, (0.0, 10.0), "lateral_dev"),
    "angular_dev": HistogramSpec(64, (0.0, float(np.pi)), "angular_dev"),
}


def histogram_counts(values, spec):
    """Counts over the spec's bins; values are clipped into range so mass
    never silently disappears."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        return np.zeros(spec.bin_count)
    lo, hi = spec.range
    clipped = np.clip(values, lo, hi)
    counts, _ = np.histogram(clipped, bins=spec.bin_count, range=spec.range)
    return counts.astype(float)


def jsd(hist_p, hist_q):
    """Jensen-Shannon divergence between two histograms, base-2, in [0, 1]."""
    p = np.asarray(hist_p, dtype=float)
    q = np.asarray(hist_q, dtype=float)
    if p.shape != q.shape or p.ndim != 1:
        raise ValueError("histograms must be 1-D with identical binning")
    if np.any(p < 0) or np.any(q < 0):
        raise ValueError("histograms must be non-negative")
    if p.sum() == 0 or q.sum() == 0:
        raise ValueError("all-zero histogram")
    p = p / p.sum()
    q = q / q.sum()
    m = 0.5 * (p + q)

    def half_kl(a):
        mask = a > 0
        return float(np.sum(a[mask] * np.log2(a[mask] / m[mask])))

    return 0.5 * half_kl(p) + 0.5 * half_kl(q)


def scene_statistics(scene, corridor_map=None, *, moving_only=False):
    """Pooled per-frame statistics for histogram comparisons."""
    values, valid = scene.values, scene.valid
    out = {k: [] for k in STATISTICS}
    keep = valid & ((values[:, :, 3] > MOVING_SPEED) if moving_only else True)

    out["speed"] = values[:, :, 3][keep]

    num_agents, num_steps = valid.shape
    for f in range(num_steps):
        idx = np.flatnonzero(valid[:, f])
        if idx.size < 2:
            continue
        pos = values[idx, f, :2]
        d = np.linalg.norm(pos[:, None] - pos[None], axis=2)
        np.fill_diagonal(d, np.inf)
        nearest = d.min(axis=1)
        for i, a in enumerate(idx):
            if keep[a, f]:
                out["nearest_dist"].append(nearest[i])
    out["nearest_dist"] = np.asarray(out["nearest_dist"], dtype=float)

    if corridor_map is not None:
        lanes = [np.asarray(l) for l in corridor_map.lanes]
        for a in range(num_agents):
            rows = np.flatnonzero(keep[a])
            if rows.size == 0:
                continue
            pts = values[a, rows, :2]
            dist, _, heading = _references_for_frames(pts, lanes)
            out["lateral_dev"].extend(np.abs(dist))
            out["angular_dev"].extend(np.abs(wrap_angle(values[a, rows, 2] - heading)))
    out["lateral_dev"] = np.asarray(out["lateral_dev"], dtype=float)
    out["angular_dev"] = np.asarray(out["angular_dev"], dtype=float)
    return out


@dataclass(frozen=True)
class CollisionReport:
    agent_flags: np.ndarray                 # (A,) bool
    events: tuple                           # (frame, i, j) overlap events

    @property
    def scene_collided(self):
        return bool(self.agent_flags.any())


def collision_report(scene):
    """Oriented-rectangle overlap over every frame and valid agent pair."""
    values, valid = scene.values, scene.valid
    num_agents, num_steps = valid.shape
    flags = np.zeros(num_agents, dtype=bool)
    events = []
    for f in range(num_steps):
        idx = np.flatnonzero(valid[:, f])
        for a_pos in range(idx.size):
            for b_pos in range(a_pos + 1, idx.size):
                i, j = int(idx[a_pos]), int(idx[b_pos])
                si, sj = values[i, f], values[j, f]
                if rects_overlap(si[:2], si[2], si[4], si[5],
                                 sj[:2], sj[2], sj[4], sj[5]):
                    flags[i] = flags[j] = True
                    events.append((f, i, j))
    return CollisionReport(agent_flags=flags, events=tuple(events))


def offroad_report(scene, corridor_map, *, use_footprint=False):
    """Per-agent flag: the center (or footprint edge) leaves the corridor."""
    num_agents = scene.num_agents
    flags = np.zeros(num_agents, dtype=bool)
    for a in range(num_agents):
        rows = np.flatnonzero(scene.valid[a])
        if rows.size == 0:
            continue
        d = lateral_distance(corridor_map, scene.values[a, rows, :2])
        margin = scene.values[a, rows, 5] / 2.0 if use_footprint else 0.0
        flags[a] = bool(np.any(d + margin > corridor_map.half_width))
    return flags


@dataclass(frozen=True)
class KinematicLimits:
    speed: float = 30.0        # m/s
    accel: float = 6.0         # m/s^2
    jerk: float = 20.0         # m/s^3
    yaw_rate: float = 1.5      # rad/s
    lat_accel: float = 8.0     # m/s^2
    curvature: float = 0.5     # 1/m


def kinematic_report(scene, limits=None):
    """Per-agent feasibility of six finite-difference motion quantities."""
    limits = limits or KinematicLimits()
    if scene.num_frames < 3:
        raise ValueError("kinematic feasibility needs at least 3 frames")
    dt = scene.dt
    num_agents = scene.num_agents
    feasible = np.ones(num_agents, dtype=bool)
    worst = []
    for a in range(num_agents):
        rows = np.flatnonzero(scene.valid[a])
        v = scene.values[a, rows, 3]
        psi = scene.values[a, rows, 2]
        if rows.size < 3:
            worst.append({})
            continue
        accel = np.diff(v) / dt
        jerk = np.diff(accel) / dt
        yaw = wrap_angle(np.diff(psi)) / dt
        v_mid = v[:-1]
        lat = v_mid * yaw
        with np.errstate(divide="ignore", invalid="ignore"):
            curv = np.where(np.abs(v_mid) > MOVING_SPEED, yaw / v_mid, 0.0)
        checks = {
            "speed": (np.max(np.abs(v)), limits.speed),
            "accel": (np.max(np.abs(accel)), limits.accel),
            "jerk": (np.max(np.abs(jerk)) if jerk.size else 0.0, limits.jerk),
            "yaw_rate": (np.max(np.abs(yaw)), limits.yaw_rate),
            "lat_accel": (np.max(np.abs(lat)), limits.lat_accel),
            "curvature": (np.max(np.abs(curv)), limits.curvature),
        }
        worst.append({k: val for k, (val, _) in checks.items()})
        feasible[a] = all(val <= lim for val, lim in checks.values())
    return feasible, worst


def ttc_profile(scene, ego, horizon_s=10.0, *, clearance=0.1):
    """Constant-velocity time to contact per frame, clipped to the horizon.

    Returns (ttc (frames,), fractions dict for thresholds 1, 2, 3 s).
    Contact is between the two-circle footprints of the ego and any other
    valid agent.
    """
    values, valid = scene.values, scene.valid
    num_agents, num_steps = valid.shape
    ttc = np.full(num_steps, float(horizon_s))
    for f in range(num_steps):
        if not valid[ego, f]:
            continue
        se = values[ego, f]
        ce = circle_centers(se[:2], se[2], se[4])
        re = footprint_radius(se[5], clearance)
        ve = se[3] * np.array([np.cos(se[2]), np.sin(se[2])])
        best = float(horizon_s)
        for o in range(num_agents):
            if o == ego or not valid[o, f]:
                continue
            so = values[o, f]
            co = circle_centers(so[:2], so[2], so[4])
            ro = footprint_radius(so[5], clearance)
            vo = so[3] * np.array([np.cos(so[2]), np.sin(so[2])])
            dv = ve - vo
            r_sum = re + ro
            for k in range(2):
                for j in range(2):
                    dp = ce[k] - co[j]
                    c = dp @ dp - r_sum**2
                    if c <= 0.0:
                        best = 0.0
                        continue
                    a = dv @ dv
                    b = 2.0 * dp @ dv
                    if a <= 0.0:
                        continue
                    disc = b * b - 4.0 * a * c
                    if disc < 0.0 or b >= 0.0:
                        continue
                    s = (-b - np.sqrt(disc)) / (2.0 * a)
                    if 0.0 <= s < best:
                        best = float(s)
        ttc[f] = min(best, float(horizon_s))
    fractions = {thr: float(np.mean(ttc < thr)) for thr in (1.0, 2.0, 3.0)}
    return ttc, fractions


def ego_motion_intensity(scene, ego):
    """(mean |acceleration|, mean |jerk|) of the ego over valid frames."""
    rows = np.flatnonzero(scene.valid[ego])
    if rows.size < 3:
        raise ValueError("motion intensity needs at least 3 valid frames")
    v = scene.values[ego, rows, 3]
    accel = np.diff(v) / scene.dt
    jerk = np.diff(accel) / scene.dt
    return float(np.mean(np.abs(accel))), float(np.mean(np.abs(jerk)))


REAR_HALF_ANGLE = np.pi / 3.0
REAR_RANGE = 10.0


def nonresponsible_collision(scene, ego):
    """True iff the ego's first collision is a strike from behind while the
    ego is not reversing (simplified rear-end responsibility rule)."""
    report = collision_report(scene)
    for frame, i, j in report.events:
        if ego not in (i, j):
            continue
        other = j if i == ego else i
        se = scene.values[ego, frame]
        so = scene.values[other, frame]
        if se[3] < -1e-9:
            return False
        rear_heading = wrap_angle(se[2] + np.pi)
        struck_from_rear = bool(sector_contains(se[:2], rear_heading,
                                                so[None, :2], REAR_HALF_ANGLE,
                                                REAR_RANGE)[0])
        return struck_from_rear
    return False


@dataclass(frozen=True)
class SceneReport:
    collided: np.ndarray          # per-agent
    offroad: np.ndarray
    kin_feasible: np.ndarray
    scene_collided: bool
    scene_offroad: bool
    scene_kin_feasible: bool
    valid: bool
    ttc: np.ndarray
    ttc_fractions: dict
    ego_accel_mean: float
    ego_jerk_mean: float
    nonresponsible: bool


def scene_report(scene, corridor_map, *, ego=0, limits=None, horizon_s=10.0):
    """Full per-scene evaluation; valid = collision free and on-road and
    kinematically feasible for every agent."""
    coll = collision_report(scene)
    off = offroad_report(scene, corridor_map) if corridor_map is not None \
        else np.zeros(scene.num_agents, dtype=bool)
    kin, _ = kinematic_report(scene, limits)
    ttc, fractions = ttc_profile(scene, ego, horizon_s)
    accel_mean, jerk_mean = ego_motion_intensity(scene, ego)
    scene_collided = coll.scene_collided
    scene_offroad = bool(off.any())
    scene_kin = bool(kin.all())
    return SceneReport(
        collided=coll.agent_flags,
        offroad=off,
        kin_feasible=kin,
        scene_collided=scene_collided,
        scene_offroad=scene_offroad,
        scene_kin_feasible=scene_kin,
        valid=(not scene_collided) and (not scene_offroad) and scene_kin,
        ttc=ttc,
        ttc_fractions=fractions,
        ego_accel_mean=accel_mean,
        ego_jerk_mean=jerk_mean,
        nonresponsible=nonresponsible_collision(scene, ego),
    )


def write_scene_reports_csv(reports, path):
    """Per-scene rows plus an aggregate summary row."""
    rows = []
    for scene_id, rep in enumerate(reports):
        rows.append([
            scene_id, int(rep.scene_collided), int(rep.scene_offroad),
            int(rep.scene_kin_feasible), int(rep.valid),
            repr(float(np.mean(rep.ttc))),
            repr(rep.ttc_fractions[1.0]), repr(rep.ttc_fractions[2.0]),
            repr(rep.ttc_fractions[3.0]),
            repr(rep.ego_accel_mean), repr(rep.ego_jerk_mean),
            int(rep.nonresponsible),
        ])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scene_id", "collided", "offroad", "kin_feasible",
                         "valid", "ttc_mean", "ttc_lt1", "ttc_lt2", "ttc_lt3",
                         "accel_mean", "jerk_mean", "nc"])
        writer.writerows(rows)
        if rows:
            agg = ["aggregate"]
            data = np.array([[float(x) for x in row[1:]] for row in rows])
            agg.extend(repr(v) for v in data.mean(axis=0))
            writer.writerow(agg)


def write_histogram_csv(spec, counts, path):
    edges = spec.edges
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_lo", "bin_hi", "count"])
        for i, count in enumerate(counts):
            writer.writerow([repr(float(edges[i])), repr(float(edges[i + 1])),
                             repr(float(count))])
