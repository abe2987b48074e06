"""Synthetic corridor maps and scene construction.

A corridor map is a handful of lane centerlines (polylines carrying per-vertex
headings), a lane successor graph, and a drivable half width. Scenes place
agents on lanes with constant-speed histories; future frames hold a
lane-following extrapolation as a placeholder for generation to overwrite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import polyline_arclengths, project_to_polyline, rects_overlap, walk_polyline
from .scene import NUM_CHANNELS, SceneTensor


@dataclass(frozen=True)
class CorridorMap:
    lanes: tuple              # tuple of (P, 3) arrays: x, y, heading
    successors: dict          # lane index -> tuple of lane indices
    half_width: float

    def __post_init__(self):
        lanes = tuple(np.asarray(l, dtype=float) for l in self.lanes)
        if not lanes:
            raise ValueError("map needs at least one lane")
        for i, lane in enumerate(lanes):
            if lane.ndim != 2 or lane.shape[1] != 3 or lane.shape[0] < 2:
                raise ValueError(f"lane {i} must be (P >= 2, 3)")
            if not np.all(np.isfinite(lane)):
                raise ValueError(f"lane {i} has non-finite entries")
        succ = {int(k): tuple(int(s) for s in v) for k, v in self.successors.items()}
        for k, targets in succ.items():
            if k < 0 or k >= len(lanes):
                raise ValueError(f"successor key {k} is not a lane index")
            for s in targets:
                if s < 0 or s >= len(lanes):
                    raise ValueError(f"successor {s} of lane {k} is not a lane index")
                if s == k:
                    raise ValueError(f"lane {k} lists itself as a successor")
        if not self.half_width > 0:
            raise ValueError("half_width must be positive")
        object.__setattr__(self, "lanes", lanes)
        object.__setattr__(self, "successors", succ)

    @property
    def num_lanes(self):
        return len(self.lanes)

    def successors_of(self, lane_index):
        return self.successors.get(int(lane_index), ())


def lateral_distance(corridor_map, points):
    """Distance from points (N, 2) to the nearest lane centerline."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    best = np.full(points.shape[0], np.inf)
    for lane in corridor_map.lanes:
        dist, _, _, _ = project_to_polyline(points, lane)
        best = np.minimum(best, dist)
    return best


@dataclass(frozen=True)
class CorridorSpec:
    kind: str = "straight"        # straight | curve | merge | fork
    num_lanes: int = 2
    lane_length: float = 120.0
    lane_spacing: float = 3.5
    half_width: float = 2.0
    point_spacing: float = 2.0
    curve_radius: float = 80.0
    curve_angle: float = np.pi / 3


def _straight_lane(start, end, point_spacing):
    start = np.asarray(start, dtype=float)
    end = np.asarray(end, dtype=float)
    span = np.hypot(*(end - start))
    n = max(2, int(np.ceil(span / point_spacing)) + 1)
    ts = np.linspace(0.0, 1.0, n)
    xy = start[None, :] + ts[:, None] * (end - start)[None, :]
    heading = np.arctan2(end[1] - start[1], end[0] - start[0])
    return np.column_stack([xy, np.full(n, heading)])


def build_corridor_map(spec):
    """Construct one of the synthetic corridor layouts."""
    if spec.kind == "straight":
        lanes = [
            _straight_lane((0.0, i * spec.lane_spacing),
                           (spec.lane_length, i * spec.lane_spacing),
                           spec.point_spacing)
            for i in range(spec.num_lanes)
        ]
        return CorridorMap(lanes=tuple(lanes), successors={}, half_width=spec.half_width)

    if spec.kind == "curve":
        lanes = []
        center = np.array([0.0, spec.curve_radius])
        for i in range(spec.num_lanes):
            radius = spec.curve_radius - i * spec.lane_spacing
            arc = radius * spec.curve_angle
            n = max(2, int(np.ceil(arc / spec.point_spacing)) + 1)
            phis = np.linspace(0.0, spec.curve_angle, n)
            xy = center[None, :] + radius * np.column_stack([np.sin(phis), -np.cos(phis)])
            lanes.append(np.column_stack([xy, phis]))
        return CorridorMap(lanes=tuple(lanes), successors={}, half_width=spec.half_width)

    if spec.kind == "merge":
        half = spec.lane_length / 2.0
        entry_main = _straight_lane((0.0, 0.0), (half, 0.0), spec.point_spacing)
        entry_side = _straight_lane((0.0, 1.5 * spec.lane_spacing), (half, 0.0),
                                    spec.point_spacing)
        exit_lane = _straight_lane((half, 0.0), (spec.lane_length, 0.0), spec.point_spacing)
        return CorridorMap(
            lanes=(entry_main, entry_side, exit_lane),
            successors={0: (2,), 1: (2,)},
            half_width=spec.half_width,
        )

    if spec.kind == "fork":
        half = spec.lane_length / 2.0
        entry = _straight_lane((0.0, 0.0), (half, 0.0), spec.point_spacing)
        exit_straight = _straight_lane((half, 0.0), (spec.lane_length, 0.0), spec.point_spacing)
        exit_slant = _straight_lane((half, 0.0), (spec.lane_length, 1.5 * spec.lane_spacing),
                                    spec.point_spacing)
        return CorridorMap(
            lanes=(entry, exit_straight, exit_slant),
            successors={0: (1, 2)},
            half_width=spec.half_width,
        )

    raise ValueError(f"unknown corridor kind {spec.kind!r}")


def map_to_dict(corridor_map):
    return {
        "lanes": [lane.tolist() for lane in corridor_map.lanes],
        "successors": {str(k): list(v) for k, v in corridor_map.successors.items()},
        "half_width": corridor_map.half_width,
    }


def map_from_dict(payload):
    return CorridorMap(
        lanes=tuple(np.array(lane, dtype=float) for lane in payload["lanes"]),
        successors={int(k): tuple(v) for k, v in payload["successors"].items()},
        half_width=float(payload["half_width"]),
    )


def make_corridor_scene(corridor_map, num_agents, history_steps, rng, *,
                        future_steps=16, dt=0.5, speed_range=(4.0, 9.0),
                        accel_range=(-1.2, 1.2), length_range=(4.2, 5.2),
                        width_range=(1.8, 2.1), start_margin=4.0, max_tries=300):
    """Place agents on lanes with collision-free constant-acceleration histories.

    Accepts a CorridorMap or a CorridorSpec. History frames (all channels) are
    marked as inpainting context; future frames hold a lane-following
    extrapolation (speed ramps linearly within hard bounds) and stay unmasked.
    Raises RuntimeError when an agent cannot be placed without overlapping an
    earlier one.
    """
    if isinstance(corridor_map, CorridorSpec):
        corridor_map = build_corridor_map(corridor_map)
    if num_agents < 1:
        raise ValueError("need at least one agent")
    if history_steps < 1 or future_steps < 1:
        raise ValueError("need at least one history and one future frame")

    total = history_steps + future_steps
    values = np.zeros((num_agents, total, NUM_CHANNELS))
    placed = []

    for agent in range(num_agents):
        ok = False
        for _ in range(max_tries):
            lane_idx = int(rng.integers(corridor_map.num_lanes))
            lane = corridor_map.lanes[lane_idx]
            arc_total = polyline_arclengths(lane)[-1]
            speed = float(rng.uniform(*speed_range))
            length = float(rng.uniform(*length_range))
            width = float(rng.uniform(*width_range))

            # constant acceleration, clipped so speed stays in hard bounds
            # across the whole horizon
            v_lo, v_hi = 0.5, speed_range[1] + 3.0
            t_back = (history_steps - 1) * dt
            t_fwd = future_steps * dt
            a_hi = (v_hi - speed) / t_fwd
            a_lo = (v_lo - speed) / t_fwd
            if t_back > 0:
                a_hi = min(a_hi, (speed - v_lo) / t_back)
                a_lo = max(a_lo, (speed - v_hi) / t_back)
            accel = float(np.clip(rng.uniform(*accel_range), a_lo, a_hi))

            offsets = (np.arange(total) - (history_steps - 1)) * dt
            speeds = speed + accel * offsets
            arcs = speed * offsets + 0.5 * accel * offsets**2
            # keep the whole horizon on the lane
            lo = start_margin - arcs.min()
            hi = arc_total - start_margin - arcs.max()
            if hi <= lo:
                continue
            s0 = float(rng.uniform(lo, hi))

            states = np.zeros((total, NUM_CHANNELS))
            for frame in range(total):
                pos, heading = walk_polyline(lane, s0, arcs[frame])
                states[frame] = [pos[0], pos[1], heading, speeds[frame], length, width]

            clash = False
            for other in placed:
                for frame in range(history_steps):
                    if rects_overlap(states[frame, :2], states[frame, 2],
                                     length + 0.6, width + 0.6,
                                     other[frame, :2], other[frame, 2],
                                     other[frame, 4] + 0.6, other[frame, 5] + 0.6):
                        clash = True
                        break
                if clash:
                    break
            if not clash:
                values[agent] = states
                placed.append(states)
                ok = True
                break
        if not ok:
            raise RuntimeError(f"could not place agent {agent} without initial overlap")

    valid = np.ones((num_agents, total), dtype=bool)
    inpaint = np.zeros((num_agents, total, NUM_CHANNELS), dtype=bool)
    inpaint[:, :history_steps, :] = True
    return SceneTensor(values=values, valid=valid, inpaint=inpaint, dt=dt)
