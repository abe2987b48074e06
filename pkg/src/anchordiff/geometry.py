"""Planar geometry primitives shared by guidance, world building and metrics.

Everything here is plain numpy on small arrays: angle wrapping, oriented
rectangles, two-circle vehicle footprints, forward sectors and point-to-polyline
projection.
"""

from __future__ import annotations

import numpy as np

TWO_PI = 2.0 * np.pi


def wrap_angle(theta):
    """Wrap an angle (or array of angles) into (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(theta, dtype=float), TWO_PI)


def heading_vector(psi):
    """Unit vector(s) for heading angle(s); shape (..., 2)."""
    psi = np.asarray(psi, dtype=float)
    return np.stack([np.cos(psi), np.sin(psi)], axis=-1)


def rect_corners(center, heading, length, width):
    """Corners of an oriented rectangle, counterclockwise, shape (4, 2)."""
    c, s = np.cos(heading), np.sin(heading)
    axis_l = np.array([c, s])
    axis_w = np.array([-s, c])
    half_l = 0.5 * length
    half_w = 0.5 * width
    center = np.asarray(center, dtype=float)
    return np.array(
        [
            center + half_l * axis_l + half_w * axis_w,
            center - half_l * axis_l + half_w * axis_w,
            center - half_l * axis_l - half_w * axis_w,
            center + half_l * axis_l - half_w * axis_w,
        ]
    )


def _sat_gap(corners_a, corners_b):
    """Largest separating gap over the 4 SAT axes of two rectangles.

    Positive: disjoint, separated by at least that much along some axis.
    Non-positive: overlapping (or touching at exactly 0).
    """
    best = -np.inf
    for corners in (corners_a, corners_b):
        edges = np.roll(corners, -1, axis=0)[:2] - corners[:2]
        for edge in edges:
            norm = np.hypot(edge[0], edge[1])
            if norm == 0.0:
                continue
            axis = edge / norm
            pa = corners_a @ axis
            pb = corners_b @ axis
            gap = max(pb.min() - pa.max(), pa.min() - pb.max())
            best = max(best, gap)
    return best


def rect_sat_gap(center_a, heading_a, length_a, width_a,
                 center_b, heading_b, length_b, width_b):
    """Signed SAT gap between two oriented rectangles (positive = disjoint)."""
    ca = rect_corners(center_a, heading_a, length_a, width_a)
    cb = rect_corners(center_b, heading_b, length_b, width_b)
    return _sat_gap(ca, cb)


def rects_overlap(center_a, heading_a, length_a, width_a,
                  center_b, heading_b, length_b, width_b):
    """True when two oriented rectangles intersect (touching counts)."""
    return rect_sat_gap(center_a, heading_a, length_a, width_a,
                        center_b, heading_b, length_b, width_b) <= 0.0


def points_in_rect(points, center, heading, length, width, atol=0.0):
    """Boolean mask of points inside (or on, within atol) an oriented rectangle."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    c, s = np.cos(heading), np.sin(heading)
    rel = points - np.asarray(center, dtype=float)
    local_x = rel[:, 0] * c + rel[:, 1] * s
    local_y = -rel[:, 0] * s + rel[:, 1] * c
    return (np.abs(local_x) <= 0.5 * length + atol) & (np.abs(local_y) <= 0.5 * width + atol)


def circle_centers(position, psi, length):
    """Two-circle footprint centers at +-length/4 along the heading.

    position: (..., 2), psi: (...,). Returns (..., 2, 2) with axis -2 indexing
    the front/rear circle.
    """
    position = np.asarray(position, dtype=float)
    direction = heading_vector(psi)
    offset = (np.asarray(length, dtype=float) / 4.0)[..., None] * direction
    return np.stack([position + offset, position - offset], axis=-2)


def footprint_radius(width, clearance=0.1):
    """Circle radius for the two-circle footprint: half width plus clearance."""
    return 0.5 * np.asarray(width, dtype=float) + clearance


def sector_contains(origin, psi, points, half_angle, reach):
    """Mask of points inside the forward sector anchored at (origin, psi).

    The sector spans +-half_angle around the heading out to `reach` meters.
    The origin itself counts as inside.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    rel = points - np.asarray(origin, dtype=float)
    dist = np.hypot(rel[:, 0], rel[:, 1])
    bearing = np.abs(wrap_angle(np.arctan2(rel[:, 1], rel[:, 0]) - psi))
    inside = (dist <= reach) & (bearing <= half_angle)
    inside |= dist == 0.0
    return inside


def project_to_polyline(points, polyline):
    """Project points onto a polyline's segments.

    points: (N, 2); polyline: (P, >=2) using the first two columns as x, y.
    Returns (dist, proj, seg_index, seg_frac):
      dist      (N,) Euclidean distance to the nearest segment point
      proj      (N, 2) the nearest point on the polyline
      seg_index (N,) index of the segment (0..P-2) realizing the minimum
      seg_frac  (N,) position along that segment in [0, 1]
    Ties resolve to the earliest segment.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    xy = np.asarray(polyline, dtype=float)[:, :2]
    if xy.shape[0] < 2:
        raise ValueError("polyline needs at least 2 points")
    starts = xy[:-1]                      # (S, 2)
    deltas = xy[1:] - xy[:-1]             # (S, 2)
    seg_len2 = np.einsum("sd,sd->s", deltas, deltas)
    seg_len2 = np.where(seg_len2 == 0.0, 1.0, seg_len2)

    rel = points[:, None, :] - starts[None, :, :]          # (N, S, 2)
    frac = np.einsum("nsd,sd->ns", rel, deltas) / seg_len2  # (N, S)
    frac = np.clip(frac, 0.0, 1.0)
    nearest = starts[None, :, :] + frac[..., None] * deltas[None, :, :]
    d2 = np.sum((points[:, None, :] - nearest) ** 2, axis=-1)

    seg_index = np.argmin(d2, axis=1)
    n_idx = np.arange(points.shape[0])
    dist = np.sqrt(d2[n_idx, seg_index])
    proj = nearest[n_idx, seg_index]
    seg_frac = frac[n_idx, seg_index]
    return dist, proj, seg_index, seg_frac


def polyline_arclengths(polyline):
    """Cumulative arclength at each vertex, starting at 0."""
    xy = np.asarray(polyline, dtype=float)[:, :2]
    steps = np.hypot(*(xy[1:] - xy[:-1]).T)
    return np.concatenate([[0.0], np.cumsum(steps)])


def walk_polyline(polyline, start_arclength, distance):
    """Point and tangent heading a signed `distance` along a polyline.

    The walk clamps at the polyline ends (continues straight along the end
    segment's heading beyond them), which is what constant-speed placement on
    a finite lane needs.
    """
    xy = np.asarray(polyline, dtype=float)[:, :2]
    arcs = polyline_arclengths(polyline)
    target = start_arclength + distance
    if target <= 0.0:
        d = xy[1] - xy[0]
        h = np.arctan2(d[1], d[0])
        return xy[0] + target * d / max(np.hypot(*d), 1e-12), h
    if target >= arcs[-1]:
        d = xy[-1] - xy[-2]
        h = np.arctan2(d[1], d[0])
        return xy[-1] + (target - arcs[-1]) * d / max(np.hypot(*d), 1e-12), h
    seg = int(np.searchsorted(arcs, target, side="right") - 1)
    seg = min(max(seg, 0), xy.shape[0] - 2)
    d = xy[seg + 1] - xy[seg]
    seg_len = max(np.hypot(*d), 1e-12)
    frac = (target - arcs[seg]) / seg_len
    h = np.arctan2(d[1], d[0])
    return xy[seg] + frac * d, h
