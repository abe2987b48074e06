"""Static SVG renderings of toy samples and corridor scenes.

Hand-rolled SVG strings: deterministic output, no drawing dependency. The
scene view colors trajectories by role (ego red, attacker yellow, others
blue) with per-segment brightness following speed.
"""

from __future__ import annotations

import numpy as np

from .geometry import rect_corners

EGO_COLOR = (214, 39, 40)
ATTACKER_COLOR = (230, 180, 20)
OTHER_COLOR = (31, 119, 180)
MODE_COLORS = ((31, 119, 180), (255, 127, 14), (44, 160, 44),
               (214, 39, 40), (148, 103, 189), (140, 86, 75),
               (227, 119, 194), (127, 127, 127))


def _fmt(x):
    return f"{float(x):.2f}"


def _hex(rgb):
    return "#{:02x}{:02x}{:02x}".format(*(int(round(c)) for c in rgb))


def _lerp(a, b, t):
    t = float(np.clip(t, 0.0, 1.0))
    return tuple(a_c + t * (b_c - a_c) for a_c, b_c in zip(a, b))


class _Canvas:
    """Maps world coordinates into an SVG viewport (y axis flipped)."""

    def __init__(self, xlim, ylim, width=800.0, margin=20.0):
        self.xlim, self.ylim = xlim, ylim
        span_x = max(xlim[1] - xlim[0], 1e-6)
        span_y = max(ylim[1] - ylim[0], 1e-6)
        self.scale = (width - 2 * margin) / span_x
        self.width = width
        self.height = span_y * self.scale + 2 * margin
        self.margin = margin
        self.parts = []

    def pt(self, xy):
        x = self.margin + (xy[0] - self.xlim[0]) * self.scale
        y = self.height - self.margin - (xy[1] - self.ylim[0]) * self.scale
        return x, y

    def polyline(self, pts, color, stroke_width=1.5, opacity=1.0, dash=None):
        coords = " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in map(self.pt, pts))
        dash_attr = f' stroke-dasharray="{dash}"' if dash else ""
        self.parts.append(
            f'<polyline points="{coords}" fill="none" stroke="{_hex(color)}"'
            f' stroke-width="{_fmt(stroke_width)}" stroke-opacity="{_fmt(opacity)}"{dash_attr}/>')

    def segment(self, a, b, color, stroke_width=2.0):
        (x1, y1), (x2, y2) = self.pt(a), self.pt(b)
        self.parts.append(
            f'<line x1="{_fmt(x1)}" y1="{_fmt(y1)}" x2="{_fmt(x2)}" y2="{_fmt(y2)}"'
            f' stroke="{_hex(color)}" stroke-width="{_fmt(stroke_width)}"'
            ' stroke-linecap="round"/>')

    def circle(self, center, radius_world, color, fill=True, opacity=1.0):
        x, y = self.pt(center)
        r = radius_world * self.scale
        paint = (f'fill="{_hex(color)}" fill-opacity="{_fmt(opacity)}" stroke="none"'
                 if fill else
                 f'fill="none" stroke="{_hex(color)}" stroke-opacity="{_fmt(opacity)}"')
        self.parts.append(f'<circle cx="{_fmt(x)}" cy="{_fmt(y)}" r="{_fmt(r)}" {paint}/>')

    def polygon(self, pts, color, opacity=0.9):
        coords = " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in map(self.pt, pts))
        self.parts.append(
            f'<polygon points="{coords}" fill="{_hex(color)}"'
            f' fill-opacity="{_fmt(opacity)}" stroke="#222222" stroke-width="0.8"/>')

    def star(self, center, radius_world, color):
        cx, cy = center
        pts = []
        for i in range(10):
            ang = np.pi / 2 + i * np.pi / 5
            r = radius_world if i % 2 == 0 else 0.4 * radius_world
            pts.append((cx + r * np.cos(ang), cy + r * np.sin(ang)))
        self.polygon(pts, color, opacity=1.0)

    def to_svg(self):
        body = "\n".join(self.parts)
        return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{_fmt(self.width)}"'
                f' height="{_fmt(self.height)}"'
                f' viewBox="0 0 {_fmt(self.width)} {_fmt(self.height)}">\n'
                f'<rect width="100%" height="100%" fill="#fafafa"/>\n{body}\n</svg>\n')


def render_toy(world, samples, path, assignments=None):
    """Scatter of samples with 3-sigma mode rings and the guidance star."""
    samples = np.asarray(samples, dtype=float)
    means = world.target.means
    stds = world.mode_stds
    all_pts = np.vstack([samples, means, world.guidance_point[None]])
    lo = all_pts.min(axis=0) - 1.0
    hi = all_pts.max(axis=0) + 1.0
    canvas = _Canvas((lo[0], hi[0]), (lo[1], hi[1]), width=640.0)
    for k, mean in enumerate(means):
        color = MODE_COLORS[k % len(MODE_COLORS)]
        canvas.circle(mean, 3.0 * stds[k], color, fill=False, opacity=0.8)
    for i, pt in enumerate(samples):
        if assignments is None or assignments[i] < 0:
            color = (120, 120, 120)
        else:
            color = MODE_COLORS[int(assignments[i]) % len(MODE_COLORS)]
        canvas.circle(pt, 0.02 * (hi - lo).max(), color, opacity=0.45)
    canvas.star(world.guidance_point, 0.06 * (hi - lo).max(), (220, 160, 0))
    with open(path, "w") as fh:
        fh.write(canvas.to_svg())


def _role_color(agent, ego, attacker):
    if agent == ego:
        return EGO_COLOR
    if attacker is not None and agent == attacker:
        return ATTACKER_COLOR
    return OTHER_COLOR


def render_scene(scene, corridor_map, path, *, ego=0, attacker=None):
    """Corridor, speed-colored trajectories, and final-frame footprints."""
    pts = [scene.values[a, scene.valid[a], :2] for a in range(scene.num_agents)
           if scene.valid[a].any()]
    stack = np.vstack(pts) if pts else np.zeros((1, 2))
    if corridor_map is not None:
        stack = np.vstack([stack] + [lane[:, :2] for lane in corridor_map.lanes])
    lo = stack.min(axis=0) - 5.0
    hi = stack.max(axis=0) + 5.0
    canvas = _Canvas((lo[0], hi[0]), (lo[1], hi[1]), width=960.0)

    if corridor_map is not None:
        for lane in corridor_map.lanes:
            center = lane[:, :2]
            normal = np.stack([-np.sin(lane[:, 2]), np.cos(lane[:, 2])], axis=1)
            b = corridor_map.half_width
            canvas.polyline(center + b * normal, (200, 200, 200), 1.0)
            canvas.polyline(center - b * normal, (200, 200, 200), 1.0)
            canvas.polyline(center, (170, 170, 170), 0.8, dash="4,4")

    vmax = max(float(scene.values[:, :, 3][scene.valid].max(initial=0.0)), 1.0)
    for a in range(scene.num_agents):
        rows = np.flatnonzero(scene.valid[a])
        if rows.size == 0:
            continue
        base = _role_color(a, ego, attacker)
        for i in range(rows.size - 1):
            f0, f1 = rows[i], rows[i + 1]
            speed = 0.5 * (scene.values[a, f0, 3] + scene.values[a, f1, 3])
            color = _lerp((40, 40, 40), base, 0.25 + 0.75 * speed / vmax)
            canvas.segment(scene.values[a, f0, :2], scene.values[a, f1, :2], color)
        last = rows[-1]
        state = scene.values[a, last]
        corners = rect_corners(state[:2], state[2], state[4], state[5])
        canvas.polygon(corners, base, opacity=0.85)
    with open(path, "w") as fh:
        fh.write(canvas.to_svg())
