"""Scene tensors: the dense multi-agent state representation and its JSON form.

A scene is (A agents) x (T frames) x (6 channels): px [m], py [m], psi [rad],
v [m/s], length [m], width [m], plus two boolean masks. `valid` marks real
agent-frames; `inpaint` marks entries that are fixed context (history frames,
goal entries, pinned sizes) which generation must reproduce exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from .geometry import wrap_angle

CHANNELS = ("px", "py", "psi", "v", "length", "width")
NUM_CHANNELS = len(CHANNELS)
MOTION = slice(0, 4)    # px, py, psi, v
SIZES = slice(4, 6)     # length, width


@dataclass(frozen=True)
class SceneTensor:
    values: np.ndarray    # (A, T, 6) float
    valid: np.ndarray     # (A, T) bool
    inpaint: np.ndarray   # (A, T, 6) bool
    dt: float
    ids: tuple = ()

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        valid = np.asarray(self.valid, dtype=bool)
        inpaint = np.asarray(self.inpaint, dtype=bool)
        if values.ndim != 3 or values.shape[2] != NUM_CHANNELS:
            raise ValueError(f"values must be (A, T, {NUM_CHANNELS}), got {values.shape}")
        a, t, _ = values.shape
        if a < 1 or t < 1:
            raise ValueError("scene needs at least one agent and one frame")
        if valid.shape != (a, t):
            raise ValueError(f"valid must be ({a}, {t}), got {valid.shape}")
        if inpaint.shape != values.shape:
            raise ValueError(f"inpaint must match values shape, got {inpaint.shape}")
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        ids = tuple(self.ids) if self.ids else tuple(range(a))
        if len(ids) != a:
            raise ValueError("ids length must equal the agent count")

        if not np.all(np.isfinite(values[valid])):
            raise ValueError("non-finite state values at valid frames")
        if not np.all(np.isfinite(values[inpaint])):
            raise ValueError("non-finite context values at inpaint entries")
        psi = values[:, :, 2][valid]
        if psi.size and (psi.min() <= -np.pi or psi.max() > np.pi):
            raise ValueError("psi must be normalized to (-pi, pi] at valid frames")
        sizes = values[:, :, SIZES][valid]
        if sizes.size and sizes.min() <= 0:
            raise ValueError("length and width must be positive at valid frames")

        object.__setattr__(self, "values", values)
        object.__setattr__(self, "valid", valid)
        object.__setattr__(self, "inpaint", inpaint)
        object.__setattr__(self, "ids", ids)

    @property
    def num_agents(self):
        return self.values.shape[0]

    @property
    def num_frames(self):
        return self.values.shape[1]

    def generation_mask(self):
        """Entries generation is free to write: valid and not pinned context."""
        return self.valid[:, :, None] & ~self.inpaint

    def with_values(self, values):
        return replace(self, values=np.asarray(values, dtype=float))


def set_goal_condition(scene, agent_index, goal_state):
    """Pin an agent's final-frame motion channels to a goal state.

    goal_state is (px, py, psi, v); psi must already be normalized to
    (-pi, pi]. Returns a new SceneTensor; the input is untouched.
    """
    if not (0 <= agent_index < scene.num_agents):
        raise ValueError(f"agent index {agent_index} out of range")
    goal = np.asarray(goal_state, dtype=float)
    if goal.shape != (4,):
        raise ValueError(f"goal state must be (px, py, psi, v), got shape {goal.shape}")
    if not np.all(np.isfinite(goal)):
        raise ValueError("goal state must be finite")
    if not (-np.pi < goal[2] <= np.pi):
        raise ValueError("goal psi must be normalized to (-pi, pi]")
    if not scene.valid[agent_index, -1]:
        raise ValueError("agent is not valid at the final frame")
    values = scene.values.copy()
    inpaint = scene.inpaint.copy()
    values[agent_index, -1, MOTION] = goal
    inpaint[agent_index, -1, MOTION] = True
    return replace(scene, values=values, inpaint=inpaint)


def scene_to_dict(scene, corridor_map=None):
    from .corridor import map_to_dict  # local import to avoid a cycle

    agents = []
    for i in range(scene.num_agents):
        agents.append(
            {
                "id": int(scene.ids[i]),
                "states": scene.values[i].tolist(),
                "valid": scene.valid[i].tolist(),
                "inpaint": scene.inpaint[i].tolist(),
            }
        )
    return {
        "dt_seconds": scene.dt,
        "agents": agents,
        "map": None if corridor_map is None else map_to_dict(corridor_map),
    }


def scene_from_dict(payload):
    from .corridor import map_from_dict

    agents = payload["agents"]
    values = np.array([a["states"] for a in agents], dtype=float)
    valid = np.array([a["valid"] for a in agents], dtype=bool)
    inpaint = np.array([a["inpaint"] for a in agents], dtype=bool)
    ids = tuple(int(a["id"]) for a in agents)
    scene = SceneTensor(values=values, valid=valid, inpaint=inpaint,
                        dt=float(payload["dt_seconds"]), ids=ids)
    corridor_map = None if payload.get("map") is None else map_from_dict(payload["map"])
    return scene, corridor_map


def save_scene(scene, corridor_map, path):
    """Write a scene (and its map, possibly None) to a JSON file."""
    with open(path, "w") as fh:
        json.dump(scene_to_dict(scene, corridor_map), fh)


def load_scene(path):
    with open(path) as fh:
        payload = json.load(fh)
    return scene_from_dict(payload)


def normalize_headings(values):
    """Return a copy with the psi channel wrapped into (-pi, pi]."""
    out = np.array(values, dtype=float)
    out[..., 2] = wrap_angle(out[..., 2])
    return out
