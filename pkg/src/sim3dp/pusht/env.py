"""Planar Push-T embedded in 3D (everything lives on z = 0).

A disk agent pushes a T-shaped block toward a goal pose. Contact is resolved
quasi-statically: whenever the agent disk penetrates the T, the block is moved
along the contact normal and rotated about its centroid just enough to clear
the penetration. The model has no velocities, so the block only moves while
it is being touched.

The whole scene (block, goal, agent, T size, agent radius and speed, arena)
is carried in the state, so an in-plane similarity applied to a state gives
an equally valid state whose rollouts are the transformed rollouts.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from importlib import resources

import numpy as np

from ..geom import Rng, Sim3, rot_z

SETUPS = ("Original", "R+Su", "R+Sn", "R+Sn+P")


@dataclass(frozen=True)
class PushTConfig:
    workspace: float = 512.0
    bar_size: tuple = (120.0, 30.0)    # width, height of the T's top bar
    stem_size: tuple = (30.0, 90.0)    # width, height of the T's stem
    agent_radius: float = 15.0
    max_speed: float = 12.0            # agent travel per control step
    push_gain: float = 1.0             # rotation compliance of the quasi-static push
    arena_radius: float = 256.0        # agent is confined to this disk around the goal
    goal: tuple = (256.0, 256.0, math.pi / 4)
    success_reward: float = 0.95
    max_steps: int = 300
    scale_range: tuple = (1.0, 2.0)
    max_aspect: float = 1.33
    position_fraction: float = 0.8

    def __post_init__(self):
        vals = (self.workspace, *self.bar_size, *self.stem_size, self.agent_radius,
                self.max_speed, self.push_gain, self.arena_radius)
        if min(vals) <= 0:
            raise ValueError("PushTConfig dimensions must be positive")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "PushTConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def _vec3(x) -> np.ndarray:
    v = np.zeros(3)
    x = np.asarray(x, dtype=np.float64).ravel()
    v[:x.size] = x
    return v


@dataclass(frozen=True, eq=False)
class PushTState:
    """Block, agent and goal poses plus the scene's size parameters.

    ``scale`` multiplies every length of the nominal scene (T, agent radius,
    speed, arena); ``stretch`` is a body-frame non-uniform scaling of the T.
    """

    block_pos: np.ndarray
    block_yaw: float
    agent_pos: np.ndarray
    goal_pos: np.ndarray
    goal_yaw: float
    scale: float = 1.0
    stretch: np.ndarray = field(default_factory=lambda: np.ones(2))
    arena_center: np.ndarray | None = None

    def __post_init__(self):
        for name in ("block_pos", "agent_pos", "goal_pos"):
            object.__setattr__(self, name, _vec3(getattr(self, name)))
        object.__setattr__(self, "stretch", np.asarray(self.stretch, dtype=np.float64).reshape(2))
        center = self.goal_pos if self.arena_center is None else self.arena_center
        object.__setattr__(self, "arena_center", _vec3(center))
        object.__setattr__(self, "block_yaw", float(self.block_yaw))
        object.__setattr__(self, "goal_yaw", float(self.goal_yaw))
        object.__setattr__(self, "scale", float(self.scale))

    def to_dict(self) -> dict:
        return {"block_pos": self.block_pos.tolist(), "block_yaw": self.block_yaw,
                "agent_pos": self.agent_pos.tolist(), "goal_pos": self.goal_pos.tolist(),
                "goal_yaw": self.goal_yaw, "scale": self.scale, "stretch": self.stretch.tolist(),
                "arena_center": self.arena_center.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "PushTState":
        return cls(**d)

    def transformed(self, T: Sim3) -> "PushTState":
        """Apply an in-plane similarity (rotation about z, z-free translation)."""
        yaw = in_plane_angle(T)
        return PushTState(T.apply(self.block_pos), self.block_yaw + yaw, T.apply(self.agent_pos),
                          T.apply(self.goal_pos), self.goal_yaw + yaw, self.scale * T.s,
                          self.stretch.copy(), T.apply(self.arena_center))

    def with_agent(self, agent_pos) -> "PushTState":
        return replace(self, agent_pos=_vec3(agent_pos))


def in_plane_angle(T: Sim3) -> float:
    """Yaw of an in-plane transform; raises if T tilts the ground plane."""
    R = T.R
    if abs(R[2, 2] - 1.0) > 1e-9 or abs(T.t[2]) > 1e-9:
        raise ValueError("transform does not preserve the ground plane z = 0")
    return math.atan2(R[1, 0], R[0, 0])


# ---------------------------------------------------------------- geometry

def body_rectangles(cfg: PushTConfig) -> np.ndarray:
    """The T as two body-frame rectangles [2, 4, 2] (bar, stem), CCW, centroid at the origin."""
    (bw, bh), (sw, sh) = cfg.bar_size, cfg.stem_size
    a_bar, a_stem = bw * bh, sw * sh
    # joint line y0 chosen so that the area centroid sits at y = 0
    y0 = -(a_bar * bh / 2 - a_stem * sh / 2) / (a_bar + a_stem)
    bar = [(-bw / 2, y0), (bw / 2, y0), (bw / 2, y0 + bh), (-bw / 2, y0 + bh)]
    stem = [(-sw / 2, y0 - sh), (sw / 2, y0 - sh), (sw / 2, y0), (-sw / 2, y0)]
    return np.array([bar, stem], dtype=np.float64)


def body_outline(cfg: PushTConfig) -> np.ndarray:
    """The 8 corners of the T outline [8, 2], CCW starting at the stem's bottom-left."""
    bar, stem = body_rectangles(cfg)
    return np.array([stem[0], stem[1], stem[2], bar[1], bar[2], bar[3], bar[0], stem[3]])


def body_stem_tip(cfg: PushTConfig) -> np.ndarray:
    stem = body_rectangles(cfg)[1]
    return (stem[0] + stem[1]) / 2


def _place(body_xy: np.ndarray, pos, yaw: float, scale: float, stretch) -> np.ndarray:
    R = rot_z(yaw)[:2, :2]
    return (body_xy * stretch * scale) @ R.T + np.asarray(pos)[:2]


def block_outline(state: PushTState, cfg: PushTConfig) -> np.ndarray:
    return _place(body_outline(cfg), state.block_pos, state.block_yaw, state.scale, state.stretch)


def goal_outline(state: PushTState, cfg: PushTConfig) -> np.ndarray:
    return _place(body_outline(cfg), state.goal_pos, state.goal_yaw, state.scale, state.stretch)


def _world_rects(pos, yaw, state: PushTState, cfg: PushTConfig) -> np.ndarray:
    return np.stack([_place(r, pos, yaw, state.scale, state.stretch) for r in body_rectangles(cfg)])


def gyration_sq(state: PushTState, cfg: PushTConfig) -> float:
    """Polar radius of gyration squared of the (scaled) T about its centroid."""
    sx, sy = state.stretch * state.scale
    total_a, total_i = 0.0, 0.0
    for rect in body_rectangles(cfg):
        w = (rect[1, 0] - rect[0, 0]) * sx
        h = (rect[2, 1] - rect[1, 1]) * sy
        cx, cy = rect.mean(axis=0) * (sx, sy)
        a = w * h
        total_a += a
        total_i += a * ((w * w + h * h) / 12 + cx * cx + cy * cy)
    return total_i / total_a


def closest_on_outline(p: np.ndarray, outline: np.ndarray):
    """Closest boundary point of a closed polygon to p, and the distance to it."""
    a = outline
    b = np.roll(outline, -1, axis=0)
    ab = b - a
    u = np.clip(np.einsum("ij,ij->i", p - a, ab) / np.einsum("ij,ij->i", ab, ab), 0.0, 1.0)
    q = a + u[:, None] * ab
    d = np.linalg.norm(q - p, axis=1)
    i = int(np.argmin(d))
    return q[i], float(d[i])


def inside_convex(p: np.ndarray, poly: np.ndarray) -> bool:
    e = np.roll(poly, -1, axis=0) - poly
    w = p - poly
    return bool(np.all(e[:, 0] * w[:, 1] - e[:, 1] * w[:, 0] >= 0))


def signed_distance(p: np.ndarray, state: PushTState, cfg: PushTConfig):
    """(closest boundary point, signed distance) of planar point p to the block; negative inside."""
    q, d = closest_on_outline(p, block_outline(state, cfg))
    rects = _world_rects(state.block_pos, state.block_yaw, state, cfg)
    if any(inside_convex(p, r) for r in rects):
        d = -d
    return q, d


# ---------------------------------------------------------------- reward

def clip_convex(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman: part of convex polygon ``subject`` inside convex CCW ``clip``."""
    out = subject
    for i in range(len(clip)):
        if len(out) == 0:
            break
        a, b = clip[i], clip[(i + 1) % len(clip)]
        e = b - a
        side = e[0] * (out[:, 1] - a[1]) - e[1] * (out[:, 0] - a[0])
        kept = []
        for j in range(len(out)):
            p, q = out[j], out[(j + 1) % len(out)]
            sp, sq = side[j], side[(j + 1) % len(out)]
            if sp >= 0:
                kept.append(p)
            if (sp >= 0) != (sq >= 0):
                kept.append(p + (q - p) * (sp / (sp - sq)))
        out = np.array(kept).reshape(-1, 2)
    return out


def polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def reward(state: PushTState, cfg: PushTConfig = PushTConfig()) -> float:
    """Fraction of the T's area that overlaps the goal T, by exact convex clipping."""
    block = _world_rects(state.block_pos, state.block_yaw, state, cfg)
    goal = _world_rects(state.goal_pos, state.goal_yaw, state, cfg)
    total = sum(polygon_area(r) for r in block)
    inter = sum(polygon_area(clip_convex(b, g)) for b in block for g in goal)
    return float(min(max(inter / total, 0.0), 1.0))


# ---------------------------------------------------------------- dynamics

def _resolve_contact(state: PushTState, cfg: PushTConfig, push_dir: np.ndarray,
                     iters: int = 8) -> PushTState:
    radius = cfg.agent_radius * state.scale
    agent = state.agent_pos[:2]
    pos, yaw = state.block_pos.copy(), state.block_yaw
    L2 = gyration_sq(state, cfg)
    for _ in range(iters):
        cur = replace(state, block_pos=pos, block_yaw=yaw)
        q, d = signed_distance(agent, cur, cfg)
        pen = radius - d
        if pen <= 1e-10:
            break
        gap = q - agent
        g = np.linalg.norm(gap)
        if g > 1e-12:
            n = gap / g if d >= 0 else -gap / g
        else:
            n = push_dir
        r = q - pos[:2]
        cr = r[0] * n[1] - r[1] * n[0]
        alpha = pen / (1.0 + cfg.push_gain * cr * cr / L2)
        pos = pos + np.array([alpha * n[0], alpha * n[1], 0.0])
        yaw = yaw + cfg.push_gain * alpha * cr / L2
    return replace(state, block_pos=pos, block_yaw=yaw)


def step(state: PushTState, target, cfg: PushTConfig = PushTConfig()):
    """Move the agent toward an absolute position target; returns (state', done)."""
    target = _vec3(target)
    target[2] = 0.0
    delta = target - state.agent_pos
    dist = float(np.linalg.norm(delta))
    vmax = cfg.max_speed * state.scale
    if dist > vmax:
        delta *= vmax / dist
        dist = vmax
    radius = cfg.agent_radius * state.scale
    n_sub = max(1, math.ceil(dist / (0.25 * radius)))
    push_dir = delta[:2] / dist if dist > 0 else np.zeros(2)
    arena_r = cfg.arena_radius * state.scale
    for _ in range(n_sub):
        agent = state.agent_pos + delta / n_sub
        off = agent - state.arena_center
        off_n = float(np.linalg.norm(off))
        if off_n > arena_r:
            agent = state.arena_center + off * (arena_r / off_n)
        state = _resolve_contact(state.with_agent(agent), cfg, push_dir)
    return state, reward(state, cfg) >= cfg.success_reward


# ---------------------------------------------------------------- resets

def load_catalog() -> list:
    text = resources.files(__package__).joinpath("catalog.json").read_text()
    return json.loads(text)["poses"]


def catalog_state(pose: dict, cfg: PushTConfig = PushTConfig()) -> PushTState:
    gx, gy, gyaw = cfg.goal
    return PushTState(block_pos=(pose["block"][0], pose["block"][1]), block_yaw=pose["block"][2],
                      agent_pos=pose["agent"], goal_pos=(gx, gy), goal_yaw=gyaw)


def setup_transform(setup: str, cfg: PushTConfig, rng: Rng):
    """Scene transform about the goal center and body stretch for an OOD setup."""
    if setup not in SETUPS:
        raise ValueError(f"unknown setup tag {setup!r}; expected one of {SETUPS}")
    goal = _vec3(cfg.goal[:2])
    if setup == "Original":
        return Sim3.identity(), np.ones(2)
    yaw = float(rng.spawn("yaw").uniform(low=-math.pi, high=math.pi))
    s = float(rng.spawn("scale").uniform(low=cfg.scale_range[0], high=cfg.scale_range[1]))
    stretch = np.ones(2)
    if setup in ("R+Sn", "R+Sn+P"):
        r = rng.spawn("aspect")
        aspect = float(r.uniform(low=1.0, high=cfg.max_aspect))
        axis = int(r.integers(2))
        stretch[axis] = math.sqrt(aspect)
        stretch[1 - axis] = 1.0 / math.sqrt(aspect)
    center = goal
    if setup == "R+Sn+P":
        margin = cfg.workspace * (1 - cfg.position_fraction) / 2
        xy = rng.spawn("position").uniform(2, low=margin, high=cfg.workspace - margin)
        center = _vec3(xy)
    R = rot_z(yaw)
    return Sim3(R, center - s * R @ goal, s), stretch


def reset(cfg: PushTConfig, setup: str, rng: Rng, n_poses: int | None = None,
          catalog: list | None = None) -> PushTState:
    """Initial state for an evaluation setup.

    The catalog pose is drawn from the first ``n_poses`` entries with the same
    stream for every setup, so one episode seed sees the same underlying pose
    under each setup's scene transform.
    """
    if setup not in SETUPS:
        raise ValueError(f"unknown setup tag {setup!r}; expected one of {SETUPS}")
    catalog = load_catalog() if catalog is None else catalog
    n = len(catalog) if n_poses is None else min(n_poses, len(catalog))
    idx = int(rng.spawn("pose").integers(n))
    base = catalog_state(catalog[idx], cfg)
    T, stretch = setup_transform(setup, cfg, rng.spawn("scene"))
    return replace(base.transformed(T), stretch=stretch)


def generate_catalog(seed: int, n: int, cfg: PushTConfig = PushTConfig()) -> list:
    """Initial poses near the goal: block offset within 110 px and 60 degrees, agent clear of it."""
    rng = Rng(seed)
    gx, gy, gyaw = cfg.goal
    poses = []
    i = 0
    while len(poses) < n:
        r = rng.spawn(i)
        i += 1
        rad = 110.0 * math.sqrt(float(r.uniform()))
        ang = float(r.uniform(low=-math.pi, high=math.pi))
        block = (gx + rad * math.cos(ang), gy + rad * math.sin(ang),
                 gyaw + float(r.uniform(low=-math.pi / 3, high=math.pi / 3)))
        a_rad = float(r.uniform(low=150.0, high=220.0))
        a_ang = float(r.uniform(low=-math.pi, high=math.pi))
        agent = (gx + a_rad * math.cos(a_ang), gy + a_rad * math.sin(a_ang))
        state = PushTState(block[:2], block[2], agent, (gx, gy), gyaw)
        if signed_distance(np.asarray(agent), state, cfg)[1] < 2 * cfg.agent_radius:
            continue
        if reward(state, cfg) > 0.5:
            continue
        poses.append({"block": [round(v, 6) for v in block], "agent": [round(v, 6) for v in agent]})
    return poses


# ---------------------------------------------------------------- observation

@dataclass(frozen=True)
class Frame:
    """One time step's observation: cloud [8, 3] and proprio points [3, 3]."""

    cloud: np.ndarray
    pos: np.ndarray


def observe(state: PushTState, cfg: PushTConfig = PushTConfig()) -> Frame:
    """T corners as the cloud; agent, goal centroid and goal stem tip as proprio points."""
    cloud = np.zeros((8, 3))
    cloud[:, :2] = block_outline(state, cfg)
    tip = _place(body_stem_tip(cfg)[None], state.goal_pos, state.goal_yaw, state.scale,
                 state.stretch)[0]
    pos = np.array([state.agent_pos, state.goal_pos, _vec3(tip)])
    return Frame(cloud, pos)
