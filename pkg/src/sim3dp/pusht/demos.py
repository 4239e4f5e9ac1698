"""Demonstration episodes, their on-disk format, and training windows.

A demo file is line-delimited JSON: one header line (format tag, version,
config hash, horizons, metadata) followed by one line per control step.
Floats are written with Python's shortest round-trip repr, so a load
reproduces every array bit for bit.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..geom import Rng, Sim3, rot_z
from ..policy import Action, Observation
from .env import PushTConfig, PushTState, observe, reward, step
from .expert import scripted_expert

FORMAT = "sim3dp-demo"
VERSION = 1


def config_hash(cfg: PushTConfig) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Demo:
    """One episode. ``states`` has one more entry than the per-step arrays."""

    cloud: np.ndarray    # [L, 8, 3]
    pos: np.ndarray      # [L, 3, 3]
    action: np.ndarray   # [L, 3] absolute agent targets
    states: list
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.action)

    def transformed(self, T: Sim3) -> "Demo":
        return Demo(T.apply(self.cloud), T.apply(self.pos), T.apply(self.action),
                    [s.transformed(T) for s in self.states], dict(self.meta))


def record_demo(state: PushTState, cfg: PushTConfig = PushTConfig(), control_every: int = 1,
                meta: dict | None = None) -> Demo:
    """Roll out the scripted expert and keep every ``control_every``-th step."""
    states, actions = [state], []
    for _ in range(cfg.max_steps):
        a = scripted_expert(state, cfg)
        state, done = step(state, a, cfg)
        actions.append(a)
        states.append(state)
        if done:
            break
    keep = list(range(0, len(actions), control_every))
    frames = [observe(states[i], cfg) for i in keep]
    kept_states = [states[i] for i in keep] + [states[-1]]
    meta = dict(meta or {})
    meta["final_reward"] = reward(states[-1], cfg)
    return Demo(np.array([f.cloud for f in frames]), np.array([f.pos for f in frames]),
                np.array([actions[i] for i in keep]), kept_states, meta)


def save_demo(demo: Demo, path, cfg: PushTConfig, obs_horizon: int, pred_horizon: int) -> None:
    header = {"format": FORMAT, "version": VERSION, "config_hash": config_hash(cfg),
              "obs_horizon": obs_horizon, "pred_horizon": pred_horizon, "length": len(demo),
              "meta": demo.meta}
    lines = [json.dumps(header, sort_keys=True)]
    for t in range(len(demo)):
        lines.append(json.dumps({"t": t, "cloud": demo.cloud[t].tolist(), "pos": demo.pos[t].tolist(),
                                 "action": demo.action[t].tolist(),
                                 "state": demo.states[t].to_dict()}, sort_keys=True))
    lines.append(json.dumps({"final_state": demo.states[-1].to_dict()}, sort_keys=True))
    Path(path).write_text("\n".join(lines) + "\n")


def load_demo(path, cfg: PushTConfig | None = None, obs_horizon: int | None = None,
              pred_horizon: int | None = None) -> Demo:
    """Read a demo file; optional arguments are checked against its header."""
    lines = Path(path).read_text().splitlines()
    header = json.loads(lines[0])
    if header.get("format") != FORMAT or header.get("version") != VERSION:
        raise ValueError(f"{path}: not a version-{VERSION} {FORMAT} file")
    if cfg is not None and header["config_hash"] != config_hash(cfg):
        raise ValueError(f"{path}: demo was recorded with a different task config")
    for name, want in (("obs_horizon", obs_horizon), ("pred_horizon", pred_horizon)):
        if want is not None and header[name] != want:
            raise ValueError(f"{path}: {name} {header[name]} does not match config {want}")
    rows = [json.loads(x) for x in lines[1:1 + header["length"]]]
    final = json.loads(lines[1 + header["length"]])["final_state"]
    return Demo(np.array([r["cloud"] for r in rows]).reshape(-1, 8, 3),
                np.array([r["pos"] for r in rows]).reshape(len(rows), -1, 3),
                np.array([r["action"] for r in rows]).reshape(-1, 3),
                [PushTState.from_dict(r["state"]) for r in rows] + [PushTState.from_dict(final)],
                header["meta"])


# ---------------------------------------------------------------- augmentation

def draw_augmentation(rng: Rng, cfg: PushTConfig = PushTConfig(), scale_range=(0.5, 1.5),
                      offset_frac: float = 0.1) -> Sim3:
    """z-rotation about the workspace center, uniform scale, Gaussian in-plane offset."""
    yaw = float(rng.spawn("yaw").uniform(low=0.0, high=2 * math.pi))
    s = float(rng.spawn("scale").uniform(low=scale_range[0], high=scale_range[1]))
    offset = np.zeros(3)
    offset[:2] = rng.spawn("offset").normal(2, scale=offset_frac * cfg.workspace)
    center = np.array([cfg.workspace / 2, cfg.workspace / 2, 0.0])
    R = rot_z(yaw)
    return Sim3(R, center + offset - s * R @ center, s)


def augment(demo: Demo, rng: Rng, cfg: PushTConfig = PushTConfig()) -> Demo:
    """Apply one random similarity consistently to the whole episode."""
    return demo.transformed(draw_augmentation(rng, cfg))


# ---------------------------------------------------------------- training windows

def windows(demo: Demo, obs_horizon: int, pred_horizon: int):
    """Every (observation window, action chunk) pair of an episode.

    The observation at step t stacks frames t-To+1..t and the chunk holds the
    actions t..t+Tp-1; both are padded by repeating the edge entries.
    """
    L = len(demo)
    t = np.arange(L)
    oi = np.clip(t[:, None] + np.arange(-obs_horizon + 1, 1)[None], 0, L - 1)
    ai = np.clip(t[:, None] + np.arange(pred_horizon)[None], 0, L - 1)
    obs = Observation(demo.cloud[oi], demo.pos[oi], np.zeros((L, obs_horizon, 0, 3)),
                      np.zeros((L, obs_horizon, 0)))
    act = Action(demo.action[ai][:, :, None, :], np.zeros((L, pred_horizon, 0, 3)),
                 np.zeros((L, pred_horizon, 0)))
    return obs, act


def dataset_windows(demos: list, obs_horizon: int, pred_horizon: int):
    parts = [windows(d, obs_horizon, pred_horizon) for d in demos]
    obs = Observation.stack([p[0] for p in parts])
    act = Action(*(np.concatenate([getattr(p[1], f) for p in parts]) for f in ("v", "d", "s")))
    return obs, act


def generate_demos(n: int, cfg: PushTConfig = PushTConfig(), catalog: list | None = None,
                   control_every: int = 1) -> list:
    """Expert episodes from the first n catalog poses."""
    from .env import catalog_state, load_catalog
    catalog = load_catalog() if catalog is None else catalog
    if n > len(catalog):
        raise ValueError(f"requested {n} demos but the catalog holds {len(catalog)} poses")
    return [record_demo(catalog_state(catalog[i], cfg), cfg, control_every,
                        {"catalog_index": i, "setup": "Original"}) for i in range(n)]
