"""Scripted Push-T demonstrator.

Stateless two-phase controller. Every call scores candidate contacts on the
T outline by how fast a push there reduces the weighted pose error (using the
same quasi-static contact model as the simulator), discounted by how far the
agent must travel to get behind that contact. If the agent already sits on the
chosen approach ray it pushes; otherwise it navigates around the block to the
approach point.
"""
from __future__ import annotations

import math

import numpy as np

from .env import (PushTConfig, PushTState, block_outline, gyration_sq, reward,
                  _world_rects)

SAMPLES_PER_EDGE = (0.15, 0.35, 0.5, 0.65, 0.85)
MARGIN = 4.0          # approach standoff beyond contact, in nominal pixels
TRAVEL_SCALE = 120.0  # travel distance that halves a candidate's score, nominal pixels


def _wrap(a):
    return (a + np.pi) % (2 * np.pi) - np.pi


def _candidates(state: PushTState, cfg: PushTConfig):
    """World contact points [M, 2] and outward unit normals [M, 2]."""
    outline = block_outline(state, cfg)
    nxt = np.roll(outline, -1, axis=0)
    pts, normals = [], []
    for a, b in zip(outline, nxt):
        e = b - a
        n = np.array([e[1], -e[0]]) / np.linalg.norm(e)  # outline is CCW, so this points out
        for f in SAMPLES_PER_EDGE:
            pts.append(a + f * e)
            normals.append(n)
    return np.array(pts), np.array(normals)


def signed_distances(P: np.ndarray, state: PushTState, cfg: PushTConfig) -> np.ndarray:
    """Signed distance of many planar points [K, 2] to the block (negative inside)."""
    a = block_outline(state, cfg)
    ab = np.roll(a, -1, axis=0) - a
    w = P[:, None, :] - a[None]
    u = np.clip(np.einsum("kij,ij->ki", w, ab) / np.einsum("ij,ij->i", ab, ab), 0.0, 1.0)
    d = np.linalg.norm(w - u[..., None] * ab[None], axis=-1).min(axis=1)
    inside = np.zeros(len(P), dtype=bool)
    for rect in _world_rects(state.block_pos, state.block_yaw, state, cfg):
        e = np.roll(rect, -1, axis=0) - rect
        wr = P[:, None, :] - rect[None]
        inside |= np.all(e[None, :, 0] * wr[..., 1] - e[None, :, 1] * wr[..., 0] >= 0, axis=1)
    return np.where(inside, -d, d)


def _segment_clear(p0, p1, state, cfg, clearance) -> np.ndarray:
    """Whether segments p0[i] -> p1[i] keep ``clearance`` from the block."""
    p0 = np.broadcast_to(p0, p1.shape)
    length = np.linalg.norm(p1 - p0, axis=-1).max()
    n = max(2, int(math.ceil(length / 3.0)) + 1)
    t = np.linspace(0.0, 1.0, n)
    P = p0[:, None, :] + t[None, :, None] * (p1 - p0)[:, None, :]
    sd = signed_distances(P.reshape(-1, 2), state, cfg).reshape(len(p1), n)
    return np.all(sd >= clearance, axis=1)


def _ray_to_circle(a, n, C, Rc):
    """Point where the ray a + t n (t >= 0) leaves the circle |x - C| = Rc."""
    f = a - C
    b = np.einsum("ij,ij->i", f, n)
    c = np.einsum("ij,ij->i", f, f) - Rc * Rc
    t = -b + np.sqrt(np.maximum(b * b - c, 0.0))
    return a + np.maximum(t, 0.0)[:, None] * n


def scripted_expert(state: PushTState, cfg: PushTConfig = PushTConfig()) -> np.ndarray:
    """Absolute agent position target [3] for the current state."""
    agent = state.agent_pos[:2]
    hold = state.agent_pos.copy()
    if reward(state, cfg) >= cfg.success_reward:
        return hold

    s = state.scale
    radius = cfg.agent_radius * s
    vmax = cfg.max_speed * s
    L2 = gyration_sq(state, cfg)
    weight = math.sqrt(L2)
    err = np.array([*(state.block_pos[:2] - state.goal_pos[:2]),
                    weight * _wrap(state.block_yaw - state.goal_yaw)])
    err_norm = float(np.linalg.norm(err))
    if err_norm < 1e-3 * s:
        return hold

    c, n_out = _candidates(state, cfg)
    u = -n_out
    r = c - state.block_pos[:2]
    cr = r[:, 0] * u[:, 1] - r[:, 1] * u[:, 0]
    den = 1.0 + cfg.push_gain * cr * cr / L2
    # block motion per unit push, in weighted (x, y, L * yaw) coordinates
    motion = np.column_stack([u / den[:, None], weight * cfg.push_gain * cr / (L2 * den)])
    rate = -(motion @ err) / err_norm
    approach = c + n_out * (radius + MARGIN * s)
    valid = (rate > 1e-6) & (signed_distances(approach, state, cfg) >= radius * 0.999)
    if not np.any(valid):
        return hold

    C = state.block_pos[:2]
    Rc = float(np.linalg.norm(block_outline(state, cfg) - C, axis=1).max()) + radius + 2 * MARGIN * s
    waypoint = _ray_to_circle(approach, n_out, C, Rc)
    direct = _segment_clear(agent, approach, state, cfg, radius * 0.99)
    ang = lambda p: np.arctan2(p[..., 1] - C[1], p[..., 0] - C[0])
    arc = Rc * np.abs(_wrap(ang(waypoint) - ang(agent)))
    travel = np.where(direct, np.linalg.norm(approach - agent, axis=1),
                      np.linalg.norm(waypoint - agent, axis=1) + arc
                      + np.linalg.norm(approach - waypoint, axis=1))
    score = np.where(valid, rate / (1.0 + travel / (TRAVEL_SCALE * s)), -np.inf)
    i = int(np.argmax(score))

    # pushing phase: agent on the approach ray, between contact and standoff
    rel = agent - c[i]
    along = float(rel @ n_out[i])
    lateral = abs(float(rel[0] * n_out[i][1] - rel[1] * n_out[i][0]))
    if lateral < 1.0 * s and radius - 1.0 * s <= along <= radius + (MARGIN + 3.0) * s:
        m = motion[i]
        depth = float(-(m @ err) / (m @ m))
        depth = min(max(depth, 0.0), vmax)
        tgt = c[i] + n_out[i] * (radius - depth)
        return np.array([tgt[0], tgt[1], 0.0])

    # navigation phase
    if direct[i]:
        tgt = approach[i]
    elif _segment_clear(agent, waypoint[i:i + 1], state, cfg, radius * 0.99)[0]:
        tgt = waypoint[i]
    else:
        a0 = float(ang(agent))
        dtheta = float(_wrap(ang(waypoint[i]) - a0))
        a1 = a0 + math.copysign(min(abs(dtheta), vmax / Rc), dtheta)
        tgt = C + Rc * np.array([math.cos(a1), math.sin(a1)])
        if not _segment_clear(agent, tgt[None], state, cfg, radius * 0.99)[0]:
            away = signed_distances(agent[None], state, cfg)
            q = _closest(agent, state, cfg)
            d = agent - q
            dn = np.linalg.norm(d)
            d = d / dn if dn > 1e-9 else (agent - C) / max(np.linalg.norm(agent - C), 1e-9)
            if away[0] < 0:
                d = -d
            tgt = agent + d * vmax
    return np.array([tgt[0], tgt[1], 0.0])


def _closest(p, state, cfg):
    from .env import closest_on_outline
    return closest_on_outline(p, block_outline(state, cfg))[0]


def rollout_expert(state: PushTState, cfg: PushTConfig = PushTConfig(), max_steps: int | None = None):
    """Run the expert until success or the step limit; returns (states, actions)."""
    from .env import step
    max_steps = cfg.max_steps if max_steps is None else max_steps
    states, actions = [state], []
    for _ in range(max_steps):
        a = scripted_expert(state, cfg)
        state, done = step(state, a, cfg)
        actions.append(a)
        states.append(state)
        if done:
            break
    return states, actions
