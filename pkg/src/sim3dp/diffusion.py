"""DDPM training objective and DDPM / DDIM samplers around a noise network.

All diffusion arithmetic happens in the network's diffusion coordinates
(see ``policy.DiffusionFrame``); the samplers only touch task coordinates
when assembling the final action.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .geom import Rng
from .encoder import canonicalize
from .policy import Action, ActionLayout, Observation, _minmax

MAX_BETA = 0.999
COSINE_OFFSET = 0.008
X0_RADIUS_MARGIN = 1.25  # clamp radius relative to the largest canonical action seen in training


@dataclass(frozen=True)
class NoiseSchedule:
    """Tables indexed by step k = 1..K (stored at k - 1)."""

    K: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def ab(self, k) -> np.ndarray:
        """alpha_bar at k, with alpha_bar(0) = 1."""
        k = np.asarray(k)
        return np.where(k > 0, self.alpha_bar[np.maximum(k, 1) - 1], 1.0)


def _cos_alpha_bar(t: float) -> float:
    return math.cos((t + COSINE_OFFSET) / (1 + COSINE_OFFSET) * math.pi / 2) ** 2


def make_schedule(K: int = 100, kind: str = "squared-cosine") -> NoiseSchedule:
    if K < 1:
        raise ValueError("K must be >= 1")
    if kind != "squared-cosine":
        raise ValueError(f"unknown schedule {kind!r}")
    beta = np.array([min(1 - _cos_alpha_bar((i + 1) / K) / _cos_alpha_bar(i / K), MAX_BETA)
                     for i in range(K)])
    alpha = 1.0 - beta
    return NoiseSchedule(K, beta, alpha, np.cumprod(alpha))


def forward_noise(a0, k: int, eps, schedule: NoiseSchedule):
    ab = schedule.alpha_bar[k - 1]
    return math.sqrt(ab) * np.asarray(a0) + math.sqrt(1 - ab) * np.asarray(eps)


def invert_forward_noise(ak, k: int, eps, schedule: NoiseSchedule):
    ab = schedule.alpha_bar[k - 1]
    return (np.asarray(ak) - math.sqrt(1 - ab) * np.asarray(eps)) / math.sqrt(ab)


# ---------------------------------------------------------------- normalizer

@dataclass
class Normalizer:
    s_pc: float
    s_ac: float
    obs_scalar_lo: list | None = None
    obs_scalar_hi: list | None = None
    act_scalar_lo: list | None = None
    act_scalar_hi: list | None = None
    pos_lo: list | None = None   # per-axis position range, used by the plain baseline
    pos_hi: list | None = None
    x0_radius: list | None = None  # per action channel bound on canonical x0 predictions

    def __post_init__(self):
        if not (self.s_pc > 0 and self.s_ac > 0):
            raise ValueError("normalizer scales must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(**d)

    def normalize_obs(self, obs: Observation) -> Observation:
        sc = obs.scalars
        if self.obs_scalar_lo is not None and sc.shape[-1]:
            sc = _minmax(sc, np.asarray(self.obs_scalar_lo), np.asarray(self.obs_scalar_hi))
        return Observation(obs.cloud / self.s_pc, obs.pos / self.s_pc, obs.dirs, sc)

    def denormalize_obs(self, obs: Observation) -> Observation:
        sc = obs.scalars
        if self.obs_scalar_lo is not None and sc.shape[-1]:
            sc = _unminmax(sc, np.asarray(self.obs_scalar_lo), np.asarray(self.obs_scalar_hi))
        return Observation(obs.cloud * self.s_pc, obs.pos * self.s_pc, obs.dirs, sc)

    def normalize_action(self, A: Action, layout: ActionLayout) -> Action:
        v = A.v.copy()
        for i, kind in enumerate(layout.vector_kinds):
            v[:, :, i] /= self.s_pc if kind == "point" else self.s_ac
        s = A.s
        if self.act_scalar_lo is not None and s.shape[-1]:
            s = _minmax(s, np.asarray(self.act_scalar_lo), np.asarray(self.act_scalar_hi))
        return Action(v, A.d.copy(), s)

    def denormalize_action(self, A: Action, layout: ActionLayout) -> Action:
        v = A.v.copy()
        for i, kind in enumerate(layout.vector_kinds):
            v[:, :, i] *= self.s_pc if kind == "point" else self.s_ac
        s = A.s
        if self.act_scalar_lo is not None and s.shape[-1]:
            s = _unminmax(s, np.asarray(self.act_scalar_lo), np.asarray(self.act_scalar_hi))
        return Action(v, A.d.copy(), s)


def _unminmax(x, lo, hi):
    r = hi - lo
    ok = r > 1e-12
    return np.where(ok, (x + 1.0) / 2.0 * np.where(ok, r, 1.0) + lo, x)


def fit_normalizer(obs: Observation, act: Action, layout: ActionLayout) -> Normalizer:
    """Dataset statistics from stacked frames.

    s_pc is the mean per-frame cloud scale (mean distance to centroid), s_ac
    the mean norm of the action v-entries. Scalars get per-channel min/max.
    """
    if obs.batch_size == 0 or act.v.shape[0] == 0:
        raise ValueError("cannot fit a normalizer on an empty dataset")
    clouds = obs.cloud.reshape(-1, obs.cloud.shape[-2], 3)
    c = clouds.mean(axis=1, keepdims=True)
    s_pc = float(np.linalg.norm(clouds - c, axis=-1).mean(axis=1).mean())
    s_ac = float(np.linalg.norm(act.v, axis=-1).mean()) if act.v.size else 1.0
    pts = [clouds.reshape(-1, 3), obs.pos.reshape(-1, 3)]
    pts += [act.v[:, :, i].reshape(-1, 3) for i, k in enumerate(layout.vector_kinds) if k == "point"]
    pts = np.concatenate(pts)

    def mm(x):
        if not x.shape[-1]:
            return None, None
        x = x.reshape(-1, x.shape[-1])
        return x.min(0).tolist(), x.max(0).tolist()

    olo, ohi = mm(obs.scalars)
    alo, ahi = mm(act.s)
    s_ac = s_ac if s_ac > 0 else 1.0
    return Normalizer(s_pc, s_ac, olo, ohi, alo, ahi, pts.min(0).tolist(), pts.max(0).tolist(),
                      _x0_radius(obs, act, layout, s_pc, s_ac))


def _x0_radius(obs: Observation, act: Action, layout: ActionLayout, s_pc: float, s_ac: float) -> list:
    """Largest norm of each action channel in the canonical frame of its
    window's newest cloud, times a margin. Directions are unit vectors."""
    _, c, s = canonicalize(obs.cloud[:, -1])
    radius = []
    for i, kind in enumerate(layout.vector_kinds):
        v = act.v[:, :, i]
        if kind == "point":
            r = np.linalg.norm(v - c[:, None], axis=-1) / s[:, None]
        else:
            r = np.linalg.norm(v, axis=-1) * s_pc / (s_ac * s[:, None])
        radius.append(X0_RADIUS_MARGIN * float(r.max()))
    return radius + [X0_RADIUS_MARGIN] * layout.n_dir


# ------------------------------------------------------------- noise model

def predict_noise(net, obs: Observation, A_noisy: Action, k) -> Action:
    """Noise estimate in task units. Point-kind channels carry displacements:
    they rotate and scale with the scene but never translate."""
    ctx, frame = net.context(obs)
    xv, xs = frame.to_diffusion(A_noisy)
    ev, es = net.denoise(ctx, xv, xs, k)
    return frame.noise_to_task(ev.data, es.data)


@dataclass
class NoiseStream:
    """Explicit Gaussian draws for one sampling chain, in diffusion coordinates."""

    init_v: np.ndarray
    init_s: np.ndarray
    step_v: list
    step_s: list

    @classmethod
    def draw(cls, rngs: list, shape_v, shape_s, n_steps: int) -> "NoiseStream":
        """One independent stream per batch element (``rngs[b]``)."""
        per = []
        for r in rngs:
            per.append([(r.normal(shape_v), r.normal(shape_s)) for _ in range(n_steps + 1)])
        v = [np.stack([p[i][0] for p in per]) for i in range(n_steps + 1)]
        s = [np.stack([p[i][1] for p in per]) for i in range(n_steps + 1)]
        return cls(v[0], s[0], v[1:], s[1:])

    def rotated(self, R) -> "NoiseStream":
        """Rotate every vector draw; R is [3, 3] or per-sample [B, 3, 3]."""
        R = np.asarray(R)
        spec = "ij,btjc->btic" if R.ndim == 2 else "bij,btjc->btic"

        def rot(z):
            return np.einsum(spec, R, z)

        return NoiseStream(rot(self.init_v), self.init_s.copy(), [rot(z) for z in self.step_v],
                           [z.copy() for z in self.step_s])


def _predicted_x0(net, x, e, ab, clip):
    xv, xs = ((xi - math.sqrt(1 - ab) * ei) / math.sqrt(ab) for xi, ei in zip(x, e))
    return net.clip_x0(xv, xs) if clip else (xv, xs)


def ddpm_step(net, ctx, xv, xs, k: int, schedule: NoiseSchedule, noise=None, clip: bool = False):
    """x_{k-1} = (x_k - gamma * eps_hat) / sqrt(alpha_k) + sigma_k z; z omitted at k = 1.

    With ``clip`` the mean is formed from the clamped x0 prediction instead
    (identical when the clamp is inactive).
    """
    ev, es = net.denoise(ctx, xv, xs, k)
    a, ab, b = schedule.alpha[k - 1], schedule.alpha_bar[k - 1], schedule.beta[k - 1]
    if clip:
        abp = float(schedule.ab(k - 1))
        x0v, x0s = _predicted_x0(net, (xv, xs), (ev.data, es.data), ab, True)
        c0, ct = math.sqrt(abp) * b / (1 - ab), math.sqrt(a) * (1 - abp) / (1 - ab)
        xv, xs = c0 * x0v + ct * xv, c0 * x0s + ct * xs
    else:
        gamma = b / math.sqrt(1 - ab)
        xv = (xv - gamma * ev.data) / math.sqrt(a)
        xs = (xs - gamma * es.data) / math.sqrt(a)
    if k > 1:
        zv, zs = noise
        xv = xv + math.sqrt(b) * zv
        xs = xs + math.sqrt(b) * zs
    return xv, xs


def ddim_timesteps(K: int, steps: int) -> tuple:
    """Evenly strided k values, largest first; each step jumps to k - K // steps."""
    ratio = K // steps
    return [1 + i * ratio for i in reversed(range(steps))], ratio


def ddim_step(net, ctx, xv, xs, k: int, k_prev: int, schedule: NoiseSchedule, clip: bool = False):
    """Deterministic (eta = 0) DDIM update from k to k_prev."""
    ev, es = net.denoise(ctx, xv, xs, k)
    ab, abp = schedule.alpha_bar[k - 1], float(schedule.ab(k_prev))
    x0 = _predicted_x0(net, (xv, xs), (ev.data, es.data), ab, clip)
    return tuple(math.sqrt(abp) * x + math.sqrt(1 - abp) * e for x, e in zip(x0, (ev.data, es.data)))


def diffusion_shapes(net):
    cfg = net.cfg
    la = cfg.action_layout
    return (cfg.pred_horizon, 3, la.n_channels), (cfg.pred_horizon, la.n_scalar)


def make_noise(net, schedule: NoiseSchedule, rngs: list, sampler: str) -> NoiseStream:
    sv, ss = diffusion_shapes(net)
    n = schedule.K - 1 if sampler == "ddpm" else 0
    return NoiseStream.draw(rngs, sv, ss, n)


def sample(net, obs: Observation, schedule: NoiseSchedule, sampler: str = "ddim", steps: int = 8,
           rng: Rng | None = None, noise: NoiseStream | None = None, return_diffusion: bool = False,
           clip: bool = True):
    """Draw A^0 for every observation in the batch, returned in task coordinates.

    Either pass ``noise`` explicitly or an ``rng``; with an rng, sample b uses
    the child stream ``rng.spawn(b)`` so results do not depend on batch size.
    ``clip`` bounds every x0 prediction with the network's ``clip_x0``: near
    k = K the prediction divides by sqrt(alpha_bar) ~ 5e-4, so without it any
    error in the noise estimate is amplified enough to derail the chain.
    """
    if sampler not in ("ddpm", "ddim"):
        raise ValueError(f"unknown sampler {sampler!r}")
    B = obs.batch_size
    if noise is None:
        if rng is None:
            raise ValueError("sample needs an rng or an explicit noise stream")
        noise = make_noise(net, schedule, [rng.spawn(b) for b in range(B)], sampler)
    ctx, frame = net.context(obs)
    xv, xs = noise.init_v.copy(), noise.init_s.copy()
    if sampler == "ddpm":
        for i, k in enumerate(range(schedule.K, 0, -1)):
            z = (noise.step_v[i], noise.step_s[i]) if k > 1 else None
            xv, xs = ddpm_step(net, ctx, xv, xs, k, schedule, z, clip)
    else:
        ks, ratio = ddim_timesteps(schedule.K, steps)
        for k in ks:
            xv, xs = ddim_step(net, ctx, xv, xs, k, k - ratio, schedule, clip)
    A = frame.to_task(xv, xs)
    return (A, (xv, xs)) if return_diffusion else A


def training_loss(net, obs: Observation, A0: Action, schedule: NoiseSchedule, rng: Rng):
    """Noise-regression MSE at uniformly drawn k, in diffusion coordinates."""
    ctx, frame = net.context(obs)
    xv0, xs0 = frame.to_diffusion(A0)
    B = xv0.shape[0]
    k = 1 + rng.integers(schedule.K, B)
    ev, es = rng.normal(xv0.shape), rng.normal(xs0.shape)
    ab = schedule.alpha_bar[k - 1]
    sa, sb = np.sqrt(ab), np.sqrt(1 - ab)
    xvk = sa[:, None, None, None] * xv0 + sb[:, None, None, None] * ev
    xsk = sa[:, None, None] * xs0 + sb[:, None, None] * es
    pv, ps = net.denoise(ctx, xvk, xsk, k)
    dv = ad.sub(pv, ev)
    total = ad.sum(ad.mul(dv, dv), tuple(range(dv.ndim)))
    n = ev.size
    if es.size:
        ds = ad.sub(ps, es)
        total = ad.add(total, ad.sum(ad.mul(ds, ds), tuple(range(ds.ndim))))
        n += es.size
    return ad.scale(total, 1.0 / n)
