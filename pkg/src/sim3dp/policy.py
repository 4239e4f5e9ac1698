"""Noise-prediction networks and the observation/action data model.

Both variants expose the same surface to the diffusion code:

* ``net.context(obs)`` -> (ctx, frame): everything that does not depend on
  the noisy action, plus the per-sample ``DiffusionFrame``.
* ``net.denoise(ctx, xv, xs, k)`` -> (eps_v, eps_s) in diffusion coordinates.

Diffusion coordinates hold the action sequence as ``xv [B, Tp, 3, nv + nd]``
(channels last) and ``xs [B, Tp, ns]``. For the equivariant network they are
the canonical coordinates of the newest observation frame, so rotating the
scene rotates ``xv`` and leaves ``xs`` alone; translation and scale drop out.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Module, Parameter, Tensor
from .encoder import Encoder, EncoderConfig, EncoderLatent
from .geom import Rng, Sim3
from .vn import (FFuse, GeomFeature, VecConv1d, VecFiLM, VecLinear, VNNonlin, init_weight,
                 invariants_from_vectors, num_invariants, vec_layer_norm)

POS_EMB_DIM = 64


# ---------------------------------------------------------------- data model

@dataclass(frozen=True)
class ActionLayout:
    vector_kinds: tuple = ("point",)   # one of 'point' | 'vector' per v-entry
    n_dir: int = 0
    n_scalar: int = 0

    def __post_init__(self):
        object.__setattr__(self, "vector_kinds", tuple(self.vector_kinds))
        for k in self.vector_kinds:
            if k not in ("point", "vector"):
                raise ValueError(f"action v-entry kind must be point or vector, got {k!r}")

    @property
    def n_vec(self) -> int:
        return len(self.vector_kinds)

    @property
    def n_channels(self) -> int:
        return self.n_vec + self.n_dir

    @property
    def flat_dim(self) -> int:
        return 3 * self.n_channels + self.n_scalar


@dataclass(frozen=True)
class ObsLayout:
    n_points: int = 8
    n_pos: int = 3
    n_dir: int = 0
    n_scalar: int = 0


def _lead(x, B, T, trail):
    """View ``x`` as [B, T, -1, *trail]; arrays already in that layout pass through."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3 + len(trail) and x.shape[:2] == (B, T):
        return x
    return x.reshape(B, T, -1, *trail)


@dataclass
class Observation:
    """Batched observation window: cloud [B, To, N, 3], pos [B, To, nx, 3],
    dirs [B, To, nd, 3], scalars [B, To, ns]."""

    cloud: np.ndarray
    pos: np.ndarray
    dirs: np.ndarray
    scalars: np.ndarray

    def __post_init__(self):
        self.cloud = np.asarray(self.cloud, dtype=np.float64)
        B, To = self.cloud.shape[:2]
        self.pos = _lead(self.pos, B, To, (3,))
        self.dirs = _lead(self.dirs, B, To, (3,))
        self.scalars = _lead(self.scalars, B, To, ())
        if np.any(np.abs(np.linalg.norm(self.dirs, axis=-1) - 1.0) > 1e-6):
            raise ValueError("direction not normalized")

    @property
    def batch_size(self) -> int:
        return self.cloud.shape[0]

    @property
    def horizon(self) -> int:
        return self.cloud.shape[1]

    def transform(self, T: Sim3) -> "Observation":
        return Observation(T.apply(self.cloud), T.apply(self.pos), T.apply(self.dirs, "direction"),
                           self.scalars.copy())

    def take(self, idx) -> "Observation":
        return Observation(self.cloud[idx], self.pos[idx], self.dirs[idx], self.scalars[idx])

    @staticmethod
    def stack(obs: list) -> "Observation":
        return Observation(*(np.concatenate([getattr(o, f) for o in obs]) for f in
                             ("cloud", "pos", "dirs", "scalars")))


@dataclass
class Action:
    """Batched action sequence: v [B, Tp, nv, 3], d [B, Tp, nd, 3], s [B, Tp, ns]."""

    v: np.ndarray
    d: np.ndarray
    s: np.ndarray

    def __post_init__(self):
        self.v = np.asarray(self.v, dtype=np.float64)
        B, Tp = self.v.shape[:2]
        self.d = _lead(self.d, B, Tp, (3,))
        self.s = _lead(self.s, B, Tp, ())

    def transform(self, T: Sim3, layout: ActionLayout, displacement: bool = False) -> "Action":
        """Apply T entry-wise by kind; ``displacement`` drops translation (noise)."""
        v = self.v.copy()
        for i, kind in enumerate(layout.vector_kinds):
            k = "vector" if displacement else kind
            v[:, :, i] = T.apply(self.v[:, :, i], k)
        return Action(v, T.apply(self.d, "direction"), self.s.copy())

    def flat(self) -> np.ndarray:
        B, Tp = self.v.shape[:2]
        return np.concatenate([self.v.reshape(B, Tp, -1), self.d.reshape(B, Tp, -1), self.s], axis=-1)


@dataclass
class PolicyConfig:
    obs_horizon: int = 2
    pred_horizon: int = 16
    action_horizon: int = 8
    down_dims: tuple = (32, 64)
    kernel_size: int = 3
    cond_vectors: int = 16
    cond_hidden: int = 64
    gram_cap: int = 8
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    action_layout: ActionLayout = field(default_factory=ActionLayout)
    obs_layout: ObsLayout = field(default_factory=ObsLayout)

    def __post_init__(self):
        if self.action_horizon > self.pred_horizon:
            raise ValueError("action horizon must not exceed prediction horizon")
        self.down_dims = tuple(self.down_dims)
        if self.pred_horizon % (2 ** len(self.down_dims)):
            raise ValueError("prediction horizon must be divisible by 2**len(down_dims)")
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        if isinstance(self.action_layout, dict):
            self.action_layout = ActionLayout(**self.action_layout)
        if isinstance(self.obs_layout, dict):
            self.obs_layout = ObsLayout(**self.obs_layout)


@dataclass
class DiffusionFrame:
    """Per-sample affine map from diffusion coordinates to task coordinates.

    task_v = offset_v + scale_v * xv for every (time, component, channel);
    task_s = offset_s + scale_s * xs. Noise maps without the offset.
    """

    offset_v: np.ndarray  # [B, 1, 3, nc]
    scale_v: np.ndarray   # [B, 1, 3, nc]
    offset_s: np.ndarray  # [B, 1, ns]
    scale_s: np.ndarray   # [B, 1, ns]
    n_vec: int

    def to_task(self, xv, xs, renormalize: bool = True) -> Action:
        v = self.offset_v + self.scale_v * xv
        s = self.offset_s + self.scale_s * xs
        v = np.swapaxes(v, -1, -2)  # [B, Tp, nc, 3]
        dirs = v[:, :, self.n_vec:]
        if renormalize and dirs.shape[2]:
            dirs = dirs / np.maximum(np.linalg.norm(dirs, axis=-1, keepdims=True), 1e-12)
        return Action(v[:, :, :self.n_vec], dirs, s)

    def to_diffusion(self, A: Action):
        v = np.swapaxes(np.concatenate([A.v, A.d], axis=2), -1, -2)
        return (v - self.offset_v) / self.scale_v, (A.s - self.offset_s) / self.scale_s

    def noise_to_task(self, ev, es) -> Action:
        v = np.swapaxes(self.scale_v * ev, -1, -2)
        return Action(v[:, :, :self.n_vec], v[:, :, self.n_vec:], self.scale_s * es)

    def noise_to_diffusion(self, E: Action):
        v = np.swapaxes(np.concatenate([E.v, E.d], axis=2), -1, -2)
        return v / self.scale_v, E.s / self.scale_s


def pos_emb(k) -> Tensor:
    """64-dim sinusoidal embedding of the diffusion step; k scalar or [B]."""
    return ad.sinusoid(np.atleast_1d(np.asarray(k, dtype=np.float64)), POS_EMB_DIM)


def _minmax(x, lo, hi):
    rng = hi - lo
    ok = rng > 1e-12
    return np.where(ok, 2.0 * (x - lo) / np.where(ok, rng, 1.0) - 1.0, x)


def _scalar_frame(normalizer, layout: ActionLayout, B: int):
    ns = layout.n_scalar
    if ns and normalizer is not None and normalizer.act_scalar_lo is not None:
        lo, hi = np.asarray(normalizer.act_scalar_lo), np.asarray(normalizer.act_scalar_hi)
        r = hi - lo
        ok = r > 1e-12
        scale = np.where(ok, r / 2.0, 1.0)
        offset = np.where(ok, (hi + lo) / 2.0, 0.0)
    else:
        scale, offset = np.ones(ns), np.zeros(ns)
    return np.broadcast_to(offset, (B, 1, ns)).copy(), np.broadcast_to(scale, (B, 1, ns)).copy()


# ------------------------------------------------------------- shared U-net

class PlainFiLM(Module):
    def __init__(self, c: int, n_cond: int):
        self.gain = Parameter(np.zeros((c, n_cond)))
        self.bias = Parameter(np.zeros((c, n_cond)))

    def __call__(self, x: Tensor, h: Tensor) -> Tensor:
        B, T, R, C = x.shape
        g = ad.expand(ad.expand(ad.add_const(ad.linear(h, self.gain), 1.0), 1, T), 2, R)
        b = ad.expand(ad.expand(ad.linear(h, self.bias), 1, T), 2, R)
        return ad.add(ad.mul(g, x), b)


class ResBlock(Module):
    """conv -> norm -> nonlin -> FiLM -> conv -> norm -> nonlin, plus residual."""

    def __init__(self, cin: int, cout: int, k: int, n_cond_scalars: int, n_cond_vectors: int,
                 rng: Rng, equivariant: bool):
        self.equivariant = equivariant
        self.conv1 = VecConv1d(cin, cout, k, rng.spawn("c1"))
        self.conv2 = VecConv1d(cout, cout, k, rng.spawn("c2"))
        if equivariant:
            self.act1 = VNNonlin(cout, rng.spawn("a1"))
            self.act2 = VNNonlin(cout, rng.spawn("a2"))
            self.film = VecFiLM(cout, 0, n_cond_scalars, n_cond_vectors)
        else:
            self.film = PlainFiLM(cout, n_cond_scalars)
        self.res = VecLinear(cin, cout, rng.spawn("res")) if cin != cout else None

    def _act(self, x, which):
        if self.equivariant:
            return (self.act1 if which == 1 else self.act2)(x)
        return ad.relu(x)

    def __call__(self, x: Tensor, cond) -> Tensor:
        h = self._act(vec_layer_norm(self.conv1(x)), 1)
        if self.equivariant:
            h = self.film(GeomFeature(h, Tensor(np.zeros(h.shape[:-2] + (0,)))), cond).vectors
        else:
            h = self.film(h, cond)
        h = self._act(vec_layer_norm(self.conv2(h)), 2)
        r = self.res(x) if self.res is not None else x
        return ad.add(h, r)


def upsample_time(x: Tensor) -> Tensor:
    """Nearest-neighbour x2 along time: [B, T, R, C] -> [B, 2T, R, C]."""
    B, T, R, C = x.shape
    return ad.reshape(ad.expand(x, 2, 2), (B, 2 * T, R, C))


class UNet1D(Module):
    """Temporal encoder-decoder; R=3 vector features when equivariant, else R=1."""

    def __init__(self, c_in: int, down_dims, k: int, n_cond_scalars: int, n_cond_vectors: int,
                 rng: Rng, equivariant: bool):
        dims = [down_dims[0]] + list(down_dims)
        self.equivariant = equivariant
        self.inp = VecLinear(c_in, dims[0], rng.spawn("inp")) if not equivariant else None
        blk = dict(k=k, n_cond_scalars=n_cond_scalars, n_cond_vectors=n_cond_vectors, equivariant=equivariant)
        self.down = [ResBlock(dims[i], dims[i + 1], rng=rng.spawn("down", i), **blk)
                     for i in range(len(down_dims))]
        self.pool = [VecConv1d(d, d, 3, rng.spawn("pool", i), stride=2) for i, d in enumerate(down_dims)]
        self.mid = ResBlock(dims[-1], dims[-1], rng=rng.spawn("mid"), **blk)
        self.up = [ResBlock(2 * dims[i + 1], dims[i], rng=rng.spawn("up", i), **blk)
                   for i in reversed(range(len(down_dims)))]
        self.head_conv = VecConv1d(dims[0], dims[0], k, rng.spawn("head"))
        self.head_act = VNNonlin(dims[0], rng.spawn("head_act")) if equivariant else None

    def trunk(self, x: Tensor, cond) -> Tensor:
        if self.inp is not None:
            x = self.inp(x)
        skips = []
        for blockd, pool in zip(self.down, self.pool):
            x = blockd(x, cond)
            skips.append(x)
            x = pool(x)
        x = self.mid(x, cond)
        for blocku in self.up:
            x = upsample_time(x)
            x = blocku(ad.concat([x, skips.pop()], axis=-1), cond)
        h = self.head_conv(x)
        return self.head_act(h) if self.head_act is not None else ad.relu(h)


# -------------------------------------------------------- equivariant network

@dataclass
class EquiContext:
    latent: EncoderLatent
    zc_vectors: Tensor     # [B, 3, n]
    zc_scalars: Tensor     # [B, m] (without the step embedding)


class EquiConditioner(Module):
    """Turns Z_c into FiLM inputs: projected equivariant vectors plus an
    invariant embedding of (Z_c scalars, step embedding, Gram invariants)."""

    def __init__(self, n_vec_in: int, n_scalar_in: int, cfg: PolicyConfig, rng: Rng):
        V, H = cfg.cond_vectors, cfg.cond_hidden
        self.gram_cap = cfg.gram_cap
        self.proj = VecLinear(n_vec_in, V, rng.spawn("proj"))
        self.act = VNNonlin(V, rng.spawn("act"))
        n_in = n_scalar_in + POS_EMB_DIM + num_invariants(V, cfg.gram_cap)
        self.W1 = Parameter(init_weight(rng.spawn("w1"), (H, n_in), n_in))
        self.W2 = Parameter(init_weight(rng.spawn("w2"), (H, H), H))

    def __call__(self, zc: GeomFeature) -> GeomFeature:
        v = self.act(self.proj(zc.vectors))
        s = ad.concat([zc.scalars, invariants_from_vectors(v, self.gram_cap)], axis=-1)
        h = ad.linear(ad.relu(ad.linear(s, self.W1)), self.W2)
        return GeomFeature(v, h)


def canonicalize_action(A: Action, theta_c, theta_s, layout: ActionLayout) -> Action:
    """Points: (p - c) / s; vectors: v / s; directions and scalars unchanged."""
    v = A.v.copy()
    c = np.asarray(theta_c)[:, None, :]
    s = np.asarray(theta_s)[:, None, None]
    for i, kind in enumerate(layout.vector_kinds):
        v[:, :, i] = (A.v[:, :, i] - c) / s if kind == "point" else A.v[:, :, i] / s
    return Action(v, A.d.copy(), A.s.copy())


def assemble_action(A_inv: Action, theta_c, theta_s, layout: ActionLayout, noise: bool = False) -> Action:
    """Inverse of canonicalize_action; directions renormalized. With
    ``noise`` the centroid is not added back and directions are left as-is."""
    v = A_inv.v.copy()
    c = np.asarray(theta_c)[:, None, :]
    s = np.asarray(theta_s)[:, None, None]
    for i, kind in enumerate(layout.vector_kinds):
        v[:, :, i] = A_inv.v[:, :, i] * s + (c if kind == "point" and not noise else 0.0)
    d = A_inv.d.copy()
    if not noise and d.shape[2]:
        d = d / np.maximum(np.linalg.norm(d, axis=-1, keepdims=True), 1e-12)
    return Action(v, d, A_inv.s.copy())


def build_action_repr(xv: Tensor, xs: Tensor, fuse: FFuse) -> GeomFeature:
    """Z_a: canonical vector/direction channels fused with action scalars."""
    return fuse(xv, xs)


class EquiBotNet(Module):
    equivariant = True

    def __init__(self, cfg: PolicyConfig, rng: Rng, normalizer=None):
        self.cfg = cfg
        self.normalizer = normalizer
        la, lo = cfg.action_layout, cfg.obs_layout
        To = cfg.obs_horizon
        C = cfg.encoder.hidden_channels
        self.encoder = Encoder(cfg.encoder, rng.spawn("encoder"))
        n_zv = To * (C + lo.n_pos + lo.n_dir)
        n_zs = To * lo.n_scalar + cfg.encoder.n_invariants
        self.cond = EquiConditioner(n_zv, n_zs, cfg, rng.spawn("cond"))
        d0 = cfg.down_dims[0]
        self.fuse = FFuse(la.n_channels, la.n_scalar, d0, 0, rng.spawn("fuse"))
        self.unet = UNet1D(d0, cfg.down_dims, cfg.kernel_size, cfg.cond_hidden, cfg.cond_vectors,
                           rng.spawn("unet"), equivariant=True)
        self.out_v = VecLinear(d0, la.n_channels, rng.spawn("out_v"), zero=True)
        self.out_sp = VecLinear(d0, la.n_scalar, rng.spawn("out_sp"), zero=True)
        self.out_sq = VecLinear(d0, la.n_scalar, rng.spawn("out_sq"))

    # -- normalization by the global dataset scales
    def _scales(self):
        n = self.normalizer
        return (1.0, 1.0) if n is None else (n.s_pc, n.s_ac)

    def _norm_obs(self, obs: Observation) -> Observation:
        s_pc, _ = self._scales()
        sc = obs.scalars
        n = self.normalizer
        if n is not None and n.obs_scalar_lo is not None and sc.shape[-1]:
            sc = _minmax(sc, np.asarray(n.obs_scalar_lo), np.asarray(n.obs_scalar_hi))
        return Observation(obs.cloud / s_pc, obs.pos / s_pc, obs.dirs, sc)

    def latent(self, obs: Observation) -> EncoderLatent:
        return self.encoder.encode(self._norm_obs(obs).cloud[:, -1])

    def build_conditioning(self, obs: Observation, latent: EncoderLatent | None = None, k=None) -> GeomFeature:
        """Z_c. Vectors: encoder features of every frame, canonical positions,
        directions. Scalars: proprio scalars, encoder invariants and (when k
        is given) the step embedding. All frames share the newest frame's
        centroid and scale."""
        o = self._norm_obs(obs)
        B, To, N, _ = o.cloud.shape
        if latent is None:
            latent = self.encoder.encode(o.cloud[:, -1])
        c, s = latent.theta_c, latent.theta_s
        Xc = (o.cloud - c[:, None, None]) / s[:, None, None, None]
        feats = self.encoder.features(Xc.reshape(B * To, N, 3))      # [B*To, 3, C]
        C = feats.shape[-1]
        feats = ad.reshape(ad.permute(ad.reshape(feats, (B, To, 3, C)), (0, 2, 1, 3)), (B, 3, To * C))
        pos = (o.pos - c[:, None, None]) / s[:, None, None, None]    # [B, To, nx, 3]
        pos = np.moveaxis(pos, -1, 1).reshape(B, 3, -1)
        dirs = np.moveaxis(o.dirs, -1, 1).reshape(B, 3, -1)
        vectors = ad.concat([feats, Tensor(pos), Tensor(dirs)], axis=-1)
        parts = [Tensor(o.scalars.reshape(B, -1)), latent.theta_inv]
        if k is not None:
            parts.append(pos_emb(np.broadcast_to(np.asarray(k, dtype=np.float64), (B,))))
        return GeomFeature(vectors, ad.concat(parts, axis=-1))

    def frame(self, latent: EncoderLatent, B: int) -> DiffusionFrame:
        la = self.cfg.action_layout
        s_pc, s_ac = self._scales()
        nc = la.n_channels
        offset = np.zeros((B, 1, 3, nc))
        scale = np.ones((B, 1, 3, nc))
        for i, kind in enumerate(la.vector_kinds):
            if kind == "point":
                offset[:, 0, :, i] = latent.theta_c * s_pc
                scale[:, 0, :, i] = (latent.theta_s * s_pc)[:, None]
            else:
                scale[:, 0, :, i] = (latent.theta_s * s_ac)[:, None]
        off_s, sc_s = _scalar_frame(self.normalizer, la, B)
        return DiffusionFrame(offset, scale, off_s, sc_s, la.n_vec)

    def clip_x0(self, xv, xs):
        """Radial clamp of each canonical vector channel (rotation commutes
        with it); scalars are clipped to their normalized range."""
        n = self.normalizer
        if n is None or n.x0_radius is None:
            return xv, xs
        r = np.asarray(n.x0_radius)
        norm = np.linalg.norm(xv, axis=-2, keepdims=True)
        xv = xv * np.minimum(1.0, r / np.maximum(norm, 1e-300))
        if n.act_scalar_lo is not None:
            xs = np.clip(xs, -1.0, 1.0)
        return xv, xs

    def context(self, obs: Observation):
        latent = self.latent(obs)
        zc = self.build_conditioning(obs, latent)
        return EquiContext(latent, zc.vectors, zc.scalars), self.frame(latent, obs.batch_size)

    def denoise(self, ctx: EquiContext, xv, xs, k):
        xv, xs = ad.as_tensor(xv), ad.as_tensor(xs)
        B = xv.shape[0]
        emb = pos_emb(np.broadcast_to(np.asarray(k, dtype=np.float64), (B,)))
        cond = self.cond(GeomFeature(ctx.zc_vectors, ad.concat([ctx.zc_scalars, emb], axis=-1)))
        za = build_action_repr(xv, xs, self.fuse)
        u = self.unet.trunk(za.vectors, cond)
        ev = self.out_v(u)
        es = ad.inner(self.out_sp(u), self.out_sq(u), axis=-2)
        return ev, es


# ------------------------------------------------------------ shared helpers

def flatten_diffusion(xv: Tensor, xs: Tensor) -> Tensor:
    """[B, Tp, 3, nc] + [B, Tp, ns] -> plain channels [B, Tp, 1, 3*nc + ns]."""
    B, Tp, _, nc = xv.shape
    v = ad.reshape(ad.permute(xv, (0, 1, 3, 2)), (B, Tp, 1, 3 * nc))
    return ad.concat([v, ad.reshape(xs, (B, Tp, 1, xs.shape[-1]))], axis=-1)


def unflatten_diffusion(y: Tensor, nc: int):
    B, Tp = y.shape[:2]
    v = ad.take(y, slice(0, 3 * nc), axis=-1)
    s = ad.take(y, slice(3 * nc, y.shape[-1]), axis=-1)
    v = ad.permute(ad.reshape(v, (B, Tp, nc, 3)), (0, 1, 3, 2))
    return v, ad.reshape(s, (B, Tp, y.shape[-1] - 3 * nc))


def with_random_head(net: Module, rng: Rng, scale: float = 0.3) -> Module:
    """Fill every all-zero parameter (zero-init heads, FiLM maps) with noise."""
    for name, p in net.parameters().items():
        if p.data.size and not np.any(p.data):
            p.data = rng.spawn(name).normal(p.data.shape, scale=scale / np.sqrt(max(p.data.shape[-1], 1)))
    return net
