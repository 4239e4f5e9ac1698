"""Plain (non-equivariant) diffusion-policy network on the same U-net scaffold.

Positions are min-max normalized per axis with dataset statistics, as in the
vanilla diffusion policy; the point encoder is a shared per-point MLP with
mean pooling.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Module, Parameter, Tensor
from .geom import Rng
from .policy import (POS_EMB_DIM, DiffusionFrame, Observation, PolicyConfig, UNet1D, _minmax,
                     _scalar_frame, flatten_diffusion, pos_emb, unflatten_diffusion)
from .vn import init_weight


class PlainPointEncoder(Module):
    def __init__(self, hidden: int, rng: Rng):
        self.W1 = Parameter(init_weight(rng.spawn("w1"), (hidden, 3), 3))
        self.b1 = Parameter(np.zeros(hidden))
        self.W2 = Parameter(init_weight(rng.spawn("w2"), (hidden, hidden), hidden))
        self.b2 = Parameter(np.zeros(hidden))

    def _affine(self, x, W, b):
        y = ad.linear(x, W)
        bb = b
        for ax, n in enumerate(y.shape[:-1]):
            bb = ad.expand(bb, ax, n)
        return ad.add(y, bb)

    def __call__(self, X) -> Tensor:
        """X [B, N, 3] -> pooled features [B, hidden]."""
        h = ad.relu(self._affine(X, self.W1, self.b1))
        h = ad.relu(self._affine(h, self.W2, self.b2))
        return ad.mean(h, 1)


@dataclass
class PlainContext:
    base: Tensor  # [B, m]


class BaselineNet(Module):
    equivariant = False

    def __init__(self, cfg: PolicyConfig, rng: Rng, normalizer=None):
        self.cfg = cfg
        self.normalizer = normalizer
        la, lo = cfg.action_layout, cfg.obs_layout
        To, C, H = cfg.obs_horizon, cfg.encoder.hidden_channels, cfg.cond_hidden
        self.encoder = PlainPointEncoder(C, rng.spawn("encoder"))
        n_base = To * (C + 3 * lo.n_pos + 3 * lo.n_dir + lo.n_scalar)
        n_in = n_base + POS_EMB_DIM
        self.W1 = Parameter(init_weight(rng.spawn("w1"), (H, n_in), n_in))
        self.b1 = Parameter(np.zeros(H))
        self.W2 = Parameter(init_weight(rng.spawn("w2"), (H, H), H))
        D = la.flat_dim
        self.unet = UNet1D(D, cfg.down_dims, cfg.kernel_size, H, 0, rng.spawn("unet"), equivariant=False)
        self.out = Parameter(np.zeros((D, cfg.down_dims[0])))

    def _pos_norm(self, x):
        n = self.normalizer
        if n is None or n.pos_lo is None:
            return x
        return _minmax(x, np.asarray(n.pos_lo), np.asarray(n.pos_hi))

    def context(self, obs: Observation):
        B, To, N, _ = obs.cloud.shape
        cloud = self._pos_norm(obs.cloud)
        feats = self.encoder(Tensor(cloud.reshape(B * To, N, 3)))
        feats = ad.reshape(feats, (B, To * feats.shape[-1]))
        sc = obs.scalars
        n = self.normalizer
        if n is not None and n.obs_scalar_lo is not None and sc.shape[-1]:
            sc = _minmax(sc, np.asarray(n.obs_scalar_lo), np.asarray(n.obs_scalar_hi))
        flat = np.concatenate([self._pos_norm(obs.pos).reshape(B, -1), obs.dirs.reshape(B, -1),
                               sc.reshape(B, -1)], axis=-1)
        base = ad.concat([feats, Tensor(flat)], axis=-1)
        return PlainContext(base), self.frame(B)

    def frame(self, B: int) -> DiffusionFrame:
        la = self.cfg.action_layout
        n = self.normalizer
        nc = la.n_channels
        offset = np.zeros((B, 1, 3, nc))
        scale = np.ones((B, 1, 3, nc))
        if n is not None and n.pos_lo is not None:
            lo, hi = np.asarray(n.pos_lo), np.asarray(n.pos_hi)
            ok = hi - lo > 1e-12
            c = np.where(ok, (hi + lo) / 2, 0.0)
            h = np.where(ok, (hi - lo) / 2, 1.0)
            for i, kind in enumerate(la.vector_kinds):
                if kind == "point":
                    offset[:, 0, :, i] = c
                    scale[:, 0, :, i] = h
                else:
                    scale[:, 0, :, i] = n.s_ac
        off_s, sc_s = _scalar_frame(n, la, B)
        return DiffusionFrame(offset, scale, off_s, sc_s, la.n_vec)

    def clip_x0(self, xv, xs):
        """Clip min-max normalized channels (points, directions, scalars) to [-1, 1]."""
        n = self.normalizer
        if n is None or n.pos_lo is None:
            return xv, xs
        xv = xv.copy()
        la = self.cfg.action_layout
        for i, kind in enumerate(la.vector_kinds):
            if kind == "point":
                xv[..., i] = np.clip(xv[..., i], -1.0, 1.0)
        xv[..., la.n_vec:] = np.clip(xv[..., la.n_vec:], -1.0, 1.0)
        if n.act_scalar_lo is not None:
            xs = np.clip(xs, -1.0, 1.0)
        return xv, xs

    def denoise(self, ctx: PlainContext, xv, xs, k):
        xv, xs = ad.as_tensor(xv), ad.as_tensor(xs)
        B = xv.shape[0]
        emb = pos_emb(np.broadcast_to(np.asarray(k, dtype=np.float64), (B,)))
        s = ad.concat([ctx.base, emb], axis=-1)
        h = ad.relu(ad.add(ad.linear(s, self.W1), ad.expand(self.b1, 0, B)))
        h = ad.linear(h, self.W2)
        u = self.unet.trunk(flatten_diffusion(xv, xs), h)
        return unflatten_diffusion(ad.linear(u, self.out), self.cfg.action_layout.n_channels)
