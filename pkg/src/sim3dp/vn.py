"""Vector-neuron layers.

Vector features are Tensors of shape ``[..., 3, C]`` (channels last), scalar
features ``[..., C]``. Rotating a vector feature means left-multiplying the
3-axis by R; every layer here commutes with that action, and scalar outputs
depend on vectors only through inner products.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Module, Parameter, Tensor
from .geom import Rng

DEGENERATE_DIR = 1e-12
NORM_EPS = 1e-8


@dataclass
class GeomFeature:
    vectors: Tensor  # [..., 3, Cv]
    scalars: Tensor  # [..., Cs]

    def __post_init__(self):
        self.vectors = ad.as_tensor(self.vectors)
        self.scalars = ad.as_tensor(self.scalars)
        if self.vectors.ndim < 2 or self.vectors.shape[-2] != 3:
            raise ad.ShapeError(f"GeomFeature: vectors must be [..., 3, C], got {self.vectors.shape}")
        if self.vectors.shape[:-2] != self.scalars.shape[:-1]:
            raise ad.ShapeError(f"GeomFeature: leading axes differ {self.vectors.shape} vs {self.scalars.shape}")

    @property
    def n_vectors(self) -> int:
        return self.vectors.shape[-1]

    @property
    def n_scalars(self) -> int:
        return self.scalars.shape[-1]

    def rotated(self, R: np.ndarray) -> "GeomFeature":
        v = np.einsum("ij,...jc->...ic", R, self.vectors.data)
        return GeomFeature(Tensor(v), self.scalars)


def init_weight(rng: Rng, shape, fan_in: int, gain: float = 1.0) -> np.ndarray:
    return rng.normal(tuple(shape), scale=gain / np.sqrt(max(fan_in, 1)))


# ------------------------------------------------------------ functional ops

def vec_linear(W, V) -> Tensor:
    """out[..., :, j] = sum_i W[j, i] V[..., :, i]."""
    return ad.channel_mix(W, V)


def vn_nonlin(V, D) -> Tensor:
    """Direction-projection nonlinearity.

    With d = vec_linear(D, V) per channel: keep v where <v, d> >= 0, else
    remove the component of v along d. Channels with |d| < 1e-12 pass v
    through unchanged.
    """
    V = ad.as_tensor(V)
    d = vec_linear(D, V)
    dot = ad.inner(V, d, axis=-2)
    dsq = ad.inner(d, d, axis=-2)
    degenerate = dsq.data < DEGENERATE_DIR ** 2
    gate = np.where(degenerate, 1.0, dot.data)
    coef = ad.div(dot, ad.add(dsq, degenerate.astype(np.float64)))
    proj = ad.sub(V, ad.mul(ad.expand(coef, -2, 3), d))
    gate = np.broadcast_to(np.expand_dims(gate, -2), V.shape)
    return ad.select(gate, V, proj)


def vec_conv1d(W, F, stride: int = 1) -> Tensor:
    """F [B, T, 3, Ci] -> [B, T', 3, Co]; the kernel acts identically on x, y, z planes."""
    return ad.conv1d_time(F, W, stride)


def num_invariants(c: int, cap: int | None = None) -> int:
    m = c if cap is None else min(c, cap)
    return m * (m + 1) // 2


def invariants_from_vectors(V, cap: int | None = None) -> Tensor:
    """Upper-triangular Gram entries <v_i, v_j>, i <= j, of the first ``cap`` channels."""
    V = ad.as_tensor(V)
    m = V.shape[-1] if cap is None else min(V.shape[-1], cap)
    lead = V.shape[:-2]
    if m == 0:
        return Tensor(np.zeros(lead + (0,)))
    Vm = V if m == V.shape[-1] else ad.take(V, slice(0, m), axis=-1)
    perm = tuple(range(len(lead))) + (len(lead) + 1, len(lead))
    G = ad.matmul(ad.permute(Vm, perm), Vm)  # [..., m, m]
    iu, ju = np.triu_indices(m)
    return ad.take(ad.reshape(G, lead + (m * m,)), iu * m + ju, axis=-1)


def vec_layer_norm(V) -> Tensor:
    """Divide every vector by the RMS of the channel norms (plus 1e-8)."""
    V = ad.as_tensor(V)
    R, C = V.shape[-2:]
    lead = V.shape[:-2]
    fro = ad.norm(ad.reshape(V, lead + (R * C,)), axis=-1)
    rms = ad.add_const(ad.scale(fro, 1.0 / np.sqrt(C)), NORM_EPS)
    return ad.div(V, ad.expand(ad.expand(rms, -1, R), -1, C))


def _broadcast_channels(g: Tensor, target_ndim_lead: int, R: int | None, T: int | None):
    """Expand per-sample gains [..., C] to [..., (T), (R), C]."""
    out = g
    if R is not None:
        out = ad.expand(out, -2, R)
    if T is not None:
        ax = out.ndim - (2 if R is not None else 1)
        out = ad.expand(out, ax, T)
    return out


def vec_film(F: GeomFeature, Zc: GeomFeature, film: "VecFiLM") -> GeomFeature:
    """gamma * F + beta with invariant gains and equivariant vector biases.

    Gains come from Zc scalars and Gram invariants of Zc vectors; the vector
    bias is a channel mix of Zc vectors. If F carries one more leading axis
    than Zc (time), the modulation is shared along it.
    """
    inv = Zc.scalars
    if film.gram_cap:
        inv = ad.concat([inv, invariants_from_vectors(Zc.vectors, film.gram_cap)], axis=-1)
    T = F.vectors.shape[-3] if F.vectors.ndim == Zc.vectors.ndim + 1 else None
    gv = ad.add_const(ad.linear(inv, film.gain_v), 1.0)
    bv = vec_linear(film.bias_v, Zc.vectors)
    if T is not None:
        bv = ad.expand(bv, bv.ndim - 2, T)
    vectors = ad.add(ad.mul(_broadcast_channels(gv, 0, 3, T), F.vectors), bv)
    scalars = F.scalars
    if F.n_scalars:
        gs = ad.add_const(ad.linear(inv, film.gain_s), 1.0)
        bs = ad.linear(inv, film.bias_s)
        scalars = ad.add(ad.mul(_broadcast_channels(gs, 0, None, T), F.scalars),
                         _broadcast_channels(bs, 0, None, T))
    return GeomFeature(vectors, scalars)


def f_fuse(vectors, scalars, fuse: "FFuse") -> GeomFeature:
    """Fuse vector and scalar inputs: channel-mixed vectors scaled by
    invariant gains predicted from the scalars."""
    vectors, scalars = ad.as_tensor(vectors), ad.as_tensor(scalars)
    v = vec_linear(fuse.W, vectors)
    if scalars.shape[-1]:
        gain = ad.add_const(ad.linear(scalars, fuse.gain), 1.0)
        v = ad.mul(ad.expand(gain, -2, 3), v)
        s = ad.linear(scalars, fuse.Ws)
    else:
        s = Tensor(np.zeros(scalars.shape[:-1] + (fuse.Ws.shape[0],)))
    return GeomFeature(v, s)


# -------------------------------------------------------------------- modules

class VecLinear(Module):
    def __init__(self, c_in: int, c_out: int, rng: Rng, zero: bool = False):
        w = np.zeros((c_out, c_in)) if zero else init_weight(rng, (c_out, c_in), c_in)
        self.W = Parameter(w)

    def __call__(self, V):
        return vec_linear(self.W, V)


class VNNonlin(Module):
    def __init__(self, c: int, rng: Rng):
        self.D = Parameter(init_weight(rng, (c, c), c))

    def __call__(self, V):
        return vn_nonlin(V, self.D)


class VecConv1d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: Rng, stride: int = 1):
        self.W = Parameter(init_weight(rng, (c_out, c_in, k), c_in * k))
        self.stride = stride

    def __call__(self, F):
        return vec_conv1d(self.W, F, self.stride)


class VecFiLM(Module):
    """Parameters of one FiLM site. Zero-initialized: starts as the identity."""

    def __init__(self, c_v: int, c_s: int, n_cond_scalars: int, n_cond_vectors: int,
                 gram_cap: int = 0):
        self.gram_cap = min(gram_cap, n_cond_vectors)
        n_inv = n_cond_scalars + num_invariants(n_cond_vectors, self.gram_cap) * bool(self.gram_cap)
        self.gain_v = Parameter(np.zeros((c_v, n_inv)))
        self.bias_v = Parameter(np.zeros((c_v, n_cond_vectors)))
        self.gain_s = Parameter(np.zeros((c_s, n_inv)))
        self.bias_s = Parameter(np.zeros((c_s, n_inv)))

    def __call__(self, F: GeomFeature, Zc: GeomFeature) -> GeomFeature:
        return vec_film(F, Zc, self)


class FFuse(Module):
    def __init__(self, cv_in: int, cs_in: int, cv_out: int, cs_out: int, rng: Rng):
        self.W = Parameter(init_weight(rng, (cv_out, cv_in), cv_in))
        self.gain = Parameter(init_weight(rng, (cv_out, cs_in), cs_in, gain=0.1))
        self.Ws = Parameter(init_weight(rng, (cs_out, cs_in), cs_in))

    def __call__(self, vectors, scalars) -> GeomFeature:
        return f_fuse(vectors, scalars, self)
