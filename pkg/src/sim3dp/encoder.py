"""SIM(3)-equivariant point-cloud encoder.

The cloud is first canonicalized (centroid removed, divided by the mean
distance to the centroid), which makes everything downstream translation
and scale invariant; the vector-neuron stack then supplies rotation
equivariance.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Module, Tensor
from .geom import Rng
from .vn import VecLinear, VNNonlin, invariants_from_vectors, num_invariants


class DegenerateCloudError(ValueError):
    pass


@dataclass
class EncoderConfig:
    num_layers: int = 2
    hidden_channels: int = 32
    points_in: int = 8
    knn: int | None = None
    bandwidth: float | None = 0.5   # Gaussian neighborhood width in canonical units
    inv_cap: int = 8

    def __post_init__(self):
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")

    @property
    def n_invariants(self) -> int:
        return num_invariants(self.hidden_channels, self.inv_cap)


@dataclass
class EncoderLatent:
    theta_R: Tensor          # [B, 3, C] equivariant
    theta_inv: Tensor        # [B, D] invariant
    theta_c: np.ndarray      # [B, 3]
    theta_s: np.ndarray      # [B]


def canonicalize(X: np.ndarray):
    """Return (X', centroid, scale) with X' = (X - centroid) / scale.

    Scale is the mean point-to-centroid distance. Works on [..., N, 3].
    """
    X = np.asarray(X, dtype=np.float64)
    c = X.mean(axis=-2)
    d = X - c[..., None, :]
    s = np.linalg.norm(d, axis=-1).mean(axis=-1)
    tol = 1e-12 * np.maximum(1.0, np.abs(X).max(axis=(-1, -2)))
    if np.any(s <= tol):
        raise DegenerateCloudError("degenerate cloud: zero scale")
    return d / s[..., None, None], c, s


def resample(X: np.ndarray, n: int, rng: Rng) -> np.ndarray:
    """Exactly n points: without replacement if the cloud is large enough."""
    X = np.asarray(X, dtype=np.float64)
    N = X.shape[0]
    idx = rng.choice(N, n, replace=N < n)
    return X[idx]


def neighbor_average(Xc: np.ndarray, k: int | None = None,
                     bandwidth: float | None = None) -> np.ndarray:
    """Row-stochastic [B, N, N] averaging matrix over each point's neighborhood.

    With ``bandwidth`` the weights are Gaussian in distance; otherwise the k
    nearest points (self included) are averaged; with neither, every point
    sees the global mean. On a centered cloud the global mean is zero, so a
    vector-neuron stack fed only (x_i, mean) keeps every feature parallel to
    x_i and its mean pool vanishes; one of the local forms is needed.
    """
    B, N, _ = Xc.shape
    d2 = ((Xc[:, :, None, :] - Xc[:, None, :, :]) ** 2).sum(-1)
    if bandwidth is not None:
        W = np.exp(-d2 / (2.0 * bandwidth * bandwidth))
        return W / W.sum(axis=-1, keepdims=True)
    if k is None or k >= N:
        return np.full((B, N, N), 1.0 / N)
    nbr = np.argsort(d2, axis=-1, kind="stable")[..., :k]
    A = np.zeros((B, N, N))
    np.put_along_axis(A, nbr, 1.0 / k, axis=-1)
    return A


class Encoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: Rng):
        self.cfg = cfg
        C = cfg.hidden_channels
        self.lin = [VecLinear(2 * (1 if i == 0 else C), C, rng.spawn("lin", i)) for i in range(cfg.num_layers)]
        self.act = [VNNonlin(C, rng.spawn("act", i)) for i in range(cfg.num_layers)]

    def features(self, Xc: np.ndarray) -> Tensor:
        """Equivariant pooled features [B, 3, C] of already-canonical clouds [B, N, 3]."""
        B, N, _ = Xc.shape
        A = Tensor(neighbor_average(Xc, self.cfg.knn, self.cfg.bandwidth))
        f = Tensor(Xc[..., None])  # [B, N, 3, 1]
        for lin, act in zip(self.lin, self.act):
            c = f.shape[-1]
            ctx = ad.reshape(ad.matmul(A, ad.reshape(f, (B, N, 3 * c))), (B, N, 3, c))
            f = act(lin(ad.concat([f, ctx], axis=-1)))
        return ad.mean(f, 1)

    def encode(self, X: np.ndarray) -> EncoderLatent:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 2:
            X = X[None]
        Xc, c, s = canonicalize(X)
        R = self.features(Xc)
        inv = invariants_from_vectors(R, self.cfg.inv_cap)
        return EncoderLatent(R, inv, c, s)


def encode(X: np.ndarray, encoder: Encoder) -> EncoderLatent:
    return encoder.encode(X)
