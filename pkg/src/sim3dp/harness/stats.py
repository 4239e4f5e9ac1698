"""Two-sample energy-distance permutation test."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geom import Rng


def _pairwise(Z: np.ndarray) -> np.ndarray:
    sq = np.einsum("ij,ij->i", Z, Z)
    d2 = sq[:, None] + sq[None, :] - 2.0 * Z @ Z.T
    return np.sqrt(np.maximum(d2, 0.0))


def energy_statistic(D: np.ndarray, in_x: np.ndarray) -> float:
    """Energy distance 2E|X-Y| - E|X-X'| - E|Y-Y'| from a pooled distance matrix."""
    x, y = in_x, ~in_x
    return float(2.0 * D[np.ix_(x, y)].mean() - D[np.ix_(x, x)].mean() - D[np.ix_(y, y)].mean())


@dataclass
class EnergyTest:
    statistic: float
    p_value: float
    permutations: int


def energy_test(X, Y, permutations: int = 999, rng: Rng | None = None) -> EnergyTest:
    """Permutation p-value for H0: X and Y come from the same distribution."""
    X = np.asarray(X, dtype=np.float64).reshape(len(X), -1)
    Y = np.asarray(Y, dtype=np.float64).reshape(len(Y), -1)
    rng = Rng(0) if rng is None else rng
    D = _pairwise(np.concatenate([X, Y]))
    n = len(X)
    labels = np.zeros(len(D), dtype=bool)
    labels[:n] = True
    observed = energy_statistic(D, labels)
    exceed = 0
    for i in range(permutations):
        perm = rng.spawn(i).permutation(len(D))
        exceed += energy_statistic(D, labels[perm]) >= observed
    return EnergyTest(observed, (1 + exceed) / (1 + permutations), permutations)
