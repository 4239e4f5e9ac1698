"""SIM(3) group elements, point/vector actions and a portable counter-based RNG."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

KINDS = ("point", "vector", "direction", "scalar")

_MASK = (1 << 64) - 1
_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix64(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
        return z ^ (z >> np.uint64(31))


def _hash_key(seed: int, key) -> int:
    """Derive a child seed from a parent seed and an int/str key."""
    if isinstance(key, str):
        h = 1469598103934665603
        for b in key.encode():
            h = ((h ^ b) * 1099511628211) & _MASK
        key = h
    z = np.array([(seed ^ ((int(key) * 0x9E3779B97F4A7C15) & _MASK)) & _MASK], dtype=np.uint64)
    return int(_mix64(_mix64(z) + _GAMMA)[0])


class Rng:
    """Splitmix64 stream: output i is a pure function of (seed, i).

    Bit-identical on every platform for integer and uniform draws. Gaussian
    draws go through Box-Muller and therefore through libm.
    """

    def __init__(self, seed: int = 0, counter: int = 0):
        self.seed = int(seed) & _MASK
        self.counter = int(counter)

    def __repr__(self):
        return f"Rng(seed={self.seed}, counter={self.counter})"

    def state(self) -> dict:
        return {"seed": self.seed, "counter": self.counter}

    @classmethod
    def from_state(cls, state: dict) -> "Rng":
        return cls(state["seed"], state["counter"])

    def spawn(self, *keys) -> "Rng":
        """Independent child stream; does not advance this stream."""
        seed = self.seed
        for key in keys:
            seed = _hash_key(seed, key)
        return Rng(seed)

    def bits(self, n: int) -> np.ndarray:
        ctr = np.arange(self.counter + 1, self.counter + 1 + n, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            z = np.uint64(self.seed) + ctr * _GAMMA
        return _mix64(z)

    def uniform(self, size=None, low: float = 0.0, high: float = 1.0):
        n = 1 if size is None else int(np.prod(size))
        u = (self.bits(n) >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
        u = low + (high - low) * u
        return float(u[0]) if size is None else u.reshape(size)

    def normal(self, size=None, loc: float = 0.0, scale: float = 1.0):
        n = 1 if size is None else int(np.prod(size))
        m = (n + 1) // 2
        u1 = 1.0 - self.uniform(m)  # (0, 1]
        u2 = self.uniform(m)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])[:n]
        z = loc + scale * z
        return float(z[0]) if size is None else z.reshape(size)

    def integers(self, high: int, size=None):
        """Uniform integers in [0, high)."""
        n = 1 if size is None else int(np.prod(size))
        x = (self.uniform(n) * high).astype(np.int64)
        x = np.minimum(x, high - 1)
        return int(x[0]) if size is None else x.reshape(size)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")

    def choice(self, n: int, size: int, replace: bool = True) -> np.ndarray:
        if replace:
            return self.integers(n, size)
        if size > n:
            raise ValueError(f"cannot draw {size} of {n} without replacement")
        return self.permutation(n)[:size]


@dataclass(frozen=True, eq=False)
class Sim3:
    """x -> s R x + t."""

    R: np.ndarray
    t: np.ndarray
    s: float = 1.0

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9) or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("R is not a proper rotation")
        if not (self.s > 0 and math.isfinite(self.s)):
            raise ValueError(f"scale must be positive, got {self.s}")
        if not np.all(np.isfinite(t)):
            raise ValueError("translation not finite")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "s", float(self.s))

    @classmethod
    def identity(cls) -> "Sim3":
        return cls(np.eye(3), np.zeros(3), 1.0)

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.s * self.R
        M[:3, 3] = self.t
        return M

    def apply(self, x: np.ndarray, kind: str = "point") -> np.ndarray:
        """Act on an array [..., 3] of entries of the given kind."""
        x = np.asarray(x, dtype=np.float64)
        if kind == "point":
            return self.s * (x @ self.R.T) + self.t
        if kind == "vector":
            return self.s * (x @ self.R.T)
        if kind == "direction":
            return x @ self.R.T
        if kind == "scalar":
            return x
        raise ValueError(f"unknown kind {kind!r}")

    def linear_part(self) -> "Sim3":
        """The same rotation and scale without translation (action on displacements)."""
        return Sim3(self.R, np.zeros(3), self.s)

    def __matmul__(self, other: "Sim3") -> "Sim3":
        return compose(self, other)


def apply_sim3(T: Sim3, X: np.ndarray) -> np.ndarray:
    return T.apply(X, "point")


def apply_sim3_vector(T: Sim3, v, kind: str):
    if kind not in KINDS:
        raise ValueError(f"unknown kind {kind!r}")
    if kind == "scalar":
        return v
    v = np.asarray(v, dtype=np.float64)
    if kind == "direction" and np.any(np.abs(np.linalg.norm(v, axis=-1) - 1.0) > 1e-6):
        raise ValueError("direction not normalized")
    return T.apply(v, kind)


def compose(T2: Sim3, T1: Sim3) -> Sim3:
    """Transform equal to applying T1 first, then T2."""
    return Sim3(T2.R @ T1.R, T2.s * (T2.R @ T1.t) + T2.t, T2.s * T1.s)


def invert(T: Sim3) -> Sim3:
    Ri = T.R.T
    return Sim3(Ri, -(Ri @ T.t) / T.s, 1.0 / T.s)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def random_rotation(rng: Rng) -> np.ndarray:
    """Haar-uniform rotation from a normalized Gaussian quaternion."""
    q = rng.normal(4)
    while np.linalg.norm(q) < 1e-12:
        q = rng.normal(4)
    R = quat_to_matrix(q)
    # re-orthonormalize so R^T R = I holds to rounding
    u, _, vt = np.linalg.svd(R)
    return u @ vt


def rot_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def random_sim3(rng: Rng, scale_range=(0.5, 2.0), translation_std: float = 1.0) -> Sim3:
    R = random_rotation(rng)
    lo, hi = scale_range
    s = float(np.exp(rng.uniform(low=math.log(lo), high=math.log(hi))))
    t = rng.normal(3, scale=translation_std)
    return Sim3(R, t, s)
