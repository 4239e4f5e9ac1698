"""Tape-based reverse-mode differentiation over a closed set of numpy primitives.

Only the primitives below exist; there is no implicit broadcasting. Every
primitive checks shapes and raises ShapeError naming the primitive and both
shapes. Gradients are accumulated in reverse tape order, so a backward pass
is bit-reproducible.

Vector features use a channels-last layout ``[..., 3, C]`` throughout.
"""
from __future__ import annotations

import threading
from collections import OrderedDict
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


def _shape_error(op, *shapes):
    return ShapeError(f"{op}: incompatible shapes " + " vs ".join(str(tuple(s)) for s in shapes))


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.parents: tuple = ()
        self.backward_fn = None
        self.op = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op})"

    # operator sugar maps onto the primitives
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)


class Parameter(Tensor):
    __slots__ = ("name", "trainable")

    def __init__(self, data, name: str = "", trainable: bool = True):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=trainable)
        self.name = name
        self.trainable = trainable


class Module:
    """Owns Parameters; ``parameters()`` walks attributes in definition order."""

    def parameters(self, prefix: str = "") -> "OrderedDict[str, Parameter]":
        out: OrderedDict[str, Parameter] = OrderedDict()
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                out[name] = val
            elif isinstance(val, Module):
                out.update(val.parameters(name + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.parameters(f"{name}.{i}."))
                    elif isinstance(item, Parameter):
                        out[f"{name}.{i}"] = item
        for name, p in out.items():
            p.name = name
        return out

    def trainable(self) -> list[Parameter]:
        return [p for p in self.parameters().values() if p.trainable]

    def zero_grad(self):
        for p in self.parameters().values():
            p.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, p.data.copy()) for k, p in self.parameters().items())

    def load_state_dict(self, state):
        params = self.parameters()
        missing = set(params) ^ set(state)
        if missing:
            raise KeyError(f"parameter name mismatch: {sorted(missing)}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise _shape_error(f"load {k}", p.data.shape, arr.shape)
            p.data = arr.copy()

    def num_parameters(self) -> int:
        return int(np.sum([p.data.size for p in self.parameters().values()]))


class _Record:
    __slots__ = ("op", "out", "parents", "forward", "backward")

    def __init__(self, op, out, parents, forward, backward):
        self.op, self.out, self.parents, self.forward, self.backward = op, out, parents, forward, backward


_local = threading.local()


def _active_tape():
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of primitive applications. Use as a context manager."""

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self):
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()

    def __len__(self):
        return len(self.records)

    def replay(self) -> float:
        """Recompute every record from its parents; returns max abs deviation."""
        worst = 0.0
        for rec in self.records:
            val = rec.forward(*[p.data for p in rec.parents])
            worst = max(worst, float(np.max(np.abs(val - rec.out.data), initial=0.0)))
        return worst


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op: str, forward: Callable, parents: Sequence[Tensor], backward: Callable,
          value: np.ndarray | None = None) -> Tensor:
    """Record one primitive. ``value`` lets a primitive hand over a forward
    result it already computed (and cached pieces of) for its backward."""
    out = Tensor(forward(*[p.data for p in parents]) if value is None else value)
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward
        out.op = op
        tape.records.append(_Record(op, out, out.parents, forward, backward))
    return out


def backward(tape: Tape, output: Tensor) -> None:
    """Accumulate d(output)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if output.data.size != 1:
        raise ShapeError(f"backward: output must be scalar, got shape {output.shape}")
    grads = {id(output): np.ones_like(output.data)}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.out), None)
        if g is None:
            continue
        pgrads = rec.backward(g)
        for p, pg in zip(rec.parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            if p.backward_fn is None:
                p.grad = pg.copy() if p.grad is None else p.grad + pg
            else:
                key = id(p)
                grads[key] = pg if key not in grads else grads[key] + pg
    if output.backward_fn is None and output.requires_grad:
        output.grad = np.ones_like(output.data)


# ----------------------------------------------------------------- primitives

def _same(op, a, b):
    if a.shape != b.shape:
        raise _shape_error(op, a.shape, b.shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same("add", a, b)
    return _make("add", np.add, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same("sub", a, b)
    return _make("sub", np.subtract, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same("mul", a, b)
    return _make("mul", np.multiply, (a, b), lambda g: (g * b.data, g * a.data))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same("div", a, b)
    value = a.data / b.data

    def bwd(g):
        ga = g / b.data
        return ga, -ga * value

    return _make("div", np.divide, (a, b), bwd, value)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _make("scale", lambda x: x * c, (a,), lambda g: (g * c,))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    if int(np.prod(shape)) != a.data.size:
        raise _shape_error("reshape", a.shape, shape)
    old = a.shape
    return _make("reshape", lambda x: x.reshape(shape), (a,), lambda g: (g.reshape(old),))


def permute(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise _shape_error("permute", a.shape, axes)
    inv = tuple(np.argsort(axes))
    return _make("permute", lambda x: np.ascontiguousarray(x.transpose(axes)), (a,),
                 lambda g: (g.transpose(inv),))


def expand(a, axis: int, n: int) -> Tensor:
    """Insert a new axis at ``axis`` and repeat ``n`` times (explicit broadcast)."""
    a = as_tensor(a)
    ax = axis if axis >= 0 else a.ndim + 1 + axis
    if not 0 <= ax <= a.ndim:
        raise _shape_error("expand", a.shape, (axis, n))

    def fwd(x):
        x = np.expand_dims(x, ax)
        shape = list(x.shape)
        shape[ax] = n
        return np.broadcast_to(x, shape).copy()

    return _make("expand", fwd, (a,), lambda g: (g.sum(axis=ax),))


def matmul(a, b) -> Tensor:
    """a [..., m, k] times b [k] | [k, n] | [..., k, n] (same leading dims)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != (b.shape[0] if b.ndim <= 2 else b.shape[-2]):
        raise _shape_error("matmul", a.shape, b.shape)
    if b.ndim > 2 and (a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2]):
        raise _shape_error("matmul", a.shape, b.shape)

    def bwd(g):
        if b.ndim == 1:
            ga = g[..., None] * b.data
            gb = (g[..., None] * a.data).reshape(-1, a.shape[-1]).sum(0)
        elif b.ndim == 2:
            ga = g @ b.data.T
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, b.shape[-1])
        else:
            ga = g @ np.swapaxes(b.data, -1, -2)
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _make("matmul", np.matmul, (a, b), bwd)


def linear(x, W) -> Tensor:
    """Scalar-channel mixing: x [..., Ci], W [Co, Ci] -> [..., Co]."""
    x, W = as_tensor(x), as_tensor(W)
    if W.ndim != 2 or x.shape[-1] != W.shape[1]:
        raise _shape_error("linear", x.shape, W.shape)
    lead = x.shape[:-1]
    ci, co = W.shape[1], W.shape[0]
    n = int(np.prod(lead))

    def fwd(xd, wd):
        return (xd.reshape(n, ci) @ wd.T).reshape(*lead, co)

    def bwd(g):
        g2 = g.reshape(n, co)
        return (g2 @ W.data).reshape(x.shape), g2.T @ x.data.reshape(n, ci)

    return _make("linear", fwd, (x, W), bwd)


def channel_mix(W, V) -> Tensor:
    """Vector-channel mixing: W [Co, Ci], V [..., 3, Ci] -> [..., 3, Co].

    Only channels are mixed; spatial components never interact.
    """
    V, W = as_tensor(V), as_tensor(W)
    if W.ndim != 2 or V.ndim < 2 or V.shape[-1] != W.shape[1]:
        raise _shape_error("channel_mix", W.shape, V.shape)
    return linear(V, W)


def conv1d_time(x, W, stride: int = 1) -> Tensor:
    """Temporal convolution with zero 'same' padding.

    x [B, T, R, Ci] (R=3 vector components or R=1 plain), W [Co, Ci, k], k odd.
    The same kernel is applied to every component plane r.
    """
    x, W = as_tensor(x), as_tensor(W)
    if x.ndim != 4 or W.ndim != 3 or x.shape[-1] != W.shape[1] or W.shape[2] % 2 == 0:
        raise _shape_error("conv1d_time", x.shape, W.shape)
    B, T, R, Ci = x.shape
    Co, _, k = W.shape
    p = k // 2
    To = (T - 1) // stride + 1
    span = stride * (To - 1) + 1
    rows = B * To * R

    def cols_of(xd):
        xp = np.zeros((B, T + 2 * p, R, Ci))
        xp[:, p:p + T] = xd
        win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=1)  # B, T, R, Ci, k
        return win[:, :span:stride].reshape(rows, Ci * k)

    def fwd(xd, wd):
        return (cols_of(xd) @ wd.reshape(Co, Ci * k).T).reshape(B, To, R, Co)

    cols = cols_of(x.data)
    value = (cols @ W.data.reshape(Co, Ci * k).T).reshape(B, To, R, Co)

    def bwd(g):
        g2 = g.reshape(rows, Co)
        gw = (g2.T @ cols).reshape(Co, Ci, k)
        gcols = (g2 @ W.data.reshape(Co, Ci * k)).reshape(B, To, R, Ci, k)
        gxp = np.zeros((B, T + 2 * p, R, Ci))
        for j in range(k):
            gxp[:, j:j + span:stride] += gcols[..., j]
        return gxp[:, p:p + T], gw

    return _make("conv1d_time", fwd, (x, W), bwd, value)


def _axes(axis, ndim):
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(a % ndim for a in axes)


def sum(a, axis) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    axes = _axes(axis, a.ndim)
    shape = a.shape

    def bwd(g):
        return (np.broadcast_to(np.expand_dims(g, axes), shape).copy(),)

    return _make("sum", lambda x: x.sum(axis=axes), (a,), bwd)


def mean(a, axis) -> Tensor:
    a = as_tensor(a)
    axes = _axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes]))
    return scale(sum(a, axes), 1.0 / n)


def norm(a, axis: int = -1) -> Tensor:
    """Euclidean norm along one axis; gradient at the origin is taken as 0."""
    a = as_tensor(a)
    ax = axis % a.ndim

    def fwd(x):
        return np.sqrt((x * x).sum(axis=ax))

    value = fwd(a.data)

    def bwd(g):
        n = np.expand_dims(value, ax)
        safe = np.where(n > 0, n, 1.0)
        return (np.where(n > 0, a.data / safe, 0.0) * np.expand_dims(g, ax),)

    return _make("norm", fwd, (a,), bwd, value)


def inner(a, b, axis: int = -1) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same("inner", a, b)
    ax = axis % a.ndim
    return _make("inner", lambda x, y: (x * y).sum(axis=ax), (a, b),
                 lambda g: (np.expand_dims(g, ax) * b.data, np.expand_dims(g, ax) * a.data))


def concat(ts: Sequence, axis: int) -> Tensor:
    ts = [as_tensor(t) for t in ts]
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(t.shape[i] != ts[0].shape[i] for i in range(t.ndim) if i != ax):
            raise _shape_error("concat", ts[0].shape, t.shape)
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def bwd(g):
        idx = [slice(None)] * g.ndim
        out = []
        for i in range(len(ts)):
            idx[ax] = slice(bounds[i], bounds[i + 1])
            out.append(g[tuple(idx)])
        return tuple(out)

    return _make("concat", lambda *xs: np.concatenate(xs, axis=ax), tuple(ts), bwd)


def take(a, index, axis: int) -> Tensor:
    """Slice (``slice``) or gather (int index array) along one axis."""
    a = as_tensor(a)
    ax = axis % a.ndim
    sel = [slice(None)] * a.ndim
    if isinstance(index, slice):
        sel[ax] = index
    else:
        index = np.asarray(index, dtype=np.int64)
        if index.ndim != 1 or (index.size and (index.min() < -a.shape[ax] or index.max() >= a.shape[ax])):
            raise _shape_error("take", a.shape, index.shape)
        sel[ax] = index
    sel = tuple(sel)

    def bwd(g):
        ga = np.zeros_like(a.data)
        if isinstance(index, slice):
            ga[sel] += g
        else:
            np.add.at(ga, sel, g)
        return (ga,)

    return _make("take", lambda x: x[sel].copy(), (a,), bwd)


def select(gate, a, b) -> Tensor:
    """``a`` where gate >= 0 else ``b``. The gate is not differentiated; at
    gate == 0 the gradient follows ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    gate = np.asarray(gate.data if isinstance(gate, Tensor) else gate)
    _same("select", a, b)
    if gate.shape != a.shape:
        raise _shape_error("select", gate.shape, a.shape)
    m = gate >= 0
    return _make("select", lambda x, y: np.where(m, x, y), (a, b),
                 lambda g: (np.where(m, g, 0.0), np.where(m, 0.0, g)))


def sin(a) -> Tensor:
    a = as_tensor(a)
    return _make("sin", np.sin, (a,), lambda g: (g * np.cos(a.data),))


def cos(a) -> Tensor:
    a = as_tensor(a)
    return _make("cos", np.cos, (a,), lambda g: (-g * np.sin(a.data),))


# ---------------------------------------------------------------- composites

def relu(a) -> Tensor:
    a = as_tensor(a)
    return select(a.data, a, np.zeros(a.shape))


def add_const(a, c: float) -> Tensor:
    a = as_tensor(a)
    return add(a, np.full(a.shape, float(c)))


def sinusoid(x: np.ndarray, dim: int) -> Tensor:
    """Sinusoidal embedding [..., dim] of positions x [...]: [sin(x f_i), cos(x f_i)]."""
    if dim % 2:
        raise ValueError("embedding dim must be even")
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    arg = Tensor(np.asarray(x, dtype=np.float64)[..., None] * freqs)
    return concat([sin(arg), cos(arg)], axis=-1)


def mse(a, b) -> Tensor:
    d = sub(a, b)
    return mean(mul(d, d), tuple(range(d.ndim)))


# -------------------------------------------------------------- grad audit

def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-5,
               max_coords: int | None = None, rng=None, per_tensor: bool = False) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` recomputes a scalar from the current ``.data`` of ``params``.
    With ``max_coords`` set, that many coordinates are drawn with ``rng``.
    By default the error is taken coordinate by coordinate. ``per_tensor``
    compares each parameter's checked coordinates as one vector instead, which
    stays meaningful when single coordinates sit near the rounding floor of
    the difference quotient (about ulp(f) / eps).
    """
    params = list(params)
    for p in params:
        p.grad = None
    with Tape() as tape:
        out = f()
    backward(tape, out)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    coords = [(i, j) for i, p in enumerate(params) for j in range(p.data.size)]
    if max_coords is not None and max_coords < len(coords):
        pick = rng.choice(len(coords), max_coords, replace=False)
        coords = [coords[int(c)] for c in pick]

    pairs: dict = {}
    for i, j in coords:
        flat = params[i].data.reshape(-1)
        orig = flat[j]
        flat[j] = orig + eps
        fp = float(f().data)
        flat[j] = orig - eps
        fm = float(f().data)
        flat[j] = orig
        pairs.setdefault(i, []).append((analytic[i].reshape(-1)[j], (fp - fm) / (2 * eps)))

    worst = 0.0
    for got in pairs.values():
        a, fd = np.array(got).T
        if per_tensor:
            worst = max(worst, float(np.linalg.norm(a - fd) / (np.linalg.norm(a) + 1e-8)))
        else:
            worst = max(worst, float(np.max(np.abs(a - fd) / (np.abs(a) + 1e-8))))
    return worst
