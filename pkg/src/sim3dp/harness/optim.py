"""Adam with cosine learning-rate decay over a fixed number of steps."""
from __future__ import annotations

import math

import numpy as np


def cosine_lr(base: float, step: int, total: int, warmup: int = 0) -> float:
    if warmup and step < warmup:
        return base * (step + 1) / warmup
    if total <= warmup:
        return base
    frac = min(1.0, (step - warmup) / (total - warmup))
    return base * 0.5 * (1.0 + math.cos(math.pi * frac))


class Adam:
    def __init__(self, params: dict, lr: float, total_steps: int, betas=(0.9, 0.999),
                 eps: float = 1e-8, warmup: int = 0):
        self.params = params
        self.lr = lr
        self.total_steps = total_steps
        self.b1, self.b2 = betas
        self.eps = eps
        self.warmup = warmup
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def current_lr(self) -> float:
        return cosine_lr(self.lr, self.t, self.total_steps, self.warmup)

    def step(self) -> None:
        lr = self.current_lr()
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            if not p.trainable or p.grad is None:
                continue
            g = p.grad
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            p.data = p.data - lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)

    def state(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}

    def load_state(self, state: dict) -> None:
        self.t = int(state["t"])
        for k in self.params:
            self.m[k] = np.array(state["m"][k], dtype=np.float64)
            self.v[k] = np.array(state["v"][k], dtype=np.float64)


def zero_grads(params: dict) -> None:
    for p in params.values():
        p.grad = None

