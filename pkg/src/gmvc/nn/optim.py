"""Adam optimizer over a ParamStore."""

from __future__ import annotations

import numpy as np

from gmvc.nn.params import ParamStore


class Adam:
    """Standard Adam with bias correction.

    Moments live alongside the store entries (same names, same shapes)
    and are part of checkpoints so that resumed runs continue
    bit-identically. ``step`` zeroes all gradients afterwards.
    """

    def __init__(self, store: ParamStore, lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.store = store
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in store.entries.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in store.entries.items()}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for name, p in self.store.entries.items():
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
        self.store.zero_grads()


def adam_step(store: ParamStore, optimizer: Adam) -> ParamStore:
    """Single update; gradients must be populated, and end up zeroed."""
    optimizer.step()
    return store
