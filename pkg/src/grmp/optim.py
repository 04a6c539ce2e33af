"""First-order optimizers over :class:`ParameterStore` entries.

Each ``step`` returns a new store; optimizer moments live on the optimizer.
"""

from __future__ import annotations

from typing import Mapping

import numpy as np

from .params import ParameterStore


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, store: ParameterStore, grads: Mapping[str, np.ndarray],
             lr: float | None = None) -> ParameterStore:
        lr = self.lr if lr is None else lr
        return store.replace({k: store[k] - lr * g for k, g in grads.items()})


class Adam:
    """Adam; with ``weight_decay > 0`` the decay is decoupled (AdamW)."""

    def __init__(self, lr: float, betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, store: ParameterStore, grads: Mapping[str, np.ndarray],
             lr: float | None = None) -> ParameterStore:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        updates = {}
        for k, g in grads.items():
            m = self.beta1 * self.m.get(k, 0.0) + (1.0 - self.beta1) * g
            v = self.beta2 * self.v.get(k, 0.0) + (1.0 - self.beta2) * g * g
            self.m[k], self.v[k] = m, v
            theta = store[k]
            if self.weight_decay:
                theta = theta * (1.0 - lr * self.weight_decay)
            updates[k] = theta - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return store.replace(updates)


def AdamW(lr: float, weight_decay: float = 0.01, **kw) -> Adam:
    return Adam(lr, weight_decay=weight_decay, **kw)
