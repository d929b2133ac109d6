"""Adam with optional decoupled weight decay, operating on named numpy arrays."""
from __future__ import annotations

from typing import Callable, Mapping

import numpy as np


class Adam:
    """Adam over a dict of parameter arrays, updated in place.

    ``weight_decay`` is decoupled (applied directly to the weights, scaled by
    ``lr``) and only touches parameters for which ``decay_filter(name)`` is
    true.  Moments are kept in float64 so results do not depend on the
    storage precision of the parameters.
    """

    def __init__(self, lr: float = 1e-3, betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0,
                 decay_filter: Callable[[str], bool] | None = None):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.decay_filter = decay_filter or (lambda name: True)
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            g = np.asarray(g, dtype=np.float64)
            m = self._m.get(name)
            if m is None:
                m = self._m[name] = np.zeros_like(g)
                self._v[name] = np.zeros_like(g)
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p = params[name].astype(np.float64)
            if self.weight_decay and self.decay_filter(name):
                p -= self.lr * self.weight_decay * p
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            params[name] = p.astype(params[name].dtype)
