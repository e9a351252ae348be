"""Gradient-descent optimizers for the training loops.

Plain SGD is the default and keeps updates equal to lr * gradient; Adam is
available for configs that need faster convergence from a cold start.  State
is keyed by tensor name, so one optimizer instance can drive several
parameter tensors.
"""

from __future__ import annotations

import numpy as np


class Optimizer:
    def __init__(self, kind: str = "sgd", lr: float = 5e-5,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {kind!r}")
        self.kind = kind
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._t: dict[str, int] = {}

    def update(self, name: str, param: np.ndarray, grad: np.ndarray) -> None:
        """Apply one descent step to param in place."""
        if self.kind == "sgd":
            param -= self.lr * grad
            return
        m = self._m.setdefault(name, np.zeros_like(param))
        v = self._v.setdefault(name, np.zeros_like(param))
        t = self._t.get(name, 0) + 1
        self._t[name] = t
        m *= self.beta1
        m += (1 - self.beta1) * grad
        v *= self.beta2
        v += (1 - self.beta2) * grad * grad
        m_hat = m / (1 - self.beta1**t)
        v_hat = v / (1 - self.beta2**t)
        param -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
