"""Single-tensor optimizers used for per-sample prompt updates.

State lives on the instance; test-time tuning builds a new one per episode.
"""

from __future__ import annotations

import numpy as np


class AdamW:
    """Adam with decoupled weight decay.

    Update order matches the common reference implementation: decay the
    parameter by ``lr * weight_decay`` first, then take the bias-corrected
    moment step.
    """

    def __init__(self, lr=0.005, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = None
        self.v = None

    def step(self, param: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(param)
            self.v = np.zeros_like(param)
        self.t += 1
        p = param * (1.0 - self.lr * self.weight_decay)
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        return p - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


class GradientDescent:
    def __init__(self, lr=0.005):
        self.lr = lr

    def step(self, param: np.ndarray, grad: np.ndarray) -> np.ndarray:
        return param - self.lr * grad
