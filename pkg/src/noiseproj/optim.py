"""Adam optimizer and global gradient-norm clipping."""

from __future__ import annotations

import numpy as np


class Adam:
    """Standard Adam with bias correction and optional decoupled weight
    decay; ``step`` clears gradients after applying the update.
    """

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise ValueError(f"Adam.step: parameter {i} has no gradient")
            g = p.grad
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g
            m_hat = self.m[i] / bc1
            v_hat = self.v[i] / bc2
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            if self.weight_decay:
                # decoupled decay: not routed through the moment estimates
                p.data = p.data - self.lr * self.weight_decay * p.data
            p.grad = None

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def clip_grad_norm(params, max_norm):
    """Scale all gradients uniformly so their global L2 norm is <= max_norm.

    Returns the pre-clip norm. No-op when already within bound.
    """
    params = list(params)
    total = 0.0
    for p in params:
        if p.grad is None:
            raise ValueError("clip_grad_norm: parameter has no gradient")
        total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for p in params:
            p.grad = p.grad * scale
    return norm
