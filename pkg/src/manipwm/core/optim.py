from __future__ import annotations

import numpy as np

from .nn import Parameter


class Adam:
    """Adam with decoupled weight decay and optional global-norm clipping."""

    def __init__(self, params: list[Parameter], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0, clip_norm: float | None = 1.0):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def grad_norm(self) -> float:
        total = 0.0
        for p in self.params:
            if p.grad is not None:
                total += float((p.grad.astype(np.float64) ** 2).sum())
        return float(np.sqrt(total))

    def step(self) -> float:
        self.t += 1
        norm = self.grad_norm()
        scale = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / (norm + 1e-12)
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad * scale
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = (p.data - self.lr * update).astype(p.data.dtype)
        return norm

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


class WeightAverage:
    """Exponential moving average of parameter values.

    The effective decay ramps up as ``(1 + n) / (10 + n)`` so the average is
    not anchored to the initial weights. :meth:`copy_to` writes it back.
    """

    def __init__(self, params, decay: float = 0.99):
        if not 0.0 < decay < 1.0:
            raise ValueError(f"decay must lie in (0, 1), got {decay}")
        self.params = list(params)
        self.decay = decay
        self.count = 0
        self.shadow = [p.data.astype(np.float64) for p in self.params]

    def update(self) -> None:
        d = min(self.decay, (1.0 + self.count) / (10.0 + self.count))
        self.count += 1
        for s, p in zip(self.shadow, self.params):
            s *= d
            s += (1.0 - d) * p.data

    def copy_to(self) -> None:
        for s, p in zip(self.shadow, self.params):
            p.data = s.astype(p.data.dtype)
