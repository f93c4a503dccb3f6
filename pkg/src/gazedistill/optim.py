"""Adam with bias correction and a step-decay learning rate schedule."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class StepLr:
    """lr(epoch) = base_lr * gamma ** floor(epoch / step_size)."""

    base_lr: float
    step_size: int = 10
    gamma: float = 0.1

    def lr_at(self, epoch: int) -> float:
        if self.step_size <= 0:
            raise ValueError(f"step_size must be positive, got {self.step_size}")
        return self.base_lr * self.gamma ** (epoch // self.step_size)


class Adam:
    """Standard Adam. A parameter with grad None is treated as zero-gradient
    and therefore does not move (its moments stay at zero too)."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            if g is None:
                continue  # zero gradient: moments and parameter unchanged
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
