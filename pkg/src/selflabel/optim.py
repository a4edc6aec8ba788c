"""Parameter updates for the tensor engine."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor


def zero_grads(params):
    for p in params:
        p.zero_grad()


class MomentumSGD:
    """SGD with classical momentum and polynomial learning-rate decay:

        lr_t = base_lr * (1 - t / total_steps) ** power
    """

    def __init__(self, params, base_lr: float, momentum: float = 0.9,
                 total_steps: int | None = None, power: float = 0.9):
        self.params = list(params)
        self.base_lr = base_lr
        self.momentum = momentum
        self.total_steps = total_steps
        self.power = power
        self.step_count = 0
        self._velocity = [np.zeros_like(p.data) for p in self.params]

    def current_lr(self) -> float:
        if not self.total_steps:
            return self.base_lr
        frac = min(self.step_count / self.total_steps, 1.0)
        return self.base_lr * (1.0 - frac) ** self.power

    def step(self):
        lr = self.current_lr()
        for p, v in zip(self.params, self._velocity):
            if p.grad is None:
                continue
            v *= self.momentum
            v += p.grad
            p.data -= lr * v
        self.step_count += 1


class Adam:
    def __init__(self, params, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.step_count
        bias2 = 1.0 - b2 ** self.step_count
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            m *= b1
            m += (1.0 - b1) * p.grad
            v *= b2
            v += (1.0 - b2) * p.grad ** 2
            p.data -= self.lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)
