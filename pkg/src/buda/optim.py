"""SGD with momentum and polynomial decay, and Adam."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import ScheduleExhausted
from .tensor import Tensor


def poly_lr(base_lr: float, it: int, max_iter: int, power: float) -> float:
    return base_lr * (1.0 - it / max_iter) ** power


class SGDPoly:
    def __init__(self, params: Sequence[Tensor], base_lr: float = 1e-2, max_iter: int = 1000,
                 power: float = 0.9, momentum: float = 0.9, weight_decay: float = 1e-4):
        self.params = list(params)
        self.base_lr = base_lr
        self.max_iter = int(max_iter)
        self.power = power
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]
        self.iter = 0

    @property
    def lr(self) -> float:
        return poly_lr(self.base_lr, self.iter, self.max_iter, self.power)

    def step(self, grads: Sequence[np.ndarray] | None = None) -> None:
        if self.iter >= self.max_iter:
            raise ScheduleExhausted(f"iteration {self.iter} >= max_iter {self.max_iter}")
        lr = self.lr
        grads = grads if grads is not None else [p.grad for p in self.params]
        for p, v, g in zip(self.params, self.velocity, grads):
            if g is None:
                continue
            v *= self.momentum
            v -= lr * (g + self.weight_decay * p.data)
            p.data = p.data + v
        self.iter += 1


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 2e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.step_count = 0

    def step(self, grads: Sequence[np.ndarray] | None = None) -> None:
        grads = grads if grads is not None else [p.grad for p in self.params]
        self.step_count += 1
        c1 = 1.0 - self.beta1 ** self.step_count
        c2 = 1.0 - self.beta2 ** self.step_count
        for p, m, v, g in zip(self.params, self.m, self.v, grads):
            if g is None:
                continue
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
