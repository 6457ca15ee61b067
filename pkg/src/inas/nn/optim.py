"""Optimizers: SGD with naive momentum, Adam, cosine learning-rate annealing."""
from __future__ import annotations

import math

import numpy as np

from .params import ParameterSet


class OptimizerError(RuntimeError):
    pass


def _check_finite(name: str, grad: np.ndarray) -> None:
    if not np.all(np.isfinite(grad)):
        raise OptimizerError(f"non-finite gradient for parameter {name!r}; step aborted")


class SGDMomentum:
    """Naive (non-Nesterov) momentum; classic weight decay added to the gradient."""

    def __init__(self, lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.step_count = 0
        self._velocity: dict[str, np.ndarray] = {}

    def step(self, params: ParameterSet) -> None:
        for name, p in params.items():
            if p.grad is None:
                continue
            _check_finite(name, p.grad)
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v = self._velocity.get(name)
            if v is None:
                v = np.zeros_like(p.data)
                self._velocity[name] = v
            v *= self.momentum
            v += g
            p.data -= self.lr * v
        self.step_count += 1


class Adam:
    """Standard bias-corrected Adam."""

    def __init__(self, lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, params: ParameterSet) -> None:
        b1, b2 = self.betas
        self.step_count += 1
        t = self.step_count
        for name, p in params.items():
            if p.grad is None:
                continue
            _check_finite(name, p.grad)
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m = self._m.setdefault(name, np.zeros_like(p.data))
            v = self._v.setdefault(name, np.zeros_like(p.data))
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1 ** t)
            vhat = v / (1 - b2 ** t)
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def cosine_annealing_lr(lr0: float, epoch: int, total_epochs: int) -> float:
    """lr0 * (1 + cos(pi * epoch / total)) / 2, epoch clamped to [0, total]."""
    if total_epochs < 1:
        raise ValueError(f"total_epochs must be >= 1, got {total_epochs}")
    e = min(max(epoch, 0), total_epochs)
    return lr0 * (1.0 + math.cos(math.pi * e / total_epochs)) / 2.0
