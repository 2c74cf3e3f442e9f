"""Momentum SGD and Adam over a named parameter collection."""

from __future__ import annotations

from typing import Mapping

import numpy as np

from ..errors import ContractError
from .tensor import Tensor


class SGD:
    """``v <- momentum * v - lr * g; p <- p + v``, then gradients are cleared.

    Velocity buffers are keyed by parameter name and created lazily as zeros.
    """

    def __init__(self, lr: float = 0.01, momentum: float = 0.9):
        if lr < 0 or not 0 <= momentum < 1:
            raise ValueError(f"invalid SGD settings lr={lr}, momentum={momentum}")
        self.lr = lr
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: Mapping[str, Tensor]) -> None:
        missing = [name for name, p in params.items() if p.grad is None]
        if missing:
            raise ContractError(f"missing gradients for: {', '.join(missing)}")
        for name, p in params.items():
            v = self.velocity.get(name)
            if v is None:
                v = np.zeros_like(p.data)
            v = self.momentum * v - self.lr * p.grad
            self.velocity[name] = v
            p.data += v
            p.grad = None

    def reset(self) -> None:
        self.velocity.clear()


class Adam:
    """Adam with bias correction and no weight decay; moments are keyed by name."""

    def __init__(self, lr: float = 0.001, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr < 0 or not 0 <= beta1 < 1 or not 0 <= beta2 < 1:
            raise ValueError(f"invalid Adam settings lr={lr}, betas=({beta1}, {beta2})")
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: Mapping[str, Tensor]) -> None:
        missing = [name for name, p in params.items() if p.grad is None]
        if missing:
            raise ContractError(f"missing gradients for: {', '.join(missing)}")
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for name, p in params.items():
            g = p.grad
            m = self.beta1 * self.m.get(name, 0.0) + (1 - self.beta1) * g
            v = self.beta2 * self.v.get(name, 0.0) + (1 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.grad = None

    def reset(self) -> None:
        self.m.clear()
        self.v.clear()
        self.t = 0


OPTIMIZERS = ("sgd", "adam")


def make_optimizer(name: str, lr: float, momentum: float = 0.9):
    if name == "sgd":
        return SGD(lr, momentum)
    if name == "adam":
        return Adam(lr)
    raise ValueError(f"unknown optimizer {name!r}; choose from {', '.join(OPTIMIZERS)}")
