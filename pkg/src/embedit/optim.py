"""Gradient-step rules for the edited embedding rows."""

from __future__ import annotations

import numpy as np


class Adam:
    """Adaptive-moment step over one parameter block (beta1=0.9, beta2=0.999)."""

    def __init__(self, shape: tuple[int, ...], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


class Sgd:
    """Plain gradient descent."""

    def __init__(self, shape: tuple[int, ...], lr: float):
        self.lr = lr

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        return params - self.lr * grad


def make_optimizer(kind: str, shape: tuple[int, ...], lr: float):
    if kind == "adam":
        return Adam(shape, lr)
    if kind == "sgd":
        return Sgd(shape, lr)
    raise ValueError(f"unknown optimizer {kind!r}")
