"""Stochastic gradient descent with momentum and weight decay."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor

__all__ = ["sgd_step", "SGD"]


def sgd_step(param: np.ndarray, grad: np.ndarray, velocity, lr: float,
             momentum: float = 0.0, weight_decay: float = 0.0) -> np.ndarray:
    """One update in place: v <- m*v + g + wd*p; p <- p - lr*v.  Returns v."""
    if param.shape != grad.shape:
        raise ValueError(f"param shape {param.shape} != grad shape {grad.shape}")
    if velocity is None:
        velocity = np.zeros_like(param)
    step = grad if weight_decay == 0.0 else grad + weight_decay * param
    velocity *= momentum
    velocity += step
    param -= lr * velocity
    return velocity


class SGD:
    """Holds one velocity buffer per named parameter."""

    def __init__(self, params: dict, lr: float, momentum: float = 0.0,
                 weight_decay: float = 0.0):
        self.params = params
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.velocity = {name: None for name in params}

    def step(self):
        for name, p in self.params.items():
            if p.grad is None:
                continue
            self.velocity[name] = sgd_step(
                p.data, p.grad, self.velocity[name],
                self.lr, self.momentum, self.weight_decay)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


def _tensor_params(params: dict) -> dict:
    return {k: v for k, v in params.items() if isinstance(v, Tensor)}
