from __future__ import annotations

from typing import Iterable

import numpy as np

from .tensor import StateError, Tensor


def sgd_step(params: Iterable[Tensor], lr: float, weight_decay: float = 0.0) -> None:
    """In-place ``p <- p - lr * (grad + weight_decay * p)``, then clear grads.

    Raises StateError if any parameter has no gradient.
    """
    params = list(params)
    for i, p in enumerate(params):
        if p.grad is None:
            label = p.name or f"#{i}"
            raise StateError(f"parameter {label} has no gradient")
    for p in params:
        new = p.data - lr * (p.grad + weight_decay * p.data)
        new.setflags(write=False)
        p.data = new
        p.grad = None


class SGD:
    """Stochastic gradient descent with optional heavy-ball momentum.

    With ``momentum=0`` and no clipping each ``step`` is exactly
    :func:`sgd_step`.  ``clip_norm`` rescales the joint gradient so its
    global L2 norm does not exceed the bound.
    """

    def __init__(self, params: Iterable[Tensor], lr: float, weight_decay: float = 0.0,
                 momentum: float = 0.0, clip_norm: float | None = None):
        if clip_norm is not None and clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.momentum = momentum
        self.clip_norm = clip_norm
        self._velocity: list[np.ndarray | None] = [None] * len(self.params)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in self.params if p.grad is not None)))

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise StateError(f"parameter {p.name or i} has no gradient")
        scale = 1.0
        if self.clip_norm is not None:
            norm = self.grad_norm()
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
        if self.momentum == 0.0 and scale == 1.0:
            sgd_step(self.params, self.lr, self.weight_decay)
            return
        for i, p in enumerate(self.params):
            d = scale * p.grad + self.weight_decay * p.data
            v = d if self._velocity[i] is None else self.momentum * self._velocity[i] + d
            self._velocity[i] = v
            new = p.data - self.lr * v
            new.setflags(write=False)
            p.data = new
            p.grad = None
