"""Central finite-difference oracle for tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


def numerical_grad(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], h: float = 1e-5) -> list[np.ndarray]:
    """d fn / d arrays[i] by central differences; ``fn`` must return a scalar."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    grads = []
    with no_grad():
        for i, a in enumerate(arrays):
            g = np.zeros_like(a)
            flat = a.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + h
                fp = fn(*[Tensor(x) for x in arrays]).item()
                flat[j] = orig - h
                fm = fn(*[Tensor(x) for x in arrays]).item()
                flat[j] = orig
                g.reshape(-1)[j] = (fp - fm) / (2 * h)
            grads.append(g)
    return grads


def tape_grad(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray]) -> list[np.ndarray]:
    inputs = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*inputs)
    out.backward()
    return [np.zeros(t.shape) if t.grad is None else t.grad for t in inputs]


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """``||a - b|| / max(||a||, ||b||)``, 0 when both vanish."""
    num = float(np.linalg.norm(np.ravel(a) - np.ravel(b)))
    den = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)))
    if den < 1e-12:
        return num
    return num / den


def gradcheck(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], h: float = 1e-5) -> float:
    """Largest relative error between tape and finite-difference gradients."""
    analytic = tape_grad(fn, arrays)
    numeric = numerical_grad(fn, arrays, h)
    return max(relative_error(a, n) for a, n in zip(analytic, numeric))
