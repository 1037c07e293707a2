"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numeric_grad(f: Callable[[], Tensor], t: Tensor, h: float = 1e-5) -> np.ndarray:
    flat = t.data.reshape(-1)
    grad = np.zeros_like(flat, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(f().data)
        flat[i] = orig - h
        down = float(f().data)
        flat[i] = orig
        grad[i] = (up - down) / (2 * h)
    return grad.reshape(t.shape)


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-8)
    return float(np.abs(a - b).max(initial=0.0) / denom)


def gradcheck(f: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-5,
              joint: bool = False) -> float:
    """Largest relative error between analytic and numeric gradients of ``f``.

    Inputs should be float64 tensors with ``requires_grad`` set; ``f`` must
    rebuild the graph on every call. With ``joint`` the error is measured
    against the largest gradient over all inputs, which suits whole models
    where some parameters (e.g. attention key biases) have zero gradient.
    """
    for t in inputs:
        t.grad = None
    f().backward()
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]
    numeric = [numeric_grad(f, t, h) for t in inputs]
    if joint:
        return relative_error(np.concatenate([a.ravel() for a in analytic]),
                              np.concatenate([n.ravel() for n in numeric]))
    return max((relative_error(a, n) for a, n in zip(analytic, numeric)), default=0.0)
