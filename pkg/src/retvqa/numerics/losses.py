"""Loss functions with fused backward passes."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, _result, as_tensor

BCE_CLAMP = 1e-7


def cross_entropy_logits(logits: Tensor, targets, ignore_id: int | None = None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under softmax(``logits``).

    ``logits`` has shape (..., V) and ``targets`` the leading shape. Positions
    equal to ``ignore_id`` contribute neither loss nor gradient.
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    V = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ValueError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    flat_t = targets.reshape(-1)
    keep = np.ones_like(flat_t, dtype=bool) if ignore_id is None else flat_t != ignore_id
    bad = keep & ((flat_t < 0) | (flat_t >= V))
    if bad.any():
        raise IndexError(f"target id {int(flat_t[bad][0])} outside vocabulary [0, {V})")

    z = logits.data.reshape(-1, V)
    n = int(keep.sum())
    dtype = logits.dtype
    if n == 0:
        def backward_empty(g):
            return (np.zeros_like(logits.data),)
        return _result(np.zeros((), dtype=dtype), (logits,), backward_empty)

    shifted = z - z.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.nonzero(keep)[0]
    loss = -logp[rows, flat_t[rows]].sum() / n

    def backward(g):
        grad = np.exp(logp)
        grad[rows, flat_t[rows]] -= 1.0
        grad[~keep] = 0.0
        grad *= g / n
        return (grad.reshape(logits.shape),)

    return _result(np.asarray(loss, dtype=dtype), (logits,), backward)


def bce(pred: Tensor, target) -> Tensor:
    """Mean binary cross-entropy; predictions clamped to [1e-7, 1 - 1e-7]."""
    pred = as_tensor(pred)
    s = np.broadcast_to(np.asarray(target, dtype=pred.dtype), pred.shape)
    p = np.clip(pred.data, BCE_CLAMP, 1.0 - BCE_CLAMP)
    n = max(pred.data.size, 1)
    loss = -(s * np.log(p) + (1.0 - s) * np.log1p(-p)).sum() / n
    inside = (pred.data > BCE_CLAMP) & (pred.data < 1.0 - BCE_CLAMP)

    def backward(g):
        return (g * inside * (p - s) / (p * (1.0 - p)) / n,)

    return _result(np.asarray(loss, dtype=pred.dtype), (pred,), backward)
