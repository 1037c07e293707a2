"""Transformer building blocks on top of the numerics engine."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .numerics import (
    Tensor,
    concat,
    embedding,
    gelu,
    get_default_dtype,
    layer_norm,
    linear,
    scaled_dot_attention,
)
from .numerics.checkpoint import load_checkpoint, save_checkpoint


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, name: str | None = None):
        super().__init__(np.asarray(data, dtype=get_default_dtype()), requires_grad=True, name=name)


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> Parameter:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return Parameter(rng.uniform(-a, a, size=(fan_in, fan_out)))


def normal_embedding(rng: np.random.Generator, n: int, d: int, std: float = 0.02) -> Parameter:
    return Parameter(rng.normal(0.0, std, size=(n, d)))


class Module:
    """Parameter container; attribute insertion order fixes parameter order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> dict[str, Parameter]:
        return dict(self.named_parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = self.parameters()
        if strict:
            missing = sorted(set(params) - set(state))
            unexpected = sorted(set(state) - set(params))
            if missing or unexpected:
                raise KeyError(f"state mismatch: missing={missing[:3]} unexpected={unexpected[:3]}")
        for k, p in params.items():
            if k not in state:
                continue
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {k}: {arr.shape} vs {p.shape}")
            p.data = arr.astype(p.data.dtype, copy=True)

    def save(self, path) -> None:
        save_checkpoint(path, self.state_dict())

    def load(self, path, strict: bool = True) -> None:
        self.load_state_dict(load_checkpoint(path), strict=strict)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = xavier_uniform(rng, d_in, d_out)
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class Embedding(Module):
    def __init__(self, n: int, d: int, rng: np.random.Generator):
        self.weight = normal_embedding(rng, n, d)

    def forward(self, ids) -> Tensor:
        return embedding(self.weight, ids)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(d))
        self.beta = Parameter(np.zeros(d))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)


class FeedForward(Module):
    def __init__(self, d: int, d_ff: int, rng: np.random.Generator):
        self.fc1 = Linear(d, d_ff, rng)
        self.fc2 = Linear(d_ff, d, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


class MultiHeadAttention(Module):
    def __init__(self, d: int, n_heads: int, rng: np.random.Generator):
        if d % n_heads:
            raise ValueError(f"width {d} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng)
        self.v = Linear(d, d, rng)
        self.o = Linear(d, d, rng)
        self.last_weights: np.ndarray | None = None

    def _split(self, x: Tensor) -> Tensor:
        B, L, d = x.shape
        return x.reshape(B, L, self.n_heads, d // self.n_heads).transpose(0, 2, 1, 3)

    def _merge(self, x: Tensor) -> Tensor:
        B, H, L, dh = x.shape
        return x.transpose(0, 2, 1, 3).reshape(B, L, H * dh)

    def forward(self, x: Tensor, context: Tensor | None = None,
                mask: np.ndarray | None = None, cache: dict | None = None) -> Tensor:
        """Self-attention when ``context`` is None, else cross-attention.

        ``cache`` enables incremental decoding: self-attention appends the new
        keys/values, cross-attention projects the context once.
        """
        q = self._split(self.q(x))
        if context is None:
            k, v = self._split(self.k(x)), self._split(self.v(x))
            if cache is not None:
                if "k" in cache:
                    k = concat([cache["k"], k], axis=2)
                    v = concat([cache["v"], v], axis=2)
                cache["k"], cache["v"] = k, v
        elif cache is not None and "k" in cache:
            k, v = cache["k"], cache["v"]
        else:
            k, v = self._split(self.k(context)), self._split(self.v(context))
            if cache is not None:
                cache["k"], cache["v"] = k, v
        out, w = scaled_dot_attention(q, k, v, mask)
        self.last_weights = w
        return self.o(self._merge(out))


class EncoderLayer(Module):
    """Pre-norm self-attention + feed-forward block."""

    def __init__(self, d: int, n_heads: int, rng: np.random.Generator, d_ff: int | None = None):
        self.ln1 = LayerNorm(d)
        self.attn = MultiHeadAttention(d, n_heads, rng)
        self.ln2 = LayerNorm(d)
        self.ffn = FeedForward(d, d_ff or 4 * d, rng)

    def forward(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        x = x + self.attn(self.ln1(x), mask=mask)
        return x + self.ffn(self.ln2(x))


class DecoderLayer(Module):
    """Pre-norm causal self-attention, cross-attention and feed-forward."""

    def __init__(self, d: int, n_heads: int, rng: np.random.Generator, d_ff: int | None = None):
        self.ln1 = LayerNorm(d)
        self.self_attn = MultiHeadAttention(d, n_heads, rng)
        self.ln2 = LayerNorm(d)
        self.cross_attn = MultiHeadAttention(d, n_heads, rng)
        self.ln3 = LayerNorm(d)
        self.ffn = FeedForward(d, d_ff or 4 * d, rng)

    def forward(self, x: Tensor, memory: Tensor, self_mask: np.ndarray | None,
                memory_mask: np.ndarray | None, cache: dict | None = None) -> Tensor:
        self_cache = cross_cache = None
        if cache is not None:
            self_cache = cache.setdefault("self", {})
            cross_cache = cache.setdefault("cross", {})
        x = x + self.self_attn(self.ln1(x), mask=self_mask, cache=self_cache)
        x = x + self.cross_attn(self.ln2(x), context=memory, mask=memory_mask, cache=cross_cache)
        return x + self.ffn(self.ln3(x))


def key_mask(valid: np.ndarray) -> np.ndarray:
    """(B, L) validity -> (B, 1, 1, L) attention mask over keys."""
    return np.asarray(valid, dtype=bool)[:, None, None, :]


def causal_mask(T: int) -> np.ndarray:
    return np.tril(np.ones((T, T), dtype=bool))
