"""Adam and the warm-up/linear-decay learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ContractError, Tensor


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


class Adam:
    """Bias-corrected Adam over a name -> parameter mapping."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.state = AdamState(
            m={k: np.zeros_like(p.data) for k, p in self.params.items()},
            v={k: np.zeros_like(p.data) for k, p in self.params.items()},
        )

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self, lr: float | None = None) -> None:
        missing = [k for k, p in self.params.items() if p.grad is None]
        if missing:
            raise ContractError(f"no gradient for {len(missing)} parameter(s), e.g. {missing[0]!r}")
        lr = self.lr if lr is None else lr
        st = self.state
        st.step += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** st.step
        c2 = 1.0 - b2 ** st.step
        for k, p in self.params.items():
            g = p.grad
            m = st.m[k]
            v = st.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.data.dtype, copy=False)
            p.grad = None


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """Functional form of one Adam update; mutates ``params`` and ``state``."""
    opt = Adam(params, lr=lr, betas=(beta1, beta2), eps=eps)
    for k, p in params.items():
        state.m.setdefault(k, np.zeros_like(p.data))
        state.v.setdefault(k, np.zeros_like(p.data))
    opt.state = state
    opt.step()
    return state


def warmup_linear_lr(step: int, total_steps: int, peak_lr: float,
                     warmup_fraction: float = 0.10) -> float:
    """Linear ramp 0 -> peak over the warm-up steps, then linear decay to 0."""
    if step < 0 or step > total_steps or total_steps <= 0:
        return 0.0
    warmup = round(warmup_fraction * total_steps, 9)
    if warmup > 0 and step <= warmup:
        return peak_lr * step / warmup
    return peak_lr * (total_steps - step) / (total_steps - warmup)
