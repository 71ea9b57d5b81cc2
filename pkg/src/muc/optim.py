"""Adam with bias correction, plus global-norm clipping."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class NonFiniteGradient(FloatingPointError):
    """Raised when a step is rejected because a gradient holds NaN or inf."""


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


class Adam:
    def __init__(self, params: list[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 names: list[str] | None = None):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = list(params)
        self.names = names or [f"param{i}" for i in range(len(self.params))]
        self.state = AdamState(lr, betas[0], betas[1], eps, 0,
                               [np.zeros_like(p.data) for p in self.params],
                               [np.zeros_like(p.data) for p in self.params])

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        bad = [n for n, g in zip(self.names, grads) if not np.all(np.isfinite(g))]
        if bad:
            raise NonFiniteGradient(f"non-finite gradient in {', '.join(bad[:5])}; step rejected")
        adam_step(self.params, grads, self.state, lr)


def adam_step(params: list[Tensor], grads: list[np.ndarray], state: AdamState,
              lr: float | None = None) -> None:
    """Apply one bias-corrected Adam update in place."""
    lr = state.lr if lr is None else lr
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    for p, g in zip(params, grads):
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        m = state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        v = state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * (g * g)
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - update).astype(p.dtype, copy=False)


def clip_grad_norm(params: list[Tensor], max_norm: float) -> float:
    """Rescale gradients so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    total = float(np.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum())
                              for p in params if p.grad is not None)))
    if np.isfinite(total) and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total
