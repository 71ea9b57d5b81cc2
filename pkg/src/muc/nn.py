"""Neural network layers built on :mod:`muc.tensor`.

Layouts are time-major throughout: sequences are ``(batch, time, channels)``.
"""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


def parameter(values: np.ndarray) -> Tensor:
    return Tensor(np.asarray(values, dtype=T.default_dtype()), requires_grad=True)


class Module:
    """Container that discovers parameters among its attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, val in vars(self).items():
            if isinstance(val, Tensor):
                if val.requires_grad:
                    yield prefix + name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{name}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in own.items():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=p.dtype)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def n_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True,
                 scale: float = 1.0):
        bound = scale / math.sqrt(d_in)
        self.weight = parameter(rng.uniform(-bound, bound, (d_in, d_out)))
        self.bias = parameter(np.zeros(d_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5, affine: bool = True):
        self.eps = eps
        self.weight = parameter(np.ones(dim)) if affine else None
        self.bias = parameter(np.zeros(dim)) if affine else None

    def forward(self, x: Tensor) -> Tensor:
        y = T.normalize(x, -1, self.eps)
        if self.weight is not None:
            y = y * self.weight + self.bias
        return y


class GroupNorm(Module):
    """Group normalisation over (time, channels-in-group) for (B, T, C) input."""

    def __init__(self, groups: int, dim: int, eps: float = 1e-5):
        if dim % groups:
            raise ValueError(f"{dim} channels not divisible into {groups} groups")
        self.groups = groups
        self.eps = eps
        self.weight = parameter(np.ones(dim))
        self.bias = parameter(np.zeros(dim))

    def forward(self, x: Tensor) -> Tensor:
        B, L, C = x.shape
        g = x.reshape(B, L, self.groups, C // self.groups)
        y = T.normalize(g, (1, 3), self.eps).reshape(B, L, C)
        return y * self.weight + self.bias


class Conv1d(Module):
    """Time convolution. ``padding='same'`` keeps length at stride 1 and gives
    ceil(T / stride) frames otherwise."""

    def __init__(self, d_in: int, d_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: str = "same"):
        bound = 1.0 / math.sqrt(d_in * kernel)
        self.weight = parameter(rng.uniform(-bound, bound, (kernel, d_in, d_out)))
        self.bias = parameter(np.zeros(d_out))
        self.kernel, self.stride = kernel, stride
        if padding == "same":
            total = kernel - 1
            self.pad = (total // 2, total - total // 2)
        elif padding == "valid":
            self.pad = (0, 0)
        else:
            raise ValueError(f"unknown padding {padding!r}")

    def forward(self, x: Tensor) -> Tensor:
        return T.conv1d(x, self.weight, self.stride, self.pad) + self.bias


class DepthwiseConv1d(Module):
    def __init__(self, dim: int, kernel: int, rng: np.random.Generator):
        if kernel % 2 == 0:
            raise ValueError("depthwise kernel must be odd")
        bound = 1.0 / math.sqrt(kernel)
        self.weight = parameter(rng.uniform(-bound, bound, (kernel, dim)))
        self.bias = parameter(np.zeros(dim))
        self.pad = (kernel // 2, kernel // 2)

    def forward(self, x: Tensor) -> Tensor:
        return T.depthwise_conv1d(x, self.weight, self.pad) + self.bias


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int, mask: np.ndarray | None = None,
              return_weights: bool = False):
    """Scaled dot-product attention split across ``heads``.

    q: (B, Tq, D), k/v: (B, Tk, D). ``mask`` is a boolean (Tq, Tk) or
    (B, 1, Tq, Tk) array, True where attending is allowed.
    """
    B, Tq, D = q.shape
    Tk = k.shape[1]
    if D % heads:
        raise ValueError(f"model dim {D} not divisible by {heads} heads")
    dh = D // heads
    qh = q.reshape(B, Tq, heads, dh).transpose(0, 2, 1, 3)
    kh = k.reshape(B, Tk, heads, dh).transpose(0, 2, 3, 1)
    vh = v.reshape(B, Tk, heads, dh).transpose(0, 2, 1, 3)
    scores = (qh @ kh) * (1.0 / math.sqrt(dh))
    if mask is not None:
        scores = T.where(mask, scores, np.finfo(scores.dtype).min / 2)
    w = T.softmax(scores, axis=-1)
    out = (w @ vh).transpose(0, 2, 1, 3).reshape(B, Tq, D)
    return (out, w) if return_weights else out


class MultiHeadAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ValueError(f"model dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)

    def forward(self, x: Tensor, context: Tensor | None = None, mask=None) -> Tensor:
        context = x if context is None else context
        y = attention(self.q(x), self.k(context), self.v(context), self.heads, mask)
        return self.out(y)


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, act: str = "silu"):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)
        self.act = {"silu": T.silu, "gelu": T.gelu}[act]

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(self.act(self.fc1(x)))


def sinusoid_table(n: int, dim: int) -> np.ndarray:
    """Fixed sinusoidal embeddings for integer positions ``0..n-1``."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    ang = np.arange(n)[:, None] * freqs[None]
    table = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if dim % 2:
        table = np.pad(table, ((0, 0), (0, 1)))
    return table
