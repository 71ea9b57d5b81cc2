"""Connectionist temporal classification loss via the forward-backward recursion."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


def min_frames(labels: Sequence[int]) -> int:
    """Shortest input that can emit ``labels``: one frame per label plus a blank between repeats."""
    labels = list(labels)
    repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return len(labels) + repeats


def _extend(labels: Sequence[int], blank: int) -> np.ndarray:
    ext = np.full(2 * len(labels) + 1, blank, dtype=np.int64)
    ext[1::2] = labels
    return ext


def _log_softmax(x: np.ndarray) -> np.ndarray:
    x = x - x.max(axis=-1, keepdims=True)
    return x - np.log(np.exp(x).sum(axis=-1, keepdims=True))


def _lse3(a, b, c):
    m = np.maximum(np.maximum(a, b), c)
    m_safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return m_safe + np.log(np.exp(a - m_safe) + np.exp(b - m_safe) + np.exp(c - m_safe))


def _shift(v: np.ndarray, k: int) -> np.ndarray:
    """Shift right by ``k`` (left if negative), filling with -inf."""
    out = np.full_like(v, -np.inf)
    if k > 0:
        out[k:] = v[:-k]
    else:
        out[:k] = v[-k:]
    return out


def forward_backward(log_probs: np.ndarray, labels: Sequence[int], blank: int):
    """Return (log-likelihood, log-alpha, log-beta) over the blank-extended label lattice."""
    n_t = log_probs.shape[0]
    ext = _extend(labels, blank)
    S = len(ext)
    emit = log_probs[:, ext]  # (T, S)
    skip = np.zeros(S, dtype=bool)
    skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])
    neg = -np.inf

    alpha = np.full((n_t, S), neg)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, n_t):
        prev = alpha[t - 1]
        one = _shift(prev, 1)
        two = np.where(skip, _shift(prev, 2), neg)
        alpha[t] = _lse3(prev, one, two) + emit[t]

    beta = np.full((n_t, S), neg)
    beta[-1, -1] = emit[-1, -1]
    if S > 1:
        beta[-1, -2] = emit[-1, -2]
    skip_next = np.zeros(S, dtype=bool)
    skip_next[:-2] = skip[2:]
    for t in range(n_t - 2, -1, -1):
        nxt = beta[t + 1]
        one = _shift(nxt, -1)
        two = np.where(skip_next, _shift(nxt, -2), neg)
        beta[t] = _lse3(nxt, one, two) + emit[t]

    tail = alpha[-1, -1] if S == 1 else np.logaddexp(alpha[-1, -1], alpha[-1, -2])
    return float(tail), alpha, beta


def ctc_loss(logits, labels: Sequence[int], blank: int | None = None) -> Tensor:
    """Negative log-likelihood of ``labels`` under per-frame ``logits`` of shape (T, V + 1).

    ``blank`` defaults to the last class. The returned scalar is differentiable
    with respect to ``logits``.
    """
    logits = logits if isinstance(logits, Tensor) else Tensor(np.asarray(logits, dtype=np.float64))
    x = logits.data.astype(np.float64)
    n_t, n_cls = x.shape
    blank = n_cls - 1 if blank is None else blank
    labels = [int(c) for c in labels]
    if any(c < 0 or c >= n_cls or c == blank for c in labels):
        raise ValueError(f"label outside vocabulary of {n_cls - 1} symbols")
    if min_frames(labels) > n_t:
        raise ValueError(f"transcript of length {len(labels)} infeasible in {n_t} frames")
    lp = _log_softmax(x)
    ll, alpha, beta = forward_backward(lp, labels, blank)
    ext = _extend(labels, blank)

    def bw(g):
        gamma = alpha + beta - lp[:, ext]
        post = np.zeros_like(lp)
        occ = np.exp(gamma - ll)
        np.add.at(post, (slice(None), ext), occ)
        return ((g * (np.exp(lp) - post)).astype(logits.dtype),)

    return T.record(np.asarray(-ll, dtype=logits.dtype), (logits,), bw, "ctc")
