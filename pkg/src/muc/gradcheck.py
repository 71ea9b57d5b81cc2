"""Central finite-difference checks for scalar losses of model parameters."""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import Tensor


def relative_error(a: float, b: float, floor: float = 1e-6) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def check_params(loss_fn: Callable[[], Tensor], params: list[Tensor], n: int = 10,
                 rng: np.random.Generator | None = None, h: float = 1e-5) -> list[float]:
    """Compare analytic gradients of ``loss_fn()`` at ``n`` random parameter entries
    with ``(f(p + h) - f(p - h)) / 2h``. Returns the relative error per entry.

    ``loss_fn`` must be deterministic; all tensors should be float64.
    """
    rng = rng or np.random.default_rng(0)
    for p in params:
        p.grad = None
    T.backward(loss_fn())
    sizes = np.array([p.size for p in params])
    errors = []
    for _ in range(n):
        i = rng.choice(len(params), p=sizes / sizes.sum())
        p = params[i]
        flat = int(rng.integers(p.size))
        idx = np.unravel_index(flat, p.shape)
        analytic = 0.0 if p.grad is None else float(p.grad[idx])
        orig = p.data[idx]
        p.data[idx] = orig + h
        with T.no_grad():
            up = loss_fn().item()
        p.data[idx] = orig - h
        with T.no_grad():
            down = loss_fn().item()
        p.data[idx] = orig
        errors.append(relative_error(analytic, (up - down) / (2 * h)))
    return errors


def check_inputs(fn: Callable[[Tensor], Tensor], x: np.ndarray, h: float = 1e-5) -> float:
    """Max relative error of d(sum(fn(x) * probe))/dx against finite differences."""
    rng = np.random.default_rng(1)
    with T.use_dtype(np.float64):
        xt = Tensor(np.array(x, dtype=np.float64), requires_grad=True)
        probe = rng.standard_normal(fn(Tensor(x.astype(np.float64))).shape)
        (fn(xt) * probe).sum().backward()
        worst = 0.0
        for idx in np.ndindex(*x.shape):
            xp = np.array(x, dtype=np.float64)
            xm = xp.copy()
            xp[idx] += h
            xm[idx] -= h
            num = ((fn(Tensor(xp)).data - fn(Tensor(xm)).data) * probe).sum() / (2 * h)
            worst = max(worst, relative_error(float(xt.grad[idx]), float(num)))
    return worst
