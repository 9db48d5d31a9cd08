"""Central finite-difference gradient checks."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5,
               eps: float = 1e-12, max_entries: int | None = None,
               rng: np.random.Generator | None = None) -> float:
    """Max relative error between autograd and central differences.

    ``f`` rebuilds the scalar loss from the current parameter values. The error
    for one entry is ``|a - n| / (|a| + |n| + eps)``. ``max_entries`` limits the
    number of perturbed entries per parameter (chosen with ``rng``).
    """
    for p in params:
        p.grad = None
    loss = f()
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            up = f().item()
            flat[i] = orig - step
            down = f().item()
            flat[i] = orig
            num = (up - down) / (2 * step)
            a = ga.reshape(-1)[i]
            err = abs(a - num) / (abs(a) + abs(num) + eps)
            worst = max(worst, err)
    return float(worst)


def input_grad_check(f: Callable[[Tensor], Tensor], x: np.ndarray, **kw) -> float:
    """Gradient check with respect to an input array rather than parameters."""
    xt = Tensor(x, requires_grad=True)
    return grad_check(lambda: f(xt), [xt], **kw)
