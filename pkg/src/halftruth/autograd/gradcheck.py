"""Central finite-difference gradient checking."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, no_grad


def rel_err(a, n):
    a, n = np.asarray(a, dtype=np.float64), np.asarray(n, dtype=np.float64)
    return np.abs(a - n) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))


def grad_check(f, inputs, eps: float = 1e-5, max_coords: int | None = None, rng=None) -> float:
    """Max relative error between analytic and numeric gradients of scalar ``f``.

    ``inputs`` are arrays (cast to float64) or float64 Tensors; ``f`` takes
    one Tensor per input and returns a scalar Tensor. With ``max_coords``
    only that many randomly chosen coordinates per input are perturbed.
    The error measure is ``|a - n| / max(1, |a|, |n|)``.
    """
    tensors = [
        t if isinstance(t, Tensor) else Tensor(np.array(t, dtype=np.float64), requires_grad=True) for t in inputs
    ]
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    loss = f(*tensors)
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]

    rng = rng if rng is not None else np.random.default_rng(0)
    worst = 0.0
    with no_grad():
        for t, a in zip(tensors, analytic):
            flat = t.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = rng.choice(flat.size, size=max_coords, replace=False)
            for i in coords:
                orig = flat[i]
                flat[i] = orig + eps
                hi = float(f(*tensors).data)
                flat[i] = orig - eps
                lo = float(f(*tensors).data)
                flat[i] = orig
                num = (hi - lo) / (2 * eps)
                worst = max(worst, float(rel_err(a.reshape(-1)[i], num)))
    return worst
