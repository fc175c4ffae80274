"""Central-difference gradient verification."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..errors import NonFiniteError
from .tensor import Tape, Tensor, grad


def numeric_grad(loss_fn: Callable[[list[Tensor]], Tensor], params: Sequence[np.ndarray],
                 eps: float = 1e-5) -> list[np.ndarray]:
    """Central differences of ``loss_fn`` at ``params``, one coordinate at a time."""
    base = [np.array(p, dtype=np.float64) for p in params]

    def value(arrays) -> float:
        out = float(loss_fn([Tensor(a) for a in arrays]).data)
        if not np.isfinite(out):
            raise NonFiniteError("finite_diff_check: loss is not finite")
        return out

    value(base)
    result = []
    for k, p in enumerate(base):
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = value(base)
            flat[i] = orig - eps
            down = value(base)
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * eps)
        result.append(g)
    return result


def analytic_grad(loss_fn: Callable[[list[Tensor]], Tensor], params: Sequence[np.ndarray]) -> list[np.ndarray]:
    tape = Tape()
    leaves = [tape.watch(p) for p in params]
    out = loss_fn(leaves)
    return [g.numpy() for g in grad(out, leaves)]


def max_relative_error(analytic: Sequence[np.ndarray], numeric: Sequence[np.ndarray]) -> float:
    worst = 0.0
    for a, c in zip(analytic, numeric):
        if a.size == 0:
            continue
        denom = np.maximum(np.maximum(np.abs(a), np.abs(c)), 1e-12)
        worst = max(worst, float(np.max(np.abs(a - c) / denom)))
    return worst


def finite_diff_check(loss_fn: Callable[[list[Tensor]], Tensor], params: Sequence[np.ndarray],
                      eps: float = 1e-5) -> float:
    """Max over coordinates of ``|analytic - central| / max(|analytic|, |central|, 1e-12)``.

    ``loss_fn`` receives one Tensor per entry of ``params`` and must return
    a scalar.  An empty ``params`` list gives 0.0.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if len(params) == 0:
        return 0.0
    return max_relative_error(analytic_grad(loss_fn, params), numeric_grad(loss_fn, params, eps))
