"""Central finite-difference oracles for the gradient suite.

These run in 64-bit regardless of the training precision; callers are
expected to build their inputs as float64 tensors.
"""

from __future__ import annotations

from collections.abc import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor


def numeric_grads(
    f: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    h: float = 1e-5,
) -> list[np.ndarray]:
    """Central differences of the scalar ``f()`` w.r.t. each tensor, elementwise.

    ``f`` must be deterministic: it is re-evaluated 2 * numel times.
    """
    grads = []
    for t in tensors:
        g = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f().data)
            flat[i] = orig - h
            fm = float(f().data)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def analytic_grads(f: Callable[[], Tensor], tensors: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of the scalar ``f()`` from a fresh tape backward pass."""
    for t in tensors:
        t.grad = None
    with Tape() as tape:
        loss = f()
        tape.backward(loss)
    return [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]


def max_relative_error(
    analytic: Sequence[np.ndarray],
    numeric: Sequence[np.ndarray],
    floor: float = 1e-6,
) -> float:
    """Worst elementwise |a - n| / max(|a|, |n|, floor) across all arrays.

    The floor only guards coordinates where both gradients vanish; at any
    healthy scale this is the plain relative error.
    """
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def check_gradients(
    f: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    rtol: float = 1e-4,
    h: float = 1e-5,
) -> float:
    """Assert analytic vs central-difference agreement; returns the worst error."""
    ana = analytic_grads(f, tensors)
    num = numeric_grads(f, tensors, h=h)
    err = max_relative_error(ana, num)
    if err >= rtol:
        raise AssertionError(f"gradient mismatch: max relative error {err:.3e} >= {rtol:.1e}")
    return err
