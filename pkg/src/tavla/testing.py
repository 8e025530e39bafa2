"""Gradient-checking utilities.

The finite-difference estimator here is the reference oracle for every
gradient in the library: central differences, float64, default step 1e-6.
It is intentionally independent of the tape in :mod:`tavla.tensor`; it only
re-evaluates a closure while poking one coordinate at a time.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import UsageError
from .tensor import Graph, Tensor, backward

FD_EPS = 1e-6
REL_TOL = 1e-4


def finite_difference_grad(
    f: Callable[[], float],
    tensors: Sequence[Tensor],
    eps: float = FD_EPS,
) -> list[np.ndarray]:
    """Central-difference gradient of ``f`` w.r.t. each tensor's data.

    ``f`` must re-read the tensors' current ``.data`` on every call and
    return a python float. Tensors are restored exactly afterwards.
    """
    grads: list[np.ndarray] = []
    for t in tensors:
        if t.data.dtype != np.float64:
            raise UsageError(
                f"finite differences need float64 tensors; got {t.data.dtype}"
            )
        g = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f()
            flat[i] = orig - eps
            fm = f()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * eps)
        grads.append(g)
    return grads


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a-n| / max(|a|, |n|, 1e-8) over all coordinates."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.shape != n.shape:
        raise UsageError(f"gradient shapes disagree: {a.shape} vs {n.shape}")
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    return float(np.max(np.abs(a - n) / denom))


def gradcheck(
    build_loss: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    eps: float = FD_EPS,
    tol: float = REL_TOL,
) -> float:
    """Compare tape gradients against finite differences.

    ``build_loss`` runs the forward pass from the tensors' current data and
    returns a scalar loss tensor. Returns the worst relative error across all
    checked tensors; raises AssertionError when it exceeds ``tol``.
    """
    for t in tensors:
        t.zero_grad()
    with Graph():
        loss = build_loss()
        backward(loss)
    analytic = []
    for t in tensors:
        if t.grad is None:
            raise UsageError("a checked tensor received no gradient")
        analytic.append(t.grad.copy())

    numeric = finite_difference_grad(lambda: build_loss().item(), tensors, eps=eps)
    worst = max(
        max_relative_error(a, n) for a, n in zip(analytic, numeric)
    )
    if worst > tol:
        raise AssertionError(f"gradient check failed: rel err {worst:.3e} > {tol:.0e}")
    return worst
