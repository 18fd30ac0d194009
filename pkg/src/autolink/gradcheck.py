"""Central finite-difference checks for the taped operations."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .numcore import Tensor


def numerical_grad(f: Callable[[], float], arr: np.ndarray, step: float = 1e-4) -> np.ndarray:
    """d f / d arr by central differences, perturbing ``arr`` in place."""
    grad = np.zeros_like(arr, dtype=np.float64)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        ix = it.multi_index
        orig = arr[ix]
        arr[ix] = orig + step
        hi = f()
        arr[ix] = orig - step
        lo = f()
        arr[ix] = orig
        grad[ix] = (hi - lo) / (2.0 * step)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """max |a - b| / max(|a|, |b|, floor), taken over the whole array."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), floor)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def check_gradients(
    build: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    seed_grad: np.ndarray | None = None,
    step: float = 1e-4,
) -> float:
    """Worst relative error between tape gradients and central differences.

    ``build`` recomputes the output from the current contents of ``inputs``;
    the scalar objective is ``sum(out * seed_grad)`` (seed_grad defaults to a
    fixed random projection so every output element matters).
    """
    out = build()
    if seed_grad is None:
        rng = np.random.default_rng(12345)
        seed_grad = rng.standard_normal(out.shape)
    for t in inputs:
        t.grad = np.zeros_like(t.data) if t.requires_grad else None
    out.backward(np.asarray(seed_grad, dtype=out.dtype))
    worst = 0.0
    for t in inputs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()

        def objective():
            return float((build().data * seed_grad).sum())

        numeric = numerical_grad(objective, t.data, step)
        worst = max(worst, relative_error(analytic, numeric))
    return worst
