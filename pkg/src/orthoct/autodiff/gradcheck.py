"""Central finite-difference checks for differentiable functions."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


def numerical_grad(fn: Callable[[], Tensor], t: Tensor, h: float = 1e-4, index=None) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. ``t.data``.

    ``index`` restricts the check to a list of flat positions; other entries
    are returned as NaN.
    """
    flat = t.data.reshape(-1)
    out = np.full(flat.shape, np.nan)
    positions = range(flat.size) if index is None else index
    for i in positions:
        orig = flat[i]
        flat[i] = orig + h
        fp = fn().item()
        flat[i] = orig - h
        fm = fn().item()
        flat[i] = orig
        out[i] = (fp - fm) / (2 * h)
    return out.reshape(t.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a, n = np.ravel(analytic), np.ravel(numeric)
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / denom)


def check_gradients(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-4,
    samples: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Worst relative error between backprop and finite differences over ``inputs``.

    With ``samples`` set, only that many randomly chosen entries per input are
    perturbed, which keeps end-to-end network checks affordable.
    """
    for t in inputs:
        t.grad = None
    backward(fn(), inputs=inputs)
    worst = 0.0
    rng = rng or np.random.default_rng(0)
    for t in inputs:
        analytic = t.grad.copy()
        index = None
        if samples is not None and samples < t.size:
            index = rng.choice(t.size, size=samples, replace=False)
        numeric = numerical_grad(fn, t, h, index)
        if index is not None:
            analytic = analytic.reshape(-1)[index]
            numeric = numeric.reshape(-1)[index]
        worst = max(worst, relative_error(analytic, numeric))
    return worst
