"""Compare reverse-mode gradients against central differences."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor, backward, finite_diff_grad, grad_or_zeros

REL_TOL = 1e-5
ABS_FLOOR = 1e-8


def mismatches(analytic: np.ndarray, numeric: np.ndarray, rel: float = REL_TOL, floor: float = ABS_FLOOR) -> np.ndarray:
    """Boolean mask of elements that fail the comparison.

    An element passes when its error is within ``rel`` relative to the larger
    magnitude, or within the absolute ``floor`` (which only matters near zero,
    where central differences in float64 carry ~eps*|f|/step of rounding noise).
    """
    a = np.asarray(analytic, np.float64)
    n = np.asarray(numeric, np.float64)
    diff = np.abs(a - n)
    return diff > np.maximum(rel * np.maximum(np.abs(a), np.abs(n)), floor)


def analytic_grad(f: Callable[[Tensor], Tensor], x: np.ndarray) -> np.ndarray:
    xt = Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    backward(f(xt))
    return grad_or_zeros(xt)


def check(f: Callable[[Tensor], Tensor], x: np.ndarray, step: float = 1e-6, rel: float = REL_TOL, floor: float = ABS_FLOOR):
    """Return (ok, max relative error, analytic, numeric) for scalar ``f`` at ``x``."""
    a = analytic_grad(f, x)
    n = finite_diff_grad(f, Tensor(np.array(x, dtype=np.float64)), step)
    bad = mismatches(a, n, rel, floor)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-300)
    worst = float(np.max(np.abs(a - n) / denom)) if a.size else 0.0
    return not bad.any(), worst, a, n
