"""Dense numeric primitives shared by every loss in the package.

All routines work in float64 and are pure. Where a batched variant exists it
operates on the last axis, so ``softmax_temperature`` accepts either a single
score vector or an ``(n, N)`` stack of them.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import (
    DimensionMismatch,
    NonFiniteEvaluation,
    NonFiniteScore,
    NonPositiveTemperature,
    ZeroVector,
)

ZERO_NORM = 1e-12
FD_STEP = 1e-5
# floor for log arguments; p * log(max(p, TINY)) still underflows to 0 for p == 0
TINY = np.finfo(np.float64).tiny


def as_vector(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def l2_normalize(x) -> np.ndarray:
    x = as_vector(x)
    n = float(np.linalg.norm(x))
    if not n > ZERO_NORM:
        raise ZeroVector(f"cannot normalize vector with norm {n:g}")
    return x / n


def l2_normalize_rows(x) -> np.ndarray:
    x = as_vector(x)
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(~(n > ZERO_NORM)):
        raise ZeroVector("cannot normalize a row with zero norm")
    return x / n


def cosine_similarity(a, b) -> float:
    a = l2_normalize(a)
    b = l2_normalize(b)
    if a.shape != b.shape:
        raise DimensionMismatch(f"shapes {a.shape} and {b.shape} differ")
    return float(np.clip(a @ b, -1.0, 1.0))


def softmax_temperature(scores, tau: float = 1.0) -> np.ndarray:
    """Softmax of ``scores / tau`` along the last axis.

    The row maximum is subtracted before exponentiating, so ``tau = 0.01`` on
    cosine scores cannot overflow.
    """
    if not tau > 0 or not np.isfinite(tau):
        raise NonPositiveTemperature(f"temperature must be positive and finite, got {tau!r}")
    s = as_vector(scores)
    if not np.all(np.isfinite(s)):
        raise NonFiniteScore("scores contain NaN or Inf")
    z = (s - s.max(axis=-1, keepdims=True)) / tau
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(probs: np.ndarray, grad_probs: np.ndarray, tau: float) -> np.ndarray:
    """Pull a gradient w.r.t. softmax outputs back onto the raw scores."""
    inner = np.sum(grad_probs * probs, axis=-1, keepdims=True)
    return probs * (grad_probs - inner) / tau


def entropy(p) -> float | np.ndarray:
    """Shannon entropy in nats along the last axis, with 0 ln 0 = 0."""
    p = as_vector(p)
    h = -np.sum(p * np.log(np.maximum(p, TINY)), axis=-1)
    # tiny negative values can appear from rounding on one-hot inputs
    h = np.maximum(h, 0.0)
    return float(h) if np.ndim(h) == 0 else h


def entropy_grad(p) -> np.ndarray:
    """d entropy / d p, finite even where p underflowed to zero."""
    p = as_vector(p)
    return -(np.log(np.maximum(p, TINY)) + 1.0)


def argmax_lowest(x) -> int:
    # np.argmax already returns the first maximal index
    return int(np.argmax(as_vector(x)))


def finite_difference_gradient(f: Callable[[np.ndarray], float], x) -> np.ndarray:
    """Central differences with step ``1e-5 * max(1, |x_i|)`` per coordinate."""
    x0 = np.array(x, dtype=np.float64)
    flat = x0.reshape(-1)
    g = np.empty_like(flat)
    for i in range(flat.size):
        h = FD_STEP * max(1.0, abs(flat[i]))
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += h
        xm[i] -= h
        fp = f(xp.reshape(x0.shape))
        fm = f(xm.reshape(x0.shape))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteEvaluation(f"f is not finite near coordinate {i}")
        g[i] = (fp - fm) / (xp[i] - xm[i])
    return g.reshape(x0.shape)


def grad_check(f: Callable[[np.ndarray], float], x, analytic_grad) -> float:
    """Max relative error between ``analytic_grad`` and finite differences of ``f`` at ``x``.

    The error per coordinate is ``|g_fd - g_an| / max(1, |g_fd|)``.
    """
    g_fd = finite_difference_gradient(f, x).reshape(-1)
    g_an = as_vector(analytic_grad).reshape(-1)
    if g_an.shape != g_fd.shape:
        raise DimensionMismatch(f"gradient has {g_an.size} entries, point has {g_fd.size}")
    if not np.all(np.isfinite(g_an)):
        raise NonFiniteEvaluation("analytic gradient is not finite")
    return float(np.max(np.abs(g_fd - g_an) / np.maximum(1.0, np.abs(g_fd))))
