"""Conjugate gradients and power iteration with user-supplied inner products."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NoConvergence, NonFiniteIterate

__all__ = ["CGResult", "conjugate_gradient", "power_iteration"]


@dataclass
class CGResult:
    x: np.ndarray
    iterations: int
    residual: float
    history: list = field(default_factory=list)


def conjugate_gradient(apply, b, inner, tol=1e-10, max_iter=500, callback=None, what="CG"):
    """Solve ``apply(x) = b`` for an operator self-adjoint and positive in ``inner``.

    Parameters
    ----------
    apply : callable
        Linear operator acting on arrays shaped like ``b``.
    b : ndarray
    inner : callable
        Inner product ``inner(u, v) -> float``.
    tol : float
        Relative residual tolerance ``||r|| <= tol*||b||``.
    max_iter : int
    callback : callable, optional
        Called as ``callback(k, x)`` after each iteration.

    Raises
    ------
    NoConvergence
        When ``max_iter`` iterations do not reach ``tol``.
    """
    x = np.zeros_like(b)
    bnorm = np.sqrt(inner(b, b))
    if bnorm == 0.0:
        return CGResult(x, 0, 0.0, [0.0])
    r = b.copy()
    p = r.copy()
    rr = inner(r, r)
    history = [1.0]
    for k in range(1, max_iter + 1):
        Ap = apply(p)
        pAp = inner(p, Ap)
        if not np.isfinite(pAp) or pAp <= 0:
            raise NonFiniteIterate(f"{what}: operator not positive along search direction")
        step = rr / pAp
        x = x + step * p
        r = r - step * Ap
        rr_new = inner(r, r)
        rel = np.sqrt(rr_new) / bnorm
        history.append(rel)
        if callback is not None:
            callback(k, x)
        if rel <= tol:
            return CGResult(x, k, rel, history)
        p = r + (rr_new / rr) * p
        rr = rr_new
    raise NoConvergence(max_iter, history[-1], what=what)


def power_iteration(apply, x0, inner, n_iter=30):
    """Largest eigenvalue of a self-adjoint positive semidefinite operator.

    Returns the Rayleigh quotient after ``n_iter`` normalized iterations.
    """
    x = x0 / np.sqrt(inner(x0, x0))
    lam = 0.0
    for _ in range(n_iter):
        y = apply(x)
        lam = inner(x, y)
        ny = np.sqrt(inner(y, y))
        if ny == 0.0:
            return 0.0
        x = y / ny
    return float(inner(x, apply(x)))
