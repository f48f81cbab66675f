"""Independent reference solvers used as oracles for the main solver.

These share no code path with the proximal-gradient solver: ridge uses a
direct linear solve and the elastic-net GLM uses cyclic coordinate descent
with a bracketed scalar root finder per coordinate.
"""
from __future__ import annotations

import numpy as np
from scipy.optimize import brentq

from .model import LossFamily

__all__ = ["ridge_closed_form", "ridge_loo_closed_form", "coordinate_descent"]


def ridge_closed_form(X: np.ndarray, y: np.ndarray, ridge: float, weights: np.ndarray | None = None) -> np.ndarray:
    """argmin 1/2 sum_i w_i (y_i - x_i'b)^2 + (ridge/2) ||b||^2."""
    w = np.ones(X.shape[0]) if weights is None else weights
    A = X.T @ (w[:, None] * X) + ridge * np.eye(X.shape[1])
    return np.linalg.solve(A, X.T @ (w * y))


def ridge_loo_closed_form(X: np.ndarray, y: np.ndarray, ridge: float) -> np.ndarray:
    """Leave-one-out ridge fits for n = 2 via the rank-one formula.

    With one remaining observation (x, y) the fit is x y / (||x||^2 + ridge).
    Returns the (p, 2) matrix whose column i omits observation i.
    """
    if X.shape[0] != 2:
        raise ValueError("the rank-one oracle is for n = 2")
    cols = []
    for i in range(2):
        x, yy = X[1 - i], y[1 - i]
        cols.append(x * yy / (x @ x + ridge))
    return np.column_stack(cols)


def coordinate_descent(X: np.ndarray, y: np.ndarray, loss: LossFamily, l1: float, l2: float,
                       tol: float = 1e-13, max_sweeps: int = 100_000, beta0=None) -> np.ndarray:
    """Exact minimizer of sum_i l(y_i, x_i'b) + l1 ||b||_1 + l2 ||b||^2 on R^p."""
    n, p = X.shape
    b = np.zeros(p) if beta0 is None else np.array(beta0, dtype=float)
    z = X @ b
    for _ in range(max_sweeps):
        delta = 0.0
        for j in range(p):
            xj = X[:, j]
            r = z - xj * b[j]

            def s(t):
                return float(xj @ loss.grad(y, r + xj * t)) + 2.0 * l2 * t

            s0 = s(0.0)
            if abs(s0) <= l1:
                new = 0.0
            else:
                sign = 1.0 if s0 < -l1 else -1.0
                g = lambda t: sign * s(sign * t) + l1  # noqa: E731
                hi = 1.0
                while g(hi) < 0.0:
                    hi *= 2.0
                new = sign * brentq(g, 0.0, hi, xtol=1e-15, rtol=1e-15, maxiter=500)
            delta = max(delta, abs(new - b[j]))
            z = r + xj * new
            b[j] = new
        if delta < tol:
            return b
    raise RuntimeError("coordinate descent did not converge")
