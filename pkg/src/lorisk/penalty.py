"""Nonsmooth penalties r0, their Gaussian smoothing, and constraint sets.

Every operator accepts a single vector of shape (p,) or a batch of column
vectors of shape (p, k); batched calls act column by column. The elastic
penalty is r = (1 - eta) r0 + eta ||beta||^2 and the smoothed surrogate is
r0^alpha(beta) = E r0(beta - w / alpha) with w standard normal on R^p.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import lsq_linear
from scipy.special import erf, gammaln, hyp1f1

__all__ = [
    "InnerSolverError",
    "R0Variant",
    "ZeroPenalty",
    "Lasso",
    "GeneralizedLasso",
    "GroupLasso",
    "SchattenNorm",
    "fused_difference_matrix",
    "ConstraintSet",
    "FullSpace",
    "NonnegativeOrthant",
    "Box",
    "EuclideanBall",
    "IsotoneCone",
    "pava",
    "SmoothedPenalty",
    "PenaltySpec",
    "eval_r0",
    "prox_r0",
    "subgrad_r0",
    "eval_smoothed",
    "grad_smoothed",
    "project",
    "prox_with_constraint",
    "gaussian_norm_mean",
    "sup_gap_bound",
]

SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


class InnerSolverError(RuntimeError):
    """An inner iterative routine hit its cap before reaching tolerance."""

    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


def _cols(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return x[:, None], True
    if x.ndim != 2:
        raise ValueError(f"expected a vector or a (p, k) batch, got shape {x.shape}")
    return x, False


def _out(x: np.ndarray, single: bool):
    if single:
        return float(x[0]) if x.ndim == 1 else x[:, 0]
    return x


def gaussian_norm_mean(k: int) -> float:
    """E||w|| for w standard normal in R^k."""
    return math.sqrt(2.0) * math.exp(gammaln((k + 1) / 2.0) - gammaln(k / 2.0))


def _inv_norm_mean(k: int) -> float:
    """E[1/||w||] for w standard normal in R^k (k >= 2); sup of the 1-d density bound for k = 1."""
    if k == 1:
        return SQRT_2_OVER_PI
    return math.exp(gammaln((k - 1) / 2.0) - gammaln(k / 2.0)) / math.sqrt(2.0)


def _smoothed_abs(b, alpha):
    """E|b + w / alpha| and its derivative, elementwise."""
    x = alpha * b
    phi = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    g = erf(x / math.sqrt(2.0))
    return b * g + 2.0 * phi / alpha, g


def _smoothed_norm(mu: np.ndarray, alpha: float, k: int):
    """E||mu + w / alpha|| for w ~ N(0, I_k), with gradient in mu.

    mu has shape (k, m) for m independent blocks. Uses the noncentral chi
    mean written through Kummer's function.
    """
    sigma = 1.0 / alpha
    lam2 = np.sum(mu * mu, axis=0) / sigma**2
    A = gaussian_norm_mean(k)
    val = sigma * A * hyp1f1(-0.5, k / 2.0, -0.5 * lam2)
    grad = (A / k) * hyp1f1(0.5, k / 2.0 + 1.0, -0.5 * lam2) * mu / sigma
    return val, grad


class R0Variant:
    """Base class for the nonsmooth part r0 of the elastic penalty."""

    kind: str = ""
    closed_form_smoothing: bool = False

    def check(self, p: int) -> None:
        pass

    def value(self, beta):
        raise NotImplementedError

    def prox(self, u, t: float):
        raise NotImplementedError

    def subgrad(self, beta):
        raise NotImplementedError

    def lipschitz(self, p: int) -> float:
        raise NotImplementedError

    def smooth_value(self, beta, alpha: float):
        raise NotImplementedError(f"{self.kind}: no closed-form smoothing")

    def smooth_grad(self, beta, alpha: float):
        raise NotImplementedError(f"{self.kind}: no closed-form smoothing")

    def smooth_curvature(self, alpha: float) -> float:
        """Lipschitz constant of the closed-form smoothed gradient."""
        raise NotImplementedError(f"{self.kind}: no closed-form smoothing")

    def params(self) -> dict:
        return {}


class ZeroPenalty(R0Variant):
    """r0 = 0, leaving a pure ridge problem."""

    kind = "none"
    closed_form_smoothing = True

    def value(self, beta):
        b, single = _cols(beta)
        return _out(np.zeros(b.shape[1]), single)

    def prox(self, u, t):
        return np.array(u, dtype=float)

    def subgrad(self, beta):
        return np.zeros_like(np.asarray(beta, dtype=float))

    def lipschitz(self, p):
        return 0.0

    def smooth_value(self, beta, alpha):
        return self.value(beta)

    def smooth_grad(self, beta, alpha):
        return self.subgrad(beta)

    def smooth_curvature(self, alpha):
        return 0.0


class Lasso(R0Variant):
    kind = "lasso"
    closed_form_smoothing = True

    def value(self, beta):
        b, single = _cols(beta)
        return _out(np.abs(b).sum(axis=0), single)

    def prox(self, u, t):
        u = np.asarray(u, dtype=float)
        return np.sign(u) * np.maximum(np.abs(u) - t, 0.0)

    def subgrad(self, beta):
        return np.sign(np.asarray(beta, dtype=float))

    def lipschitz(self, p):
        return math.sqrt(p)

    def smooth_value(self, beta, alpha):
        if math.isinf(alpha):
            return self.value(beta)
        b, single = _cols(beta)
        return _out(_smoothed_abs(b, alpha)[0].sum(axis=0), single)

    def smooth_grad(self, beta, alpha):
        b = np.asarray(beta, dtype=float)
        if math.isinf(alpha):
            return np.sign(b)
        return erf(alpha * b / math.sqrt(2.0))

    def smooth_curvature(self, alpha):
        return alpha * SQRT_2_OVER_PI


def fused_difference_matrix(p: int) -> np.ndarray:
    """(p-1) x p first-difference matrix with rows e_j - e_{j+1}."""
    D = np.zeros((p - 1, p))
    idx = np.arange(p - 1)
    D[idx, idx] = 1.0
    D[idx, idx + 1] = -1.0
    return D


def _tv1d(y, lam: float) -> np.ndarray:
    """Exact argmin_x lam sum|x_{j+1} - x_j| + 1/2||x - y||^2 by Condat's direct method."""
    y = np.asarray(y, dtype=float)
    n = y.size
    x = np.empty(n)
    if n == 0:
        return x
    if lam <= 0.0:
        x[:] = y
        return x
    k = k0 = kplus = kminus = 0
    umin, umax = lam, -lam
    vmin, vmax = y[0] - lam, y[0] + lam
    while True:
        while k == n - 1:
            if umin < 0.0:
                x[k0 : kminus + 1] = vmin
                k0 = k = kminus = kminus + 1
                vmin = y[k]
                umin = lam
                umax = vmin + umin - vmax
            elif umax > 0.0:
                x[k0 : kplus + 1] = vmax
                k0 = k = kplus = kplus + 1
                vmax = y[k]
                umax = -lam
                umin = vmax + umax - vmin
            else:
                x[k0:] = vmin + umin / (k - k0 + 1)
                return x
        umin += y[k + 1] - vmin
        umax += y[k + 1] - vmax
        if umin < -lam:
            x[k0 : kminus + 1] = vmin
            k0 = k = kplus = kminus = kminus + 1
            vmin = y[k]
            vmax = vmin + 2.0 * lam
            umin, umax = lam, -lam
        elif umax > lam:
            x[k0 : kplus + 1] = vmax
            k0 = k = kplus = kminus = kplus + 1
            vmax = y[k]
            vmin = vmax - 2.0 * lam
            umin, umax = lam, -lam
        else:
            k += 1
            if umin >= lam:
                kminus = k
                vmin += (umin - lam) / (k - k0 + 1)
                umin = lam
            if umax <= -lam:
                kplus = k
                vmax += (umax + lam) / (k - k0 + 1)
                umax = -lam


def _chain_scale(D: np.ndarray) -> float | None:
    """c when D = c * first-difference matrix (either orientation), else None."""
    m, p = D.shape
    if p < 2 or m != p - 1:
        return None
    c = D[0, 0]
    if c == 0.0 or not np.array_equal(D, c * fused_difference_matrix(p)):
        return None
    return abs(float(c))


class GeneralizedLasso(R0Variant):
    """r0(beta) = ||D beta||_1.

    Each row satisfies d_j' w ~ N(0, ||d_j||^2), so the smoothed value is a
    sum of one-dimensional smoothed absolute values with per-row bandwidth.
    """

    kind = "generalized_lasso"
    closed_form_smoothing = True

    def __init__(self, D, rho: float = 1.0, tol: float = 1e-10, max_iter: int = 10_000):
        D = np.array(D, dtype=float)
        if D.ndim != 2:
            raise ValueError("D must be a matrix")
        D.setflags(write=False)
        self.D = D
        self.rho = rho
        self.tol = tol
        self.max_iter = max_iter
        self._row_norms = np.linalg.norm(D, axis=1)
        self._chol = cho_factor(np.eye(D.shape[1]) + rho * D.T @ D)
        self._chol_c = None
        self._chain = _chain_scale(D)

    def check(self, p):
        if self.D.shape[1] != p:
            raise ValueError(f"D has {self.D.shape[1]} columns, expected p={p}")

    def value(self, beta):
        b, single = _cols(beta)
        return _out(np.abs(self.D @ b).sum(axis=0), single)

    def prox(self, u, t, theta=None):
        """ADMM on min t||z||_1 + 1/2||x - u||^2 subject to z = D x.

        With a constraint set the splitting gains a second block z2 = x,
        projected onto theta, so no nested prox is needed.
        """
        U, single = _cols(u)
        if self._chain is not None and _clip_commutes_with_tv(theta):
            # exact path; a constant-bound box commutes with the 1D TV prox
            lam = t * self._chain
            X = np.column_stack([_tv1d(U[:, c], lam) for c in range(U.shape[1])])
            if theta is not None and not isinstance(theta, FullSpace):
                X = theta.project(X)
            return _out(X, single)
        D, rho = self.D, self.rho
        constrained = theta is not None and not isinstance(theta, FullSpace)
        if constrained and self._chol_c is None:
            self._chol_c = cho_factor((1.0 + rho) * np.eye(D.shape[1]) + rho * D.T @ D)
        z = D @ U
        w = np.zeros_like(z)
        z2 = theta.project(U) if constrained else None
        w2 = np.zeros_like(U)
        x = U
        for _ in range(self.max_iter):
            if constrained:
                x = cho_solve(self._chol_c, U + rho * (D.T @ (z - w) + z2 - w2))
            else:
                x = cho_solve(self._chol, U + rho * D.T @ (z - w))
            Dx = D @ x
            z_old = z
            v = Dx + w
            z = np.sign(v) * np.maximum(np.abs(v) - t / rho, 0.0)
            w = w + Dx - z
            primal = np.max(np.abs(Dx - z))
            dual = rho * np.max(np.abs(D.T @ (z - z_old)))
            if constrained:
                z2_old = z2
                z2 = theta.project(x + w2)
                w2 = w2 + x - z2
                primal = max(primal, np.max(np.abs(x - z2)))
                dual = max(dual, rho * np.max(np.abs(D.T @ (z - z_old) + z2 - z2_old)))
            if primal <= self.tol and dual <= self.tol:
                return _out(z2 if constrained else x, single)
        raise InnerSolverError("generalized lasso ADMM did not converge", max(primal, dual))

    def subgrad(self, beta):
        b, single = _cols(beta)
        D = self.D
        out = np.empty_like(b)
        for c in range(b.shape[1]):
            s = D @ b[:, c]
            scale = 1e-12 * max(1.0, np.max(np.abs(s), initial=0.0))
            zero = np.abs(s) <= scale
            g0 = D[~zero].T @ np.sign(s[~zero])
            if zero.any():
                # minimal-norm element: g0 + D_Z' v with v in [-1, 1]
                res = lsq_linear(D[zero].T, -g0, bounds=(-1.0, 1.0), method="bvls", tol=1e-14)
                g0 = g0 + D[zero].T @ res.x
            out[:, c] = g0
        return _out(out, single)

    def lipschitz(self, p):
        m = self.D.shape[0]
        return math.sqrt(m) * float(np.linalg.norm(self.D, 2))

    def smooth_value(self, beta, alpha):
        if math.isinf(alpha):
            return self.value(beta)
        b, single = _cols(beta)
        a = alpha / self._row_norms[:, None]
        v, _ = _smoothed_abs(self.D @ b, a)
        return _out(v.sum(axis=0), single)

    def smooth_grad(self, beta, alpha):
        b, single = _cols(beta)
        if math.isinf(alpha):
            return _out(self.D.T @ np.sign(self.D @ b), single)
        a = alpha / self._row_norms[:, None]
        return _out(self.D.T @ erf(a * (self.D @ b) / math.sqrt(2.0)), single)

    def smooth_curvature(self, alpha):
        return alpha * SQRT_2_OVER_PI * float(np.linalg.norm(self.D, 2)) ** 2 / float(self._row_norms.min())

    def params(self):
        return {"D": self.D.tolist()}


class GroupLasso(R0Variant):
    """r0(beta) = sum_j sqrt(beta_j' K_j beta_j) over a partition of coordinates."""

    kind = "group_lasso"

    def __init__(self, groups, K=None, newton_tol: float = 1e-13, max_iter: int = 200):
        self.groups = [np.asarray(g, dtype=int) for g in groups]
        if K is None:
            K = [np.eye(len(g)) for g in self.groups]
        self.K = [np.atleast_2d(np.asarray(k, dtype=float)) for k in K]
        if len(self.K) != len(self.groups):
            raise ValueError("need one K_j per group")
        self.newton_tol = newton_tol
        self.max_iter = max_iter
        self._eig = []
        self._scalar = []
        for g, k in zip(self.groups, self.K):
            if k.shape != (len(g), len(g)) or not np.allclose(k, k.T):
                raise ValueError("each K_j must be symmetric with the group's size")
            evals, evecs = np.linalg.eigh(k)
            if evals.min() <= 0:
                raise ValueError("each K_j must be positive definite")
            self._eig.append((evals, evecs))
            c = k[0, 0]
            self._scalar.append(c if np.allclose(k, c * np.eye(len(g)), rtol=0, atol=1e-14 * c) else None)
        self.closed_form_smoothing = all(c is not None for c in self._scalar)

    def check(self, p):
        idx = np.sort(np.concatenate(self.groups)) if self.groups else np.array([], dtype=int)
        if not np.array_equal(idx, np.arange(p)):
            raise ValueError(f"groups must partition range({p})")

    def value(self, beta):
        b, single = _cols(beta)
        tot = np.zeros(b.shape[1])
        for g, k in zip(self.groups, self.K):
            bg = b[g]
            tot += np.sqrt(np.maximum(np.sum(bg * (k @ bg), axis=0), 0.0))
        return _out(tot, single)

    def _prox_group(self, j: int, u: np.ndarray, t: float) -> np.ndarray:
        c = self._scalar[j]
        if c is not None:
            thr = t * math.sqrt(c)
            nrm = np.linalg.norm(u, axis=0)
            scale = np.where(nrm > thr, 1.0 - thr / np.where(nrm > 0, nrm, 1.0), 0.0)
            return u * scale
        evals, Q = self._eig[j]
        ut = Q.T @ u
        out = np.zeros_like(u)
        for col in range(u.shape[1]):
            a = ut[:, col]
            if np.sum(a * a / evals) <= t * t:
                continue
            s = self._solve_scale(evals, a, t)
            out[:, col] = Q @ (a / (1.0 + s * evals))
        return out

    def _solve_scale(self, lam, a, t) -> float:
        """Root s > 0 of sum_k lam_k a_k^2 s^2 / (1 + s lam_k)^2 = t^2."""

        def f(s):
            d = 1.0 + s * lam
            val = np.sum(lam * a * a * s * s / d**2) - t * t
            der = np.sum(2.0 * lam * a * a * s / d**3)
            return val, der

        lo, hi = 0.0, 1.0
        while f(hi)[0] < 0.0:
            lo, hi = hi, 2.0 * hi
            if hi > 1e300:
                raise InnerSolverError("group lasso scale bracket failed", abs(f(hi)[0]))
        s = 0.5 * (lo + hi)
        for _ in range(self.max_iter):
            val, der = f(s)
            if val > 0:
                hi = s
            else:
                lo = s
            step = s - val / der if der > 0 else 0.5 * (lo + hi)
            s_new = step if lo < step < hi else 0.5 * (lo + hi)
            if abs(s_new - s) <= self.newton_tol * max(1.0, s):
                return s_new
            s = s_new
        raise InnerSolverError("group lasso Newton did not converge", abs(f(s)[0]))

    def prox(self, u, t):
        U, single = _cols(u)
        out = np.empty_like(U)
        for j, g in enumerate(self.groups):
            out[g] = self._prox_group(j, U[g], t)
        return _out(out, single)

    def subgrad(self, beta):
        b, single = _cols(beta)
        out = np.zeros_like(b)
        for g, k in zip(self.groups, self.K):
            kb = k @ b[g]
            nrm = np.sqrt(np.maximum(np.sum(b[g] * kb, axis=0), 0.0))
            out[g] = np.where(nrm > 0, kb / np.where(nrm > 0, nrm, 1.0), 0.0)
        return _out(out, single)

    def lipschitz(self, p):
        return math.sqrt(sum(float(e[0].max()) for e in self._eig))

    def smooth_value(self, beta, alpha):
        if math.isinf(alpha):
            return self.value(beta)
        self._need_closed()
        b, single = _cols(beta)
        tot = np.zeros(b.shape[1])
        for g, c in zip(self.groups, self._scalar):
            tot += math.sqrt(c) * _smoothed_norm(b[g], alpha, len(g))[0]
        return _out(tot, single)

    def smooth_grad(self, beta, alpha):
        if math.isinf(alpha):
            return self.subgrad(beta)
        self._need_closed()
        b, single = _cols(beta)
        out = np.empty_like(b)
        for g, c in zip(self.groups, self._scalar):
            out[g] = math.sqrt(c) * _smoothed_norm(b[g], alpha, len(g))[1]
        return _out(out, single)

    def smooth_curvature(self, alpha):
        self._need_closed()
        return max(math.sqrt(c) * alpha * _inv_norm_mean(len(g)) for g, c in zip(self.groups, self._scalar))

    def _need_closed(self):
        if not self.closed_form_smoothing:
            raise NotImplementedError("closed-form smoothing needs K_j = c_j I for every group")

    def params(self):
        return {"groups": [g.tolist() for g in self.groups], "K": [k.tolist() for k in self.K]}


class SchattenNorm(R0Variant):
    """Schatten q-norm of beta reshaped row-major to p1 x p2 (q in {1, 2})."""

    kind = "schatten"

    def __init__(self, p1: int, p2: int, q: int = 1):
        if q not in (1, 2):
            raise ValueError("only Schatten orders q = 1 (nuclear) and q = 2 (Frobenius) are supported")
        self.p1, self.p2, self.q = int(p1), int(p2), int(q)
        self.closed_form_smoothing = q == 2

    def check(self, p):
        if self.p1 * self.p2 != p:
            raise ValueError(f"Schatten shape {self.p1}x{self.p2} does not match p={p}")

    def _mats(self, b: np.ndarray) -> np.ndarray:
        return b.T.reshape(b.shape[1], self.p1, self.p2)

    def _vecs(self, m: np.ndarray) -> np.ndarray:
        return m.reshape(m.shape[0], -1).T

    def value(self, beta):
        b, single = _cols(beta)
        if self.q == 2:
            return _out(np.linalg.norm(b, axis=0), single)
        return _out(np.linalg.svd(self._mats(b), compute_uv=False).sum(axis=1), single)

    def prox(self, u, t):
        U, single = _cols(u)
        if self.q == 2:
            nrm = np.linalg.norm(U, axis=0)
            scale = np.where(nrm > t, 1.0 - t / np.where(nrm > 0, nrm, 1.0), 0.0)
            return _out(U * scale, single)
        Um, s, Vt = np.linalg.svd(self._mats(U), full_matrices=False)
        s = np.maximum(s - t, 0.0)
        return _out(self._vecs((Um * s[:, None, :]) @ Vt), single)

    def subgrad(self, beta):
        b, single = _cols(beta)
        if self.q == 2:
            nrm = np.linalg.norm(b, axis=0)
            return _out(np.where(nrm > 0, b / np.where(nrm > 0, nrm, 1.0), 0.0), single)
        Um, s, Vt = np.linalg.svd(self._mats(b), full_matrices=False)
        tol = 1e-12 * np.maximum(s[:, :1], 1.0)
        keep = (s > tol).astype(float)
        return _out(self._vecs((Um * keep[:, None, :]) @ Vt), single)

    def lipschitz(self, p):
        return math.sqrt(min(self.p1, self.p2))

    def smooth_value(self, beta, alpha):
        if math.isinf(alpha):
            return self.value(beta)
        self._need_closed()
        b, single = _cols(beta)
        return _out(_smoothed_norm(b, alpha, b.shape[0])[0], single)

    def smooth_grad(self, beta, alpha):
        if math.isinf(alpha):
            return self.subgrad(beta)
        self._need_closed()
        b, single = _cols(beta)
        return _out(_smoothed_norm(b, alpha, b.shape[0])[1], single)

    def smooth_curvature(self, alpha):
        self._need_closed()
        return alpha * _inv_norm_mean(self.p1 * self.p2)

    def _need_closed(self):
        if self.q != 2:
            raise NotImplementedError("closed-form smoothing is only available for q = 2")

    def params(self):
        return {"p1": self.p1, "p2": self.p2, "q": self.q}


# constraint sets


def pava(u: np.ndarray) -> np.ndarray:
    """Least-squares nondecreasing fit to a 1-d array (pool adjacent violators)."""
    u = np.asarray(u, dtype=float)
    n = u.size
    means = np.empty(n)
    sizes = np.empty(n, dtype=int)
    top = 0
    for v in u:
        means[top], sizes[top] = v, 1
        while top > 0 and means[top - 1] > means[top]:
            w = sizes[top - 1] + sizes[top]
            means[top - 1] = (sizes[top - 1] * means[top - 1] + sizes[top] * means[top]) / w
            sizes[top - 1] = w
            top -= 1
        top += 1
    return np.repeat(means[:top], sizes[:top])


class ConstraintSet:
    kind: str = ""
    separable: bool = False

    def project(self, u):
        raise NotImplementedError

    def contains(self, beta, tol: float = 1e-12) -> bool:
        raise NotImplementedError

    def bounds(self, p: int) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError(f"{self.kind} is not a product of intervals")

    def params(self) -> dict:
        return {}


class FullSpace(ConstraintSet):
    kind = "full"
    separable = True

    def project(self, u):
        return np.array(u, dtype=float)

    def contains(self, beta, tol=1e-12):
        return bool(np.all(np.isfinite(beta)))

    def bounds(self, p):
        return np.full(p, -np.inf), np.full(p, np.inf)


class NonnegativeOrthant(ConstraintSet):
    kind = "nonnegative"
    separable = True

    def project(self, u):
        return np.maximum(np.asarray(u, dtype=float), 0.0)

    def contains(self, beta, tol=1e-12):
        return bool(np.all(np.asarray(beta) >= -tol))

    def bounds(self, p):
        return np.zeros(p), np.full(p, np.inf)


@dataclass(frozen=True, eq=False)
class Box(ConstraintSet):
    lo: float | np.ndarray = -1.0
    hi: float | np.ndarray = 1.0
    kind = "box"
    separable = True

    def __post_init__(self):
        if np.any(np.asarray(self.lo) > np.asarray(self.hi)):
            raise ValueError("box needs lo <= hi")

    def _lohi(self, shape):
        lo, hi = np.asarray(self.lo, dtype=float), np.asarray(self.hi, dtype=float)
        if len(shape) == 2 and lo.ndim == 1:
            lo, hi = lo[:, None], hi[:, None]
        return lo, hi

    def project(self, u):
        u = np.asarray(u, dtype=float)
        lo, hi = self._lohi(u.shape)
        return np.clip(u, lo, hi)

    def contains(self, beta, tol=1e-12):
        b = np.asarray(beta, dtype=float)
        lo, hi = self._lohi(b.shape)
        return bool(np.all(b >= lo - tol) and np.all(b <= hi + tol))

    def bounds(self, p):
        return np.broadcast_to(np.asarray(self.lo, float), (p,)).copy(), np.broadcast_to(np.asarray(self.hi, float), (p,)).copy()

    def params(self):
        return {"lo": np.asarray(self.lo).tolist(), "hi": np.asarray(self.hi).tolist()}


@dataclass(frozen=True, eq=False)
class EuclideanBall(ConstraintSet):
    radius: float = 1.0
    kind = "ball"

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("ball radius must be positive")

    def project(self, u):
        u = np.asarray(u, dtype=float)
        nrm = np.linalg.norm(u, axis=0)
        # points within a few ulps of the sphere are left alone so that P(P(u)) == P(u)
        inside = nrm <= self.radius * (1.0 + 8 * np.finfo(float).eps)
        return u * np.where(inside, 1.0, self.radius / np.maximum(nrm, 1e-300))

    def contains(self, beta, tol=1e-12):
        return bool(np.all(np.linalg.norm(np.asarray(beta, dtype=float), axis=0) <= self.radius + tol))

    def params(self):
        return {"radius": self.radius}


class IsotoneCone(ConstraintSet):
    kind = "isotone"

    def project(self, u):
        u, single = _cols(u)
        out = np.column_stack([pava(u[:, c]) for c in range(u.shape[1])]) if u.shape[1] else u.copy()
        return out[:, 0] if single else out

    def contains(self, beta, tol=1e-12):
        return bool(np.all(np.diff(np.asarray(beta, dtype=float), axis=0) >= -tol))


# smoothing


@dataclass(frozen=True, eq=False)
class SmoothedPenalty:
    """r0^alpha evaluated in closed form or by common-random-number Monte Carlo."""

    base: R0Variant
    alpha: float
    mode: str = "closed_form"
    samples: int = 1000
    seed: int = 0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.mode not in ("closed_form", "monte_carlo"):
            raise ValueError(f"unknown smoothing mode {self.mode!r}")
        if self.mode == "closed_form" and not self.base.closed_form_smoothing:
            raise ValueError(f"{self.base.kind}: closed-form smoothing unavailable, use monte_carlo")
        if self.mode == "monte_carlo" and self.samples < 100:
            raise ValueError("monte_carlo smoothing needs samples >= 100")

    def _shifted(self, beta: np.ndarray) -> np.ndarray:
        w = np.random.default_rng(self.seed).standard_normal((beta.size, self.samples))
        return beta[:, None] - w / self.alpha

    def value(self, beta):
        if self.mode == "closed_form" or math.isinf(self.alpha):
            return self.base.smooth_value(beta, self.alpha)
        beta = np.asarray(beta, dtype=float)
        if beta.ndim == 2:
            return np.array([self.value_with_se(beta[:, c])[0] for c in range(beta.shape[1])])
        return self.value_with_se(beta)[0]

    def value_with_se(self, beta) -> tuple[float, float]:
        if self.mode == "closed_form":
            return float(self.base.smooth_value(beta, self.alpha)), 0.0
        vals = self.base.value(self._shifted(np.asarray(beta, dtype=float)))
        return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(self.samples))

    def grad(self, beta):
        beta = np.asarray(beta, dtype=float)
        if self.mode == "closed_form" or math.isinf(self.alpha):
            return self.base.smooth_grad(beta, self.alpha)
        if beta.ndim == 2:
            return np.column_stack([self.grad(beta[:, c]) for c in range(beta.shape[1])])
        return self.base.subgrad(self._shifted(beta)).mean(axis=1)


def sup_gap_bound(r0: R0Variant, alpha: float, p: int) -> float:
    """Upper bound on sup |r0^alpha - r0|.

    Exact for the lasso (attained at 0); L E||z|| / alpha otherwise.
    """
    if math.isinf(alpha):
        return 0.0
    if isinstance(r0, Lasso):
        return p * SQRT_2_OVER_PI / alpha
    return r0.lipschitz(p) * gaussian_norm_mean(p) / alpha


# elastic penalty spec and combined operators


@dataclass(frozen=True, eq=False)
class PenaltySpec:
    r0: R0Variant
    eta: float
    lam: float
    theta: ConstraintSet = field(default_factory=FullSpace)
    alpha: float = math.inf
    smoothing: str = "closed_form"
    samples: int = 1000
    smoothing_seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.eta < 1.0:
            raise ValueError("eta must lie strictly inside (0,1)")
        if not self.lam > 0 or not math.isfinite(self.lam):
            raise ValueError("lambda must be a finite positive number")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")

    @property
    def strong_convexity(self) -> float:
        return 2.0 * self.lam * self.eta

    def smoothed(self, alpha: float | None = None) -> SmoothedPenalty:
        mode = self.smoothing
        if mode == "closed_form" and not self.r0.closed_form_smoothing:
            mode = "monte_carlo"
        return SmoothedPenalty(self.r0, self.alpha if alpha is None else alpha, mode, self.samples, self.smoothing_seed)


def eval_r0(r0: R0Variant, beta):
    beta = np.asarray(beta, dtype=float)
    r0.check(beta.shape[0])
    return r0.value(beta)


def prox_r0(r0: R0Variant, u, t: float):
    if not t > 0:
        raise ValueError("prox step t must be positive")
    u = np.asarray(u, dtype=float)
    r0.check(u.shape[0])
    return r0.prox(u, t)


def subgrad_r0(r0: R0Variant, beta):
    beta = np.asarray(beta, dtype=float)
    r0.check(beta.shape[0])
    return r0.subgrad(beta)


def eval_smoothed(s: SmoothedPenalty, beta):
    s.base.check(np.shape(beta)[0])
    return s.value(beta)


def grad_smoothed(s: SmoothedPenalty, beta):
    s.base.check(np.shape(beta)[0])
    return s.grad(beta)


def project(theta: ConstraintSet, u):
    return theta.project(u)


def _norm_like_orthant(r0: R0Variant) -> bool:
    # norms that only decrease when negative entries are zeroed, with K = c I
    if isinstance(r0, GroupLasso):
        return r0.closed_form_smoothing
    return isinstance(r0, SchattenNorm) and r0.q == 2


def _clip_commutes_with_tv(theta) -> bool:
    if theta is None or isinstance(theta, (FullSpace, NonnegativeOrthant)):
        return True
    return isinstance(theta, Box) and np.ndim(theta.lo) == 0 and np.ndim(theta.hi) == 0


def prox_with_constraint(r0: R0Variant, u, t: float, theta: ConstraintSet, tol: float = 1e-13, max_iter: int = 20_000):
    """argmin_x t r0(x) + 1/2||x - u||^2 over x in theta.

    Closed forms where the structure allows; restarted dual FISTA otherwise.
    """
    u = np.asarray(u, dtype=float)
    if isinstance(theta, FullSpace):
        return r0.prox(u, t)
    if isinstance(r0, ZeroPenalty):
        return theta.project(u)
    if isinstance(r0, GeneralizedLasso):
        return r0.prox(u, t, theta)
    if isinstance(r0, Lasso) and theta.separable:
        return theta.project(r0.prox(u, t))
    if isinstance(theta, NonnegativeOrthant) and _norm_like_orthant(r0):
        return r0.prox(np.maximum(u, 0.0), t)
    # accelerated projected gradient on the multiplier z of the constraint:
    # the dual gradient is -prox(u - z), which is 1-Lipschitz, and the
    # primal point is recovered as prox(u - z)
    z = np.zeros_like(u)
    s_ = z
    mom = 1.0
    x_old = None
    change = gap = np.inf
    for _ in range(max_iter):
        x = r0.prox(u - s_, t)
        v = s_ + x
        z_new = v - theta.project(v)
        if np.vdot(s_ - z_new, z_new - z) > 0.0:
            # adaptive restart when momentum points uphill
            s_, mom = z, 1.0
            continue
        mom_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * mom * mom))
        s_ = z_new + (mom - 1.0) / mom_new * (z_new - z)
        z, mom = z_new, mom_new
        xp = theta.project(x)
        gap = np.max(np.abs(x - xp), initial=0.0)
        if x_old is not None:
            change = np.max(np.abs(x - x_old), initial=0.0)
            if change <= tol and gap <= 10 * tol * max(1.0, np.max(np.abs(x), initial=0.0)):
                return xp
        x_old = x
    raise InnerSolverError("dual splitting did not converge", max(change, gap))
