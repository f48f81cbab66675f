"""Projected proximal-gradient solver for the regularized GLM fit and its leave-one-out refits.

The objective is

    h(beta) = sum_i w_i l(y_i, x_i' beta) + lam (1 - eta) r0(beta) + lam eta ||beta||^2

over beta in Theta, with r0 replaced by its Gaussian smoothing r0^alpha when
alpha is finite. Many problems sharing X and y but differing in observation
weights are solved at once as columns of a (p, k) block; each column keeps
its own step size, momentum and convergence flag, so a column's trajectory
does not depend on which other columns share the block.

Three routes handle the penalty:

* ``exact`` (alpha = inf): prox of lam (1 - eta) r0 + indicator(Theta).
* ``lasso_prox`` (lasso, finite alpha, box-like Theta): the smoothed absolute
  value is handled through its own scalar prox, so the step size does not
  shrink as alpha grows.
* ``smooth`` (finite alpha otherwise): the smoothed penalty joins the smooth
  part and the prox is the projection onto Theta. Monte Carlo smoothing
  yields a piecewise-linear surrogate, so fits on that path may stop short
  of tolerance and are flagged as unconverged.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .model import Dataset, ModelSpec
from .penalty import (
    SQRT_2_OVER_PI,
    Lasso,
    PenaltySpec,
    prox_with_constraint,
    sup_gap_bound,
)

__all__ = [
    "SolverConfig",
    "FitResult",
    "LooFits",
    "NonConvergence",
    "SolverDivergence",
    "objective",
    "fit",
    "fit_loo",
    "fit_smoothing_path",
    "alpha_schedule",
    "fp_residual",
]


class NonConvergence(RuntimeError):
    def __init__(self, residual: float, iterate: np.ndarray, index: int | None = None, alpha: float | None = None):
        where = "" if index is None else f" (leave-out index {index})"
        at = "" if alpha is None else f" at alpha={alpha:g}"
        super().__init__(f"solver stopped with fixed-point residual {residual:.3e}{where}{at}")
        self.residual = residual
        self.iterate = iterate
        self.index = index
        self.alpha = alpha


class SolverDivergence(FloatingPointError):
    """Non-finite gradient or objective encountered."""


@dataclass(frozen=True)
class SolverConfig:
    max_iters: int = 20_000
    tol: float = 1e-8
    step_rule: str = "fixed"
    acceleration: bool = True
    alpha0: float | None = None
    alpha_max: float | None = None
    alpha_growth: float = 2.0
    shrink: float = 0.5
    stage_tol: float = 1e-6
    chunk: int = 256

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.step_rule not in ("fixed", "backtracking"):
            raise ValueError("step_rule must be 'fixed' or 'backtracking'")
        if not 0 < self.shrink < 1:
            raise ValueError("shrink must lie in (0, 1)")
        if self.alpha0 is not None and not self.alpha0 > 0:
            raise ValueError("alpha0 must be positive")
        if not self.alpha_growth > 1:
            raise ValueError("alpha_growth must exceed 1")
        if self.chunk < 1:
            raise ValueError("chunk must be >= 1")


@dataclass(frozen=True, eq=False)
class FitResult:
    beta_hat: np.ndarray
    objective: float
    fp_residual: float
    iters: int
    converged: bool
    alpha_used: float
    n_backtracks: int = 0
    route: str = ""
    trace: tuple = ()


@dataclass(frozen=True, eq=False)
class LooFits:
    full: FitResult
    per_i: tuple
    warm_start_used: bool = True

    @property
    def betas(self) -> np.ndarray:
        """(p, n) matrix whose column i is the leave-i-out fit."""
        return np.column_stack([f.beta_hat for f in self.per_i])

    @property
    def all_converged(self) -> bool:
        return self.full.converged and all(f.converged for f in self.per_i)


def alpha_schedule(config: SolverConfig, alpha_penalty: float) -> list[float]:
    target = alpha_penalty if config.alpha_max is None else config.alpha_max
    if config.alpha0 is None or config.alpha0 >= target:
        return [target]
    if math.isinf(target):
        return [config.alpha0, math.inf]
    out, a = [], config.alpha0
    while a < target:
        out.append(a)
        a *= config.alpha_growth
    out.append(target)
    return out


def _power_lmax(X: np.ndarray, iters: int = 20) -> float:
    """Largest eigenvalue of X'X by power iteration from a fixed start."""
    p = X.shape[1]
    v = np.random.default_rng(0).standard_normal(p)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = X.T @ (X @ v)
        lam = float(np.linalg.norm(w))
        if lam == 0.0:
            return 0.0
        v = w / lam
    return lam


class _Problem:
    """Objective pieces for one (data, penalty, alpha) triple, batched over columns."""

    def __init__(self, model: ModelSpec, pen: PenaltySpec, data: Dataset, alpha: float, lmax: float):
        self.X, self.y = data.X, data.y[:, None]
        self.loss = model.loss
        self.pen = pen
        self.alpha = alpha
        self.c1 = pen.lam * (1.0 - pen.eta)
        self.c2 = pen.lam * pen.eta
        r0, theta = pen.r0, pen.theta
        if math.isinf(alpha):
            self.route = "exact"
        elif isinstance(r0, Lasso) and theta.separable:
            self.route = "lasso_prox"
        else:
            self.route = "smooth"
            self.smoother = pen.smoothed(alpha)
        L = model.loss.curvature_bound(data.y) * lmax + 2.0 * self.c2
        if self.route == "smooth" and self.smoother.mode == "closed_form":
            L += self.c1 * r0.smooth_curvature(alpha)
        self.L = L

    # smooth part f

    def _pen_smooth(self, B):
        if self.route != "smooth":
            return 0.0, 0.0
        return self.c1 * np.atleast_1d(self.smoother.value(B)), self.c1 * self.smoother.grad(B)

    def f(self, B, Z, W):
        val = np.sum(W * self.loss.value(self.y, Z), axis=0) + self.c2 * np.sum(B * B, axis=0)
        return val + self._pen_smooth(B)[0]

    def f_grad(self, B, Z, W):
        dl = W * self.loss.grad(self.y, Z)
        val = np.sum(W * self.loss.value(self.y, Z), axis=0) + self.c2 * np.sum(B * B, axis=0)
        g = self.X.T @ dl + 2.0 * self.c2 * B
        pv, pg = self._pen_smooth(B)
        val, g = val + pv, g + pg
        if not (np.all(np.isfinite(val)) and np.all(np.isfinite(g))):
            raise SolverDivergence("non-finite objective or gradient")
        return val, g

    # nonsmooth part g

    def g_value(self, B):
        if self.route == "exact":
            return self.c1 * np.atleast_1d(self.pen.r0.value(B))
        if self.route == "lasso_prox":
            return self.c1 * np.atleast_1d(self.pen.r0.smooth_value(B, self.alpha))
        return np.zeros(B.shape[1])

    def prox(self, V, t):
        theta = self.pen.theta
        if self.route == "smooth":
            return theta.project(V)
        if self.route == "lasso_prox":
            return theta.project(_smoothed_abs_prox(V, t[None, :] * self.c1, self.alpha))
        out = np.empty_like(V)
        for tv in np.unique(t):
            cols = np.flatnonzero(t == tv)
            out[:, cols] = prox_with_constraint(self.pen.r0, V[:, cols], tv * self.c1, theta)
        return out

    def residual(self, B, Z, W):
        _, g = self.f_grad(B, Z, W)
        if self.route == "exact":
            target = prox_with_constraint(self.pen.r0, B - g, self.c1, self.pen.theta)
        else:
            if self.route == "lasso_prox":
                g = g + self.c1 * erf(self.alpha * B / math.sqrt(2.0))
            target = self.pen.theta.project(B - g)
        return np.linalg.norm(B - target, axis=0)


def _smoothed_abs_prox(V, tau, alpha, max_iter: int = 200):
    """argmin_x tau * E|x + w/alpha| + 1/2 (x - v)^2, elementwise.

    Solves x + tau erf(alpha x / sqrt 2) = |v| on [0, |v|]. The map is
    increasing and concave there, so Newton started at the soft-threshold
    point (which lies left of the root) climbs monotonically.
    """
    a = np.abs(V)
    tau = np.broadcast_to(tau, V.shape)
    x = np.maximum(a - tau, 0.0)
    c = alpha / math.sqrt(2.0)
    scale = a + tau
    for _ in range(max_iter):
        h = x + tau * erf(c * x) - a
        dh = 1.0 + tau * alpha * SQRT_2_OVER_PI * np.exp(-(c * x) ** 2)
        x_new = np.clip(x - h / dh, x, a)
        if np.all(np.abs(x_new - x) <= 4e-16 * scale):
            x = x_new
            break
        x = x_new
    return np.sign(V) * x


@dataclass
class _SolveOut:
    x: np.ndarray
    F: np.ndarray
    resid: np.ndarray
    iters: np.ndarray
    done: np.ndarray
    nback: np.ndarray
    trace: list = field(default_factory=list)


def _prox_step(prob: _Problem, y, fy, gy, W, t, shrink):
    """Proximal step from y with per-column backtracking on the quadratic upper bound."""
    t = t.copy()
    nb = np.zeros(y.shape[1], dtype=int)
    z = prob.prox(y - t * gy, t)
    Zz = prob.X @ z
    fz = prob.f(z, Zz, W)
    for _ in range(80):
        d = z - y
        q = fy + np.sum(gy * d, axis=0) + np.sum(d * d, axis=0) / (2.0 * t)
        fail = np.flatnonzero(fz > q + 1e-12 * (1.0 + np.abs(fy)))
        if fail.size == 0:
            return z, Zz, fz, t, nb
        t[fail] *= shrink
        nb[fail] += 1
        zf = prob.prox(y[:, fail] - t[fail] * gy[:, fail], t[fail])
        z[:, fail] = zf
        Zz[:, fail] = prob.X @ zf
        fz[fail] = prob.f(zf, Zz[:, fail], W[:, fail])
    raise SolverDivergence("backtracking failed to find a valid step")


def _solve(prob: _Problem, B0: np.ndarray, W: np.ndarray, cfg: SolverConfig, tol: float,
           record_trace: bool = False) -> _SolveOut:
    X = prob.X
    k = B0.shape[1]
    x = prob.pen.theta.project(B0)
    if x.ndim == 1:
        x = x[:, None]
    Zx = X @ x
    Fx = prob.f(x, Zx, W) + prob.g_value(x)
    if not np.all(np.isfinite(Fx)):
        raise SolverDivergence("non-finite objective at the starting point")
    xm, Zxm = x.copy(), Zx.copy()
    theta = np.ones(k)
    step = np.full(k, 1.0 / prob.L if cfg.step_rule == "fixed" else 1.0)
    iters = np.zeros(k, dtype=int)
    nback = np.zeros(k, dtype=int)
    done = np.zeros(k, dtype=bool)
    resid = np.full(k, np.inf)
    next_check = np.zeros(k, dtype=int)
    trace = [float(Fx[0])] if record_trace else []

    for it in range(1, cfg.max_iters + 1):
        act = np.flatnonzero(~done)
        if act.size == 0:
            break
        xa, Za, Wa = x[:, act], Zx[:, act], W[:, act]
        th = theta[act]
        if cfg.acceleration:
            th_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * th * th))
            mom = (th - 1.0) / th_new
        else:
            th_new, mom = th.copy(), np.zeros_like(th)
        ya = xa + mom * (xa - xm[:, act])
        Zya = Za + mom * (Za - Zxm[:, act])
        fy, gy = prob.f_grad(ya, Zya, Wa)
        z, Zz, fz, ta, nb = _prox_step(prob, ya, fy, gy, Wa, step[act], cfg.shrink)
        Fz = fz + prob.g_value(z)
        Fa = Fx[act]
        eps = 1e-12 * (1.0 + np.abs(Fa))

        bad = np.flatnonzero(Fz > Fa + eps)
        if bad.size:
            # momentum overshot: plain proximal step from x keeps the sequence monotone
            fxb, gxb = prob.f_grad(xa[:, bad], Za[:, bad], Wa[:, bad])
            zb, Zzb, fzb, tb, nbb = _prox_step(prob, xa[:, bad], fxb, gxb, Wa[:, bad], ta[bad], cfg.shrink)
            Fzb = fzb + prob.g_value(zb)
            keep = Fzb > Fa[bad] + eps[bad]
            zb[:, keep], Zzb[:, keep], Fzb[keep] = xa[:, bad[keep]], Za[:, bad[keep]], Fa[bad[keep]]
            z[:, bad], Zz[:, bad], Fz[bad] = zb, Zzb, Fzb
            ya[:, bad] = xa[:, bad]
            ta[bad] = tb
            nb[bad] += nbb
            th_new[bad] = 1.0
        if cfg.acceleration:
            th_new[np.sum((ya - z) * (z - xa), axis=0) > 0] = 1.0

        xm[:, act], Zxm[:, act] = xa, Za
        x[:, act], Zx[:, act], Fx[act] = z, Zz, Fz
        theta[act], step[act] = th_new, ta
        iters[act] += 1
        nback[act] += nb
        if record_trace:
            trace.append(float(Fx[0]))

        gm = np.linalg.norm(z - ya, axis=0) / ta
        cand = act[(gm <= tol) & (next_check[act] <= it)]
        if cand.size:
            r = prob.residual(x[:, cand], Zx[:, cand], W[:, cand])
            resid[cand] = r
            ok = r <= tol
            done[cand[ok]] = True
            next_check[cand[~ok]] = it + 5

    left = np.flatnonzero(~done)
    if left.size:
        resid[left] = prob.residual(x[:, left], Zx[:, left], W[:, left])
        done[left] = resid[left] <= tol
    return _SolveOut(x, Fx, resid, iters, done, nback, trace)


def _check_inputs(model: ModelSpec, pen: PenaltySpec, data: Dataset):
    if data.X.shape[1] != model.p:
        raise ValueError(f"data has p={data.X.shape[1]}, model expects {model.p}")
    pen.r0.check(model.p)
    model.loss.check_y(data.y)


def objective(model: ModelSpec, pen: PenaltySpec, data: Dataset, beta, smoothed: bool = False,
              alpha: float | None = None) -> float:
    """h(beta), or h^alpha(beta) when ``smoothed``."""
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (model.p,):
        raise ValueError(f"beta has shape {beta.shape}, expected ({model.p},)")
    loss = float(np.sum(model.loss.value(data.y, data.X @ beta)))
    if smoothed:
        a = pen.alpha if alpha is None else alpha
        r = float(pen.smoothed(a).value(beta)) if not math.isinf(a) else float(pen.r0.value(beta))
    else:
        r = float(pen.r0.value(beta))
    return loss + pen.lam * (1.0 - pen.eta) * r + pen.lam * pen.eta * float(beta @ beta)


def fp_residual(model: ModelSpec, pen: PenaltySpec, data: Dataset, beta, alpha: float | None = None) -> float:
    """Fixed-point residual of the projected (proximal) gradient map at unit step."""
    a = pen.alpha if alpha is None else alpha
    prob = _Problem(model, pen, data, a, 0.0)
    B = np.asarray(beta, dtype=float)[:, None]
    return float(prob.residual(B, data.X @ B, np.ones((data.n, 1)))[0])


def _result(out: _SolveOut, col: int, alpha: float, route: str, iters_before: int = 0, nb_before: int = 0) -> FitResult:
    beta = out.x[:, col].copy()
    beta.setflags(write=False)
    return FitResult(
        beta_hat=beta,
        objective=float(out.F[col]),
        fp_residual=float(out.resid[col]),
        iters=int(out.iters[col]) + iters_before,
        converged=bool(out.done[col]),
        alpha_used=alpha,
        n_backtracks=int(out.nback[col]) + nb_before,
        route=route,
        trace=tuple(out.trace),
    )


def fit(model: ModelSpec, pen: PenaltySpec, data: Dataset, config: SolverConfig | None = None,
        init=None, strict: bool = True, trace: bool = False, lmax: float | None = None) -> FitResult:
    config = config or SolverConfig()
    _check_inputs(model, pen, data)
    lmax = _power_lmax(data.X) if lmax is None else lmax
    B = np.zeros((model.p, 1)) if init is None else np.asarray(init, dtype=float).reshape(model.p, 1)
    W = np.ones((data.n, 1))
    stages = alpha_schedule(config, pen.alpha)
    iters = nb = 0
    tr: list = []
    for j, a in enumerate(stages):
        prob = _Problem(model, pen, data, a, lmax)
        tol = config.tol if j == len(stages) - 1 else max(config.tol, config.stage_tol)
        out = _solve(prob, B, W, config, tol, record_trace=trace)
        B = out.x
        tr.extend(out.trace)
        if j < len(stages) - 1:
            iters += int(out.iters[0])
            nb += int(out.nback[0])
    res = _result(out, 0, stages[-1], prob.route, iters, nb)
    if trace:
        res = FitResult(**{**res.__dict__, "trace": tuple(tr)})
    if strict and not res.converged:
        raise NonConvergence(res.fp_residual, res.beta_hat, alpha=res.alpha_used)
    return res


def fit_loo(model: ModelSpec, pen: PenaltySpec, data: Dataset, config: SolverConfig | None = None,
            strict: bool = True, full: FitResult | None = None, warm_start: bool = True) -> LooFits:
    """Full fit plus the n leave-one-out refits, solved in fixed-size column blocks."""
    config = config or SolverConfig()
    n = data.n
    if n < 2:
        raise ValueError("leave-one-out needs n >= 2")
    lmax = _power_lmax(data.X)
    if full is None:
        full = fit(model, pen, data, config, strict=strict, lmax=lmax)
    alpha = full.alpha_used
    prob = _Problem(model, pen, data, alpha, lmax)
    per_i = []
    for start in range(0, n, config.chunk):
        idx = np.arange(start, min(n, start + config.chunk))
        W = np.ones((n, idx.size))
        W[idx, np.arange(idx.size)] = 0.0
        if warm_start:
            B0 = np.repeat(np.asarray(full.beta_hat)[:, None], idx.size, axis=1)
        else:
            B0 = np.zeros((model.p, idx.size))
        out = _solve(prob, B0, W, config, config.tol)
        for c, i in enumerate(idx):
            r = _result(out, c, alpha, prob.route)
            if strict and not r.converged:
                raise NonConvergence(r.fp_residual, r.beta_hat, index=int(i), alpha=alpha)
            per_i.append(r)
    return LooFits(full=full, per_i=tuple(per_i), warm_start_used=warm_start)


def fit_smoothing_path(model: ModelSpec, pen: PenaltySpec, data: Dataset, config: SolverConfig | None,
                       alphas, strict: bool = True) -> tuple[list[FitResult], list[float]]:
    """One fit per alpha, each warm-started at the previous, with sup-gap bounds."""
    config = config or SolverConfig()
    alphas = [float(a) for a in alphas]
    if any(a < 1 for a in alphas) or any(b <= a for a, b in zip(alphas, alphas[1:])):
        raise ValueError("alphas must be strictly increasing and >= 1")
    lmax = _power_lmax(data.X)
    single = SolverConfig(**{**config.__dict__, "alpha0": None, "alpha_max": None})
    fits, gaps, init = [], [], None
    for a in alphas:
        pa = PenaltySpec(**{**pen.__dict__, "alpha": a})
        try:
            f = fit(model, pa, data, single, init=init, strict=strict, lmax=lmax)
        except NonConvergence as e:
            e.alpha = a
            raise
        fits.append(f)
        gaps.append(sup_gap_bound(pen.r0, a, model.p))
        init = f.beta_hat
    return fits, gaps
