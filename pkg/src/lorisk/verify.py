"""Experiment harness: the 1/n rate of E(LO - OO)^2 and deterministic bound audits.

Seeds: every replicate draws from ``SeedSequence(base_seed, spawn_key=(n, r, purpose))``
so results do not depend on worker count or scheduling. BLAS is pinned to a
single thread inside each task for the same reason.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from .config import build_model, build_penalty, build_solver
from .model import Dataset, ModelSpec, draw_linear_predictors, generate_dataset, moment_of_norm
from .penalty import FullSpace, Lasso, PenaltySpec
from .reference import coordinate_descent
from .risk import RiskReport, compute_oo, risk_report
from .solver import FitResult, LooFits, NonConvergence, SolverConfig, SolverDivergence, fit, fit_loo, fit_smoothing_path

__all__ = [
    "RateExperiment",
    "RateReport",
    "RateAbort",
    "AuditRecord",
    "BoundAuditReport",
    "MomentsReport",
    "run_rate_experiment",
    "audit_lemma4",
    "audit_lemma8",
    "run_lemma8_audit",
    "audit_moments",
    "fit_slope",
    "seed_for",
]

PURPOSE_DATA, PURPOSE_OO, PURPOSE_BOOT, PURPOSE_MOMENT = 0, 1, 2, 3

# multiplies the displacement bound; 1 is the proved constant
LEMMA4_SCALE = 1.0


def seed_for(base_seed: int, *key: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(base_seed), spawn_key=tuple(int(k) for k in key))


def _int_seed(ss: np.random.SeedSequence) -> int:
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def solver_slack(tol: float, pen: PenaltySpec) -> float:
    return 100.0 * tol / pen.strong_convexity


class RateAbort(RuntimeError):
    pass


@dataclass(frozen=True)
class RateExperiment:
    """Rate study driven by a merged config document.

    The document's model/penalty/solver sections form the template; sizes
    come from ``n_grid`` with p = round(n / gamma0).
    """

    config: dict
    n_grid: tuple
    replicates: int = 50
    m_oo: int = 100_000
    base_seed: int = 0
    n_boot: int = 2000
    decomposition: bool = False
    m_cond: int = 1000
    max_m_oo: int = 10_000_000

    def __post_init__(self):
        g0 = float(self.config["model"]["gamma0"])
        if self.replicates < 10:
            raise ValueError("replicates must be >= 10")
        for n in self.n_grid:
            p = round(n / g0)
            if p < 2 or round(g0 * p) != n:
                raise ValueError(f"n={n} does not give a valid p >= 2 with n = round(gamma0 p)")

    @classmethod
    def from_config(cls, cfg: dict, base_seed: int = 0) -> "RateExperiment":
        e = cfg["experiment"]
        return cls(cfg, tuple(e["n_grid"]), e["replicates"], e["m_oo"], base_seed, e["n_boot"],
                   bool(e["decomposition"]), e["m_cond"])


@dataclass
class RateReport:
    rows: list  # per-n summaries
    replicates: list  # RiskReport per successful replicate
    slope: float
    intercept: float
    ci: tuple
    m_oo: int
    failures: int
    bias_ok: bool
    notes: list = field(default_factory=list)

    ROW_COLUMNS = ("n", "p", "replicates", "failures", "m_oo", "mse_raw", "mc_bias", "mse", "mse_se")

    @property
    def ci_width(self) -> float:
        return self.ci[1] - self.ci[0]


def _replicate(task):
    cfg, n, r, base_seed, m_oo, decomposition, m_cond = task
    with threadpool_limits(1):
        try:
            model = build_model(cfg, n)
            pen = build_penalty(cfg, model.p)
            data = generate_dataset(model, _int_seed(seed_for(base_seed, n, r, PURPOSE_DATA)))
            loo = fit_loo(model, pen, data, build_solver(cfg), strict=True)
            rep = risk_report(loo, data, model, pen, m_oo, seed_for(base_seed, n, r, PURPOSE_OO),
                              decomposition=decomposition, m_cond=m_cond)
            return n, r, rep, np.asarray(loo.full.beta_hat), None
        except (NonConvergence, SolverDivergence, FloatingPointError) as e:
            return n, r, None, None, f"{type(e).__name__}: {e}"


def _recompute_oo(task):
    cfg, n, r, base_seed, m_oo, beta = task
    with threadpool_limits(1):
        model = build_model(cfg, n)
        return compute_oo(beta, model, m_oo, seed_for(base_seed, n, r, PURPOSE_OO, m_oo))


def _map(fn, tasks, threads: int):
    if threads <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, tasks, chunksize=1))


def fit_slope(n: np.ndarray, mse: np.ndarray) -> tuple[float, float]:
    """OLS of log mse on log n; returns (slope, intercept)."""
    x, y = np.log(n), np.log(mse)
    slope, intercept = np.polyfit(x, y, 1)
    return float(slope), float(intercept)


def _mse(sq: np.ndarray, bias: np.ndarray) -> float:
    raw = float(sq.mean())
    # clamp at a tiny fraction of the raw mean so the log stays finite
    return max(raw - float(bias.mean()), 1e-12 * raw, 1e-300)


def run_rate_experiment(exp: RateExperiment, threads: int = 1) -> RateReport:
    cfg = exp.config
    tasks = [(cfg, n, r, exp.base_seed, exp.m_oo, exp.decomposition, exp.m_cond)
             for n in exp.n_grid for r in range(exp.replicates)]
    results = _map(_replicate, tasks, threads)
    failures = [res for res in results if res[2] is None]
    total = len(results)
    if len(failures) > 0.05 * total:
        raise RateAbort(f"{len(failures)} of {total} replicates failed; first: {failures[0][4]}")
    ok = [res for res in results if res[2] is not None]
    reps: dict[int, list] = {n: [] for n in exp.n_grid}
    betas: dict[tuple, np.ndarray] = {}
    for n, r, rep, beta, _ in ok:
        reps[n].append((r, rep))
        betas[(n, r)] = beta

    m_oo = exp.m_oo
    notes = []
    n_max = exp.n_grid[-1]

    def summarize():
        sq = {n: np.array([x.sq_err for _, x in reps[n]]) for n in exp.n_grid}
        bias = {n: np.array([x.mc_bias for _, x in reps[n]]) for n in exp.n_grid}
        return sq, bias

    sq, bias = summarize()
    bias_ok = bias[n_max].mean() <= 0.1 * _mse(sq[n_max], bias[n_max])
    while not bias_ok and m_oo * 4 <= exp.max_m_oo:
        m_oo *= 4
        notes.append(f"MC bias above 10% of MSE at n={n_max}; m_oo raised to {m_oo}")
        keys = sorted(betas)
        new = _map(_recompute_oo, [(cfg, n, r, exp.base_seed, m_oo, betas[(n, r)]) for n, r in keys], threads)
        lookup = dict(zip(keys, new))
        for n in exp.n_grid:
            reps[n] = [(r, _with_oo(rep, lookup[(n, r)])) for r, rep in reps[n]]
        sq, bias = summarize()
        bias_ok = bias[n_max].mean() <= 0.1 * _mse(sq[n_max], bias[n_max])

    ns = np.array(exp.n_grid, dtype=float)
    mse = np.array([_mse(sq[n], bias[n]) for n in exp.n_grid])
    slope, intercept = fit_slope(ns, mse)

    rng = np.random.default_rng(seed_for(exp.base_seed, 0, 0, PURPOSE_BOOT))
    boot = np.empty(exp.n_boot)
    for b in range(exp.n_boot):
        m_b = []
        for n in exp.n_grid:
            idx = rng.integers(0, len(sq[n]), len(sq[n]))
            m_b.append(_mse(sq[n][idx], bias[n][idx]))
        boot[b] = fit_slope(ns, np.array(m_b))[0]
    ci = (float(np.quantile(boot, 0.025)), float(np.quantile(boot, 0.975)))

    fail_by_n = {n: sum(1 for f in failures if f[0] == n) for n in exp.n_grid}
    rows = []
    for n, m in zip(exp.n_grid, mse):
        rows.append({
            "n": n, "p": round(n / float(cfg["model"]["gamma0"])),
            "replicates": len(reps[n]), "failures": fail_by_n[n], "m_oo": m_oo,
            "mse_raw": float(sq[n].mean()), "mc_bias": float(bias[n].mean()), "mse": float(m),
            "mse_se": float(sq[n].std(ddof=1) / math.sqrt(len(sq[n]))),
        })
    flat = [rep for n in exp.n_grid for _, rep in reps[n]]
    return RateReport(rows, flat, slope, intercept, ci, m_oo, len(failures), bool(bias_ok), notes)


def _with_oo(rep: RiskReport, oo: tuple[float, float]) -> RiskReport:
    return RiskReport(**{**rep.__dict__, "oo_mc": oo[0], "oo_mc_se": oo[1]})


# bound audits


@dataclass(frozen=True)
class AuditRecord:
    check: str
    instance: str
    index: float
    lhs: float
    rhs: float
    slack: float

    @property
    def passed(self) -> bool:
        return self.lhs <= self.rhs + self.slack

    def to_row(self) -> dict:
        return {"check": self.check, "instance": self.instance, "index": self.index, "lhs": self.lhs,
                "rhs": self.rhs, "slack": self.slack, "pass": int(self.passed)}


@dataclass
class BoundAuditReport:
    records: list
    mode: str = "exact"
    notes: list = field(default_factory=list)

    COLUMNS = ("check", "instance", "index", "lhs", "rhs", "slack", "pass")

    @property
    def pass_rate(self) -> float:
        return sum(r.passed for r in self.records) / len(self.records) if self.records else 1.0

    @property
    def all_pass(self) -> bool:
        return all(r.passed for r in self.records)

    def extend(self, other: "BoundAuditReport") -> None:
        self.records.extend(other.records)
        self.notes.extend(other.notes)


def audit_lemma4(model: ModelSpec, pen: PenaltySpec, data: Dataset, loo: LooFits, tol: float,
                 instance: str = "") -> BoundAuditReport:
    """Per-observation displacement ||b - b_{/i}|| against |l'_i(b_{/i})| ||x_i|| / min(2 lam eta, 1)."""
    B = loo.betas
    full = np.asarray(loo.full.beta_hat)
    lhs = np.linalg.norm(B - full[:, None], axis=0)
    z = np.einsum("ij,ji->i", data.X, B)
    dl = np.abs(model.loss.grad(data.y, z))
    rhs = LEMMA4_SCALE * dl * np.linalg.norm(data.X, axis=1) / min(pen.strong_convexity, 1.0)
    slack = solver_slack(tol, pen)
    recs = [AuditRecord("lemma4", instance, i, float(lhs[i]), float(rhs[i]), slack) for i in range(data.n)]
    notes = [] if loo.all_converged else [f"{instance}: some refits did not reach tolerance"]
    return BoundAuditReport(recs, notes=notes)


def audit_lemma8(fits: list[FitResult], eta: float, gaps: list[float], beta_ref: np.ndarray | None,
                 slack: float = 0.0, instance: str = "") -> BoundAuditReport:
    """Smoothing stability ||b^alpha - b|| <= sqrt(2 (1 - eta) / eta * gap(alpha)).

    With an exact reference the bound is checked directly. Without one, each
    consecutive pair is checked against the triangle-inequality form
    2 sqrt(2 (1 - eta) / eta * gap(alpha_1)).
    """
    c = 2.0 * (1.0 - eta) / eta
    recs = []
    if beta_ref is not None:
        for f, g in zip(fits, gaps):
            lhs = float(np.linalg.norm(np.asarray(f.beta_hat) - beta_ref))
            recs.append(AuditRecord("lemma8", instance, f.alpha_used, lhs, math.sqrt(c * g), slack))
        return BoundAuditReport(recs, mode="exact")
    for (f1, g1), f2 in zip(zip(fits, gaps), fits[1:]):
        lhs = float(np.linalg.norm(np.asarray(f2.beta_hat) - np.asarray(f1.beta_hat)))
        recs.append(AuditRecord("lemma8_pair", instance, f1.alpha_used, lhs, 2.0 * math.sqrt(c * g1), 2 * slack))
    return BoundAuditReport(recs, mode="upper-bound-only",
                            notes=["bound check unavailable without an exact reference, upper-bound-only mode"])


def run_lemma8_audit(model: ModelSpec, pen: PenaltySpec, data: Dataset, alphas, config: SolverConfig,
                     instance: str = "") -> tuple[BoundAuditReport, list[FitResult]]:
    fits, gaps = fit_smoothing_path(model, pen, data, config, alphas)
    slack = solver_slack(config.tol, pen)
    if isinstance(pen.r0, Lasso) and isinstance(pen.theta, FullSpace):
        ref = coordinate_descent(data.X, data.y, model.loss, pen.lam * (1 - pen.eta), pen.lam * pen.eta)
        return audit_lemma8(fits, pen.eta, gaps, ref, slack, instance), fits
    return audit_lemma8(fits, pen.eta, gaps, None, slack, instance), fits


# moment probes


@dataclass
class MomentsReport:
    rows: list
    notes: list = field(default_factory=list)

    COLUMNS = ("check", "n", "p", "t", "mean", "se", "stat", "limit", "pass", "hard")

    @property
    def all_pass(self) -> bool:
        """Hard rows only; the phi0^2 probe is reported but advisory."""
        return all(r["pass"] for r in self.rows if r["hard"])


def _moment_task(task):
    cfg, n, r, base_seed, m_phi = task
    with threadpool_limits(1):
        model = build_model(cfg, n)
        pen = build_penalty(cfg, model.p)
        data = generate_dataset(model, _int_seed(seed_for(base_seed, n, r, PURPOSE_DATA)))
        f = fit(model, pen, data, build_solver(cfg), strict=False)
        q = float(np.asarray(f.beta_hat) @ np.asarray(f.beta_hat)) / model.p
        rng = np.random.default_rng(seed_for(base_seed, n, r, PURPOSE_MOMENT))
        Z = draw_linear_predictors(model, np.column_stack([f.beta_hat, model.beta_star]), m_phi, rng)
        y0 = model.loss.sample(Z[:, 1], rng, model.noise_sigma)
        phi2 = float(np.mean(model.metric.value(y0, Z[:, 0]) ** 2))
        return n, model.p, q, phi2, f.converged


def trend_check(ns, means, ses) -> tuple[float, float, bool]:
    """Weighted LS slope of moment vs log n; flags growth only beyond 3 SE of the slope."""
    x = np.log(np.asarray(ns, dtype=float))
    w = 1.0 / np.maximum(np.asarray(ses) ** 2, 1e-300)
    xm = np.sum(w * x) / np.sum(w)
    sxx = np.sum(w * (x - xm) ** 2)
    slope = float(np.sum(w * (x - xm) * np.asarray(means)) / sxx)
    se = float(1.0 / math.sqrt(sxx))
    return slope, se, slope <= 3.0 * se


def audit_moments(cfg: dict, n_grid, replicates: int, n_draws: int, base_seed: int = 0,
                  threads: int = 1, m_phi: int = 10_000) -> MomentsReport:
    """Bounded-moment probes: ||x||^8, p^-1 ||b||^2 (t = 1, 2) and phi0^2 across an n-grid."""
    if n_draws < 10_000:
        raise ValueError("n_draws must be >= 10000")
    rows = []
    model0 = build_model(cfg, n_grid[0])
    cx_hi = model0.covariance.bounds()[1]
    for n in n_grid:
        spec = build_model(cfg, n)
        mean, se = moment_of_norm(spec, 8, n_draws, _int_seed(seed_for(base_seed, n, 0, PURPOSE_MOMENT, 8)))
        bound = 24.0 * cx_hi**4
        rows.append({"check": "x_norm8", "n": n, "p": spec.p, "t": 8, "mean": mean, "se": se, "stat": mean,
                     "limit": bound + 3 * se, "pass": int(mean <= bound + 3 * se), "hard": 1})
    tasks = [(cfg, n, r, base_seed, m_phi) for n in n_grid for r in range(replicates)]
    out = _map(_moment_task, tasks, threads)
    notes = []
    if not all(o[4] for o in out):
        notes.append("some fits stopped short of tolerance")
    # phi0^2 has a tiny SE (m_phi draws per replicate), so a bounded O(1/n)
    # drift registers as a trend; it stays advisory
    for label, pick, powers, hard in (("beta_norm", 2, (1, 2), 1), ("phi0_sq", 3, (1,), 0)):
        for t in powers:
            means, ses, ps = [], [], []
            for n in n_grid:
                vals = np.array([o[pick] for o in out if o[0] == n]) ** t
                means.append(float(vals.mean()))
                ses.append(float(vals.std(ddof=1) / math.sqrt(len(vals))))
                ps.append(next(o[1] for o in out if o[0] == n))
            if len(n_grid) > 1 and max(ses) > 0:
                slope, sse, ok = trend_check(n_grid, means, ses)
            else:
                slope, sse, ok = 0.0, 0.0, True
            for n, p, m, s in zip(n_grid, ps, means, ses):
                rows.append({"check": f"{label}_trend", "n": n, "p": p, "t": t, "mean": m, "se": s,
                             "stat": slope, "limit": 3 * sse, "pass": int(ok), "hard": hard})
            if not ok and not hard:
                notes.append(f"{label} t={t}: slope {slope:.3g} exceeds 3 se {3 * sse:.3g} (advisory)")
    return MomentsReport(rows, notes)


# per-instance tasks used by the CLI and acceptance suite


def lemma4_instance(task) -> BoundAuditReport:
    cfg, k, base_seed, label = task
    with threadpool_limits(1):
        model = build_model(cfg)
        pen = build_penalty(cfg, model.p)
        solver = build_solver(cfg)
        data = generate_dataset(model, _int_seed(seed_for(base_seed, model.n, k, PURPOSE_DATA)))
        loo = fit_loo(model, pen, data, solver, strict=False)
        return audit_lemma4(model, pen, data, loo, solver.tol, instance=f"{label}seed{k}")


def lemma8_instance(task) -> BoundAuditReport:
    cfg, k, base_seed, label = task
    with threadpool_limits(1):
        model = build_model(cfg)
        pen = build_penalty(cfg, model.p)
        data = generate_dataset(model, _int_seed(seed_for(base_seed, model.n, k, PURPOSE_DATA)))
        rep, _ = run_lemma8_audit(model, pen, data, cfg["experiment"]["alphas"], build_solver(cfg),
                                  instance=f"{label}seed{k}")
        return rep


def run_instances(fn, cfg: dict, seeds: int, base_seed: int, threads: int = 1, label: str = "") -> BoundAuditReport:
    parts = _map(fn, [(cfg, k, base_seed, label) for k in range(seeds)], threads)
    out = BoundAuditReport([], mode=parts[0].mode if parts else "exact")
    for part in parts:
        out.extend(part)
    return out
