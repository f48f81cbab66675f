"""Leave-one-out risk, Monte Carlo out-of-sample risk, and the V1/V2 split.

Out-of-sample draws only enter through the linear predictors x0'b for the
handful of coefficient vectors involved, so they are sampled directly from
their joint Gaussian law (covariance W' Sigma W) rather than through
p-dimensional features. This is exact in distribution and makes m = 1e5
draws cheap.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import Dataset, ErrorMetric, ModelSpec, draw_linear_predictors
from .penalty import PenaltySpec
from .solver import FitResult, LooFits

__all__ = [
    "LoEstimate",
    "RiskReport",
    "DecompositionReport",
    "CSV_COLUMNS",
    "compute_lo",
    "compute_oo",
    "compute_decomposition",
    "gaussian_linear_oo",
    "risk_report",
]

CSV_COLUMNS = ("n", "p", "gamma0", "lambda", "eta", "penalty", "loss", "seed",
               "lo", "oo_mc", "oo_mc_se", "sq_err", "v1", "v2")

MIN_DRAWS = 1000


@dataclass(frozen=True, eq=False)
class LoEstimate:
    lo: float
    per_i_phi: np.ndarray
    degraded: bool = False


@dataclass(frozen=True, eq=False)
class DecompositionReport:
    v1: float
    v2: float
    cond_mean_per_i: np.ndarray
    cond_se_per_i: np.ndarray
    oo_mc: float
    oo_mc_se: float


@dataclass(frozen=True, eq=False)
class RiskReport:
    """One replicate's LO/OO comparison.

    ``oo_mc_se`` covers Monte Carlo noise only; OO is conditional on the
    realized data, so the spread of D is not part of it. ``mc_bias`` is the
    additive bias oo_mc_se^2 that the MC estimate adds to E(LO - OO)^2.
    """

    n: int
    p: int
    gamma0: float
    lam: float
    eta: float
    penalty: str
    loss: str
    seed: int
    lo: float
    oo_mc: float
    oo_mc_se: float
    per_i_phi: np.ndarray
    v1: float = math.nan
    v2: float = math.nan
    degraded: bool = False
    extra: dict = field(default_factory=dict)

    @property
    def sq_err(self) -> float:
        return (self.lo - self.oo_mc) ** 2

    @property
    def mc_bias(self) -> float:
        return self.oo_mc_se**2

    def to_row(self) -> dict:
        return {
            "n": self.n, "p": self.p, "gamma0": self.gamma0, "lambda": self.lam, "eta": self.eta,
            "penalty": self.penalty, "loss": self.loss, "seed": self.seed, "lo": self.lo,
            "oo_mc": self.oo_mc, "oo_mc_se": self.oo_mc_se, "sq_err": self.sq_err,
            "v1": self.v1, "v2": self.v2,
        }


def compute_lo(loo: LooFits, data: Dataset, metric: ErrorMetric) -> LoEstimate:
    B = loo.betas
    z = np.einsum("ij,ji->i", data.X, B)
    phi = np.asarray(metric.value(data.y, z), dtype=float)
    phi.setflags(write=False)
    return LoEstimate(float(phi.mean()), phi, degraded=not loo.all_converged)


def _check_m(m: int):
    if m < MIN_DRAWS:
        raise ValueError(f"need at least {MIN_DRAWS} Monte Carlo draws, got {m}")


def compute_oo(fit: FitResult | np.ndarray, spec: ModelSpec, m: int = 100_000, seed=0) -> tuple[float, float]:
    """Monte Carlo mean and standard error of phi(y0, x0' beta_hat)."""
    _check_m(m)
    beta = fit.beta_hat if isinstance(fit, FitResult) else np.asarray(fit, dtype=float)
    rng = np.random.default_rng(seed)
    Z = draw_linear_predictors(spec, np.column_stack([beta, spec.beta_star]), m, rng)
    y0 = spec.loss.sample(Z[:, 1], rng, spec.noise_sigma)
    phi = spec.metric.value(y0, Z[:, 0])
    return float(phi.mean()), float(phi.std(ddof=1) / math.sqrt(m))


def gaussian_linear_oo(spec: ModelSpec, beta) -> float:
    """Exact OO for squared loss under the Gaussian linear model."""
    d = np.asarray(beta, dtype=float) - spec.beta_star
    return 0.5 * (spec.noise_sigma**2 + float(d @ spec.sigma @ d))


def compute_decomposition(loo: LooFits, data: Dataset, spec: ModelSpec, m_cond: int = 1000, seed=0,
                          oo: tuple[float, float] | None = None, m_oo: int = 100_000) -> DecompositionReport:
    """V1 = LO - mean_i E[phi_i | D_{/i}], V2 = mean_i E[phi_i | D_{/i}] - OO.

    All leave-out fits share the same fresh draws (common random numbers),
    which keeps V2 free of independent per-i noise.
    """
    _check_m(m_cond)
    ss = np.random.SeedSequence(seed) if not isinstance(seed, np.random.SeedSequence) else seed
    s_cond, s_oo = ss.spawn(2)
    B = loo.betas
    rng = np.random.default_rng(s_cond)
    Z = draw_linear_predictors(spec, np.column_stack([B, spec.beta_star]), m_cond, rng)
    y0 = spec.loss.sample(Z[:, -1], rng, spec.noise_sigma)
    phi = spec.metric.value(y0[:, None], Z[:, :-1])
    cond = phi.mean(axis=0)
    cond_se = phi.std(axis=0, ddof=1) / math.sqrt(m_cond)
    if oo is None:
        oo = compute_oo(loo.full, spec, m_oo, s_oo)
    lo = compute_lo(loo, data, spec.metric).lo
    avg = float(cond.mean())
    return DecompositionReport(lo - avg, avg - oo[0], cond, cond_se, oo[0], oo[1])


def risk_report(loo: LooFits, data: Dataset, spec: ModelSpec, pen: PenaltySpec, m_oo: int = 100_000,
                seed=0, decomposition: bool = False, m_cond: int = 1000) -> RiskReport:
    """Assemble LO, OO and (optionally) V1/V2 for one fitted replicate.

    ``seed`` keys the fresh-sample streams and must be independent of the
    training stream.
    """
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    s_oo, s_dec = ss.spawn(2)
    lo = compute_lo(loo, data, spec.metric)
    oo = compute_oo(loo.full, spec, m_oo, s_oo)
    v1 = v2 = math.nan
    if decomposition:
        dec = compute_decomposition(loo, data, spec, m_cond, s_dec, oo=oo)
        v1, v2 = dec.v1, dec.v2
    return RiskReport(
        n=data.n, p=spec.p, gamma0=spec.gamma0, lam=pen.lam, eta=pen.eta, penalty=pen.r0.kind,
        loss=spec.loss.name, seed=data.seed, lo=lo.lo, oo_mc=oo[0], oo_mc_se=oo[1],
        per_i_phi=lo.per_i_phi, v1=v1, v2=v2, degraded=lo.degraded,
    )
