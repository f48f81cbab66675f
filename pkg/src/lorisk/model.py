"""Loss families, synthetic GLM data and signal-to-noise diagnostics.

Designs follow the proportional regime: ``n = round(gamma0 * p)`` and the
feature covariance has eigenvalues of order ``1/p`` so that ``x_i' beta*``
stays O(1) as the dimension grows.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import expit, gammaln, log_expit

__all__ = [
    "DomainError",
    "LossFamily",
    "SquaredError",
    "LogisticNLL",
    "PoissonNLL",
    "LOSSES",
    "get_loss",
    "ErrorMetric",
    "CovarianceSpec",
    "ModelSpec",
    "Dataset",
    "SnrReport",
    "eval_loss",
    "eval_loss_grad",
    "make_beta_star",
    "make_model_spec",
    "generate_dataset",
    "draw_linear_predictors",
    "compute_snr",
]


class DomainError(ValueError):
    """Response value outside the support of a loss family."""


def softplus(z):
    return np.logaddexp(0.0, z)


def log_softplus(z):
    """log(log(1 + e^z)) without underflow for very negative z."""
    z = np.asarray(z, dtype=float)
    with np.errstate(divide="ignore", over="ignore", under="ignore"):
        direct = np.log(softplus(np.maximum(z, -30.0)))
        tail = z - 0.5 * np.exp(np.minimum(z, -30.0))
    return np.where(z < -30.0, tail, direct)


class LossFamily:
    """Scalar loss l(y, z) in the linear predictor z, with derivatives.

    All methods broadcast over numpy arrays. ``growth`` is the declared
    pair (C, s) with max(|l|, |l'|) <= C (1 + |y|^s + |z|^s).
    """

    name: str = ""
    growth: tuple[float, float] = (1.0, 2.0)

    def check_y(self, y) -> None:
        y = np.asarray(y, dtype=float)
        if not np.all(np.isfinite(y)):
            raise DomainError(f"{self.name}: response must be finite")

    def value(self, y, z):
        raise NotImplementedError

    def grad(self, y, z):
        raise NotImplementedError

    def hess(self, y, z):
        raise NotImplementedError

    def curvature_bound(self, y) -> float:
        """Upper bound on l''(y_i, z) over all z for the observed responses."""
        raise NotImplementedError

    def sample(self, z, rng: np.random.Generator, noise_sigma: float = 1.0):
        raise NotImplementedError

    def cond_var(self, z, noise_sigma: float = 1.0):
        """var(y | x'beta* = z) under the family's generative law."""
        raise NotImplementedError

    def __repr__(self) -> str:
        return f"{type(self).__name__}()"

    def __eq__(self, other) -> bool:
        return type(self) is type(other)

    def __hash__(self) -> int:
        return hash(type(self).__name__)


class SquaredError(LossFamily):
    name = "squared"
    growth = (1.0, 2.0)

    def value(self, y, z):
        return 0.5 * (np.asarray(y, dtype=float) - z) ** 2

    def grad(self, y, z):
        return np.asarray(z, dtype=float) - y

    def hess(self, y, z):
        return np.ones(np.broadcast(np.asarray(y), np.asarray(z)).shape)

    def curvature_bound(self, y) -> float:
        return 1.0

    def sample(self, z, rng, noise_sigma=1.0):
        z = np.asarray(z, dtype=float)
        return z + noise_sigma * rng.standard_normal(z.shape)

    def cond_var(self, z, noise_sigma=1.0):
        return np.full(np.shape(z), noise_sigma**2, dtype=float)


class LogisticNLL(LossFamily):
    name = "logistic"
    growth = (1.0, 1.0)

    def check_y(self, y) -> None:
        y = np.asarray(y, dtype=float)
        if not np.all((y == 0.0) | (y == 1.0)):
            raise DomainError("logistic: response must lie in {0, 1}")

    def value(self, y, z):
        z = np.asarray(z, dtype=float)
        return softplus(z) - np.asarray(y, dtype=float) * z

    def grad(self, y, z):
        return expit(z) - np.asarray(y, dtype=float)

    def hess(self, y, z):
        s = expit(z)
        return np.broadcast_to(s * (1.0 - s), np.broadcast(np.asarray(y), s).shape).copy()

    def curvature_bound(self, y) -> float:
        return 0.25

    def sample(self, z, rng, noise_sigma=1.0):
        z = np.asarray(z, dtype=float)
        return (rng.random(z.shape) < expit(z)).astype(float)

    def cond_var(self, z, noise_sigma=1.0):
        s = expit(z)
        return s * (1.0 - s)


class PoissonNLL(LossFamily):
    """Poisson likelihood with softplus mean mu = log(1 + e^z)."""

    name = "poisson"
    growth = (2.0, 2.0)

    def check_y(self, y) -> None:
        y = np.asarray(y, dtype=float)
        if not np.all((y >= 0.0) & (y == np.floor(y))):
            raise DomainError("poisson: response must be a nonnegative integer")

    def value(self, y, z):
        y = np.asarray(y, dtype=float)
        z = np.asarray(z, dtype=float)
        ylogmu = np.where(y == 0.0, 0.0, y * log_softplus(z))
        return gammaln(y + 1.0) + softplus(z) - ylogmu

    def _ratio(self, z):
        # sigmoid(z) / softplus(z)
        return np.exp(log_expit(z) - log_softplus(z))

    def grad(self, y, z):
        y = np.asarray(y, dtype=float)
        return expit(z) - y * self._ratio(z)

    def hess(self, y, z):
        y = np.asarray(y, dtype=float)
        z = np.asarray(z, dtype=float)
        s = expit(z)
        r = self._ratio(z)
        # d/dz (s / mu) = s (1 - s) / mu - r^2
        return s * (1.0 - s) + y * (r**2 - (1.0 - s) * r)

    def curvature_bound(self, y) -> float:
        # l'' <= 1/4 + y * sup_z(-(log mu)'') and that sup is about 0.167
        return float(np.max(1.0 + np.asarray(y, dtype=float), initial=1.0))

    def sample(self, z, rng, noise_sigma=1.0):
        return rng.poisson(softplus(np.asarray(z, dtype=float))).astype(float)

    def cond_var(self, z, noise_sigma=1.0):
        return softplus(np.asarray(z, dtype=float))


LOSSES: dict[str, LossFamily] = {
    "squared": SquaredError(),
    "logistic": LogisticNLL(),
    "poisson": PoissonNLL(),
}


def get_loss(name: str) -> LossFamily:
    try:
        return LOSSES[name]
    except KeyError:
        raise ValueError(f"unknown loss family {name!r}; expected one of {sorted(LOSSES)}") from None


def eval_loss(family: LossFamily, y, z):
    family.check_y(y)
    out = family.value(y, z)
    return float(out) if np.ndim(out) == 0 else out


def eval_loss_grad(family: LossFamily, y, z):
    family.check_y(y)
    out = family.grad(y, z)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class ErrorMetric:
    """Risk function phi(y, z); the loss itself unless stated otherwise."""

    family: LossFamily

    @property
    def name(self) -> str:
        return self.family.name

    def value(self, y, z):
        return self.family.value(y, z)

    def grad(self, y, z):
        return self.family.grad(y, z)


@dataclass(frozen=True)
class CovarianceSpec:
    """Feature covariance with eigenvalues in [c_X / p, C_X / p].

    kind is ``identity`` (scale ``c``), ``diagonal`` (entries ``d``) or
    ``ar1`` (correlation ``rho``).
    """

    kind: str = "identity"
    c: float = 1.0
    d: tuple[float, ...] = ()
    rho: float = 0.0

    def __post_init__(self):
        if self.kind not in ("identity", "diagonal", "ar1"):
            raise ValueError(f"unknown covariance kind {self.kind!r}")
        if self.kind == "identity" and not self.c > 0:
            raise ValueError("identity covariance needs c > 0")
        if self.kind == "diagonal" and (len(self.d) == 0 or min(self.d) <= 0):
            raise ValueError("diagonal covariance needs positive entries d")
        if self.kind == "ar1" and not -1.0 < self.rho < 1.0:
            raise ValueError("ar1 covariance needs |rho| < 1")

    def bounds(self) -> tuple[float, float]:
        """Declared (c_X, C_X), before division by p."""
        if self.kind == "identity":
            return self.c, self.c
        if self.kind == "diagonal":
            return min(self.d), max(self.d)
        r = abs(self.rho)
        return (1.0 - r) / (1.0 + r), (1.0 + r) / (1.0 - r)

    def matrix(self, p: int) -> np.ndarray:
        if self.kind == "identity":
            return np.eye(p) * (self.c / p)
        if self.kind == "diagonal":
            if len(self.d) != p:
                raise ValueError(f"diagonal covariance has {len(self.d)} entries, expected p={p}")
            return np.diag(np.asarray(self.d, dtype=float)) / p
        idx = np.arange(p)
        return self.rho ** np.abs(idx[:, None] - idx[None, :]) / p

    def factor(self, p: int) -> np.ndarray:
        """Lower-triangular L with L L' = Sigma."""
        if self.kind == "identity":
            return np.eye(p) * math.sqrt(self.c / p)
        if self.kind == "diagonal":
            return np.diag(np.sqrt(np.asarray(self.d, dtype=float) / p))
        return np.linalg.cholesky(self.matrix(p))

    def to_dict(self) -> dict:
        if self.kind == "identity":
            return {"kind": "identity", "c": self.c}
        if self.kind == "diagonal":
            return {"kind": "diagonal", "d": list(self.d)}
        return {"kind": "ar1", "rho": self.rho}


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ModelSpec:
    n: int
    p: int
    gamma0: float
    beta_star: np.ndarray
    covariance: CovarianceSpec = field(default_factory=CovarianceSpec)
    loss: LossFamily = field(default_factory=LogisticNLL)
    metric: ErrorMetric | None = None
    noise_sigma: float = 1.0
    xi_bounds: tuple[float, float] = (0.0, 10.0)

    def __post_init__(self):
        if not self.gamma0 > 0 or not math.isfinite(self.gamma0):
            raise ValueError("gamma0 must lie in (0, inf)")
        if self.p < 1:
            raise ValueError("p must be >= 1")
        if self.n != round(self.gamma0 * self.p):
            raise ValueError(f"n={self.n} is not round(gamma0 * p)={round(self.gamma0 * self.p)}")
        beta = _frozen(self.beta_star)
        if beta.shape != (self.p,):
            raise ValueError(f"beta_star has shape {beta.shape}, expected ({self.p},)")
        object.__setattr__(self, "beta_star", beta)
        if self.metric is None:
            object.__setattr__(self, "metric", ErrorMetric(self.loss))
        lo, hi = self.xi_bounds
        scale = float(beta @ beta) / self.p
        if not lo**2 <= scale <= hi**2:
            raise ValueError(f"p^-1 ||beta*||^2 = {scale:.4g} outside [{lo**2:.4g}, {hi**2:.4g}]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")

    @property
    def sigma(self) -> np.ndarray:
        return self.covariance.matrix(self.p)

    def signal_var(self) -> float:
        b = self.beta_star
        return float(b @ self.sigma @ b)


BETA_STAR_MODES = ("rademacher", "positive", "gaussian", "isotone", "zero")


def make_beta_star(p: int, mode: str = "rademacher", seed: int = 0, scale: float = 1.0) -> np.ndarray:
    """True coefficients with p^-1 ||beta*||^2 = scale^2 (exactly, except ``zero``)."""
    rng = np.random.default_rng(seed)
    if mode == "zero":
        return np.zeros(p)
    if mode == "rademacher":
        b = rng.choice([-1.0, 1.0], size=p)
    elif mode == "positive":
        b = np.ones(p)
    elif mode == "gaussian":
        b = rng.standard_normal(p)
    elif mode == "isotone":
        b = np.linspace(0.0, 1.0, p) + 1.0 / p
    else:
        raise ValueError(f"unknown beta_star_mode {mode!r}; expected one of {BETA_STAR_MODES}")
    return b * (scale * math.sqrt(p) / np.linalg.norm(b))


def make_model_spec(
    loss: str = "logistic",
    p: int = 100,
    gamma0: float = 2.0,
    covariance: CovarianceSpec | None = None,
    beta_star_mode: str = "rademacher",
    noise_sigma: float = 1.0,
    metric: str | None = None,
    snr_target: float | None = None,
    beta_seed: int = 0,
) -> ModelSpec:
    """Build a ModelSpec from declarative fields.

    With ``snr_target`` the coefficient scale is tuned (bisection in log
    scale, fixed Monte Carlo seed) so that ``compute_snr`` hits the target.
    """
    covariance = covariance or CovarianceSpec()
    fam = get_loss(loss)
    met = ErrorMetric(get_loss(metric)) if metric else None
    n = round(gamma0 * p)

    def build(scale: float) -> ModelSpec:
        beta = make_beta_star(p, beta_star_mode, seed=beta_seed, scale=scale)
        return ModelSpec(n=n, p=p, gamma0=gamma0, beta_star=beta, covariance=covariance,
                         loss=fam, metric=met, noise_sigma=noise_sigma)

    if snr_target is None:
        return build(1.0)
    if beta_star_mode == "zero":
        raise ValueError("snr_target needs a nonzero beta_star_mode")
    from scipy.optimize import brentq

    def gap(log_scale: float) -> float:
        return math.log(compute_snr(build(math.exp(log_scale)), 20_000, seed=12345).snr / snr_target)

    log_scale = brentq(gap, math.log(1e-3), math.log(3.0), xtol=1e-10)
    return build(math.exp(log_scale))


@dataclass(frozen=True, eq=False)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    seed: int

    def __post_init__(self):
        X, y = _frozen(self.X), _frozen(self.y)
        if X.ndim != 2 or y.shape != (X.shape[0],):
            raise ValueError(f"inconsistent shapes X{X.shape} y{y.shape}")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def mask(self, i: int) -> np.ndarray:
        """Observation weights realizing D_{/i}."""
        w = np.ones(self.n)
        w[i] = 0.0
        return w


def generate_dataset(spec: ModelSpec, seed: int) -> Dataset:
    rng = np.random.default_rng(seed)
    L = spec.covariance.factor(spec.p)
    X = rng.standard_normal((spec.n, spec.p)) @ L.T
    y = spec.loss.sample(X @ spec.beta_star, rng, spec.noise_sigma)
    return Dataset(X=X, y=y, seed=int(seed))


def draw_linear_predictors(spec: ModelSpec, W: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    """Draw m rows of x0' W for fresh x0 ~ N(0, Sigma).

    Only the joint law of the k projections matters, so this samples the
    k-variate Gaussian with covariance W' Sigma W instead of p-dimensional x0.
    """
    W = np.atleast_2d(np.asarray(W, dtype=float).T).T
    G = W.T @ spec.sigma @ W
    evals, evecs = np.linalg.eigh(0.5 * (G + G.T))
    root = evecs * np.sqrt(np.clip(evals, 0.0, None))
    return rng.standard_normal((m, W.shape[1])) @ root.T


@dataclass(frozen=True)
class SnrReport:
    signal_var: float
    mean_noise_var: float
    snr: float
    snr_se: float
    infinite: bool = False


def compute_snr(spec: ModelSpec, mc_samples: int = 100_000, seed: int = 0) -> SnrReport:
    if mc_samples < 1000:
        raise ValueError("mc_samples must be >= 1000")
    signal = spec.signal_var()
    rng = np.random.default_rng(seed)
    z = math.sqrt(signal) * rng.standard_normal(mc_samples)
    noise = spec.loss.cond_var(z, spec.noise_sigma)
    mean_noise = float(noise.mean())
    noise_se = float(noise.std(ddof=1)) / math.sqrt(mc_samples)
    if mean_noise < 1e-12:
        return SnrReport(signal, mean_noise, math.inf, math.inf, infinite=True)
    snr = signal / mean_noise
    return SnrReport(signal, mean_noise, snr, signal * noise_se / mean_noise**2)


def moment_of_norm(spec: ModelSpec, power: int, n_draws: int, seed: int) -> tuple[float, float]:
    """Monte Carlo mean and standard error of ||x||^power, x ~ N(0, Sigma)."""
    rng = np.random.default_rng(seed)
    L = spec.covariance.factor(spec.p)
    vals = []
    for start in range(0, n_draws, 5000):
        k = min(5000, n_draws - start)
        x = rng.standard_normal((k, spec.p)) @ L.T
        vals.append(np.sum(x * x, axis=1) ** (power / 2))
    v = np.concatenate(vals)
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(n_draws))


LossFn = Callable[[np.ndarray, np.ndarray], np.ndarray]
