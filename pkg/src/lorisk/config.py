"""Declarative experiment documents: parsing, validation, overrides and spec builders.

A document is a YAML mapping with sections ``model``, ``penalty``,
``solver`` and ``experiment``. Environment variables named
``LO_RISK_<SECTION>__<KEY>`` (nested keys joined by ``__``) override
entries; ``LO_RISK_THREADS`` is reserved for the worker count.
"""
from __future__ import annotations

import copy
import math
import os
import re
from dataclasses import dataclass

import numpy as np
import yaml

from .model import LOSSES, CovarianceSpec, ModelSpec, make_model_spec
from .model import BETA_STAR_MODES
from .penalty import (
    Box,
    ConstraintSet,
    EuclideanBall,
    FullSpace,
    GeneralizedLasso,
    GroupLasso,
    IsotoneCone,
    Lasso,
    NonnegativeOrthant,
    PenaltySpec,
    R0Variant,
    SchattenNorm,
    ZeroPenalty,
    fused_difference_matrix,
)
from .solver import SolverConfig

__all__ = [
    "ConfigError",
    "DEFAULTS",
    "load_config",
    "parse_config",
    "dump_config",
    "apply_overrides",
    "env_overrides",
    "validate_config",
    "build_model",
    "build_penalty",
    "build_solver",
]

ENV_PREFIX = "LO_RISK_"

DEFAULTS: dict = {
    "model": {
        "loss": "logistic",
        "metric": None,
        "n": None,
        "p": None,
        "gamma0": 2.0,
        "covariance": {"kind": "identity", "c": 1.0},
        "beta_star_mode": "rademacher",
        "beta_seed": 0,
        "noise_sigma": 1.0,
        "snr_target": None,
    },
    "penalty": {
        "r0": {"kind": "lasso", "params": {}},
        "eta": 0.3,
        "lambda": 1.0,
        "theta": {"kind": "full"},
        "alpha": math.inf,
        "smoothing": {"mode": "closed_form", "samples": 1000, "seed": 0},
    },
    "solver": {
        "max_iters": 20000,
        "tol": 1e-8,
        "step_rule": "fixed",
        "acceleration": True,
        "alpha0": None,
        "alpha_max": None,
        "alpha_growth": 2.0,
    },
    "experiment": {
        "n_grid": [100, 200, 400, 800],
        "replicates": 50,
        "m_oo": 100000,
        "m_cond": 1000,
        "decomposition": False,
        "n_boot": 2000,
        "seeds": 5,
        "alphas": [10.0, 100.0, 1000.0, 10000.0],
        "n_draws": 10000,
        "moment_replicates": 20,
        "snr_samples": 100000,
        "snr_p_grid": [50, 200],
    },
}

R0_KINDS = ("none", "lasso", "generalized_lasso", "group_lasso", "schatten")
THETA_KINDS = ("full", "nonnegative", "box", "ball", "isotone")
COV_KINDS = ("identity", "diagonal", "ar1")
REQUIRED = (("model", "loss"), ("model", "gamma0"), ("penalty", "lambda"), ("penalty", "eta"), ("penalty", "r0"))


class _Loader(yaml.SafeLoader):
    """SafeLoader that also reads YAML 1.2 floats such as 1e9 and 1.0e9."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
    |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
    |\.[0-9_]+(?:[eE][-+]?[0-9]+)?
    |[-+]?\.(?:inf|Inf|INF)
    |\.(?:nan|NaN|NAN))$""", re.X),
    list("-+0123456789."),
)


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        super().__init__("invalid configuration:\n  " + "\n  ".join(errors))
        self.errors = errors


def _line_map(text: str) -> dict[tuple, int]:
    """Map key paths to 1-based source lines."""
    out: dict[tuple, int] = {}
    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return out

    def walk(node, path):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                key = (*path, k.value)
                out[key] = k.start_mark.line + 1
                walk(v, key)

    if root is not None:
        walk(root, ())
    return out


@dataclass
class Document:
    data: dict
    lines: dict
    source: str = "<string>"

    def where(self, path: tuple) -> str:
        for cut in range(len(path), 0, -1):
            if path[:cut] in self.lines:
                return f"{self.source}:{self.lines[path[:cut]]}: "
        return f"{self.source}: "


def parse_config(text: str, source: str = "<string>") -> Document:
    try:
        data = yaml.load(text, Loader=_Loader)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        line = f":{mark.line + 1}" if mark is not None else ""
        raise ConfigError([f"{source}{line}: malformed YAML: {getattr(e, 'problem', e)}"]) from None
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError([f"{source}: top level must be a mapping of sections"])
    return Document(data, _line_map(text), source)


def load_config(path: str) -> Document:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), source=str(path))


def dump_config(data: dict) -> str:
    return yaml.safe_dump(data, sort_keys=False, default_flow_style=None)


def _set_path(data: dict, path: list[str], value):
    node = data
    for key in path[:-1]:
        if not isinstance(node.get(key), dict):
            node[key] = {}
        node = node[key]
    node[path[-1]] = value


def _scalar(raw: str):
    return yaml.load(raw, Loader=_Loader)


def apply_overrides(data: dict, pairs: list[str]) -> dict:
    """Apply ``section.key=value`` overrides; values are parsed as YAML scalars."""
    out = copy.deepcopy(data)
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError([f"override {pair!r} is not of the form key=value"])
        key, raw = pair.split("=", 1)
        _set_path(out, key.strip().split("."), _scalar(raw))
    return out


def env_overrides(environ=None) -> list[str]:
    environ = os.environ if environ is None else environ
    pairs = []
    for name in sorted(environ):
        if name.startswith(ENV_PREFIX) and name != ENV_PREFIX + "THREADS" and "__" in name:
            path = name[len(ENV_PREFIX):].lower().split("__")
            pairs.append(".".join(path) + "=" + environ[name])
    return pairs


def merged(data: dict) -> dict:
    """Defaults overlaid with the document (one level of sections, nested dicts replaced)."""
    out = copy.deepcopy(DEFAULTS)
    for sec, body in data.items():
        if isinstance(body, dict) and sec in out:
            out[sec].update(copy.deepcopy(body))
        else:
            out[sec] = copy.deepcopy(body)
    return out


def _num(x) -> float | None:
    if isinstance(x, bool):
        return None
    if isinstance(x, (int, float)):
        return float(x)
    if isinstance(x, str) and x.strip().lower() in ("inf", "+inf", ".inf"):
        return math.inf
    return None


def validate_config(doc: Document | dict, require_size: bool = True) -> list[str]:
    """Check every static constraint; returns all errors found (empty when valid)."""
    if isinstance(doc, dict):
        doc = Document(doc, {})
    errs: list[str] = []
    raw = doc.data

    def err(path, msg):
        errs.append(f"{doc.where(path)}{'.'.join(path)}: {msg}")

    for sec in raw:
        if sec not in DEFAULTS:
            err((sec,), f"unknown section (expected one of {', '.join(DEFAULTS)})")
        elif not isinstance(raw[sec], dict):
            err((sec,), "section must be a mapping")
        else:
            for key in raw[sec]:
                if key not in DEFAULTS[sec]:
                    err((sec, key), "unknown key")
    for sec, key in REQUIRED:
        if not isinstance(raw.get(sec), dict) or key not in raw[sec]:
            err((sec, key), "missing required key")
    if errs and any("section must be" in e for e in errs):
        return errs
    cfg = merged({k: v for k, v in raw.items() if k in DEFAULTS and isinstance(v, dict)})
    m, pen, sol, exp = cfg["model"], cfg["penalty"], cfg["solver"], cfg["experiment"]

    # model
    if m["loss"] not in LOSSES:
        err(("model", "loss"), f"unknown loss {m['loss']!r} (expected one of {sorted(LOSSES)})")
    if m["metric"] is not None and m["metric"] not in LOSSES:
        err(("model", "metric"), f"unknown metric {m['metric']!r}")
    g0 = _num(m["gamma0"])
    if g0 is None or not (0 < g0 < math.inf):
        err(("model", "gamma0"), "gamma0 must lie in (0, inf) (assumption A2: n/p fixed and positive)")
        g0 = None
    n, p = m["n"], m["p"]
    for key, v in (("n", n), ("p", p)):
        if v is not None and (not isinstance(v, int) or isinstance(v, bool) or v < 1):
            err(("model", key), f"{key} must be a positive integer")
    if isinstance(n, int) and isinstance(p, int) and g0 and n != round(g0 * p):
        err(("model", "n"), f"n={n} does not equal round(gamma0 * p)={round(g0 * p)} (assumption A2)")
    if p is None and isinstance(n, int) and g0:
        p = max(1, round(n / g0))
    if require_size and p is None and n is None:
        err(("model", "p"), "set p or n (rate experiments take sizes from experiment.n_grid)")
    if m["beta_star_mode"] not in BETA_STAR_MODES:
        err(("model", "beta_star_mode"), f"unknown mode (expected one of {BETA_STAR_MODES})")
    if _num(m["noise_sigma"]) is None or m["noise_sigma"] < 0:
        err(("model", "noise_sigma"), "noise_sigma must be a nonnegative number")
    if m["snr_target"] is not None and not ((_num(m["snr_target"]) or 0) > 0):
        err(("model", "snr_target"), "snr_target must be positive")
    cov = m["covariance"]
    if not isinstance(cov, dict) or cov.get("kind") not in COV_KINDS:
        err(("model", "covariance"), f"covariance.kind must be one of {COV_KINDS}")
    else:
        try:
            _covariance(cov)
        except (ValueError, TypeError) as e:
            err(("model", "covariance"), str(e))

    # penalty
    eta, lam = _num(pen["eta"]), _num(pen["lambda"])
    if eta is None or not 0 < eta < 1:
        err(("penalty", "eta"), "eta must lie strictly inside (0,1) (assumption A4)")
    if lam is None or not 0 < lam < math.inf:
        err(("penalty", "lambda"), "lambda must be a finite positive number")
    alpha = _num(pen["alpha"])
    if alpha is None or not alpha > 0:
        err(("penalty", "alpha"), "alpha must be positive (use .inf for the unsmoothed penalty)")
    r0 = pen["r0"]
    kind = r0.get("kind") if isinstance(r0, dict) else None
    if kind not in R0_KINDS:
        err(("penalty", "r0"), f"r0.kind must be one of {R0_KINDS}")
    elif isinstance(p, int):
        try:
            built = _r0(r0, p)
            sm = pen.get("smoothing") or {}
            if (alpha is not None and not math.isinf(alpha) and sm.get("mode", "closed_form") == "closed_form"
                    and not built.closed_form_smoothing):
                err(("penalty", "smoothing"), f"{kind}: closed-form smoothing unavailable at finite alpha; "
                    "use smoothing.mode=monte_carlo or alpha=.inf")
        except (ValueError, TypeError, KeyError) as e:
            err(("penalty", "r0"), str(e))
    sm = pen.get("smoothing") or {}
    if sm.get("mode", "closed_form") not in ("closed_form", "monte_carlo"):
        err(("penalty", "smoothing"), "smoothing.mode must be closed_form or monte_carlo")
    if int(sm.get("samples", 1000)) < 100:
        err(("penalty", "smoothing"), "smoothing.samples must be >= 100")
    th = pen["theta"]
    tk = th.get("kind") if isinstance(th, dict) else None
    if tk not in THETA_KINDS:
        err(("penalty", "theta"), f"theta.kind must be one of {THETA_KINDS}")
    elif isinstance(p, int) and m["beta_star_mode"] in BETA_STAR_MODES:
        try:
            theta = _theta(th)
            b = _beta_probe(m, p)
            if not theta.contains(b, tol=1e-9):
                err(("penalty", "theta"), f"beta_star_mode={m['beta_star_mode']} gives beta* outside theta={tk}; "
                    "the model would be misspecified (choose beta_star_mode positive/isotone/zero)")
        except (ValueError, TypeError) as e:
            err(("penalty", "theta"), str(e))

    # solver
    try:
        _solver(sol)
    except (ValueError, TypeError) as e:
        err(("solver",), str(e))

    # experiment
    grid = exp["n_grid"]
    if not isinstance(grid, list) or not grid or not all(isinstance(v, int) and not isinstance(v, bool) for v in grid):
        err(("experiment", "n_grid"), "n_grid must be a nonempty list of integers")
    elif any(b <= a for a, b in zip(grid, grid[1:])):
        err(("experiment", "n_grid"), "n_grid must be strictly increasing")
    elif g0:
        for nv in grid:
            pv = round(nv / g0)
            if pv < 2 or round(g0 * pv) != nv:
                err(("experiment", "n_grid"), f"n={nv} gives p={pv}; need p >= 2 and n = round(gamma0 * p)")
    if not isinstance(exp["replicates"], int) or exp["replicates"] < 10:
        err(("experiment", "replicates"), "replicates must be an integer >= 10")
    for key, lo in (("m_oo", 1000), ("m_cond", 1000), ("n_draws", 10000), ("snr_samples", 1000)):
        if not isinstance(exp[key], int) or exp[key] < lo:
            err(("experiment", key), f"{key} must be an integer >= {lo}")
    al = exp["alphas"]
    if not isinstance(al, list) or not al or any((_num(a) or 0) < 1 for a in al) or any(
            _num(b) <= _num(a) for a, b in zip(al, al[1:])):
        err(("experiment", "alphas"), "alphas must be a strictly increasing list of numbers >= 1")
    return errs


def _beta_probe(m: dict, p: int) -> np.ndarray:
    from .model import make_beta_star

    return make_beta_star(p, m["beta_star_mode"], seed=int(m.get("beta_seed", 0)))


def _covariance(cov: dict) -> CovarianceSpec:
    kind = cov["kind"]
    if kind == "identity":
        return CovarianceSpec("identity", c=float(cov.get("c", 1.0)))
    if kind == "diagonal":
        return CovarianceSpec("diagonal", d=tuple(float(v) for v in cov["d"]))
    return CovarianceSpec("ar1", rho=float(cov.get("rho", 0.0)))


def _r0(r0: dict, p: int) -> R0Variant:
    kind = r0["kind"]
    prm = r0.get("params") or {}
    if kind == "none":
        return ZeroPenalty()
    if kind == "lasso":
        return Lasso()
    if kind == "generalized_lasso":
        D = prm.get("D", "fused")
        out = GeneralizedLasso(fused_difference_matrix(p) if D == "fused" else np.asarray(D, dtype=float))
    elif kind == "group_lasso":
        if "groups" in prm:
            groups = prm["groups"]
        else:
            size = int(prm.get("group_size", 5))
            if size < 1 or p % size:
                raise ValueError(f"group_size={size} must divide p={p}")
            groups = [list(range(j, j + size)) for j in range(0, p, size)]
        K = prm.get("K", "identity")
        if K == "identity":
            K = None
        elif _num(K) is not None:
            K = [float(K) * np.eye(len(g)) for g in groups]
        out = GroupLasso(groups, K)
    else:
        p1, p2 = prm.get("p1"), prm.get("p2")
        if p1 is None and p2 is None:
            raise ValueError("schatten needs p1 (and optionally p2)")
        p1 = int(p1) if p1 is not None else None
        p2 = int(p2) if p2 is not None else None
        if p1 is None:
            p1, p2 = p // p2, p2
        elif p2 is None:
            if p % p1:
                raise ValueError(f"Schatten shape {p1} x ? does not divide p={p}")
            p2 = p // p1
        out = SchattenNorm(p1, p2, int(prm.get("q", 1)))
    out.check(p)
    return out


def _theta(th: dict) -> ConstraintSet:
    kind = th["kind"]
    if kind == "full":
        return FullSpace()
    if kind == "nonnegative":
        return NonnegativeOrthant()
    if kind == "box":
        return Box(th.get("lo", -1.0), th.get("hi", 1.0))
    if kind == "ball":
        return EuclideanBall(float(th.get("radius", 1.0)))
    return IsotoneCone()


def _solver(sol: dict) -> SolverConfig:
    def opt(v):
        return None if v is None else _num(v)

    return SolverConfig(
        max_iters=int(sol["max_iters"]), tol=float(sol["tol"]), step_rule=sol["step_rule"],
        acceleration=bool(sol["acceleration"]), alpha0=opt(sol["alpha0"]), alpha_max=opt(sol["alpha_max"]),
        alpha_growth=float(sol["alpha_growth"]),
    )


def build_model(cfg: dict, n: int | None = None) -> ModelSpec:
    """ModelSpec from a merged document; ``n`` overrides the document's size."""
    m = cfg["model"]
    g0 = float(m["gamma0"])
    if n is not None:
        p = round(n / g0)
    elif m["p"] is not None:
        p = int(m["p"])
    else:
        p = round(int(m["n"]) / g0)
    return make_model_spec(
        loss=m["loss"], p=p, gamma0=g0, covariance=_covariance(m["covariance"]),
        beta_star_mode=m["beta_star_mode"], noise_sigma=float(m["noise_sigma"]), metric=m["metric"],
        snr_target=None if m["snr_target"] is None else float(m["snr_target"]), beta_seed=int(m["beta_seed"]),
    )


def build_penalty(cfg: dict, p: int) -> PenaltySpec:
    pen = cfg["penalty"]
    sm = pen.get("smoothing") or {}
    return PenaltySpec(
        r0=_r0(pen["r0"], p), eta=float(pen["eta"]), lam=float(pen["lambda"]), theta=_theta(pen["theta"]),
        alpha=_num(pen["alpha"]), smoothing=sm.get("mode", "closed_form"), samples=int(sm.get("samples", 1000)),
        smoothing_seed=int(sm.get("seed", 0)),
    )


def build_solver(cfg: dict) -> SolverConfig:
    return _solver(cfg["solver"])


def resolve(doc: Document, overrides: list[str] | None = None, environ=None,
            require_size: bool = True) -> dict:
    """Apply env and explicit overrides, validate, and return the merged document."""
    data = apply_overrides(doc.data, env_overrides(environ))
    data = apply_overrides(data, overrides or [])
    errors = validate_config(Document(data, doc.lines, doc.source), require_size=require_size)
    if errors:
        raise ConfigError(errors)
    return merged(data)
