import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lorisk.model import Dataset, generate_dataset, make_model_spec
from lorisk.penalty import (
    Box,
    EuclideanBall,
    FullSpace,
    GeneralizedLasso,
    GroupLasso,
    IsotoneCone,
    Lasso,
    NonnegativeOrthant,
    PenaltySpec,
    SchattenNorm,
    ZeroPenalty,
    fused_difference_matrix,
)
from lorisk.reference import coordinate_descent, ridge_closed_form, ridge_loo_closed_form
from lorisk.solver import (
    NonConvergence,
    SolverConfig,
    alpha_schedule,
    fit,
    fit_loo,
    fit_smoothing_path,
    fp_residual,
    objective,
)

LOSSES = ["squared", "logistic", "poisson"]


def instance(loss, n, p, seed=0, beta_mode="rademacher"):
    model = make_model_spec(loss, p=p, gamma0=n / p, beta_star_mode=beta_mode, beta_seed=seed)
    return model, generate_dataset(model, seed)


# closed-form and reference oracles


@pytest.mark.parametrize("n,p", [(40, 10), (15, 30)])
def test_ridge_matches_linear_solve(n, p):
    model, data = instance("squared", n, p, seed=1)
    pen = PenaltySpec(ZeroPenalty(), 0.5, 0.7)
    res = fit(model, pen, data)
    ref = ridge_closed_form(data.X, data.y, 2 * pen.lam * pen.eta)
    assert np.linalg.norm(res.beta_hat - ref) <= 1e-6 * np.linalg.norm(ref)


@pytest.mark.parametrize("loss", LOSSES)
def test_exact_route_matches_coordinate_descent(loss):
    model, data = instance(loss, 6, 3, seed=2)
    pen = PenaltySpec(Lasso(), 0.4, 0.5)
    res = fit(model, pen, data, SolverConfig(tol=1e-10))
    ref = coordinate_descent(data.X, data.y, model.loss, pen.lam * (1 - pen.eta), pen.lam * pen.eta)
    assert res.route == "exact"
    assert np.max(np.abs(res.beta_hat - ref)) <= 1e-6


@pytest.mark.parametrize("loss", LOSSES)
def test_continuation_matches_coordinate_descent(loss):
    model, data = instance(loss, 6, 3, seed=3)
    pen = PenaltySpec(Lasso(), 0.4, 0.5, alpha=1e8)
    res = fit(model, pen, data, SolverConfig(alpha0=1.0))
    ref = coordinate_descent(data.X, data.y, model.loss, pen.lam * (1 - pen.eta), pen.lam * pen.eta)
    assert res.alpha_used == 1e8
    assert np.max(np.abs(res.beta_hat - ref)) <= 1e-4


@pytest.mark.parametrize("theta", [FullSpace(), NonnegativeOrthant(), Box(-0.3, 0.3)], ids=lambda s: s.kind)
@pytest.mark.parametrize("loss", LOSSES)
def test_random_search_cannot_beat_fit(loss, theta):
    model, data = instance(loss, 6, 3, seed=4)
    pen = PenaltySpec(Lasso(), 0.3, 0.8, theta=theta)
    res = fit(model, pen, data)
    rng = np.random.default_rng(0)
    cand = theta.project(res.beta_hat[:, None] + rng.normal(size=(3, 10_000)) * np.logspace(-4, 0.5, 10_000))
    vals = [objective(model, pen, data, cand[:, k]) for k in range(cand.shape[1])]
    assert res.objective <= min(vals) + 1e-12
    assert res.objective == pytest.approx(objective(model, pen, data, res.beta_hat), rel=1e-12)


def test_orthant_active_coordinate_is_zero():
    model = make_model_spec("squared", p=3, gamma0=10.0)
    rng = np.random.default_rng(1)
    X = rng.normal(size=(30, 3))
    y = -5.0 * X[:, 0] + X[:, 1] + 0.1 * rng.normal(size=30)
    data = Dataset(X, y, 0)
    res = fit(model, PenaltySpec(Lasso(), 0.5, 0.1, theta=NonnegativeOrthant()), data)
    assert res.beta_hat[0] == 0.0
    assert res.beta_hat[1] > 0


def test_huge_lambda_gives_zero():
    model, data = instance("squared", 30, 10, seed=5)
    pen = PenaltySpec(Lasso(), 0.5, 1e8)
    res = fit(model, pen, data)
    assert np.max(np.abs(res.beta_hat)) <= 1e-7
    assert res.objective == pytest.approx(0.5 * np.sum(data.y**2), rel=1e-6)


def test_objective_at_zero():
    model, data = instance("logistic", 20, 10, seed=6)
    pen = PenaltySpec(Lasso(), 0.5, 2.0)
    assert objective(model, pen, data, np.zeros(10)) == pytest.approx(20 * math.log(2), rel=1e-14)
    with pytest.raises(ValueError):
        objective(model, pen, data, np.zeros(9))


# structural properties


PENALTIES = {
    "lasso": lambda p: Lasso(),
    "fused": lambda p: GeneralizedLasso(fused_difference_matrix(p)),
    "group": lambda p: GroupLasso([list(range(0, p // 2)), list(range(p // 2, p))]),
    "nuclear": lambda p: SchattenNorm(2, p // 2, 1),
}
SETS = [FullSpace(), NonnegativeOrthant(), EuclideanBall(3.0), IsotoneCone()]


@pytest.mark.parametrize("theta", SETS, ids=lambda s: s.kind)
@pytest.mark.parametrize("kind", list(PENALTIES))
def test_feasible_certified_and_dominant(kind, theta):
    model, data = instance("logistic", 24, 8, seed=7, beta_mode="isotone")
    pen = PenaltySpec(PENALTIES[kind](8), 0.4, 0.6, theta=theta)
    res = fit(model, pen, data)
    assert res.converged and res.fp_residual <= 1e-8
    assert theta.contains(res.beta_hat, 1e-12)
    assert fp_residual(model, pen, data, res.beta_hat) <= 1e-8
    for b in (np.zeros(8), theta.project(model.beta_star)):
        assert res.objective <= objective(model, pen, data, b) + 1e-10


@pytest.mark.parametrize("kind", ["lasso", "group"])
def test_unique_across_inits(kind):
    model, data = instance("poisson", 30, 10, seed=8)
    pen = PenaltySpec(PENALTIES[kind](10), 0.3, 1.0, alpha=20.0)
    cfg = SolverConfig(tol=1e-9)
    rng = np.random.default_rng(9)
    betas = [fit(model, pen, data, cfg, init=rng.normal(size=10) * 3).beta_hat for _ in range(5)]
    limit = 10 * cfg.tol / pen.strong_convexity
    for a in betas:
        for b in betas:
            assert np.linalg.norm(a - b) <= limit


@pytest.mark.parametrize("kind", list(PENALTIES))
def test_backtracking_trace_is_monotone(kind):
    model, data = instance("logistic", 30, 10, seed=10)
    pen = PenaltySpec(PENALTIES[kind](10), 0.3, 0.5)
    res = fit(model, pen, data, SolverConfig(step_rule="backtracking"), trace=True)
    tr = np.array(res.trace)
    assert tr.size > 2
    assert np.all(np.diff(tr) <= 1e-12 * (1 + np.abs(tr[:-1])))


def test_duplicate_rows_give_identical_refits():
    model = make_model_spec("logistic", p=5, gamma0=4.0)
    data0 = generate_dataset(model, 11)
    X, y = data0.X.copy(), data0.y.copy()
    X[7], y[7] = X[3], y[3]
    data = Dataset(X, y, 11)
    cfg = SolverConfig(tol=1e-9)
    loo = fit_loo(model, PenaltySpec(Lasso(), 0.4, 0.5), data, cfg)
    assert np.linalg.norm(loo.per_i[3].beta_hat - loo.per_i[7].beta_hat) <= 10 * cfg.tol


def test_two_point_loo_closed_form():
    model = make_model_spec("squared", p=4, gamma0=0.5)
    data = generate_dataset(model, 12)
    pen = PenaltySpec(ZeroPenalty(), 0.5, 0.3)
    loo = fit_loo(model, pen, data, SolverConfig(tol=1e-12))
    ref = ridge_loo_closed_form(data.X, data.y, 2 * pen.lam * pen.eta)
    assert np.max(np.abs(loo.betas - ref)) <= 1e-8


@pytest.mark.parametrize("loss", LOSSES)
def test_loo_refits_certified_and_match_direct_fits(loss):
    model, data = instance(loss, 12, 6, seed=13)
    pen = PenaltySpec(Lasso(), 0.4, 0.7)
    cfg = SolverConfig(tol=1e-9)
    loo = fit_loo(model, pen, data, cfg)
    assert loo.warm_start_used and loo.all_converged
    assert all(r.fp_residual <= cfg.tol for r in loo.per_i)
    for i in (0, 5, 11):
        keep = np.arange(data.n) != i
        sub = Dataset(data.X[keep], data.y[keep], 0)
        ref = coordinate_descent(sub.X, sub.y, model.loss, pen.lam * (1 - pen.eta), pen.lam * pen.eta)
        assert np.max(np.abs(loo.per_i[i].beta_hat - ref)) <= 1e-6


def test_loo_independent_of_chunking_and_warm_start():
    model, data = instance("logistic", 20, 10, seed=14)
    pen = PenaltySpec(Lasso(), 0.4, 0.7)
    a = fit_loo(model, pen, data, SolverConfig(tol=1e-10))
    b = fit_loo(model, pen, data, SolverConfig(tol=1e-10, chunk=3))
    c = fit_loo(model, pen, data, SolverConfig(tol=1e-10), warm_start=False)
    assert np.max(np.abs(a.betas - b.betas)) <= 1e-12
    assert np.max(np.abs(a.betas - c.betas)) <= 10 * 1e-10 / pen.strong_convexity
    assert not c.warm_start_used


@pytest.mark.parametrize("loss", LOSSES)
def test_displacement_bound_holds_for_every_index(loss):
    model, data = instance(loss, 40, 20, seed=15)
    pen = PenaltySpec(Lasso(), 0.3, 0.5)
    cfg = SolverConfig()
    loo = fit_loo(model, pen, data, cfg)
    full = loo.full.beta_hat
    slack = 100 * cfg.tol / pen.strong_convexity
    for i, r in enumerate(loo.per_i):
        lhs = np.linalg.norm(full - r.beta_hat)
        g = abs(model.loss.grad(data.y[i], data.X[i] @ r.beta_hat))
        rhs = g * np.linalg.norm(data.X[i]) / min(pen.strong_convexity, 1.0) + slack
        assert lhs <= rhs


# smoothing path


def test_smoothing_path_bounds():
    model, data = instance("logistic", 20, 10, seed=16)
    pen = PenaltySpec(Lasso(), 0.4, 0.6)
    alphas = [1.0, 10.0, 100.0, 1e3, 1e4, 1e8]
    fits, gaps = fit_smoothing_path(model, pen, data, SolverConfig(tol=1e-10), alphas)
    ref = coordinate_descent(data.X, data.y, model.loss, pen.lam * (1 - pen.eta), pen.lam * pen.eta)
    c = 2 * (1 - pen.eta) / pen.eta
    for f, g, a in zip(fits, gaps, alphas):
        assert f.alpha_used == a
        assert g == pytest.approx(10 * math.sqrt(2 / math.pi) / a)
        assert np.linalg.norm(f.beta_hat - ref) <= math.sqrt(c * g)
    for (f1, g1), f2 in zip(zip(fits, gaps), fits[1:]):
        assert np.linalg.norm(f2.beta_hat - f1.beta_hat) <= 2 * math.sqrt(c * g1)
    assert np.linalg.norm(fits[-1].beta_hat - ref) <= 1e-3


def test_smoothing_path_validation():
    model, data = instance("squared", 20, 10, seed=17)
    pen = PenaltySpec(Lasso(), 0.4, 0.6)
    with pytest.raises(ValueError):
        fit_smoothing_path(model, pen, data, None, [10.0, 5.0])
    with pytest.raises(ValueError):
        fit_smoothing_path(model, pen, data, None, [0.5, 5.0])


def test_alpha_schedule():
    assert alpha_schedule(SolverConfig(), 50.0) == [50.0]
    assert alpha_schedule(SolverConfig(alpha0=1.0), math.inf) == [1.0, math.inf]
    assert alpha_schedule(SolverConfig(alpha0=1.0, alpha_max=10.0), math.inf) == [1.0, 2.0, 4.0, 8.0, 10.0]


# errors


def test_nonconvergence_carries_residual_and_iterate():
    model, data = instance("logistic", 20, 10, seed=18)
    pen = PenaltySpec(Lasso(), 0.4, 0.6)
    with pytest.raises(NonConvergence) as err:
        fit(model, pen, data, SolverConfig(max_iters=2, tol=1e-14))
    assert err.value.residual > 1e-14 and err.value.iterate.shape == (10,)
    res = fit(model, pen, data, SolverConfig(max_iters=2, tol=1e-14), strict=False)
    assert not res.converged and res.fp_residual > 1e-14
    with pytest.raises(NonConvergence) as err:
        fit_loo(model, pen, data, SolverConfig(max_iters=2, tol=1e-14), full=res)
    assert err.value.index == 0


def test_config_validation():
    for kw in ({"tol": 0.0}, {"max_iters": 0}, {"step_rule": "armijo2"}, {"alpha_growth": 1.0}):
        with pytest.raises(ValueError):
            SolverConfig(**kw)


def test_degenerate_inputs_allowed():
    model = make_model_spec("squared", p=6, gamma0=0.5)
    data0 = generate_dataset(model, 19)
    X = data0.X.copy()
    X[1] = 0.0
    data = Dataset(X, np.full(3, 2.0), 0)
    res = fit(model, PenaltySpec(Lasso(), 0.5, 0.2), data)
    assert res.converged


@settings(max_examples=15)
@given(seed=st.integers(0, 10_000), loss=st.sampled_from(LOSSES), lam=st.floats(0.05, 5.0), eta=st.floats(0.05, 0.95))
def test_random_instances_certified(seed, loss, lam, eta):
    model, data = instance(loss, 16, 8, seed=seed)
    pen = PenaltySpec(Lasso(), eta, lam)
    res = fit(model, pen, data)
    assert res.fp_residual <= 1e-8
    assert res.objective <= objective(model, pen, data, np.zeros(8)) + 1e-10
