import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats
from scipy.integrate import quad

from lorisk.penalty import (
    Box,
    EuclideanBall,
    FullSpace,
    GeneralizedLasso,
    GroupLasso,
    InnerSolverError,
    IsotoneCone,
    Lasso,
    NonnegativeOrthant,
    PenaltySpec,
    SchattenNorm,
    SmoothedPenalty,
    eval_r0,
    eval_smoothed,
    fused_difference_matrix,
    gaussian_norm_mean,
    grad_smoothed,
    project,
    prox_r0,
    prox_with_constraint,
    subgrad_r0,
    sup_gap_bound,
)

from oracles import grad_fd, isotonic_bruteforce, subgrad_distance

P = 6


def _spd(k, seed):
    A = np.random.default_rng(seed).normal(size=(k, k))
    return A @ A.T + 0.5 * np.eye(k)


VARIANTS = {
    "lasso": Lasso(),
    "fused": GeneralizedLasso(fused_difference_matrix(P)),
    "genlasso": GeneralizedLasso(np.random.default_rng(1).normal(size=(4, P))),
    "group": GroupLasso([[0, 1, 2], [3, 4, 5]]),
    "group_scaled": GroupLasso([[0, 1], [2, 3, 4, 5]], [2.0 * np.eye(2), 0.5 * np.eye(4)]),
    "group_general": GroupLasso([[0, 1, 2], [3, 4, 5]], [_spd(3, 2), _spd(3, 3)]),
    "nuclear": SchattenNorm(2, 3, 1),
    "frobenius": SchattenNorm(3, 2, 2),
}
CLOSED = [k for k, v in VARIANTS.items() if v.closed_form_smoothing]
SETS = [FullSpace(), NonnegativeOrthant(), Box(-0.5, 2.0), EuclideanBall(1.5), IsotoneCone()]

vectors = arrays(np.float64, P, elements=st.floats(-5, 5))


# point examples


def test_eval_examples():
    assert eval_r0(Lasso(), [1.0, -2.0, 0.0]) == 3.0
    assert eval_r0(GeneralizedLasso(fused_difference_matrix(3)), [1.0, 2.0, 4.0]) == pytest.approx(3.0)
    assert eval_r0(SchattenNorm(2, 2, 1), [3.0, 0.0, 0.0, 4.0]) == pytest.approx(7.0, rel=1e-14)
    assert eval_r0(SchattenNorm(2, 2, 2), [3.0, 0.0, 0.0, 4.0]) == pytest.approx(5.0, rel=1e-14)


def test_shape_errors():
    with pytest.raises(ValueError):
        eval_r0(SchattenNorm(2, 3), np.ones(7))
    with pytest.raises(ValueError):
        eval_r0(GeneralizedLasso(fused_difference_matrix(4)), np.ones(3))
    with pytest.raises(ValueError):
        GroupLasso([[0, 1]], [np.eye(3)])
    with pytest.raises(ValueError):
        GroupLasso([[0, 1]], [np.diag([1.0, -1.0])])
    with pytest.raises(ValueError):
        SchattenNorm(2, 2, 3)
    with pytest.raises(ValueError):
        prox_r0(Lasso(), np.ones(3), 0.0)


def test_lasso_prox_examples():
    assert np.array_equal(prox_r0(Lasso(), [2.0, -0.5], 1.0), [1.0, 0.0])
    u = np.array([0.3, -2.0, 5.0])
    assert np.allclose(prox_r0(Lasso(), u, 1e-12), u, atol=1e-11)


def test_fused_prox_against_grid():
    r0 = GeneralizedLasso(fused_difference_matrix(3))
    u = np.array([0.0, 1.0, 10.0])
    x = prox_r0(r0, u, 1.0)
    # the minimizer merges the first two coordinates
    assert np.allclose(x, [1.0, 1.0, 9.0], atol=1e-8)

    def obj(P):
        return np.abs(P[..., 1] - P[..., 0]) + np.abs(P[..., 2] - P[..., 1]) + 0.5 * np.sum((P - u) ** 2, axis=-1)

    centre, width = x.copy(), 1.0
    for _ in range(5):
        g = np.linspace(-width, width, 41)
        G = np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1) + centre
        vals = obj(G)
        centre = G.reshape(-1, 3)[np.argmin(vals)]
        width /= 8.0
    assert np.max(np.abs(centre - x)) <= 1e-3
    assert obj(x) <= obj(centre) + 1e-12


def test_subgrad_examples():
    assert np.array_equal(subgrad_r0(Lasso(), [2.0, -3.0, 0.0]), [1.0, -1.0, 0.0])
    D = fused_difference_matrix(4)
    b = np.array([1.0, 3.0, 2.0, 5.0])
    assert np.allclose(subgrad_r0(GeneralizedLasso(D), b), D.T @ np.sign(D @ b))
    B = np.random.default_rng(0).normal(size=(3, 3))
    g = subgrad_r0(SchattenNorm(3, 3, 1), B.ravel())
    U, s, Vt = np.linalg.svd(B)
    assert np.allclose(g, (U @ Vt).ravel(), atol=1e-12)
    assert g @ B.ravel() == pytest.approx(s.sum(), rel=1e-12)


def test_projection_examples():
    assert np.array_equal(project(FullSpace(), [1.0, -3.0]), [1.0, -3.0])
    assert np.array_equal(project(NonnegativeOrthant(), [-1.0, 2.0]), [0.0, 2.0])
    assert np.allclose(project(IsotoneCone(), [3.0, 1.0, 2.0]), [2.0, 2.0, 2.0])
    assert np.allclose(isotonic_bruteforce([3.0, 1.0, 2.0]), [2.0, 2.0, 2.0])


@given(arrays(np.float64, 7, elements=st.floats(-10, 10)))
def test_isotone_matches_bruteforce(u):
    x, ref = project(IsotoneCone(), u), isotonic_bruteforce(u)
    assert np.all(np.diff(x) >= 0)
    assert np.sum((x - u) ** 2) <= np.sum((ref - u) ** 2) + 1e-12
    assert np.allclose(x, ref, atol=1e-6)


# prox certificates


@pytest.mark.parametrize("name", list(VARIANTS))
@given(u=vectors, t=st.floats(0.05, 4.0))
def test_prox_optimality(name, u, t):
    r0 = VARIANTS[name]
    x = prox_r0(r0, u, t)
    assert subgrad_distance(r0, x, (u - x) / t, tol=1e-7) <= 1e-6 * max(1.0, 1.0 / t)

    def obj(z):
        return t * r0.value(z) + 0.5 * np.sum((u - z) ** 2)

    d = np.random.default_rng(0).normal(size=(P, 100))
    d *= 1e-3 / np.linalg.norm(d, axis=0)
    assert np.all(obj(x) <= np.array([obj(x + d[:, k]) for k in range(100)]) + 1e-12)


@pytest.mark.parametrize("name", list(VARIANTS))
def test_prox_batched_matches_columns(name):
    r0 = VARIANTS[name]
    U = np.random.default_rng(4).normal(size=(P, 5)) * 3
    X = prox_r0(r0, U, 0.7)
    for c in range(5):
        assert np.allclose(X[:, c], prox_r0(r0, U[:, c], 0.7), atol=1e-9)


@pytest.mark.parametrize("name", list(VARIANTS))
@pytest.mark.parametrize("theta", SETS, ids=lambda s: s.kind)
def test_constrained_prox_is_projected_minimizer(name, theta):
    r0 = VARIANTS[name]
    rng = np.random.default_rng(7)
    for _ in range(5):
        u, t = rng.normal(size=P) * 2, 0.6
        x = prox_with_constraint(r0, u, t, theta)
        assert theta.contains(x, 1e-9)

        def obj(z):
            return t * r0.value(z) + 0.5 * np.sum((u - z) ** 2)

        # any feasible direction cannot improve the objective
        for _ in range(60):
            z = theta.project(x + 1e-2 * rng.normal(size=P))
            assert obj(x) <= obj(z) + 1e-8


def test_inner_solver_error_carries_residual():
    # a non-chain D, so the iterative ADMM path runs
    D = np.vstack([fused_difference_matrix(P), np.ones((1, P))])
    r0 = GeneralizedLasso(D, max_iter=1, tol=1e-16)
    with pytest.raises(InnerSolverError) as err:
        prox_r0(r0, np.arange(P, dtype=float) ** 2, 1.0)
    assert err.value.residual > 0


# projections


@pytest.mark.parametrize("theta", SETS, ids=lambda s: s.kind)
def test_projection_firmly_nonexpansive_and_idempotent(theta):
    rng = np.random.default_rng(11)
    U = rng.normal(size=(P, 1000)) * 3
    V = rng.normal(size=(P, 1000)) * 3
    PU, PV = theta.project(U), theta.project(V)
    d = PU - PV
    assert np.all(np.sum(d * d, axis=0) <= np.sum(d * (U - V), axis=0) + 1e-10)
    assert np.array_equal(theta.project(PU), PU)
    for c in range(3):
        assert theta.contains(PU[:, c])


# Lipschitz constants


@pytest.mark.parametrize("name", list(VARIANTS))
def test_lipschitz_audit(name):
    r0 = VARIANTS[name]
    L = r0.lipschitz(P)
    assert np.isfinite(L)
    rng = np.random.default_rng(5)
    X, Y = rng.normal(size=(P, 1000)) * 3, rng.normal(size=(P, 1000)) * 3
    lhs = np.abs(r0.value(X) - r0.value(Y))
    assert np.all(lhs <= L * np.linalg.norm(X - Y, axis=0) * (1 + 1e-12))
    assert np.all(r0.value(X) >= 0)


def test_sigma_max_alone_is_not_a_lipschitz_constant_for_fused():
    D = fused_difference_matrix(3)
    x = np.array([1.0, -1.0, 1.0]) / math.sqrt(3)
    smax = np.linalg.norm(D, 2)
    assert np.abs(D @ x).sum() > smax
    assert np.abs(D @ x).sum() <= GeneralizedLasso(D).lipschitz(3)


def test_group_lipschitz_formula():
    r0 = VARIANTS["group_general"]
    expect = math.sqrt(sum(np.linalg.eigvalsh(k).max() for k in r0.K))
    assert r0.lipschitz(P) == pytest.approx(expect, rel=1e-12)
    assert SchattenNorm(3, 5).lipschitz(15) == pytest.approx(math.sqrt(3))


# smoothing


def test_lasso_smoothed_at_zero():
    for alpha in (0.5, 3.0, 100.0):
        s = SmoothedPenalty(Lasso(), alpha)
        assert eval_smoothed(s, np.zeros(4)) == pytest.approx(4 * math.sqrt(2 / math.pi) / alpha, rel=1e-14)
    mc = SmoothedPenalty(Lasso(), 2.0, "monte_carlo", samples=1_000_000, seed=3)
    v, se = mc.value_with_se(np.zeros(1))
    assert abs(v - math.sqrt(2 / math.pi) / 2.0) <= 3 * se


def test_lasso_smoothed_scalar_value():
    s = SmoothedPenalty(Lasso(), 1.0)
    v = eval_smoothed(s, np.array([3.0]))
    ref, _ = quad(lambda w: abs(3.0 + w) * stats.norm.pdf(w), -40, 40, points=[-3.0], epsabs=1e-13)
    assert v == pytest.approx(ref, abs=1e-10)
    assert v == pytest.approx(3.0007643086, abs=1e-9)
    mc = SmoothedPenalty(Lasso(), 1.0, "monte_carlo", samples=200_000, seed=9)
    m, se = mc.value_with_se(np.array([3.0]))
    assert abs(m - v) <= 3 * se


def test_lasso_smoothed_gradient_limits():
    s = SmoothedPenalty(Lasso(), 5.0)
    g = grad_smoothed(s, np.array([0.0, 1e3, -1e3]))
    assert np.array_equal(g, [0.0, 1.0, -1.0])


def test_group_closed_form_matches_monte_carlo():
    r0 = VARIANTS["group_scaled"]
    b = np.array([0.3, -0.1, 1.0, 0.0, 0.2, -0.4])
    cf = SmoothedPenalty(r0, 2.0).value(b)
    v, se = SmoothedPenalty(r0, 2.0, "monte_carlo", samples=200_000, seed=1).value_with_se(b)
    assert abs(cf - v) <= 4 * se


@pytest.mark.parametrize("name", CLOSED)
def test_closed_form_gradient_fd(name):
    r0 = VARIANTS[name]
    s = SmoothedPenalty(r0, 1.7)
    rng = np.random.default_rng(8)
    for _ in range(5):
        b = rng.normal(size=P)
        fd = grad_fd(lambda x: s.value(x), b)
        g = s.grad(b)
        assert np.linalg.norm(fd - g) <= 1e-4 * max(1.0, np.linalg.norm(g))


@pytest.mark.parametrize("name", ["nuclear", "group_general"])
def test_monte_carlo_gradient_fd(name):
    r0 = VARIANTS[name]
    s = SmoothedPenalty(r0, 1.7, "monte_carlo", samples=20_000, seed=2)
    rng = np.random.default_rng(8)
    for _ in range(5):
        b = rng.normal(size=P)
        fd = grad_fd(lambda x: s.value(x), b, h=1e-6)
        sub = r0.subgrad(s._shifted(b))
        se = sub.std(axis=1, ddof=1) / math.sqrt(s.samples)
        assert np.all(np.abs(fd - s.grad(b)) <= 3 * se + 1e-6)


@pytest.mark.parametrize("name", list(VARIANTS))
def test_large_alpha_gap(name):
    r0 = VARIANTS[name]
    spec = PenaltySpec(r0, 0.5, 1.0, alpha=1e6, smoothing="closed_form", samples=500)
    s = spec.smoothed()
    b = np.random.default_rng(0).normal(size=P)
    bound = r0.lipschitz(P) * gaussian_norm_mean(P) / 1e6
    assert abs(s.value(b) - r0.value(b)) <= bound + 1e-12
    assert sup_gap_bound(r0, 1e6, P) <= bound + 1e-15


def test_lasso_uniform_gap_bound():
    alpha = 2.5
    s = SmoothedPenalty(Lasso(), alpha)
    B = np.random.default_rng(1).normal(size=(P, 1000)) * np.logspace(-4, 1, 1000)
    gap = np.abs(s.value(B) - Lasso().value(B))
    assert gap.max() <= P * math.sqrt(2 / math.pi) / alpha + 1e-9
    assert sup_gap_bound(Lasso(), alpha, P) == pytest.approx(P * math.sqrt(2 / math.pi) / alpha)


@pytest.mark.parametrize("name", CLOSED)
def test_smoothing_gap_decreases_with_alpha(name):
    r0 = VARIANTS[name]
    B = np.random.default_rng(3).normal(size=(P, 300))
    B[:, :10] = 0.0
    base = r0.value(B)
    for alpha in (0.5, 2.0, 8.0):
        g1 = np.max(np.abs(SmoothedPenalty(r0, alpha).value(B) - base))
        g2 = np.max(np.abs(SmoothedPenalty(r0, 2 * alpha).value(B) - base))
        assert g2 <= g1


@pytest.mark.parametrize("name", CLOSED)
def test_smoothed_dominates_and_is_convex(name):
    # Jensen: E r0(b + w/alpha) >= r0(b); midpoint convexity along random chords
    r0 = VARIANTS[name]
    s = SmoothedPenalty(r0, 1.3)
    rng = np.random.default_rng(6)
    X, Y = rng.normal(size=(P, 200)), rng.normal(size=(P, 200))
    assert np.all(s.value(X) >= r0.value(X) - 1e-12)
    assert np.all(s.value((X + Y) / 2) <= (s.value(X) + s.value(Y)) / 2 + 1e-12)


def test_smoothing_validation():
    with pytest.raises(ValueError):
        SmoothedPenalty(Lasso(), 1.0, "monte_carlo", samples=99)
    with pytest.raises(ValueError):
        SmoothedPenalty(SchattenNorm(2, 3), 1.0, "closed_form")
    with pytest.raises(ValueError):
        SmoothedPenalty(Lasso(), 0.0)


def test_monte_carlo_deterministic():
    s = SmoothedPenalty(SchattenNorm(2, 3), 2.0, "monte_carlo", samples=500, seed=4)
    b = np.arange(6.0)
    assert s.value(b) == s.value(b)
    assert np.array_equal(s.grad(b), s.grad(b))


def test_penalty_spec_validation():
    for eta in (0.0, 1.0, -0.2):
        with pytest.raises(ValueError, match="eta must lie strictly inside"):
            PenaltySpec(Lasso(), eta, 1.0)
    with pytest.raises(ValueError):
        PenaltySpec(Lasso(), 0.5, 0.0)
    assert PenaltySpec(Lasso(), 0.25, 2.0).strong_convexity == 1.0


@settings(max_examples=80)
@given(
    p=st.integers(2, 20),
    t=st.floats(1e-3, 5.0),
    scale=st.sampled_from([1.0, -1.0, 2.5]),
    theta=st.sampled_from([FullSpace(), NonnegativeOrthant(), Box(-0.5, 0.7)]),
    seed=st.integers(0, 2**32 - 1),
)
def test_chain_prox_matches_admm(p, t, scale, theta, seed):
    D = scale * fused_difference_matrix(p)
    u = 2.0 * np.random.default_rng(seed).normal(size=p)
    fast = GeneralizedLasso(D)
    slow = GeneralizedLasso(D)
    slow._chain = None
    np.testing.assert_allclose(fast.prox(u, t, theta), slow.prox(u, t, theta), atol=1e-7)
