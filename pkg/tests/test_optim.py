"""Solver tests: loss values, gradients vs finite differences, KKT boxes,
and equivalence with independent brute-force / Newton oracles."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cstekit.errors import NumericOverflowError
from cstekit.optim import (
    PenalizedProblem,
    SolverOptions,
    eval_gradient,
    eval_loss,
    fit_lasso,
    intercept_only_coef,
    kkt_report,
    penalized_objective,
    soft_threshold,
)


def make_problem(kind, X, t, y=None, w=None, link="identity"):
    return PenalizedProblem(kind, X, y, t, weights=w, link=link)


def random_problem(rng, n=None, d=None, kind=None, link=None):
    n = n or int(rng.integers(20, 51))
    d = d or int(rng.integers(1, 11))
    kind = kind or rng.choice(["cal_logistic_treated", "cal_logistic_untreated",
                               "ml_logistic", "wglm", "ml_glm"])
    X = np.hstack([np.ones((n, 1)), rng.standard_normal((n, d))])
    t = (rng.random(n) < 0.5).astype(float)
    if t.sum() == 0:
        t[0] = 1.0
    if t.sum() == n:
        t[0] = 0.0
    y = rng.standard_normal(n)
    w = rng.uniform(0.2, 2.0, n)
    link = link or (rng.choice(["identity", "logistic"]) if kind in ("wglm", "ml_glm") else "identity")
    if kind in ("wglm", "ml_glm") and link == "logistic":
        y = (rng.random(n) < 0.5).astype(float)
    return make_problem(kind, X, t, y=y, w=w, link=str(link))


# ---------------------------------------------------------------------------
# eval_loss / eval_gradient
# ---------------------------------------------------------------------------


def test_calibration_loss_single_treated_obs():
    p = make_problem("cal_logistic_treated", np.ones((1, 1)), np.array([1.0]))
    assert eval_loss(p, np.zeros(1)) == 1.0


def test_calibration_loss_two_obs():
    p = make_problem("cal_logistic_treated", np.ones((2, 1)), np.array([1.0, 0.0]))
    assert eval_loss(p, np.zeros(1)) == 0.5


def test_ml_logistic_loss_at_zero():
    p = make_problem("ml_logistic", np.ones((1, 1)), np.array([1.0]))
    assert eval_loss(p, np.zeros(1)) == pytest.approx(np.log(2.0), abs=1e-12)


def test_calibration_gradient_symmetric_stationary_point():
    p = make_problem("cal_logistic_treated", np.ones((2, 1)), np.array([1.0, 0.0]))
    assert eval_gradient(p, np.zeros(1)) == pytest.approx([0.0], abs=1e-15)


def test_wglm_identity_gradient_single_obs():
    p = make_problem(
        "wglm", np.ones((1, 1)), np.array([1.0]), y=np.array([2.0]), w=np.array([1.0])
    )
    assert eval_gradient(p, np.zeros(1)) == pytest.approx([-2.0], abs=1e-15)


def test_dimension_mismatch_raises():
    p = make_problem("ml_logistic", np.ones((3, 1)), np.array([1.0, 0.0, 1.0]))
    with pytest.raises(ValueError):
        eval_loss(p, np.zeros(2))


def test_nonfinite_coef_raises_overflow_error():
    p = make_problem("ml_logistic", np.ones((3, 1)), np.array([1.0, 0.0, 1.0]))
    with pytest.raises(NumericOverflowError):
        eval_loss(p, np.array([np.inf]))


def test_gradient_matches_central_differences():
    rng = np.random.default_rng(3)
    for _ in range(60):
        prob = random_problem(rng)
        coef = rng.standard_normal(prob.n_cols) * 0.5
        g = eval_gradient(prob, coef)
        h = 1e-6
        fd = np.empty_like(g)
        for j in range(len(coef)):
            e = np.zeros_like(coef)
            e[j] = h
            fd[j] = (eval_loss(prob, coef + e) - eval_loss(prob, coef - e)) / (2 * h)
        scale = np.maximum(np.abs(g), np.maximum(np.abs(fd), 1e-8))
        assert np.max(np.abs(g - fd) / scale) < 1e-5


def test_loss_is_midpoint_convex_along_random_segments():
    rng = np.random.default_rng(4)
    for _ in range(40):
        prob = random_problem(rng)
        a = rng.standard_normal(prob.n_cols)
        b = rng.standard_normal(prob.n_cols)
        la, lb = eval_loss(prob, a), eval_loss(prob, b)
        lm = eval_loss(prob, (a + b) / 2.0)
        assert lm <= (la + lb) / 2.0 + 1e-10 * (1.0 + abs(la) + abs(lb))


# ---------------------------------------------------------------------------
# soft threshold
# ---------------------------------------------------------------------------


def test_soft_threshold_values():
    assert soft_threshold(3.0, 1.0) == 2.0
    assert soft_threshold(-0.5, 1.0) == 0.0
    assert soft_threshold(0.0, 5.0) == 0.0


@given(st.floats(-1e6, 1e6), st.floats(0, 1e6))
def test_soft_threshold_shrinks_toward_zero(x, t):
    out = soft_threshold(x, t)
    assert abs(out) == pytest.approx(max(abs(x) - t, 0.0))
    assert out * x >= 0.0


def test_soft_threshold_rejects_negative_threshold():
    with pytest.raises(ValueError):
        soft_threshold(1.0, -0.1)


# ---------------------------------------------------------------------------
# fit_lasso against oracles
# ---------------------------------------------------------------------------


def test_two_obs_analytic_optimum():
    p = make_problem("cal_logistic_treated", np.ones((2, 1)), np.array([1.0, 0.0]))
    r = fit_lasso(p, 0.0)
    assert r.converged
    assert r.coef == pytest.approx([0.0], abs=1e-9)


def grid_oracle(problem, lam, box=2.0, steps=41, refine=4):
    """Dense-grid minimizer of the penalized objective over a coefficient box."""
    d = problem.n_cols
    assert d == 3
    best = None
    center = np.zeros(d)
    width = box
    for _ in range(refine):
        axes = [np.linspace(c - width, c + width, steps) for c in center]
        for b0 in axes[0]:
            for b1 in axes[1]:
                for b2 in axes[2]:
                    coef = np.array([b0, b1, b2])
                    val = penalized_objective(problem, coef, lam)
                    if best is None or val < best[0]:
                        best = (val, coef)
        center = best[1]
        width = 2.0 * width / (steps - 1)
    return best


def test_small_instance_matches_grid_oracle():
    # treated rows straddle zero in both columns so the calibration
    # objective is coercive and the penalized minimizer exists
    X = np.array(
        [
            [1.0, 1.0, -0.6],
            [1.0, -1.0, 0.8],
            [1.0, 0.4, 0.5],
            [1.0, 0.3, -0.9],
            [1.0, -0.8, -0.2],
            [1.0, 0.9, 0.7],
        ]
    )
    t = np.array([1.0, 1.0, 1.0, 1.0, 0.0, 0.0])
    prob = make_problem("cal_logistic_treated", X, t)
    lam = 0.1
    r = fit_lasso(prob, lam)
    assert r.converged
    oracle_val, _ = grid_oracle(prob, lam)
    assert r.objective <= oracle_val + 1e-4
    assert abs(r.objective - oracle_val) < 1e-4


def test_small_ml_instance_matches_grid_oracle():
    rng = np.random.default_rng(11)
    X = np.hstack([np.ones((6, 1)), rng.standard_normal((6, 2))])
    t = np.array([1.0, 0.0, 1.0, 1.0, 0.0, 1.0])
    prob = make_problem("ml_logistic", X, t)
    lam = 0.1
    r = fit_lasso(prob, lam)
    assert r.converged
    oracle_val, _ = grid_oracle(prob, lam)
    assert abs(r.objective - oracle_val) < 1e-4


def bisection_intercept_oracle(problem):
    """1-D bisection on the intercept derivative of the unpenalized loss."""
    lo, hi = -30.0, 30.0

    def deriv(b):
        coef = np.zeros(problem.n_cols)
        coef[0] = b
        return eval_gradient(problem, coef)[0]

    flo = deriv(lo)
    for _ in range(200):
        mid = (lo + hi) / 2.0
        fm = deriv(mid)
        if flo * fm <= 0:
            hi = mid
        else:
            lo = mid
            flo = fm
    return (lo + hi) / 2.0


def test_lambda_above_lambda_max_gives_intercept_only():
    rng = np.random.default_rng(12)
    prob = random_problem(rng, n=40, d=5, kind="ml_logistic")
    b0 = intercept_only_coef(prob)
    coef0 = np.zeros(prob.n_cols)
    coef0[0] = b0
    lam_max = np.abs(eval_gradient(prob, coef0)[1:]).max()
    r = fit_lasso(prob, lam_max * 1.0001)
    assert r.converged
    assert np.all(r.coef[1:] == 0.0)
    assert r.coef[0] == pytest.approx(bisection_intercept_oracle(prob), abs=1e-7)


def newton_oracle(problem, tol=1e-12, iters=200):
    """Damped Newton on the unpenalized loss (full-rank, low-dim problems)."""
    from cstekit.optim import _loss_inputs, _per_obs_d1

    coef = np.zeros(problem.n_cols)
    X = problem.design
    n = problem.n_obs
    for _ in range(iters):
        g = eval_gradient(problem, coef)
        if np.max(np.abs(g)) < tol:
            break
        # numerical hessian via finite differences of the gradient
        h = 1e-6
        H = np.empty((len(coef), len(coef)))
        for j in range(len(coef)):
            e = np.zeros_like(coef)
            e[j] = h
            H[:, j] = (eval_gradient(problem, coef + e) - eval_gradient(problem, coef - e)) / (2 * h)
        step = np.linalg.solve(H + 1e-12 * np.eye(len(coef)), g)
        size = 1.0
        base = eval_loss(problem, coef)
        while size > 1e-8 and eval_loss(problem, coef - size * step) > base:
            size /= 2.0
        coef = coef - size * step
    return coef


@pytest.mark.parametrize("kind,link", [
    ("ml_logistic", "identity"),
    ("cal_logistic_treated", "identity"),
    ("wglm", "identity"),
])
def test_lambda_zero_matches_damped_newton(kind, link):
    rng = np.random.default_rng(13)
    prob = random_problem(rng, n=120, d=4, kind=kind, link=link)
    r = fit_lasso(prob, 0.0)
    assert r.converged
    oracle = newton_oracle(prob)
    assert np.max(np.abs(r.coef - oracle)) < 1e-6


# ---------------------------------------------------------------------------
# KKT reports and solver invariants
# ---------------------------------------------------------------------------


def test_kkt_box_after_convergence():
    rng = np.random.default_rng(14)
    for _ in range(10):
        prob = random_problem(rng, n=60, d=8)
        lam = 10 ** rng.uniform(-2.5, -0.7)
        r = fit_lasso(prob, lam)
        if not r.converged:
            continue
        res = kkt_report(prob, r.coef, lam)
        assert abs(res[0]) <= 1e-8
        mask = prob.penalty_mask[1:] > 0
        penalized = np.abs(res[1:])[mask]
        assert np.all(penalized <= lam + 1e-8)
        for j in range(1, prob.n_cols):
            if r.coef[j] != 0.0 and prob.penalty_mask[j] > 0:
                assert abs(res[j]) == pytest.approx(lam, abs=1e-6)


def test_objective_identity_and_monotone_trace():
    rng = np.random.default_rng(15)
    prob = random_problem(rng, n=80, d=6, kind="ml_logistic")
    r = fit_lasso(prob, 0.03)
    pen = 0.03 * np.sum(np.abs(r.coef[1:]))
    assert r.objective == pytest.approx(eval_loss(prob, r.coef) + pen, abs=1e-10)
    trace = r.objective_trace
    diffs = np.diff(trace)
    assert np.all(diffs <= 1e-12 * np.maximum(1.0, np.abs(trace[:-1])))


def test_deterministic_given_same_inputs():
    rng = np.random.default_rng(16)
    prob = random_problem(rng, n=50, d=5, kind="wglm", link="identity")
    r1 = fit_lasso(prob, 0.02)
    r2 = fit_lasso(prob, 0.02)
    assert np.array_equal(r1.coef, r2.coef)
    assert r1.objective == r2.objective


def test_zero_variance_column_dropped_with_warning():
    rng = np.random.default_rng(17)
    X = np.hstack([np.ones((30, 1)), rng.standard_normal((30, 1)), np.full((30, 1), 2.0)])
    t = (rng.random(30) < 0.5).astype(float)
    prob = make_problem("ml_logistic", X, t)
    with pytest.warns(RuntimeWarning):
        r = fit_lasso(prob, 0.01)
    assert r.coef[2] == 0.0
    assert r.dropped_columns == (2,)


def test_separated_logistic_raises_overflow():
    X = np.hstack([np.ones((20, 1)), np.linspace(-1, 1, 20).reshape(-1, 1)])
    t = (X[:, 1] > 0).astype(float)
    prob = make_problem("ml_logistic", X, t)
    with pytest.raises(NumericOverflowError):
        fit_lasso(prob, 0.0)


def test_intercept_never_penalized():
    with pytest.raises(ValueError):
        PenalizedProblem(
            "ml_logistic",
            np.ones((4, 2)),
            None,
            np.array([1.0, 0.0, 1.0, 0.0]),
            penalty_mask=np.array([1.0, 1.0]),
        )


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_fit_never_increases_objective_from_any_start(seed):
    rng = np.random.default_rng(seed)
    prob = random_problem(rng, n=30, d=4)
    init = rng.standard_normal(prob.n_cols) * 0.3
    lam = float(10 ** rng.uniform(-2, -0.5))
    try:
        r = fit_lasso(prob, lam, init=init)
    except NumericOverflowError:
        return
    assert r.objective <= penalized_objective(prob, init, lam) + 1e-10
