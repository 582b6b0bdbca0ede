"""Propensity-score and outcome-regression fits.

Two routes are provided. The calibrated route fits the propensity score by
minimizing the penalized calibration loss, which forces the inverse
probability weights over the treated to average to one and bounds the
weighted-vs-overall mean gap of every penalized regressor by lambda; the
outcome regression is then fitted by a weighted likelihood with weights
exp(-gamma'f(X)), whose stationarity makes the weighted treated residuals
average exactly to zero. The maximum-likelihood route (plain penalized
logistic / GLM fits) is the competitor and satisfies no calibration
identities. Tuning parameters come from stratified k-fold cross-validation
over a geometric lambda grid anchored at the smallest all-zero lambda.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import optim
from .dataset import Dataset
from .design import RegressorPlan, design_matrices
from .errors import (
    ConvergenceError,
    DegenerateDataError,
    NumericOverflowError,
    UndefinedDiagnosticError,
)
from .optim import PATH_OPTIONS, PenalizedProblem, SolverOptions, fit_lasso

PI_CLIP = 1e-6


def _expit_clamped(eta: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.clip(eta, -optim.ETA_CLAMP, optim.ETA_CLAMP)))


@dataclass(frozen=True)
class PSFit:
    gamma: np.ndarray
    fitted_pi: np.ndarray
    arm: str
    lam: float
    method: str
    plan: RegressorPlan
    fit: optim.FitResult
    n_clipped: int


@dataclass(frozen=True)
class ORFit:
    alpha: np.ndarray
    link: str
    fitted_m: np.ndarray
    arm: str
    lam: float
    method: str
    plan: RegressorPlan
    fit: optim.FitResult


@dataclass(frozen=True)
class CVResult:
    lambda_grid: np.ndarray
    fold_losses: np.ndarray
    chosen_lambda: float
    one_se_lambda: float
    seed: int
    folds: int


def _check_both_arms(data: Dataset):
    n1 = data.treated_count()
    if n1 == 0 or n1 == data.n_obs:
        raise DegenerateDataError("both treatment arms must be present")


def _pi_from_gamma(F: np.ndarray, gamma: np.ndarray):
    pi = _expit_clamped(F @ gamma)
    lo, hi = PI_CLIP, 1.0 - PI_CLIP
    n_clipped = int(np.sum((pi < lo) | (pi > hi)))
    return np.clip(pi, lo, hi), n_clipped


def _require_converged(fit: optim.FitResult, what: str) -> optim.FitResult:
    if not fit.converged:
        raise ConvergenceError(f"{what} did not converge within the iteration budget")
    return fit


def fit_ps_rcal(
    data: Dataset,
    plan: RegressorPlan,
    lam: float,
    opts: SolverOptions | None = None,
    init: np.ndarray | None = None,
) -> PSFit:
    """Calibrated propensity-score fit for the treated arm."""
    _check_both_arms(data)
    F, _ = design_matrices(data.z, data.v, plan)
    problem = PenalizedProblem("cal_logistic_treated", F, None, data.t)
    fit = _require_converged(fit_lasso(problem, lam, init=init, opts=opts), "calibrated PS fit")
    pi, n_clipped = _pi_from_gamma(F, fit.coef)
    return PSFit(fit.coef, pi, "treated", float(lam), "rcal", plan, fit, n_clipped)


def fit_ps_rcal_untreated(
    data: Dataset,
    plan: RegressorPlan,
    lam: float,
    opts: SolverOptions | None = None,
    init: np.ndarray | None = None,
) -> PSFit:
    """Mirror calibrated fit: weights over the untreated average to one."""
    _check_both_arms(data)
    F, _ = design_matrices(data.z, data.v, plan)
    problem = PenalizedProblem("cal_logistic_untreated", F, None, data.t)
    fit = _require_converged(
        fit_lasso(problem, lam, init=init, opts=opts), "untreated calibrated PS fit"
    )
    pi, n_clipped = _pi_from_gamma(F, fit.coef)
    return PSFit(fit.coef, pi, "untreated", float(lam), "rcal", plan, fit, n_clipped)


def fit_ps_rml(
    data: Dataset,
    plan: RegressorPlan,
    lam: float,
    opts: SolverOptions | None = None,
    init: np.ndarray | None = None,
) -> PSFit:
    """Penalized maximum-likelihood propensity-score fit (competitor)."""
    _check_both_arms(data)
    F, _ = design_matrices(data.z, data.v, plan)
    problem = PenalizedProblem("ml_logistic", F, None, data.t)
    fit = _require_converged(fit_lasso(problem, lam, init=init, opts=opts), "ML PS fit")
    pi, n_clipped = _pi_from_gamma(F, fit.coef)
    return PSFit(fit.coef, pi, "treated", float(lam), "rml", plan, fit, n_clipped)


def rcal_weights(ps: PSFit, F: np.ndarray | None = None, data: Dataset | None = None) -> np.ndarray:
    """Likelihood weights implied by a calibrated PS fit.

    exp(-gamma'f) for the treated arm and exp(+gamma'f) for the untreated
    arm, with the exp argument clamped like the solver's.
    """
    if F is None:
        F, _ = design_matrices(data.z, data.v, ps.plan)
    eta = F @ ps.gamma
    sign = -1.0 if ps.arm == "treated" else 1.0
    return np.exp(np.clip(sign * eta, -optim.ETA_CLAMP, optim.ETA_CLAMP))


def _check_link(data: Dataset, link: str):
    if link not in ("identity", "logistic"):
        raise ValueError(f"unknown link {link!r}")
    if link == "logistic" and data.outcome_kind != "binary":
        raise ValueError("logistic link requires a binary outcome")
    if link == "identity" and data.outcome_kind == "binary":
        # allowed: a linear probability fit, but flag obvious mistakes early
        pass


def fit_or_rwl(
    data: Dataset,
    plan: RegressorPlan,
    ps: PSFit,
    lam: float,
    link: str = "identity",
    opts: SolverOptions | None = None,
    init: np.ndarray | None = None,
) -> ORFit:
    """Weighted-likelihood outcome fit for the treated arm."""
    _check_link(data, link)
    if ps.method != "rcal" or ps.arm != "treated":
        raise ValueError("fit_or_rwl needs a treated-arm calibrated PS fit")
    if ps.plan is not plan and ps.plan != plan:
        raise ValueError("PS fit and outcome fit must share the same plan")
    F, G = design_matrices(data.z, data.v, plan)
    w = rcal_weights(ps, F=F)
    problem = PenalizedProblem("wglm", G, data.y, data.t, weights=w, link=link)
    fit = _require_converged(
        fit_lasso(problem, lam, init=init, opts=opts), "weighted-likelihood outcome fit"
    )
    eta = G @ fit.coef
    m = eta if link == "identity" else _expit_clamped(eta)
    return ORFit(fit.coef, link, m, "treated", float(lam), "rwl", plan, fit)


def fit_or_rwl_untreated(
    data: Dataset,
    plan: RegressorPlan,
    ps0: PSFit,
    lam: float,
    link: str = "identity",
    opts: SolverOptions | None = None,
    init: np.ndarray | None = None,
) -> ORFit:
    """Weighted-likelihood outcome fit for the untreated arm.

    The weights are (1 - T) * exp(+gamma0'f(X)), the reciprocal of the
    treated-arm weight function evaluated at the untreated calibrated fit.
    """
    _check_link(data, link)
    if ps0.method != "rcal" or ps0.arm != "untreated":
        raise ValueError("fit_or_rwl_untreated needs an untreated-arm calibrated PS fit")
    if ps0.plan is not plan and ps0.plan != plan:
        raise ValueError("PS fit and outcome fit must share the same plan")
    F, G = design_matrices(data.z, data.v, plan)
    w = rcal_weights(ps0, F=F)
    problem = PenalizedProblem("wglm", G, data.y, 1.0 - data.t, weights=w, link=link)
    fit = _require_converged(
        fit_lasso(problem, lam, init=init, opts=opts), "untreated weighted-likelihood fit"
    )
    eta = G @ fit.coef
    m = eta if link == "identity" else _expit_clamped(eta)
    return ORFit(fit.coef, link, m, "untreated", float(lam), "rwl", plan, fit)


def fit_or_rml(
    data: Dataset,
    plan: RegressorPlan,
    lam: float,
    link: str = "identity",
    arm: str = "treated",
    opts: SolverOptions | None = None,
    init: np.ndarray | None = None,
) -> ORFit:
    """Penalized maximum-likelihood outcome fit (competitor)."""
    _check_link(data, link)
    if arm not in ("treated", "untreated"):
        raise ValueError(f"unknown arm {arm!r}")
    _, G = design_matrices(data.z, data.v, plan)
    t = data.t if arm == "treated" else 1.0 - data.t
    problem = PenalizedProblem("ml_glm", G, data.y, t, link=link)
    fit = _require_converged(fit_lasso(problem, lam, init=init, opts=opts), "ML outcome fit")
    eta = G @ fit.coef
    m = eta if link == "identity" else _expit_clamped(eta)
    return ORFit(fit.coef, link, m, arm, float(lam), "rml", plan, fit)


def predict_pi(ps: PSFit, z, v) -> np.ndarray:
    F, _ = design_matrices(z, v, ps.plan)
    return _pi_from_gamma(F, ps.gamma)[0]


def predict_m(orfit: ORFit, z, v) -> np.ndarray:
    _, G = design_matrices(z, v, orfit.plan)
    eta = G @ orfit.alpha
    return eta if orfit.link == "identity" else _expit_clamped(eta)


# ---------------------------------------------------------------------------
# lambda grid and cross-validation
# ---------------------------------------------------------------------------


def lambda_grid(problem: PenalizedProblem, grid_size: int = 50, ratio: float = 1e-3) -> np.ndarray:
    """Geometric grid from the smallest all-zero lambda down to ratio times it."""
    if grid_size < 1:
        raise ValueError("grid_size must be >= 1")
    b0 = optim.intercept_only_coef(problem)
    coef = np.zeros(problem.n_cols)
    coef[0] = b0
    grad = optim.eval_gradient(problem, coef)
    penalized = problem.penalty_mask > 0
    lam_max = float(np.max(np.abs(grad[penalized]))) if penalized.any() else 0.0
    # tiny inflation so the fit at the top of the grid is exactly all-zero
    lam_max = max(lam_max * (1.0 + 1e-8), 1e-10)
    if grid_size == 1:
        return np.array([lam_max])
    return np.geomspace(lam_max, ratio * lam_max, grid_size)


def stratified_folds(t: np.ndarray, folds: int, seed: int, max_attempts: int = 10) -> np.ndarray:
    """Per-observation fold ids, stratified by treatment.

    Fold sizes differ by at most one, and so do per-fold treated counts.
    Folds missing an arm trigger a refold with a fresh stream; after
    max_attempts the data cannot support this many folds.
    """
    if folds < 2:
        raise ValueError("need at least 2 folds")
    t = np.asarray(t)
    n = t.shape[0]
    idx1 = np.flatnonzero(t == 1)
    idx0 = np.flatnonzero(t == 0)
    for attempt in range(max_attempts):
        rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0xF01D, attempt)))
        fold_id = np.empty(n, dtype=np.int64)
        p1 = rng.permutation(idx1)
        p0 = rng.permutation(idx0)
        for k, i in enumerate(p1):
            fold_id[i] = k % folds
        offset = len(idx1) % folds
        for k, i in enumerate(p0):
            fold_id[i] = (offset + k) % folds
        ok = all(
            np.any(t[fold_id == f] == 1) and np.any(t[fold_id == f] == 0)
            for f in range(folds)
        )
        if ok:
            return fold_id
    raise DegenerateDataError(f"could not build {folds} folds with both arms present")


def _subset(data: Dataset, rows: np.ndarray) -> Dataset:
    return Dataset(
        y=data.y[rows],
        t=data.t[rows],
        z=data.z[rows],
        v=data.v[rows],
        outcome_kind=data.outcome_kind,
        z_names=data.z_names,
        v_names=data.v_names,
    )


def _heldout_loss(loss_kind, link, X, t, y, w, coef) -> float:
    kind = optim._KIND_CODE[loss_kind]
    link_code = optim._LINK_CODE[link]
    eta = X @ coef
    if not np.all(np.isfinite(eta)):
        return float("inf")
    if y is None:
        y = np.zeros(X.shape[0])
    vals = optim._per_obs_loss(kind, link_code, eta, t, y, w)
    return float(np.mean(vals))


def _path_losses(problem, grid, X_test, t_test, y_test, w_test, loss_kind, link, opts,
                 stop_active_frac: float = 0.9):
    """Warm-started fits down the grid; held-out loss per lambda.

    Entries past a divergent fit are +inf. The path also stops once the
    active set reaches stop_active_frac of the training rows: such fits are
    near-interpolating and never win cross-validation.
    """
    losses = np.full(len(grid), np.inf)
    init = None
    cap = stop_active_frac * problem.n_obs
    for i, lam in enumerate(grid):
        try:
            fit = fit_lasso(problem, lam, init=init, opts=opts)
        except NumericOverflowError:
            break
        init = fit.coef
        losses[i] = _heldout_loss(loss_kind, link, X_test, t_test, y_test, w_test, fit.coef)
        if len(fit.active_set) >= cap:
            break
    return losses


def cv_lambda(
    data: Dataset,
    plan: RegressorPlan,
    loss_kind: str,
    link: str = "identity",
    folds: int = 5,
    seed: int = 0,
    arm: str = "treated",
    ps_lambda: float | None = None,
    grid_size: int = 50,
    grid_ratio: float = 1e-3,
    path_opts: SolverOptions = PATH_OPTIONS,
) -> CVResult:
    """Choose lambda by stratified k-fold cross-validation.

    The held-out criterion is the same unpenalized loss being minimized.
    For the weighted-likelihood loss, each fold refits the calibrated PS on
    its training rows at ps_lambda and the held-out weights come from that
    training-fold fit; ps_lambda defaults to its own cross-validated choice.
    """
    if loss_kind not in optim.LOSS_KINDS:
        raise ValueError(f"unknown loss kind {loss_kind!r}")
    if arm not in ("treated", "untreated"):
        raise ValueError(f"unknown arm {arm!r}")

    F, G = design_matrices(data.z, data.v, plan)
    fold_id = stratified_folds(data.t, folds, seed)

    cal_kind = "cal_logistic_treated" if arm == "treated" else "cal_logistic_untreated"
    t_eff = data.t if arm == "treated" else 1.0 - data.t

    if loss_kind == "wglm":
        if ps_lambda is None:
            ps_lambda = cv_lambda(
                data, plan, cal_kind, folds=folds, seed=seed, arm=arm,
                grid_size=grid_size, grid_ratio=grid_ratio, path_opts=path_opts,
            ).chosen_lambda
        fitter = fit_ps_rcal if arm == "treated" else fit_ps_rcal_untreated
        ps_full = fitter(data, plan, ps_lambda)
        w_full = rcal_weights(ps_full, F=F)
        full_problem = PenalizedProblem("wglm", G, data.y, t_eff, weights=w_full, link=link)
    elif loss_kind == "ml_glm":
        full_problem = PenalizedProblem("ml_glm", G, data.y, t_eff, link=link)
    elif loss_kind in ("cal_logistic_treated", "cal_logistic_untreated"):
        full_problem = PenalizedProblem(loss_kind, F, None, data.t)
    else:  # ml_logistic
        full_problem = PenalizedProblem("ml_logistic", F, None, data.t)

    grid = lambda_grid(full_problem, grid_size, grid_ratio)

    fold_losses = np.empty((folds, len(grid)))
    for f in range(folds):
        test = fold_id == f
        train = ~test
        if loss_kind == "wglm":
            fitter = fit_ps_rcal if arm == "treated" else fit_ps_rcal_untreated
            ps_fold = fitter(_subset(data, train), plan, ps_lambda)
            w_train = rcal_weights(ps_fold, F=F[train])
            w_test = rcal_weights(ps_fold, F=F[test])
            problem = PenalizedProblem(
                "wglm", G[train], data.y[train], t_eff[train], weights=w_train, link=link
            )
            fold_losses[f] = _path_losses(
                problem, grid, G[test], t_eff[test], data.y[test], w_test, "wglm", link, path_opts
            )
        elif loss_kind == "ml_glm":
            problem = PenalizedProblem("ml_glm", G[train], data.y[train], t_eff[train], link=link)
            fold_losses[f] = _path_losses(
                problem, grid, G[test], t_eff[test], data.y[test],
                np.ones(int(test.sum())), "ml_glm", link, path_opts,
            )
        else:
            kind = loss_kind
            problem = PenalizedProblem(kind, F[train], None, data.t[train])
            fold_losses[f] = _path_losses(
                problem, grid, F[test], data.t[test], None,
                np.ones(int(test.sum())), kind, link, path_opts,
            )

    mean_loss = fold_losses.mean(axis=0)
    best = int(np.argmin(mean_loss))
    with np.errstate(invalid="ignore"):
        se_best = float(np.std(fold_losses[:, best], ddof=1)) / np.sqrt(folds)
    threshold = mean_loss[best] + se_best
    one_se_idx = best
    for i in range(best + 1):  # grid is descending, so earlier means larger lambda
        if mean_loss[i] <= threshold:
            one_se_idx = i
            break
    return CVResult(
        lambda_grid=grid,
        fold_losses=fold_losses,
        chosen_lambda=float(grid[best]),
        one_se_lambda=float(grid[one_se_idx]),
        seed=int(seed),
        folds=int(folds),
    )


# ---------------------------------------------------------------------------
# diagnostics and serialization
# ---------------------------------------------------------------------------


def std_cal_diff(ps: PSFit, column: np.ndarray, data: Dataset) -> float:
    """Standardized calibration difference of h(X) under a treated-arm PS fit.

    [ E_n{T h / pi} / E_n{T / pi} - E_n{h} ] / sd_n(h), where E_n and sd_n
    are the sample mean and (1/n) standard deviation.
    """
    h = np.asarray(column, dtype=np.float64).reshape(-1)
    if h.shape[0] != data.n_obs:
        raise ValueError("column length does not match the data")
    if not np.all(np.isfinite(h)):
        raise ValueError("column contains non-finite entries")
    sd = float(np.std(h))
    if sd == 0.0:
        raise UndefinedDiagnosticError("zero-variance column: calibration difference undefined")
    t = data.t
    inv = t / ps.fitted_pi
    weighted_mean = float(np.sum(h * inv) / np.sum(inv))
    return (weighted_mean - float(np.mean(h))) / sd


def ps_fit_to_json(ps: PSFit) -> str:
    doc = {
        "method": ps.method,
        "arm": ps.arm,
        "lambda": ps.lam,
        "coefficients": {
            label: float(c)
            for label, c in zip(ps.plan.f_labels(), ps.gamma)
        },
        "diagnostics": {
            "converged": ps.fit.converged,
            "iterations": ps.fit.iterations,
            "n_clipped_pi": ps.n_clipped,
            "max_kkt_residual": float(np.max(np.abs(ps.fit.kkt_residuals))),
            "clamped": ps.fit.clamped,
        },
    }
    return json.dumps(doc, indent=2)


def or_fit_to_json(orfit: ORFit) -> str:
    doc = {
        "method": orfit.method,
        "arm": orfit.arm,
        "link": orfit.link,
        "lambda": orfit.lam,
        "coefficients": {
            label: float(c)
            for label, c in zip(orfit.plan.g_labels(), orfit.alpha)
        },
        "diagnostics": {
            "converged": orfit.fit.converged,
            "iterations": orfit.fit.iterations,
            "clamped": orfit.fit.clamped,
        },
    }
    return json.dumps(doc, indent=2)
