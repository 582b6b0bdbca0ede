"""Covariate-specific treatment effect estimates.

The per-observation influence value phi = T Y / pi - (T / pi - 1) m is
projected by least squares onto (1, Phi(Z)), giving the estimate
beta' (1, Phi(z0)) at any z0. The variance is the sandwich
(1, Phi(z0))' M^-1 G M^-1 (1, Phi(z0)) / n with M the sample second-moment
matrix of the basis and G the residual-weighted second-moment matrix; the
reported variance is on the scale of the point estimate, so the interval is
point +/- z * sqrt(variance). Treatment-effect intervals use the combined
influence value phi_tau = phi1 - phi0 in one sandwich, never the sum of the
two separate variances.

For a continuous Z the working model is an approximation and all targets
estimate its best linear approximation rather than the curve itself.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from . import nuisance
from .dataset import Dataset
from .design import (
    Basis,
    RegressorPlan,
    build_plan,
    phi_dag,
    phidag_matrix,
    quantile_knots,
    spline_basis,
    spline_basis_from_data,
)
from .errors import SingularDesignError

RANK_TOL = 1e-10


@dataclass(frozen=True)
class MsmFit:
    """Least-squares projection of influence values onto (1, Phi(Z))."""

    beta: np.ndarray
    M: np.ndarray
    phi: np.ndarray
    G_hat: np.ndarray
    basis: Basis | None
    n_obs: int


@dataclass(frozen=True)
class CsteEstimate:
    target: str          # mu1 | mu0 | tau
    z0: object
    point: float
    variance: float      # sampling variance of the point estimate
    level: float
    ci: tuple[float, float]

    @property
    def se(self) -> float:
        return math.sqrt(self.variance)


def aipw_phi(y, t, pi_hat, m_hat):
    """t*y/pi - (t/pi - 1)*m, elementwise."""
    pi = np.asarray(pi_hat, dtype=np.float64)
    if np.any(pi <= 0.0) or np.any(pi >= 1.0):
        raise ValueError("pi_hat must lie strictly inside (0, 1)")
    t = np.asarray(t, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    m = np.asarray(m_hat, dtype=np.float64)
    out = t * y / pi - (t / pi - 1.0) * m
    if out.ndim == 0:
        return float(out)
    return out


def msm_fit(phi: np.ndarray, phidag_rows: np.ndarray, basis: Basis | None = None) -> MsmFit:
    """Project phi onto the span of the phidag rows.

    Raises SingularDesignError naming the offending columns when the basis
    is unidentified on the sample (rank-deficient second-moment matrix).
    """
    phi = np.asarray(phi, dtype=np.float64).reshape(-1)
    P = np.asarray(phidag_rows, dtype=np.float64)
    if P.ndim != 2 or P.shape[0] != phi.shape[0]:
        raise ValueError("phidag_rows must be n x (K+1) matching phi")
    n = phi.shape[0]

    q, r = np.linalg.qr(P)
    diag = np.abs(np.diag(r))
    if diag.size == 0:
        raise ValueError("empty basis")
    bad = np.flatnonzero(diag < RANK_TOL * diag.max())
    if bad.size:
        raise SingularDesignError(
            f"basis columns {tuple(int(b) for b in bad)} are linearly dependent on the sample",
            columns=tuple(int(b) for b in bad),
        )
    beta = np.linalg.solve(r, q.T @ phi)

    M = P.T @ P / n
    resid = phi - P @ beta
    G = (P * resid[:, None] ** 2).T @ P / n
    return MsmFit(beta=beta, M=M, phi=phi, G_hat=G, basis=basis, n_obs=n)


def _phidag_at(msm: MsmFit, z0) -> np.ndarray:
    if msm.basis is not None:
        return phi_dag(z0, msm.basis)
    pd = np.asarray(z0, dtype=np.float64).reshape(-1)
    if pd.shape[0] != msm.beta.shape[0]:
        raise ValueError("without a basis, z0 must be the (1, Phi(z0)) vector itself")
    return pd


def msm_point(msm: MsmFit, z0) -> float:
    return float(_phidag_at(msm, z0) @ msm.beta)


def sandwich_variance(msm: MsmFit, z0) -> float:
    """Sampling variance of the point estimate at z0 (already divided by n)."""
    pd = _phidag_at(msm, z0)
    a = np.linalg.solve(msm.M, pd)
    return float(a @ msm.G_hat @ a) / msm.n_obs


def normal_quantile(p: float) -> float:
    return float(ndtri(p))


def _interval(point: float, variance: float, level: float) -> tuple[float, float]:
    zq = normal_quantile(0.5 + level / 2.0)
    half = zq * math.sqrt(max(variance, 0.0))
    return (point - half, point + half)


def estimate_from_msm(msm: MsmFit, z0, target: str, level: float) -> CsteEstimate:
    point = msm_point(msm, z0)
    var = sandwich_variance(msm, z0)
    return CsteEstimate(
        target=target,
        z0=z0,
        point=point,
        variance=var,
        level=level,
        ci=_interval(point, var, level),
    )


# ---------------------------------------------------------------------------
# full pipelines
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ArmFits:
    ps: nuisance.PSFit
    outcome: nuisance.ORFit
    phi: np.ndarray
    lambda_ps: float
    lambda_or: float


def fit_arm(
    arm: int,
    data: Dataset,
    plan: RegressorPlan,
    lambdas: tuple[float, float] | None = None,
    link: str = "identity",
    seed: int = 0,
    folds: int = 5,
    grid_size: int = 50,
    method: str = "rcal",
) -> ArmFits:
    """Nuisance fits and influence values for one arm.

    lambdas is (lambda_ps, lambda_or); None selects both by stratified
    cross-validation. method "rcal" is the calibrated/weighted-likelihood
    route; "rml" the maximum-likelihood competitor (its untreated arm uses
    1 - pi from the single treated-arm PS model).
    """
    if arm not in (0, 1):
        raise ValueError("arm must be 0 or 1")
    if method not in ("rcal", "rml"):
        raise ValueError(f"unknown method {method!r}")

    if method == "rcal":
        cal_kind = "cal_logistic_treated" if arm == 1 else "cal_logistic_untreated"
        arm_name = "treated" if arm == 1 else "untreated"
        if lambdas is None:
            lam_ps = nuisance.cv_lambda(
                data, plan, cal_kind, folds=folds, seed=seed, arm=arm_name, grid_size=grid_size
            ).chosen_lambda
            lam_or = nuisance.cv_lambda(
                data, plan, "wglm", link=link, folds=folds, seed=seed, arm=arm_name,
                ps_lambda=lam_ps, grid_size=grid_size,
            ).chosen_lambda
        else:
            lam_ps, lam_or = lambdas
        if arm == 1:
            ps = nuisance.fit_ps_rcal(data, plan, lam_ps)
            orf = nuisance.fit_or_rwl(data, plan, ps, lam_or, link=link)
            phi = aipw_phi(data.y, data.t, ps.fitted_pi, orf.fitted_m)
        else:
            ps = nuisance.fit_ps_rcal_untreated(data, plan, lam_ps)
            orf = nuisance.fit_or_rwl_untreated(data, plan, ps, lam_or, link=link)
            phi = aipw_phi(data.y, 1.0 - data.t, 1.0 - ps.fitted_pi, orf.fitted_m)
    else:
        arm_name = "treated" if arm == 1 else "untreated"
        if lambdas is None:
            lam_ps = nuisance.cv_lambda(
                data, plan, "ml_logistic", folds=folds, seed=seed, grid_size=grid_size
            ).chosen_lambda
            lam_or = nuisance.cv_lambda(
                data, plan, "ml_glm", link=link, folds=folds, seed=seed, arm=arm_name,
                grid_size=grid_size,
            ).chosen_lambda
        else:
            lam_ps, lam_or = lambdas
        ps = nuisance.fit_ps_rml(data, plan, lam_ps)
        orf = nuisance.fit_or_rml(data, plan, lam_or, link=link, arm=arm_name)
        if arm == 1:
            phi = aipw_phi(data.y, data.t, ps.fitted_pi, orf.fitted_m)
        else:
            phi = aipw_phi(data.y, 1.0 - data.t, 1.0 - ps.fitted_pi, orf.fitted_m)

    return ArmFits(ps=ps, outcome=orf, phi=phi, lambda_ps=float(lam_ps), lambda_or=float(lam_or))


def fit_mu_msm(
    arm: int,
    data: Dataset,
    plan: RegressorPlan,
    basis: Basis,
    lambdas: tuple[float, float] | None = None,
    link: str = "identity",
    seed: int = 0,
    folds: int = 5,
    grid_size: int = 50,
    method: str = "rcal",
) -> tuple[MsmFit, ArmFits]:
    fits = fit_arm(arm, data, plan, lambdas, link, seed, folds, grid_size, method)
    P = phidag_matrix(data.z, basis)
    return msm_fit(fits.phi, P, basis=basis), fits


def estimate_mu(
    arm: int,
    data: Dataset,
    plan: RegressorPlan,
    basis: Basis,
    z0s,
    lambdas: tuple[float, float] | None = None,
    link: str = "identity",
    level: float = 0.95,
    seed: int = 0,
    folds: int = 5,
    grid_size: int = 50,
    method: str = "rcal",
) -> list[CsteEstimate]:
    """Mean potential outcome in one arm at each requested z0."""
    msm, _ = fit_mu_msm(arm, data, plan, basis, lambdas, link, seed, folds, grid_size, method)
    target = "mu1" if arm == 1 else "mu0"
    return [estimate_from_msm(msm, z0, target, level) for z0 in z0s]


def fit_tau_msm(
    data: Dataset,
    plan: RegressorPlan,
    basis: Basis,
    lambdas: tuple[float, float, float, float] | None = None,
    link: str = "identity",
    seed: int = 0,
    folds: int = 5,
    grid_size: int = 50,
    method: str = "rcal",
) -> tuple[MsmFit, ArmFits, ArmFits]:
    lam1 = lam0 = None
    if lambdas is not None:
        lam1, lam0 = (lambdas[0], lambdas[1]), (lambdas[2], lambdas[3])
    fits1 = fit_arm(1, data, plan, lam1, link, seed, folds, grid_size, method)
    fits0 = fit_arm(0, data, plan, lam0, link, seed, folds, grid_size, method)
    phi_tau = fits1.phi - fits0.phi
    P = phidag_matrix(data.z, basis)
    return msm_fit(phi_tau, P, basis=basis), fits1, fits0


def estimate_tau(
    data: Dataset,
    plan: RegressorPlan,
    basis: Basis,
    z0s,
    lambdas: tuple[float, float, float, float] | None = None,
    link: str = "identity",
    level: float = 0.95,
    seed: int = 0,
    folds: int = 5,
    grid_size: int = 50,
    method: str = "rcal",
) -> list[CsteEstimate]:
    """Treatment effect at each z0, with the combined-influence sandwich."""
    msm, _, _ = fit_tau_msm(data, plan, basis, lambdas, link, seed, folds, grid_size, method)
    return [estimate_from_msm(msm, z0, "tau", level) for z0 in z0s]


# ---------------------------------------------------------------------------
# knot-count search
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KnotSearchResult:
    rows: tuple[tuple[int, float, float], ...]  # (K, AIC, BIC)
    aic_knots: int
    bic_knots: int


def spline_ic(values: np.ndarray, z: np.ndarray, knots: np.ndarray, boundary) -> tuple[float, float, float]:
    """(rss, aic, bic) of the least-squares fit of values on (1, splines(z)).

    Gaussian working likelihood with the variance profiled out:
    aic = n log(rss/n) + 2 (K + 2), bic = n log(rss/n) + log(n) (K + 2).
    """
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    n = values.shape[0]
    B = spline_basis(z, np.asarray(knots, dtype=np.float64), boundary=boundary)
    X = np.hstack([np.ones((n, 1)), B])
    coef, _, _, _ = np.linalg.lstsq(X, values, rcond=None)
    rss = float(np.sum((values - X @ coef) ** 2))
    k_params = X.shape[1] + 1  # coefficients plus the profiled variance
    aic = n * math.log(rss / n) + 2.0 * k_params
    bic = n * math.log(rss / n) + math.log(n) * k_params
    return rss, aic, bic


def knot_search(
    data: Dataset,
    plan_builder=None,
    max_knots: int = 10,
    lambdas: tuple[float, float, float, float] | None = None,
    link: str = "identity",
    seed: int = 0,
    folds: int = 5,
    grid_size: int = 50,
) -> KnotSearchResult:
    """Pick the spline knot count for the treatment-effect curve.

    The nuisance models are fitted once with the max_knots basis; the
    per-observation treatment-effect influence values are then regressed on
    candidate spline bases with 1..max_knots knots and the information
    criteria reported per candidate.
    """
    z = data.z1
    if plan_builder is None:

        def plan_builder(num_knots: int):
            basis = spline_basis_from_data(z, num_knots)
            return build_plan("model_assisted", basis, data.num_v), basis

    plan, basis = plan_builder(max_knots)
    msm, _, _ = fit_tau_msm(data, plan, basis, lambdas, link, seed, folds, grid_size)
    phi_tau = msm.phi

    boundary = (float(z.min()), float(z.max()))
    rows = []
    for k in range(1, max_knots + 1):
        knots = quantile_knots(z, k)
        _, aic, bic = spline_ic(phi_tau, z, knots, boundary)
        rows.append((k, aic, bic))
    aic_k = min(rows, key=lambda r: r[1])[0]
    bic_k = min(rows, key=lambda r: r[2])[0]
    return KnotSearchResult(rows=tuple(rows), aic_knots=aic_k, bic_knots=bic_k)
