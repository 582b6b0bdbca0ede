"""Kernel local-constant competitor estimators.

These regress the AIPW influence values (or the IPW / outcome-imputation
values) on Z with a Gaussian kernel, either on the full sample or with
fold-wise cross-fitted nuisances, so each observation's influence value
uses nuisance fits trained without its own fold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nuisance
from .cste import aipw_phi
from .dataset import Dataset
from .design import RegressorPlan
from .errors import DataError, DegenerateDataError

SQRT2PI = math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class KernelConfig:
    bandwidth: float
    kernel: str = "gaussian"
    crossfit_folds: int = 1  # 1 = full sample
    seed: int = 0

    def __post_init__(self):
        if self.bandwidth <= 0:
            raise ValueError("bandwidth must be positive")
        if self.kernel != "gaussian":
            raise ValueError(f"unsupported kernel {self.kernel!r}")
        if self.crossfit_folds < 1:
            raise ValueError("crossfit_folds must be >= 1")


def kernel_weights(z0: float, z: np.ndarray, cfg: KernelConfig) -> np.ndarray:
    """Normalized Gaussian kernel weights at z0; they sum to one."""
    u = (np.asarray(z, dtype=np.float64) - z0) / cfg.bandwidth
    k = np.exp(-0.5 * u * u) / SQRT2PI
    total = k.sum()
    if total <= 0.0:
        raise DataError(f"no observations in the kernel neighborhood of z0={z0}")
    return k / total


def local_constant(z0: float, z: np.ndarray, values: np.ndarray, cfg: KernelConfig) -> float:
    """Kernel-weighted mean of values at z0 (local constant regression)."""
    w = kernel_weights(z0, z, cfg)
    return float(w @ np.asarray(values, dtype=np.float64))


def bandwidth_rule(z: np.ndarray) -> float:
    """Rule-of-thumb base bandwidth times the n^(1/5) * n^(-2/7) adjustment.

    The base is 1.06 sd(z) n^(-1/5); the adjustment makes the overall rate
    n^(-2/7), slightly undersmoothing relative to the pointwise-optimal
    rate.
    """
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    n = z.shape[0]
    if n < 10:
        raise DataError("need at least 10 observations for the bandwidth rule")
    sd = float(np.std(z, ddof=1))
    if sd == 0.0:
        raise DegenerateDataError("z has zero variance; bandwidth undefined")
    h_base = 1.06 * sd * n ** (-0.2)
    return h_base * n ** (1.0 / 5.0) * n ** (-2.0 / 7.0)


def _point_and_variance(z0, z, values, cfg):
    w = kernel_weights(z0, z, cfg)
    values = np.asarray(values, dtype=np.float64)
    point = float(w @ values)
    variance = float(np.sum(w * w * (values - point) ** 2))
    return point, variance


def aipw_kernel(z0: float, data: Dataset, m_hat: np.ndarray, pi_hat: np.ndarray,
                cfg: KernelConfig) -> tuple[float, float]:
    """Local-constant regression of the AIPW values on Z at z0.

    m_hat and pi_hat are per-observation fitted values, full-sample or
    cross-fitted (see crossfit_nuisances). Returns (point, variance) with
    the kernel-weighted sandwich variance sum w_i^2 (phi_i - point)^2.
    """
    phi = aipw_phi(data.y, data.t, pi_hat, m_hat)
    return _point_and_variance(z0, data.z1, phi, cfg)


def ipw_kernel(z0: float, data: Dataset, pi_hat: np.ndarray, cfg: KernelConfig) -> float:
    """Local-constant regression of T Y / pi on Z at z0."""
    values = data.t * data.y / np.asarray(pi_hat, dtype=np.float64)
    return local_constant(z0, data.z1, values, cfg)


def or_kernel(z0: float, data: Dataset, m_hat: np.ndarray, cfg: KernelConfig) -> float:
    """Local-constant regression of the fitted outcome values on Z at z0."""
    return local_constant(z0, data.z1, np.asarray(m_hat, dtype=np.float64), cfg)


# ---------------------------------------------------------------------------
# cross-fitting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CrossfitNuisances:
    pi_hat: np.ndarray
    m_hat: np.ndarray
    fold_id: np.ndarray


def _default_fit_ps(data: Dataset, plan: RegressorPlan, train: np.ndarray,
                    seed: int, folds: int, grid_size: int) -> np.ndarray:
    sub = nuisance._subset(data, train)
    lam = nuisance.cv_lambda(
        sub, plan, "ml_logistic", folds=folds, seed=seed, grid_size=grid_size
    ).chosen_lambda
    ps = nuisance.fit_ps_rml(sub, plan, lam)
    return nuisance.predict_pi(ps, data.z, data.v)


def _default_fit_or(data: Dataset, plan: RegressorPlan, train: np.ndarray,
                    seed: int, folds: int, grid_size: int, link: str) -> np.ndarray:
    sub = nuisance._subset(data, train)
    lam = nuisance.cv_lambda(
        sub, plan, "ml_glm", link=link, folds=folds, seed=seed, grid_size=grid_size
    ).chosen_lambda
    orf = nuisance.fit_or_rml(sub, plan, lam, link=link)
    return nuisance.predict_m(orf, data.z, data.v)


def crossfit_nuisances(
    data: Dataset,
    plan: RegressorPlan,
    folds: int = 4,
    seed: int = 0,
    link: str = "identity",
    cv_folds: int = 5,
    grid_size: int = 50,
    fit_ps=None,
    fit_or=None,
) -> CrossfitNuisances:
    """Fold-wise nuisance values: fold k's rows are predicted by fits
    trained on the other folds (plain penalized ML fits by default).

    fit_ps / fit_or may be replaced for testing; each receives
    (data, plan, train_mask) and must return predictions for all rows.
    """
    fold_id = nuisance.stratified_folds(data.t, folds, seed)
    pi_hat = np.empty(data.n_obs)
    m_hat = np.empty(data.n_obs)
    for f in range(folds):
        test = fold_id == f
        train = ~test
        if fit_ps is None:
            pi_full = _default_fit_ps(data, plan, train, seed, cv_folds, grid_size)
        else:
            pi_full = fit_ps(data, plan, train)
        if fit_or is None:
            m_full = _default_fit_or(data, plan, train, seed, cv_folds, grid_size, link)
        else:
            m_full = fit_or(data, plan, train)
        pi_hat[test] = pi_full[test]
        m_hat[test] = m_full[test]
    return CrossfitNuisances(pi_hat=pi_hat, m_hat=m_hat, fold_id=fold_id)
