"""Monte Carlo laboratory: data-generating scenarios and metric runs.

Five built-in scenarios cover binary and continuous conditioning covariates
with correct or misspecified propensity-score / outcome models:

  C1  binary z,     correct PS, correct OR
  C2  binary z,     correct PS, misspecified OR (cubic terms in the outcome)
  C3  binary z,     misspecified PS (squared covariates), correct OR
  C4  continuous z, correct PS, correct OR (linear outcome)
  C5  continuous z, correct PS, misspecified OR (quintic in z, squares in V)

Auxiliary covariates are Normal(0, Sigma) with Sigma_jk = 2^(-|j-k|); only
the first four enter the generating equations, the rest are inactive. The
reproduction scenarios study the treated-arm mean, so untreated outcomes
are filled with standard-normal noise that no treated-arm estimator reads.

Per-replicate randomness comes from counter-based streams keyed by
(master seed, replicate index), so results are reproducible bit for bit and
independent of worker scheduling.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import kernels, nuisance
from .cste import fit_mu_msm, msm_point, normal_quantile, sandwich_variance
from .dataset import Dataset
from .design import BinaryBasis, LinearBasis, build_plan, plain_plan, spline_basis_from_data
from .errors import ConfigError

ESTIMATORS = ("proposed", "rml_msm", "aipw_kernel_full", "aipw_kernel_cf4")

THREADS_ENV = "CSTEKIT_THREADS"


@dataclass(frozen=True)
class Scenario:
    id: str
    z_kind: str  # "binary" or "continuous"
    ps_correct: bool
    or_correct: bool
    description: str


SCENARIOS = {
    "C1": Scenario("C1", "binary", True, True, "correct PS, correct OR"),
    "C2": Scenario("C2", "binary", True, False, "correct PS, misspecified OR"),
    "C3": Scenario("C3", "binary", False, True, "misspecified PS, correct OR"),
    "C4": Scenario("C4", "continuous", True, True, "correct PS, correct OR"),
    "C5": Scenario("C5", "continuous", True, False, "correct PS, misspecified OR"),
}

GAMMA_STAR = 0.5 * np.array([1.0, -1.0, -1.0, 1.0, -1.0])

# E[(V_i^2 + V_i) / 2^(i+1)] for i = 1..4 with standard-normal margins
C5_SHIFT = sum(1.0 / 2 ** (i + 1) for i in range(1, 5))


def true_mu1(scenario_id: str, z) -> float:
    z = float(z)
    if scenario_id in ("C1", "C2", "C3"):
        return 1.0 + z
    if scenario_id == "C4":
        return z
    if scenario_id == "C5":
        return z * (1.0 + 2.0 * z) ** 2 * (z - 1.0) ** 2 + C5_SHIFT
    raise ConfigError(f"unknown scenario {scenario_id!r}")


def default_z0(scenario_id: str) -> tuple[float, ...]:
    if SCENARIOS[scenario_id].z_kind == "binary":
        return (0.0, 1.0)
    return (-0.4, -0.2, 0.0, 0.2, 0.4)


def _covariance_factor(d: int) -> np.ndarray:
    idx = np.arange(d)
    sigma = 2.0 ** (-np.abs(idx[:, None] - idx[None, :]))
    return np.linalg.cholesky(sigma)


def _draw_covariates(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    return rng.standard_normal((n, d)) @ _covariance_factor(d).T


def sample_covariates(n: int, d: int, seed: int) -> np.ndarray:
    """n draws of Normal(0, Sigma) with Sigma_jk = 2^(-|j-k|)."""
    if d < 1:
        raise ValueError("d must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence((int(seed),)))
    return _draw_covariates(rng, n, d)


def _ps_linpred(scenario_id: str, z: np.ndarray, V: np.ndarray) -> np.ndarray:
    if scenario_id == "C3":
        covs = np.column_stack([z, V[:, 0] ** 2, V[:, 1] ** 2, V[:, 2] ** 2, V[:, 3] ** 2])
    else:
        covs = np.column_stack([z, V[:, 0], V[:, 1], V[:, 2], V[:, 3]])
    return covs @ GAMMA_STAR


def _y1_mean(scenario_id: str, z: np.ndarray, V: np.ndarray) -> np.ndarray:
    V4 = V[:, :4]
    if scenario_id in ("C1", "C3"):
        return 1.0 + z + (V4 * z[:, None] + 2.0 * V4 * (1.0 - z[:, None])).sum(axis=1)
    if scenario_id == "C2":
        cubes = sum(V[:, i - 1] ** 3 / 2.0**i for i in range(1, 5))
        return 1.0 + z + (V4 * z[:, None] + 2.0 * V4 * (1.0 - z[:, None])).sum(axis=1) + cubes
    if scenario_id == "C4":
        return z + V4.sum(axis=1)
    if scenario_id == "C5":
        vpart = sum((V[:, i - 1] ** 2 + V[:, i - 1]) / 2.0 ** (i + 1) for i in range(1, 5))
        return z * (1.0 + 2.0 * z) ** 2 * (z - 1.0) ** 2 + vpart
    raise ConfigError(f"unknown scenario {scenario_id!r}")


def generate(scenario_id: str, n: int, p: int, seed: int) -> Dataset:
    """One draw of a scenario with p auxiliary covariates (first 4 active)."""
    if scenario_id not in SCENARIOS:
        raise ConfigError(f"unknown scenario {scenario_id!r}")
    if p < 4:
        raise ConfigError("p must be at least 4 (the generating equations use V1..V4)")
    spec = SCENARIOS[scenario_id]
    rng = np.random.default_rng(np.random.SeedSequence((int(seed),)))
    V = _draw_covariates(rng, n, p)
    if spec.z_kind == "binary":
        z = (rng.random(n) < 0.5).astype(float)
    else:
        z = rng.uniform(-0.5, 0.5, n)
    pi = 1.0 / (1.0 + np.exp(-_ps_linpred(scenario_id, z, V)))
    t = (rng.random(n) < pi).astype(float)
    eps = rng.standard_normal(n)
    y1 = _y1_mean(scenario_id, z, V) + eps
    y0 = rng.standard_normal(n)  # placeholder arm, never read by mu1 pipelines
    y = np.where(t == 1.0, y1, y0)
    return Dataset(y=y, t=t, z=z, v=V)


# ---------------------------------------------------------------------------
# Monte Carlo runs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MCConfig:
    scenario: str
    n: int = 500
    p: int = 200
    n_reps: int = 1000
    z0_list: tuple[float, ...] = ()
    seed: int = 0
    estimator: str = "proposed"
    folds: int = 5
    grid_size: int = 50
    num_knots: int = 3
    n_jobs: int | None = None

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}")
        if self.estimator not in ESTIMATORS:
            raise ConfigError(f"unknown estimator {self.estimator!r}")
        if self.n_reps < 1:
            raise ConfigError("n_reps must be >= 1")
        if self.p < 4:
            raise ConfigError("p must be >= 4")
        if self.estimator.startswith("aipw_kernel") and SCENARIOS[self.scenario].z_kind != "continuous":
            raise ConfigError("kernel estimators need a continuous-z scenario")
        if not self.z0_list:
            object.__setattr__(self, "z0_list", default_z0(self.scenario))
        else:
            object.__setattr__(self, "z0_list", tuple(float(z) for z in self.z0_list))


@dataclass(frozen=True)
class MCMetrics:
    scenario: str
    estimator: str
    z0: tuple[float, ...]
    truth: np.ndarray
    bias: np.ndarray
    var: np.ndarray
    evar: np.ndarray
    cov90: np.ndarray
    cov95: np.ndarray
    mean_ci_width: np.ndarray
    n_success: int
    n_failed: int
    points: np.ndarray      # (n_success, n_z0)
    variances: np.ndarray   # (n_success, n_z0)

    def to_dict(self) -> dict:
        per_z0 = {}
        for i, z0 in enumerate(self.z0):
            per_z0[repr(z0)] = {
                "truth": float(self.truth[i]),
                "bias": float(self.bias[i]),
                "var": float(self.var[i]),
                "sqrt_var": float(np.sqrt(self.var[i])),
                "evar": float(self.evar[i]),
                "sqrt_evar": float(np.sqrt(self.evar[i])),
                "cov90": float(self.cov90[i]),
                "cov95": float(self.cov95[i]),
                "mean_ci_width": float(self.mean_ci_width[i]),
            }
        return {
            "scenario": self.scenario,
            "estimator": self.estimator,
            "n_success": self.n_success,
            "n_failed": self.n_failed,
            "metrics": per_z0,
        }


def _replicate_seed(master: int, rep: int, attempt: int) -> tuple[int, int]:
    """(data seed material, cv seed) for one replicate attempt."""
    ss = np.random.SeedSequence((int(master), int(rep), int(attempt)))
    state = ss.generate_state(2)
    return int(state[0]), int(state[1])


def _estimate_once(cfg: MCConfig, rep: int, attempt: int) -> tuple[np.ndarray, np.ndarray]:
    data_seed, cv_seed = _replicate_seed(cfg.seed, rep, attempt)
    data = generate(cfg.scenario, cfg.n, cfg.p, data_seed)
    z0s = np.array(cfg.z0_list)
    spec = SCENARIOS[cfg.scenario]

    if cfg.estimator in ("proposed", "rml_msm"):
        if spec.z_kind == "binary":
            basis = BinaryBasis()
            plan = (
                build_plan("doubly_robust", basis, cfg.p)
                if cfg.estimator == "proposed"
                else plain_plan(basis, cfg.p)
            )
        else:
            basis = spline_basis_from_data(data.z1, cfg.num_knots)
            plan = (
                build_plan("model_assisted", basis, cfg.p)
                if cfg.estimator == "proposed"
                else plain_plan(LinearBasis(), cfg.p)
            )
        method = "rcal" if cfg.estimator == "proposed" else "rml"
        msm, _ = fit_mu_msm(
            1, data, plan, basis, seed=cv_seed, folds=cfg.folds,
            grid_size=cfg.grid_size, method=method,
        )
        points = np.array([msm_point(msm, z0) for z0 in z0s])
        variances = np.array([sandwich_variance(msm, z0) for z0 in z0s])
        return points, variances

    # kernel competitors: plain regressors (1, V, Z), penalized ML nuisances
    plan = plain_plan(LinearBasis(), cfg.p)
    h = kernels.bandwidth_rule(data.z1)
    if cfg.estimator == "aipw_kernel_full":
        lam_ps = nuisance.cv_lambda(
            data, plan, "ml_logistic", folds=cfg.folds, seed=cv_seed, grid_size=cfg.grid_size
        ).chosen_lambda
        lam_or = nuisance.cv_lambda(
            data, plan, "ml_glm", folds=cfg.folds, seed=cv_seed, grid_size=cfg.grid_size
        ).chosen_lambda
        ps = nuisance.fit_ps_rml(data, plan, lam_ps)
        orf = nuisance.fit_or_rml(data, plan, lam_or)
        pi_hat, m_hat = ps.fitted_pi, orf.fitted_m
        kcfg = kernels.KernelConfig(bandwidth=h)
    else:
        cf = kernels.crossfit_nuisances(
            data, plan, folds=4, seed=cv_seed, cv_folds=cfg.folds, grid_size=cfg.grid_size
        )
        pi_hat, m_hat = cf.pi_hat, cf.m_hat
        kcfg = kernels.KernelConfig(bandwidth=h, crossfit_folds=4, seed=cv_seed)

    points = np.empty(len(z0s))
    variances = np.empty(len(z0s))
    for i, z0 in enumerate(z0s):
        points[i], variances[i] = kernels.aipw_kernel(float(z0), data, m_hat, pi_hat, kcfg)
    return points, variances


def _replicate_task(args) -> tuple[int, np.ndarray | None, np.ndarray | None]:
    cfg, rep = args
    try:
        points, variances = _estimate_once(cfg, rep, attempt=0)
        return rep, points, variances
    except Exception:
        try:
            points, variances = _estimate_once(cfg, rep, attempt=1)
            return rep, points, variances
        except Exception:
            return rep, None, None


def _n_jobs(cfg: MCConfig) -> int:
    if cfg.n_jobs is not None:
        return max(1, cfg.n_jobs)
    env = os.environ.get(THREADS_ENV)
    if env:
        return max(1, int(env))
    return max(1, os.cpu_count() or 1)


def run_mc(cfg: MCConfig) -> MCMetrics:
    """Run the Monte Carlo study and reduce to per-z0 metrics.

    Replicates run in parallel; accumulation is indexed by replicate, so
    the result does not depend on scheduling. A replicate that fails is
    retried once on a perturbed stream and then counted as failed.
    """
    tasks = [(cfg, rep) for rep in range(cfg.n_reps)]
    n_z0 = len(cfg.z0_list)
    all_points = np.full((cfg.n_reps, n_z0), np.nan)
    all_vars = np.full((cfg.n_reps, n_z0), np.nan)

    jobs = _n_jobs(cfg)
    if jobs > 1 and cfg.n_reps > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for rep, points, variances in pool.map(_replicate_task, tasks, chunksize=4):
                if points is not None:
                    all_points[rep] = points
                    all_vars[rep] = variances
    else:
        for task in tasks:
            rep, points, variances = _replicate_task(task)
            if points is not None:
                all_points[rep] = points
                all_vars[rep] = variances

    ok = ~np.isnan(all_points[:, 0])
    points = all_points[ok]
    variances = all_vars[ok]
    n_success = int(ok.sum())
    if n_success == 0:
        raise ConfigError("every replicate failed; check the configuration")

    truth = np.array([true_mu1(cfg.scenario, z0) for z0 in cfg.z0_list])
    z90 = normal_quantile(0.95)
    z95 = normal_quantile(0.975)
    se = np.sqrt(variances)
    bias = points.mean(axis=0) - truth
    var = points.var(axis=0, ddof=1) if n_success > 1 else np.zeros(n_z0)
    evar = variances.mean(axis=0)
    cov90 = (np.abs(points - truth) <= z90 * se).mean(axis=0)
    cov95 = (np.abs(points - truth) <= z95 * se).mean(axis=0)
    width = (2.0 * z95 * se).mean(axis=0)

    return MCMetrics(
        scenario=cfg.scenario,
        estimator=cfg.estimator,
        z0=cfg.z0_list,
        truth=truth,
        bias=bias,
        var=var,
        evar=evar,
        cov90=cov90,
        cov95=cov95,
        mean_ci_width=width,
        n_success=n_success,
        n_failed=cfg.n_reps - n_success,
        points=points,
        variances=variances,
    )
