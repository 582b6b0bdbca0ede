"""Generic solver for L1-penalized convex losses.

All nuisance fits (calibrated propensity scores, weighted-likelihood outcome
regressions, plain penalized maximum likelihood) reduce to minimizing

    mean_i loss_i(coef' x_i)  +  lambda * sum_{penalized j} |coef_j|

over a design matrix whose first column is the constant 1. The solver is a
majorize-minimize outer loop (quadratic majorization of the loss at the
current coefficients) with cyclic coordinate descent and soft-thresholding in
the inner loop, plus step-halving on the true objective so the penalized
objective is nonincreasing across iterations.

Penalized columns are internally centered and scaled for conditioning; the
per-column soft-threshold is adjusted so the optimized objective is exactly
the original-scale one, and coefficients are reported on the original scale.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .errors import DegenerateDataError, NumericOverflowError

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]):
            return args[0]

        def wrap(fn):
            return fn

        return wrap


LOSS_KINDS = (
    "cal_logistic_treated",
    "cal_logistic_untreated",
    "wglm",
    "ml_logistic",
    "ml_glm",
)
LINKS = ("identity", "logistic")

_KIND_CODE = {
    "cal_logistic_treated": 0,
    "cal_logistic_untreated": 1,
    "ml_logistic": 2,
    "wglm": 3,
    "ml_glm": 4,
}
_LINK_CODE = {"identity": 0, "logistic": 1}

ETA_CLAMP = 35.0
CURVATURE_CAP = 1e8


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class PenalizedProblem:
    """One L1-penalizable convex loss instance.

    design has n rows and d+1 columns with column 0 identically 1. response
    is the outcome Y (unused for propensity-score losses and may be None
    there). weights are per-observation weights, e.g. exp(-gamma'f(X)) for
    the weighted-likelihood loss; they are ignored for the other loss kinds.
    penalty_mask marks penalized columns with 1; entry 0 (the intercept) is
    always unpenalized.
    """

    loss_kind: str
    design: np.ndarray
    response: np.ndarray | None
    treatment: np.ndarray
    weights: np.ndarray | None = None
    penalty_mask: np.ndarray | None = None
    link: str = "identity"

    def __post_init__(self):
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.loss_kind!r}")
        if self.link not in LINKS:
            raise ValueError(f"unknown link {self.link!r}")
        design = np.asarray(self.design, dtype=np.float64)
        if design.ndim != 2 or design.shape[0] < 1:
            raise ValueError("design must be a 2-D matrix with at least one row")
        if not np.all(np.isfinite(design)):
            raise ValueError("design contains non-finite entries")
        if not np.all(design[:, 0] == 1.0):
            raise ValueError("design column 0 must be identically 1")
        n = design.shape[0]

        treatment = np.asarray(self.treatment, dtype=np.float64).reshape(-1)
        if treatment.shape[0] != n:
            raise ValueError("treatment length does not match design rows")
        if not np.all((treatment == 0.0) | (treatment == 1.0)):
            raise ValueError("treatment entries must be in {0, 1}")

        response = self.response
        if self.loss_kind in ("wglm", "ml_glm"):
            if response is None:
                raise ValueError(f"{self.loss_kind} requires a response vector")
        if response is not None:
            response = np.asarray(response, dtype=np.float64).reshape(-1)
            if response.shape[0] != n:
                raise ValueError("response length does not match design rows")
            if not np.all(np.isfinite(response)):
                raise ValueError("response contains non-finite entries")
            response = _readonly(response)

        weights = self.weights
        if weights is None:
            weights = np.ones(n)
        else:
            weights = np.asarray(weights, dtype=np.float64).reshape(-1)
            if weights.shape[0] != n:
                raise ValueError("weights length does not match design rows")
            if not np.all(np.isfinite(weights)) or np.any(weights < 0):
                raise ValueError("weights must be finite and nonnegative")

        mask = self.penalty_mask
        if mask is None:
            mask = np.ones(design.shape[1])
            mask[0] = 0.0
        else:
            mask = np.asarray(mask, dtype=np.float64).reshape(-1)
            if mask.shape[0] != design.shape[1]:
                raise ValueError("penalty_mask length does not match design width")
            if not np.all((mask == 0.0) | (mask == 1.0)):
                raise ValueError("penalty_mask entries must be in {0, 1}")
            if mask[0] != 0.0:
                raise ValueError("the intercept (column 0) is never penalized")

        object.__setattr__(self, "design", _readonly(design))
        object.__setattr__(self, "treatment", _readonly(treatment))
        object.__setattr__(self, "response", response)
        object.__setattr__(self, "weights", _readonly(weights))
        object.__setattr__(self, "penalty_mask", _readonly(mask))

    @property
    def n_obs(self) -> int:
        return self.design.shape[0]

    @property
    def n_cols(self) -> int:
        return self.design.shape[1]


@dataclass(frozen=True)
class SolverOptions:
    max_iter: int = 10_000
    kkt_tol: float = 1e-9
    obj_tol: float = 1e-9
    max_sweeps: int = 50
    inner_tol: float = 1e-12


# loose settings for exploratory path fits inside cross-validation; the fit
# at the chosen lambda is always redone with the strict defaults
PATH_OPTIONS = SolverOptions(max_iter=60, kkt_tol=1e-5, max_sweeps=30)


@dataclass(frozen=True)
class FitResult:
    """Solved state of a penalized problem.

    coef is on the original design scale. kkt_residuals are the components
    of the unpenalized-loss gradient at coef; after convergence every
    penalized component lies in the [-lambda, lambda] box (with equality at
    nonzero coefficients) and unpenalized components vanish, up to solver
    tolerance. objective includes the L1 penalty. objective_trace holds the
    penalized objective per outer iteration and is nonincreasing. clamped
    flags that some linear predictor touched the exp-argument clamp.
    """

    coef: np.ndarray
    objective: float
    iterations: int
    converged: bool
    kkt_residuals: np.ndarray
    active_set: tuple[int, ...]
    clamped: bool
    objective_trace: np.ndarray
    dropped_columns: tuple[int, ...] = field(default=())


def soft_threshold(x: float, t: float) -> float:
    """sign(x) * max(|x| - t, 0) for t >= 0."""
    if t < 0:
        raise ValueError("threshold must be nonnegative")
    if x > t:
        return x - t
    if x < -t:
        return x + t
    return 0.0


def _eta(problem: PenalizedProblem, coef: np.ndarray) -> np.ndarray:
    coef = np.asarray(coef, dtype=np.float64).reshape(-1)
    if coef.shape[0] != problem.n_cols:
        raise ValueError(
            f"coef length {coef.shape[0]} does not match design width {problem.n_cols}"
        )
    eta = problem.design @ coef
    if not np.all(np.isfinite(eta)):
        bad = eta[~np.isfinite(eta)][0]
        raise NumericOverflowError(
            f"non-finite linear predictor {bad!r}", value=float(bad)
        )
    return eta


def _per_obs_loss(kind: int, link: int, eta, t, y, w):
    ec = np.clip(eta, -ETA_CLAMP, ETA_CLAMP)
    if kind == 0:
        return t * np.exp(-ec) + (1.0 - t) * eta
    if kind == 1:
        return (1.0 - t) * np.exp(ec) - t * eta
    if kind == 2:
        return -t * eta + np.log1p(np.exp(ec))
    # wglm / ml_glm
    if link == 0:
        big_psi = 0.5 * eta * eta
    else:
        big_psi = np.log1p(np.exp(ec))
    return t * w * (-y * eta + big_psi)


def _per_obs_d1(kind: int, link: int, eta, t, y, w):
    ec = np.clip(eta, -ETA_CLAMP, ETA_CLAMP)
    if kind == 0:
        return -t * np.exp(-ec) + (1.0 - t)
    if kind == 1:
        return (1.0 - t) * np.exp(ec) - t
    if kind == 2:
        return 1.0 / (1.0 + np.exp(-ec)) - t
    if link == 0:
        psi = eta
    else:
        psi = 1.0 / (1.0 + np.exp(-ec))
    return t * w * (psi - y)


def _loss_inputs(problem: PenalizedProblem):
    kind = _KIND_CODE[problem.loss_kind]
    link = _LINK_CODE[problem.link]
    y = problem.response
    if y is None:
        y = np.zeros(problem.n_obs)
    w = problem.weights
    if problem.loss_kind == "ml_glm":
        # plain likelihood: per-observation weights do not enter
        w = np.ones(problem.n_obs)
    return kind, link, y, w


def eval_loss(problem: PenalizedProblem, coef: np.ndarray) -> float:
    """Sample-average unpenalized loss at coef."""
    eta = _eta(problem, coef)
    kind, link, y, w = _loss_inputs(problem)
    return float(np.mean(_per_obs_loss(kind, link, eta, problem.treatment, y, w)))


def eval_gradient(problem: PenalizedProblem, coef: np.ndarray) -> np.ndarray:
    """Exact gradient of the unpenalized sample loss at coef."""
    eta = _eta(problem, coef)
    kind, link, y, w = _loss_inputs(problem)
    d1 = _per_obs_d1(kind, link, eta, problem.treatment, y, w)
    return problem.design.T @ d1 / problem.n_obs


def kkt_report(problem: PenalizedProblem, coef: np.ndarray, lam: float) -> np.ndarray:
    """Per-coordinate stationarity residuals at coef.

    Components are the gradient of the unpenalized loss. For the treated
    calibration loss, component j equals (up to sign) the gap between the
    inverse-probability-weighted average of column j over the treated and
    its overall average, so after a converged fit the penalized components
    sit inside the [-lam, lam] box and the intercept component vanishes.
    """
    del lam  # the residuals themselves do not depend on lambda
    return eval_gradient(problem, coef)


def penalized_objective(problem: PenalizedProblem, coef: np.ndarray, lam: float) -> float:
    coef = np.asarray(coef, dtype=np.float64).reshape(-1)
    pen = float(np.sum(np.abs(coef) * problem.penalty_mask))
    return eval_loss(problem, coef) + lam * pen


def intercept_only_coef(problem: PenalizedProblem) -> float:
    """Solve the 1-D unpenalized problem over the intercept alone."""
    kind, link, y, w = _loss_inputs(problem)
    t = problem.treatment
    ones = np.ones(problem.n_obs)

    def deriv(b: float) -> float:
        return float(np.mean(_per_obs_d1(kind, link, b * ones, t, y, w)))

    lo, hi = -ETA_CLAMP + 1.0, ETA_CLAMP - 1.0
    dlo, dhi = deriv(lo), deriv(hi)
    if dlo == 0.0:
        return lo
    if dhi == 0.0:
        return hi
    if dlo * dhi > 0:
        raise DegenerateDataError(
            "intercept-only problem has no stationary point in range "
            "(single-arm data or degenerate weights)"
        )
    return float(optimize.brentq(deriv, lo, hi, xtol=1e-13, rtol=1e-15))


# ---------------------------------------------------------------------------
# numba kernel: majorize-minimize outer loop + coordinate descent inner loop
# ---------------------------------------------------------------------------


@njit(cache=True)
def _nb_loss(kind, link, eta, t, y, w, n):
    total = 0.0
    for i in range(n):
        e = eta[i]
        ec = min(max(e, -35.0), 35.0)
        if kind == 0:
            total += t[i] * math.exp(-ec) + (1.0 - t[i]) * e
        elif kind == 1:
            total += (1.0 - t[i]) * math.exp(ec) - t[i] * e
        elif kind == 2:
            total += -t[i] * e + math.log1p(math.exp(ec))
        else:
            if link == 0:
                bp = 0.5 * e * e
            else:
                bp = math.log1p(math.exp(ec))
            total += t[i] * w[i] * (-y[i] * e + bp)
    return total / n


@njit(cache=True)
def _nb_d1_d2(kind, link, eta, t, y, w, n, d1, d2):
    clamped = False
    for i in range(n):
        e = eta[i]
        if e > 35.0 or e < -35.0:
            clamped = True
        ec = min(max(e, -35.0), 35.0)
        if kind == 0:
            ex = math.exp(-ec)
            d1[i] = -t[i] * ex + (1.0 - t[i])
            d2[i] = t[i] * ex
        elif kind == 1:
            ex = math.exp(ec)
            d1[i] = (1.0 - t[i]) * ex - t[i]
            d2[i] = (1.0 - t[i]) * ex
        elif kind == 2:
            p = 1.0 / (1.0 + math.exp(-ec))
            d1[i] = p - t[i]
            d2[i] = p * (1.0 - p)
        else:
            if link == 0:
                psi = e
                dpsi = 1.0
            else:
                psi = 1.0 / (1.0 + math.exp(-ec))
                dpsi = psi * (1.0 - psi)
            d1[i] = t[i] * w[i] * (psi - y[i])
            d2[i] = t[i] * w[i] * dpsi
        if d2[i] > 1e8:
            d2[i] = 1e8
    return clamped


@njit(cache=True, fastmath=True)
def _cd_update(XT, work, d2, grad, a, thr, usable, cand, dlin, n, d, active_only):
    """One coordinate-descent sweep on the quadratic model; returns max |change|."""
    max_ch = 0.0
    for j in range(d):
        if not usable[j]:
            continue
        if active_only and cand[j] == 0.0 and thr[j] > 0.0:
            continue
        col = XT[j]
        qj = grad[j] + np.dot(work, col) / n
        old = cand[j]
        u = a[j] * old - qj
        if thr[j] > 0.0:
            if u > thr[j]:
                new = (u - thr[j]) / a[j]
            elif u < -thr[j]:
                new = (u + thr[j]) / a[j]
            else:
                new = 0.0
        else:
            new = u / a[j]
        ch = new - old
        if ch != 0.0:
            cand[j] = new
            for i in range(n):
                dlin[i] += ch * col[i]
                work[i] += ch * d2[i] * col[i]
            if abs(ch) > max_ch:
                max_ch = abs(ch)
    return max_ch


@njit(cache=True, fastmath=True)
def _nb_solve(XT, t, y, w, kind, link, thr, usable, coef, max_iter, kkt_tol,
              obj_tol, max_sweeps, inner_tol, eta_bound, trace):
    d, n = XT.shape
    eta = np.zeros(n)
    for j in range(d):
        if coef[j] != 0.0:
            cj = coef[j]
            col = XT[j]
            for i in range(n):
                eta[i] += cj * col[i]

    pen = 0.0
    for j in range(d):
        pen += thr[j] * abs(coef[j])
    obj = _nb_loss(kind, link, eta, t, y, w, n) + pen
    trace[0] = obj

    d1 = np.empty(n)
    d2 = np.empty(n)
    grad = np.empty(d)
    a = np.empty(d)
    dlin = np.empty(n)
    work = np.empty(n)
    cand = np.empty(d)

    converged = False
    clamped = False
    diverged = False
    stalls = 0
    it = 0

    for it in range(1, max_iter + 1):
        big_eta = 0.0
        for i in range(n):
            if abs(eta[i]) > big_eta:
                big_eta = abs(eta[i])
        if big_eta > eta_bound:
            diverged = True
            break

        cl = _nb_d1_d2(kind, link, eta, t, y, w, n, d1, d2)
        clamped = clamped or cl

        for j in range(d):
            grad[j] = np.dot(d1, XT[j]) / n

        gap = 0.0
        for j in range(d):
            if not usable[j]:
                continue
            if thr[j] == 0.0:
                gj = abs(grad[j])
            elif coef[j] > 0.0:
                gj = abs(grad[j] + thr[j])
            elif coef[j] < 0.0:
                gj = abs(grad[j] - thr[j])
            else:
                gj = abs(grad[j]) - thr[j]
                if gj < 0.0:
                    gj = 0.0
            if gj > gap:
                gap = gj
        if gap <= kkt_tol:
            converged = True
            it -= 1
            break

        for j in range(d):
            aj = 0.0
            col = XT[j]
            for i in range(n):
                xij = col[i]
                aj += d2[i] * xij * xij
            a[j] = aj / n
            if a[j] < 1e-12:
                a[j] = 1e-12

        for j in range(d):
            cand[j] = coef[j]
        for i in range(n):
            dlin[i] = 0.0
            work[i] = 0.0

        sweeps_done = 0
        while sweeps_done < max_sweeps:
            full_max = _cd_update(XT, work, d2, grad, a, thr, usable, cand, dlin, n, d, False)
            sweeps_done += 1
            if full_max < inner_tol:
                break
            while sweeps_done < max_sweeps:
                act_max = _cd_update(XT, work, d2, grad, a, thr, usable, cand, dlin, n, d, True)
                sweeps_done += 1
                if act_max < inner_tol:
                    break

        # step-halving line search on the true penalized objective
        step = 1.0
        accepted = False
        newobj = obj
        for _ in range(40):
            pen_new = 0.0
            for j in range(d):
                pen_new += thr[j] * abs(coef[j] + step * (cand[j] - coef[j]))
            for i in range(n):
                d1[i] = eta[i] + step * dlin[i]  # reuse d1 as an eta buffer
            cand_obj = _nb_loss(kind, link, d1, t, y, w, n) + pen_new
            if cand_obj <= obj + 1e-15 * (1.0 + abs(obj)):
                newobj = cand_obj
                accepted = True
                break
            step *= 0.5

        if accepted:
            for j in range(d):
                coef[j] = coef[j] + step * (cand[j] - coef[j])
            for i in range(n):
                eta[i] = eta[i] + step * dlin[i]
            decrease = obj - newobj
            obj = newobj
            trace[it] = obj
            if decrease <= obj_tol * 1e-6 * (1.0 + abs(obj)):
                stalls += 1
                if stalls >= 10:
                    break
            else:
                stalls = 0
        else:
            trace[it] = obj
            break

    return it, converged, clamped, diverged


def fit_lasso(
    problem: PenalizedProblem,
    lam: float,
    init: np.ndarray | None = None,
    opts: SolverOptions | None = None,
) -> FitResult:
    """Minimize loss + lam * sum(|coef_j| over penalized j).

    Deterministic given (problem, lam, init, opts). Returns converged=False
    when the iteration budget runs out; callers decide how to react.
    """
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    if opts is None:
        opts = SolverOptions()
    n, d = problem.design.shape

    mask = problem.penalty_mask.astype(bool)
    means = np.zeros(d)
    scales = np.ones(d)
    col_mean = problem.design.mean(axis=0)
    col_sd = problem.design.std(axis=0)
    dropped = []
    for j in range(1, d):
        if mask[j]:
            if col_sd[j] == 0.0:
                dropped.append(j)
            else:
                means[j] = col_mean[j]
                scales[j] = col_sd[j]
        elif col_sd[j] == 0.0:
            dropped.append(j)
    if dropped:
        warnings.warn(
            f"dropping zero-variance columns {tuple(dropped)}; coefficients reported as 0",
            RuntimeWarning,
            stacklevel=2,
        )

    XsT = np.ascontiguousarray(((problem.design - means) / scales).T)
    usable = np.ones(d, dtype=np.bool_)
    usable[dropped] = False

    thr = np.where(mask, lam / scales, 0.0)

    if init is None:
        coef0 = np.zeros(d)
    else:
        coef0 = np.asarray(init, dtype=np.float64).reshape(-1).copy()
        if coef0.shape[0] != d:
            raise ValueError("init length does not match design width")
        if not np.all(np.isfinite(coef0)):
            raise ValueError("init contains non-finite entries")
    # map to the standardized scale
    coef_s = coef0 * scales
    coef_s[0] = coef0[0] + float(np.sum(coef0[1:] * means[1:]))
    coef_s[~usable] = 0.0

    kind, link, y, w = _loss_inputs(problem)
    if kind in (0, 1, 2) or problem.link == "logistic":
        eta_bound = 250.0  # exp-family losses saturate well before this
    else:
        eta_bound = 1e6 * (1.0 + float(np.max(np.abs(y))))
    trace = np.full(opts.max_iter + 1, np.nan)
    iters, converged, clamped, diverged = _nb_solve(
        XsT,
        problem.treatment,
        y,
        w,
        kind,
        link,
        thr,
        usable,
        coef_s,
        opts.max_iter,
        opts.kkt_tol,
        opts.obj_tol,
        opts.max_sweeps,
        opts.inner_tol,
        eta_bound,
        trace,
    )

    if diverged or np.any(np.abs(coef_s) > 1e10):
        raise NumericOverflowError(
            "unbounded linear predictor: separation or degenerate design",
            value=float(np.max(np.abs(coef_s))),
        )

    coef = coef_s / scales
    coef[0] = coef_s[0] - float(np.sum((coef_s[1:] / scales[1:]) * means[1:]))
    coef[~usable] = 0.0

    kkt = eval_gradient(problem, coef)
    objective = penalized_objective(problem, coef, lam)
    active = tuple(int(j) for j in range(1, d) if mask[j] and coef[j] != 0.0)
    trace = trace[: iters + 1]
    return FitResult(
        coef=_readonly(coef),
        objective=float(objective),
        iterations=int(iters),
        converged=bool(converged),
        kkt_residuals=_readonly(kkt),
        active_set=active,
        clamped=bool(clamped),
        objective_trace=_readonly(trace),
        dropped_columns=tuple(dropped),
    )
