"""Command-line front end.

Four workflows over CSV data or built-in scenarios:

  fit       estimate mu1, mu0 and the treatment effect at chosen z0 points
  diagnose  standardized calibration differences per regressor, both PS routes
  simulate  Monte Carlo metrics for a built-in scenario
  compare   proposed + competitor estimators on the same data, long format

Every run writes results.json / results.csv plus plot-ready CSVs and a
manifest (config echo, seeds, package version) sufficient to reproduce the
run bit for bit. Exit codes: 0 ok, 2 configuration error, 3 data error,
4 numeric error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__, cste, design, kernels, nuisance, simlab
from .dataset import Dataset
from .errors import ConfigError, CstekitError, DataError, NumericError

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


# ---------------------------------------------------------------------------
# ingestion
# ---------------------------------------------------------------------------


def ingest(path: str | Path, outcome: str, treatment: str, z_cols: list[str],
           v_cols: list[str] | None = None, categorical_max_levels: int = 20) -> tuple[Dataset, dict]:
    """Load a CSV into a typed Dataset.

    Rows with missing values in any used column are dropped (reported in
    the returned info dict). v_cols=None means every remaining numeric
    column. Columns with at most categorical_max_levels distinct values
    are flagged as discrete candidates in the info dict.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"input file {path} does not exist")
    frame = pd.read_csv(path)
    if frame.empty:
        raise DataError(f"input file {path} is empty")
    for name in [outcome, treatment, *z_cols]:
        if name not in frame.columns:
            raise DataError(f"unknown column {name!r}; file has {list(frame.columns)}")
    if v_cols is None:
        used = {outcome, treatment, *z_cols}
        v_cols = [
            c for c in frame.columns
            if c not in used and pd.api.types.is_numeric_dtype(frame[c])
        ]
    else:
        for name in v_cols:
            if name not in frame.columns:
                raise DataError(f"unknown column {name!r}")

    cols = [outcome, treatment, *z_cols, *v_cols]
    sub = frame[cols].apply(pd.to_numeric, errors="coerce")
    keep = sub.notna().all(axis=1)
    n_dropped = int((~keep).sum())
    sub = sub[keep]
    if sub.empty:
        raise DataError("no complete rows after dropping missing values")

    t_vals = sub[treatment].to_numpy(dtype=float)
    if not np.all((t_vals == 0.0) | (t_vals == 1.0)):
        bad = sorted(set(np.unique(t_vals)) - {0.0, 1.0})
        raise DataError(f"treatment column must be coded {{0,1}}; saw {bad}")

    y = sub[outcome].to_numpy(dtype=float)
    outcome_kind = "binary" if set(np.unique(y)) <= {0.0, 1.0} else "continuous"
    data = Dataset(
        y=y,
        t=t_vals,
        z=sub[z_cols].to_numpy(dtype=float),
        v=sub[v_cols].to_numpy(dtype=float) if v_cols else np.empty((len(sub), 0)),
        outcome_kind=outcome_kind,
        z_names=tuple(z_cols),
        v_names=tuple(v_cols),
    )
    discrete = {
        c: int(sub[c].nunique()) for c in z_cols if sub[c].nunique() <= categorical_max_levels
    }
    info = {
        "n_rows": int(len(sub)),
        "n_dropped_missing": n_dropped,
        "v_columns": list(v_cols),
        "discrete_z_candidates": discrete,
        "outcome_kind": outcome_kind,
    }
    return data, info


def _auto_basis(data: Dataset, knots: int | None, auto_knots: bool, seed: int):
    """Basis for the z column(s): saturated for discrete, splines otherwise."""
    if data.z.shape[1] > 1:
        if not np.all((data.z == 0.0) | (data.z == 1.0)):
            raise ConfigError("several z columns are supported only when all are binary")
        return design.MultiBinaryBasis(data.z.shape[1]), "discrete"
    z = data.z1
    values = np.unique(z)
    if set(values) <= {0.0, 1.0}:
        return design.BinaryBasis(), "discrete"
    if values.size <= 20 and not knots and not auto_knots:
        return design.categorical_basis_from_data(z), "discrete"
    if auto_knots:
        result = cste.knot_search(data, max_knots=10, seed=seed)
        return design.spline_basis_from_data(z, result.aic_knots), "continuous"
    return design.spline_basis_from_data(z, knots or 3), "continuous"


def _z0_points(spec: str | None, data: Dataset, basis) -> list:
    if data.z.shape[1] > 1:
        return [np.asarray(p) for p in basis.support_points()]
    z = data.z1
    if spec is None:
        if basis.is_discrete:
            return [float(p[0]) for p in basis.support_points()]
        qs = np.quantile(z, [0.1, 0.25, 0.5, 0.75, 0.9])
        return [float(q) for q in qs]
    if spec.startswith("grid:"):
        n_pts = int(spec.split(":", 1)[1])
        lo, hi = float(z.min()), float(z.max())
        return [float(x) for x in np.linspace(lo, hi, n_pts)]
    pts = [float(x) for x in spec.split(",")]
    lo, hi = float(z.min()), float(z.max())
    out = []
    for p in pts:
        if p < lo or p > hi:
            clamped = min(max(p, lo), hi)
            print(f"warning: z0={p} outside observed support; clamped to {clamped}", file=sys.stderr)
            p = clamped
        out.append(p)
    return out


# ---------------------------------------------------------------------------
# output plumbing
# ---------------------------------------------------------------------------


def _write_manifest(outdir: Path, command: str, args_echo: dict):
    manifest = {
        "package": "cstekit",
        "version": __version__,
        "command": command,
        "config": args_echo,
    }
    (outdir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _write_results(outdir: Path, rows: list[dict], doc: dict):
    (outdir / "results.json").write_text(json.dumps(doc, indent=2, sort_keys=True))
    if rows:
        frame = pd.DataFrame(rows)
        frame.to_csv(outdir / "results.csv", index=False, float_format="%.17g")


def _estimate_rows(estimates, lam_info, method="proposed"):
    rows = []
    for est in estimates:
        z0 = est.z0
        if isinstance(z0, np.ndarray):
            z0 = "|".join(str(float(v)) for v in z0)
        else:
            z0 = float(z0)
        rows.append(
            {
                "method": method,
                "target": est.target,
                "z0": z0,
                "point": est.point,
                "se": est.se,
                "ci_lo": est.ci[0],
                "ci_hi": est.ci[1],
                "level": est.level,
                **lam_info,
            }
        )
    return rows


# ---------------------------------------------------------------------------
# workflows
# ---------------------------------------------------------------------------


def _cmd_fit(args) -> int:
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    data, info = ingest(args.input, args.outcome, args.treatment, args.z, args.v)
    basis, z_nature = _auto_basis(data, args.knots, args.auto_knots, args.seed)
    mode = args.mode or ("doubly_robust" if z_nature == "discrete" else "model_assisted")
    plan = design.build_plan(mode, basis, data.num_v)
    z0s = _z0_points(args.z0, data, basis)
    link = "logistic" if data.outcome_kind == "binary" else "identity"

    msm_tau, fits1, fits0 = cste.fit_tau_msm(data, plan, basis, link=link, seed=args.seed)
    msm1 = cste.msm_fit(fits1.phi, design.phidag_matrix(data.z, basis), basis=basis)
    msm0 = cste.msm_fit(fits0.phi, design.phidag_matrix(data.z, basis), basis=basis)

    estimates = []
    for z0 in z0s:
        estimates.append(cste.estimate_from_msm(msm1, z0, "mu1", args.level))
        estimates.append(cste.estimate_from_msm(msm0, z0, "mu0", args.level))
        estimates.append(cste.estimate_from_msm(msm_tau, z0, "tau", args.level))

    lam_info = {
        "lambda_ps_treated": fits1.lambda_ps,
        "lambda_or_treated": fits1.lambda_or,
        "lambda_ps_untreated": fits0.lambda_ps,
        "lambda_or_untreated": fits0.lambda_or,
    }
    rows = _estimate_rows(estimates, lam_info)
    doc = {
        "command": "fit",
        "ingest": info,
        "mode": mode,
        "basis": basis.to_dict(),
        "level": args.level,
        "estimates": rows,
    }
    _write_results(outdir, rows, doc)

    # plot-ready treatment-effect curve over a grid of z values
    if z_nature == "continuous":
        grid = np.linspace(float(data.z1.min()), float(data.z1.max()), 101)
    else:
        grid = [p[0] if isinstance(p, np.ndarray) and p.size == 1 else p for p in z0s]
    curve_rows = []
    for zp in grid:
        for name, msm in (("mu1", msm1), ("mu0", msm0), ("tau", msm_tau)):
            est = cste.estimate_from_msm(msm, zp, name, args.level)
            zval = "|".join(str(float(v)) for v in np.atleast_1d(zp)) if isinstance(zp, np.ndarray) else float(zp)
            curve_rows.append(
                {"target": name, "z": zval, "point": est.point, "ci_lo": est.ci[0], "ci_hi": est.ci[1]}
            )
    pd.DataFrame(curve_rows).to_csv(outdir / "curve.csv", index=False, float_format="%.17g")
    (outdir / "plan.json").write_text(design.plan_to_json(plan))
    _write_manifest(outdir, "fit", _echo(args))
    print(f"fit: {len(z0s)} evaluation point(s), outputs in {outdir}")
    return 0


def _cmd_diagnose(args) -> int:
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    data, info = ingest(args.input, args.outcome, args.treatment, args.z, args.v)
    basis, z_nature = _auto_basis(data, args.knots, False, args.seed)
    mode = args.mode or ("doubly_robust" if z_nature == "discrete" else "model_assisted")
    plan = design.build_plan(mode, basis, data.num_v)

    lam_cal = nuisance.cv_lambda(data, plan, "cal_logistic_treated", seed=args.seed).chosen_lambda
    lam_ml = nuisance.cv_lambda(data, plan, "ml_logistic", seed=args.seed).chosen_lambda
    ps_cal = nuisance.fit_ps_rcal(data, plan, lam_cal)
    ps_ml = nuisance.fit_ps_rml(data, plan, lam_ml)

    F, _ = design.design_matrices(data.z, data.v, plan)
    rows = []
    for j, label in enumerate(plan.f_labels()):
        if j == 0:
            continue
        col = F[:, j]
        if np.std(col) == 0.0:
            continue
        rows.append(
            {
                "column_index": j,
                "column": label,
                "cal_diff_rcal": nuisance.std_cal_diff(ps_cal, col, data),
                "cal_diff_rml": nuisance.std_cal_diff(ps_ml, col, data),
            }
        )
    doc = {
        "command": "diagnose",
        "ingest": info,
        "lambda_rcal": lam_cal,
        "lambda_rml": lam_ml,
        "balance": rows,
    }
    _write_results(outdir, rows, doc)
    pd.DataFrame(rows).to_csv(outdir / "balance.csv", index=False, float_format="%.17g")
    _write_manifest(outdir, "diagnose", _echo(args))
    print(f"diagnose: {len(rows)} columns, outputs in {outdir}")
    return 0


def _cmd_simulate(args) -> int:
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    z0_list = tuple(float(x) for x in args.z0.split(",")) if args.z0 else ()
    cfg = simlab.MCConfig(
        scenario=args.scenario,
        n=args.n,
        p=args.p,
        n_reps=args.reps,
        z0_list=z0_list,
        seed=args.seed,
        estimator=args.estimator,
        n_jobs=args.jobs,
    )
    metrics = simlab.run_mc(cfg)
    doc = metrics.to_dict()
    rows = []
    for i, z0 in enumerate(metrics.z0):
        d = doc["metrics"][repr(z0)]
        rows.append({"z0": z0, **d})
    _write_results(outdir, rows, doc)
    rep_rows = []
    for r in range(metrics.points.shape[0]):
        for i, z0 in enumerate(metrics.z0):
            rep_rows.append(
                {
                    "replicate": r,
                    "z0": z0,
                    "point": metrics.points[r, i],
                    "variance": metrics.variances[r, i],
                }
            )
    pd.DataFrame(rep_rows).to_csv(outdir / "replicates.csv", index=False, float_format="%.17g")
    _write_manifest(outdir, "simulate", _echo(args))
    print(f"simulate {cfg.scenario} [{cfg.estimator}]: {metrics.n_success} ok, "
          f"{metrics.n_failed} failed; outputs in {outdir}")
    return 0


def _cmd_compare(args) -> int:
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    data, info = ingest(args.input, args.outcome, args.treatment, args.z, args.v)
    basis, z_nature = _auto_basis(data, args.knots, False, args.seed)
    z0s = _z0_points(args.z0, data, basis)
    link = "logistic" if data.outcome_kind == "binary" else "identity"
    rows = []

    mode = "doubly_robust" if z_nature == "discrete" else "model_assisted"
    plan = design.build_plan(mode, basis, data.num_v)
    msm_tau, f1, f0 = cste.fit_tau_msm(data, plan, basis, link=link, seed=args.seed)
    for z0 in z0s:
        est = cste.estimate_from_msm(msm_tau, z0, "tau", args.level)
        rows += _estimate_rows([est], {"lambda_ps": f1.lambda_ps, "lambda_or": f1.lambda_or}, "proposed")

    plain = design.plain_plan(
        design.LinearBasis() if z_nature == "continuous" else basis, data.num_v
    )
    msm_rml, f1m, f0m = cste.fit_tau_msm(data, plain, basis, link=link, seed=args.seed, method="rml")
    for z0 in z0s:
        est = cste.estimate_from_msm(msm_rml, z0, "tau", args.level)
        rows += _estimate_rows([est], {"lambda_ps": f1m.lambda_ps, "lambda_or": f1m.lambda_or}, "rml_msm")

    if z_nature == "continuous":
        zq = cste.normal_quantile(0.5 + args.level / 2.0)
        h = kernels.bandwidth_rule(data.z1)
        for folds, name in ((1, "aipw_kernel_full"), (4, "aipw_kernel_cf4")):
            if folds == 1:
                pi1, m1 = f1m.ps.fitted_pi, f1m.outcome.fitted_m
            else:
                cf = kernels.crossfit_nuisances(data, plain, folds=4, seed=args.seed, link=link)
                pi1, m1 = cf.pi_hat, cf.m_hat
            kcfg = kernels.KernelConfig(bandwidth=h, crossfit_folds=folds, seed=args.seed)
            for z0 in z0s:
                point, var = kernels.aipw_kernel(float(z0), data, m1, pi1, kcfg)
                se = float(np.sqrt(var))
                rows.append(
                    {
                        "method": name,
                        "target": "mu1",
                        "z0": float(z0),
                        "point": point,
                        "se": se,
                        "ci_lo": point - zq * se,
                        "ci_hi": point + zq * se,
                        "level": args.level,
                        "bandwidth": h,
                    }
                )

    doc = {"command": "compare", "ingest": info, "results": rows}
    _write_results(outdir, rows, doc)
    _write_manifest(outdir, "compare", _echo(args))
    print(f"compare: {len(rows)} rows, outputs in {outdir}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _echo(args) -> dict:
    return {k: v for k, v in vars(args).items() if k != "func"}


def _add_data_args(p):
    p.add_argument("--input", required=True, help="CSV file with a header row")
    p.add_argument("--outcome", required=True, help="outcome column name")
    p.add_argument("--treatment", required=True, help="treatment column name ({0,1} coded)")
    p.add_argument("--z", required=True, nargs="+", help="subpopulation covariate column(s)")
    p.add_argument("--v", nargs="*", default=None, help="auxiliary columns (default: all other numeric)")


def _add_common(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="cstekit_out", help="output directory")
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--knots", type=int, default=None, help="spline knots for continuous z")
    p.add_argument("--z0", default=None, help="comma-separated z0 values or grid:N")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cstekit",
        description="covariate-specific treatment effects with calibrated nuisance fits",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="estimate mu1/mu0/tau at z0 points from a CSV")
    _add_data_args(p_fit)
    _add_common(p_fit)
    p_fit.add_argument("--mode", choices=["model_assisted", "doubly_robust"], default=None)
    p_fit.add_argument("--auto-knots", action="store_true", help="pick the knot count by AIC")
    p_fit.set_defaults(func=_cmd_fit)

    p_diag = sub.add_parser("diagnose", help="standardized calibration differences")
    _add_data_args(p_diag)
    _add_common(p_diag)
    p_diag.add_argument("--mode", choices=["model_assisted", "doubly_robust"], default=None)
    p_diag.set_defaults(func=_cmd_diagnose)

    p_sim = sub.add_parser("simulate", help="Monte Carlo metrics for a built-in scenario")
    p_sim.add_argument("--scenario", required=True, choices=sorted(simlab.SCENARIOS))
    p_sim.add_argument("--reps", type=int, default=1000)
    p_sim.add_argument("--n", type=int, default=500)
    p_sim.add_argument("--p", type=int, default=200)
    p_sim.add_argument("--estimator", choices=simlab.ESTIMATORS, default="proposed")
    p_sim.add_argument("--jobs", type=int, default=None)
    _add_common(p_sim)
    p_sim.set_defaults(func=_cmd_simulate)

    p_cmp = sub.add_parser("compare", help="proposed and competitor estimators on one dataset")
    _add_data_args(p_cmp)
    _add_common(p_cmp)
    p_cmp.set_defaults(func=_cmd_compare)

    return parser


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        _emit_error("config", exc)
        return EXIT_CONFIG
    except DataError as exc:
        _emit_error("data", exc)
        return EXIT_DATA
    except NumericError as exc:
        _emit_error("numeric", exc)
        return EXIT_NUMERIC
    except CstekitError as exc:  # anything else from the package
        _emit_error("error", exc)
        return EXIT_NUMERIC


def _emit_error(kind: str, exc: Exception):
    doc = {"error": kind, "type": type(exc).__name__, "message": str(exc)}
    print(json.dumps(doc), file=sys.stderr)


def main():  # console entry point
    sys.exit(run())


if __name__ == "__main__":
    main()
