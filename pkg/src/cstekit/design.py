"""Basis functions of the conditioning covariates and regressor plans.

A Basis maps a value z of the conditioning covariates to the vector Phi(z)
(excluding the constant). Regressor plans describe the propensity-score
regressors f(X) and outcome regressors g(X) as symbolic products of atomic
factors, so repeated columns are removed structurally, never numerically:

  * model_assisted:  f = (1, V, Phi),                 g = dedup(f, f x Phi)
  * doubly_robust:   f = (1, V, Phi, V x Phi),        g = dedup(f, f x Phi)

For discrete saturated bases the doubly robust recipe collapses to f = g.
Indicator atoms are idempotent under products, and two distinct dummies of
one categorical variable multiply to the zero column, which is dropped.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
from scipy.interpolate import BSpline

from .errors import DataError, DegenerateDataError, UnknownLevelError

SPLINE_DEGREE = 3


# ---------------------------------------------------------------------------
# column expressions
# ---------------------------------------------------------------------------


@dataclass(frozen=True, order=True)
class ColumnExpr:
    """A regressor column as a canonical multiset of atomic factors.

    v_atoms index the auxiliary covariates; zb_atoms index 0/1 primitive
    components of z (kept as a set since indicators are idempotent);
    sp_atoms index continuous primitive components (a true multiset, so
    squared spline columns stay squared). The empty expression is the
    constant column.
    """

    v_atoms: tuple[int, ...] = ()
    zb_atoms: tuple[int, ...] = ()
    sp_atoms: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "v_atoms", tuple(sorted(self.v_atoms)))
        object.__setattr__(self, "zb_atoms", tuple(sorted(set(self.zb_atoms))))
        object.__setattr__(self, "sp_atoms", tuple(sorted(self.sp_atoms)))

    @property
    def is_const(self) -> bool:
        return not (self.v_atoms or self.zb_atoms or self.sp_atoms)

    def label(self) -> str:
        if self.is_const:
            return "1"
        parts = [f"v{i}" for i in self.v_atoms]
        parts += [f"z{i}" for i in self.zb_atoms]
        sp = {}
        for k in self.sp_atoms:
            sp[k] = sp.get(k, 0) + 1
        parts += [f"s{k}" if p == 1 else f"s{k}^{p}" for k, p in sorted(sp.items())]
        return "*".join(parts)

    @classmethod
    def from_label(cls, label: str) -> "ColumnExpr":
        if label == "1":
            return cls()
        v, zb, sp = [], [], []
        for part in label.split("*"):
            power = 1
            if "^" in part:
                part, pow_str = part.split("^")
                power = int(pow_str)
            idx = int(part[1:])
            if part[0] == "v":
                v.extend([idx] * power)
            elif part[0] == "z":
                zb.append(idx)
            elif part[0] == "s":
                sp.extend([idx] * power)
            else:
                raise ValueError(f"bad column label {label!r}")
        return cls(tuple(v), tuple(zb), tuple(sp))


def multiply(a: ColumnExpr, b: ColumnExpr, annihilating: bool = False) -> ColumnExpr | None:
    """Product of two columns; None when the product is identically zero."""
    zb = set(a.zb_atoms) | set(b.zb_atoms)
    if annihilating and len(zb) > 1:
        return None
    return ColumnExpr(a.v_atoms + b.v_atoms, tuple(zb), a.sp_atoms + b.sp_atoms)


# ---------------------------------------------------------------------------
# bases
# ---------------------------------------------------------------------------


def quantile_knots(z: np.ndarray, num_knots: int) -> np.ndarray:
    """Interior knots at probability levels k/(num_knots+1), k=1..num_knots."""
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    if num_knots < 1:
        raise ValueError("num_knots must be >= 1")
    if np.unique(z).size < num_knots + 2:
        raise DegenerateDataError(
            f"need at least {num_knots + 2} distinct values for {num_knots} knots"
        )
    probs = np.arange(1, num_knots + 1) / (num_knots + 1)
    # sort-and-index (inverted cdf) convention: knot k is z_(ceil(p*n))
    knots = np.quantile(z, probs, method="inverted_cdf")
    if np.any(np.diff(knots) <= 0):
        raise DegenerateDataError("sample quantiles are not strictly increasing")
    return knots


def bspline_full(z, knots, boundary, degree: int = SPLINE_DEGREE) -> np.ndarray:
    """All num_knots + degree + 1 B-spline values, clamping z to the boundary."""
    z = np.atleast_1d(np.asarray(z, dtype=np.float64))
    if not np.all(np.isfinite(z)):
        raise DataError("non-finite z passed to the spline basis")
    lo, hi = float(boundary[0]), float(boundary[1])
    knots = np.asarray(knots, dtype=np.float64)
    if knots.size and not (lo < knots[0] and knots[-1] < hi):
        raise ValueError("interior knots must lie strictly inside the boundary")
    t = np.concatenate([[lo] * (degree + 1), knots, [hi] * (degree + 1)])
    zc = np.clip(z, lo, hi)
    return BSpline.design_matrix(zc, t, degree, extrapolate=False).toarray()


def spline_basis(z, knots, degree: int = SPLINE_DEGREE, boundary=None) -> np.ndarray:
    """Cubic B-spline values at z with the constant excluded.

    The first B-spline column is dropped, leaving num_knots + degree values
    (six for three interior knots). boundary holds the training-range
    endpoints; z outside it is clamped.
    """
    if degree != SPLINE_DEGREE:
        raise ValueError("only cubic splines are supported")
    if boundary is None:
        raise ValueError("boundary (training min/max of z) is required")
    full = bspline_full(z, knots, boundary, degree)
    out = full[:, 1:]
    if np.isscalar(z) or np.ndim(z) == 0:
        return out[0]
    return out


@dataclass(frozen=True)
class BinaryBasis:
    """Phi(z) = z for one binary z; saturated."""

    kind: str = field(default="binary_saturated", init=False)

    @property
    def K(self) -> int:
        return 1

    @property
    def is_discrete(self) -> bool:
        return True

    annihilating = False
    n_zb = 1
    n_sp = 0

    def fragments(self):
        return (((0,), ()),)

    def zb_matrix(self, Z: np.ndarray) -> np.ndarray:
        zcol = Z[:, 0]
        if not np.all((zcol == 0.0) | (zcol == 1.0)):
            raise DataError("binary basis requires z coded {0, 1}")
        return zcol.reshape(-1, 1)

    def sp_matrix(self, Z: np.ndarray) -> np.ndarray:
        return np.empty((Z.shape[0], 0))

    def support_points(self):
        return [np.array([0.0]), np.array([1.0])]

    def to_dict(self):
        return {"kind": self.kind}


@dataclass(frozen=True)
class CategoricalBasis:
    """Dummy coding of one categorical z; the reference level is dropped."""

    levels: tuple[float, ...]
    reference: float

    kind: str = field(default="categorical_dummies", init=False)

    def __post_init__(self):
        if self.reference not in self.levels:
            raise ValueError("reference must be one of the levels")
        if len(self.levels) < 2:
            raise ValueError("need at least two levels")

    @property
    def K(self) -> int:
        return len(self.levels) - 1

    @property
    def is_discrete(self) -> bool:
        return True

    annihilating = True
    n_sp = 0

    @property
    def n_zb(self) -> int:
        return self.K

    @property
    def dummy_levels(self) -> tuple[float, ...]:
        return tuple(l for l in self.levels if l != self.reference)

    def fragments(self):
        return tuple(((k,), ()) for k in range(self.K))

    def zb_matrix(self, Z: np.ndarray) -> np.ndarray:
        zcol = Z[:, 0]
        seen = set(np.unique(zcol))
        unknown = seen - set(self.levels)
        if unknown:
            raise UnknownLevelError(f"unseen categorical level(s) {sorted(unknown)}")
        return np.column_stack([(zcol == l).astype(float) for l in self.dummy_levels])

    def sp_matrix(self, Z: np.ndarray) -> np.ndarray:
        return np.empty((Z.shape[0], 0))

    def support_points(self):
        return [np.array([l]) for l in self.levels]

    def to_dict(self):
        return {"kind": self.kind, "levels": list(self.levels), "reference": self.reference}


@dataclass(frozen=True)
class MultiBinaryBasis:
    """All products of several binary z components; saturated."""

    num_vars: int

    kind: str = field(default="multi_binary_saturated", init=False)

    def __post_init__(self):
        if self.num_vars < 1:
            raise ValueError("need at least one binary variable")

    @property
    def K(self) -> int:
        return 2**self.num_vars - 1

    @property
    def is_discrete(self) -> bool:
        return True

    annihilating = False
    n_sp = 0

    @property
    def n_zb(self) -> int:
        return self.num_vars

    def _subsets(self):
        out = []
        for size in range(1, self.num_vars + 1):
            out.extend(combinations(range(self.num_vars), size))
        return out

    def fragments(self):
        return tuple((s, ()) for s in self._subsets())

    def zb_matrix(self, Z: np.ndarray) -> np.ndarray:
        if Z.shape[1] != self.num_vars:
            raise DataError(f"expected {self.num_vars} z columns, got {Z.shape[1]}")
        if not np.all((Z == 0.0) | (Z == 1.0)):
            raise DataError("multi-binary basis requires z columns coded {0, 1}")
        return Z

    def sp_matrix(self, Z: np.ndarray) -> np.ndarray:
        return np.empty((Z.shape[0], 0))

    def support_points(self):
        pts = []
        for bits in range(2**self.num_vars):
            pts.append(np.array([(bits >> i) & 1 for i in range(self.num_vars)], dtype=float))
        return pts

    def to_dict(self):
        return {"kind": self.kind, "num_vars": self.num_vars}


@dataclass(frozen=True)
class CubicSplineBasis:
    """Cubic B-splines with the constant excluded; K = num_knots + 3."""

    knots: tuple[float, ...]
    lo: float
    hi: float

    kind: str = field(default="cubic_spline", init=False)

    def __post_init__(self):
        knots = tuple(float(k) for k in self.knots)
        if np.any(np.diff(knots) <= 0):
            raise ValueError("knots must be strictly increasing")
        if knots and not (self.lo < knots[0] and knots[-1] < self.hi):
            raise ValueError("knots must be interior to the boundary")
        object.__setattr__(self, "knots", knots)

    @property
    def K(self) -> int:
        return len(self.knots) + SPLINE_DEGREE

    @property
    def is_discrete(self) -> bool:
        return False

    annihilating = False
    n_zb = 0

    @property
    def n_sp(self) -> int:
        return self.K

    def fragments(self):
        return tuple(((), (k,)) for k in range(self.K))

    def zb_matrix(self, Z: np.ndarray) -> np.ndarray:
        return np.empty((Z.shape[0], 0))

    def sp_matrix(self, Z: np.ndarray) -> np.ndarray:
        return spline_basis(Z[:, 0], np.array(self.knots), boundary=(self.lo, self.hi))

    def to_dict(self):
        return {"kind": self.kind, "knots": list(self.knots), "lo": self.lo, "hi": self.hi}


@dataclass(frozen=True)
class LinearBasis:
    """Phi(z) = z for one continuous z (a single untransformed column)."""

    kind: str = field(default="linear", init=False)

    @property
    def K(self) -> int:
        return 1

    @property
    def is_discrete(self) -> bool:
        return False

    annihilating = False
    n_zb = 0
    n_sp = 1

    def fragments(self):
        return (((), (0,)),)

    def zb_matrix(self, Z: np.ndarray) -> np.ndarray:
        return np.empty((Z.shape[0], 0))

    def sp_matrix(self, Z: np.ndarray) -> np.ndarray:
        return Z[:, [0]]

    def to_dict(self):
        return {"kind": self.kind}


@dataclass(frozen=True)
class MixedBasis:
    """One binary z1 plus splines of a continuous z2, with z1 x spline terms."""

    spline: CubicSplineBasis

    kind: str = field(default="mixed", init=False)

    @property
    def K(self) -> int:
        return 1 + 2 * self.spline.K

    @property
    def is_discrete(self) -> bool:
        return False

    annihilating = False
    n_zb = 1

    @property
    def n_sp(self) -> int:
        return self.spline.K

    def fragments(self):
        # interaction components are composite (indicator atom x spline atom)
        # so products reduce structurally: z1 * (z1 B_k) collapses to z1 B_k
        k2 = self.spline.K
        frags = [((0,), ())]
        frags += [((), (k,)) for k in range(k2)]
        frags += [((0,), (k,)) for k in range(k2)]
        return tuple(frags)

    def zb_matrix(self, Z: np.ndarray) -> np.ndarray:
        z1 = Z[:, 0]
        if not np.all((z1 == 0.0) | (z1 == 1.0)):
            raise DataError("mixed basis requires binary first z column")
        return z1.reshape(-1, 1)

    def sp_matrix(self, Z: np.ndarray) -> np.ndarray:
        return self.spline.sp_matrix(Z[:, [1]])

    def to_dict(self):
        return {"kind": self.kind, "spline": self.spline.to_dict()}


Basis = BinaryBasis | CategoricalBasis | MultiBinaryBasis | CubicSplineBasis | LinearBasis | MixedBasis


def basis_from_dict(d: dict) -> Basis:
    kind = d["kind"]
    if kind == "binary_saturated":
        return BinaryBasis()
    if kind == "categorical_dummies":
        return CategoricalBasis(tuple(d["levels"]), d["reference"])
    if kind == "multi_binary_saturated":
        return MultiBinaryBasis(d["num_vars"])
    if kind == "cubic_spline":
        return CubicSplineBasis(tuple(d["knots"]), d["lo"], d["hi"])
    if kind == "linear":
        return LinearBasis()
    if kind == "mixed":
        return MixedBasis(basis_from_dict(d["spline"]))
    raise ValueError(f"unknown basis kind {kind!r}")


def categorical_basis_from_data(z: np.ndarray) -> CategoricalBasis:
    """Levels from the data; the most frequent level is the reference."""
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    levels, counts = np.unique(z, return_counts=True)
    if levels.size < 2:
        raise DegenerateDataError("categorical z has a single level")
    reference = float(levels[np.argmax(counts)])  # argmax breaks ties at the smallest level
    return CategoricalBasis(tuple(float(l) for l in levels), reference)


def spline_basis_from_data(z: np.ndarray, num_knots: int = 3) -> CubicSplineBasis:
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    knots = quantile_knots(z, num_knots)
    return CubicSplineBasis(tuple(knots), float(z.min()), float(z.max()))


def mixed_basis_from_data(z2: np.ndarray, num_knots: int = 3) -> MixedBasis:
    return MixedBasis(spline_basis_from_data(z2, num_knots))


# ---------------------------------------------------------------------------
# Phi evaluation
# ---------------------------------------------------------------------------


def _as_z_matrix(z) -> np.ndarray:
    Z = np.asarray(z, dtype=np.float64)
    if Z.ndim == 0:
        Z = Z.reshape(1, 1)
    elif Z.ndim == 1:
        Z = Z.reshape(1, -1)
    return Z


def phi_matrix(Z: np.ndarray, basis: Basis) -> np.ndarray:
    """Phi(z) rows for each row of Z; (n, K)."""
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim == 1:
        Z = Z.reshape(-1, 1)
    zb = basis.zb_matrix(Z)
    sp = basis.sp_matrix(Z)
    cols = []
    for zb_atoms, sp_atoms in basis.fragments():
        col = np.ones(Z.shape[0])
        for j in zb_atoms:
            col = col * zb[:, j]
        for k in sp_atoms:
            col = col * sp[:, k]
        cols.append(col)
    return np.column_stack(cols)


def phi_dag(z, basis: Basis) -> np.ndarray:
    """(1, Phi(z)')' for a single covariate value z."""
    row = phi_matrix(_as_z_matrix(z), basis)[0]
    return np.concatenate([[1.0], row])


def phidag_matrix(Z: np.ndarray, basis: Basis) -> np.ndarray:
    P = phi_matrix(Z, basis)
    return np.hstack([np.ones((P.shape[0], 1)), P])


# ---------------------------------------------------------------------------
# regressor plans
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RegressorPlan:
    mode: str
    basis: Basis
    num_v: int
    f_columns: tuple[ColumnExpr, ...]
    g_columns: tuple[ColumnExpr, ...]

    def __post_init__(self):
        if not (self.f_columns and self.f_columns[0].is_const):
            raise ValueError("f_columns[0] must be the constant column")
        if not (self.g_columns and self.g_columns[0].is_const):
            raise ValueError("g_columns[0] must be the constant column")

    def f_labels(self) -> tuple[str, ...]:
        return tuple(c.label() for c in self.f_columns)

    def g_labels(self) -> tuple[str, ...]:
        return tuple(c.label() for c in self.g_columns)


def _dedup(columns) -> tuple[ColumnExpr, ...]:
    seen = {}
    for c in columns:
        if c is not None and c not in seen:
            seen[c] = None
    return tuple(seen.keys())


def build_plan(mode: str, basis: Basis, num_v: int) -> RegressorPlan:
    """Construct the f and g column lists for the requested interval recipe."""
    if mode not in ("model_assisted", "doubly_robust"):
        raise ValueError(f"unknown plan mode {mode!r}")
    if num_v < 0:
        raise ValueError("num_v must be nonnegative")
    const = ColumnExpr()
    v_cols = [ColumnExpr(v_atoms=(i,)) for i in range(num_v)]
    phi_cols = [ColumnExpr(zb_atoms=zb, sp_atoms=sp) for zb, sp in basis.fragments()]
    ann = basis.annihilating

    f = [const] + v_cols + list(phi_cols)
    if mode == "doubly_robust":
        if not basis.is_discrete:
            warnings.warn(
                "doubly robust interval guarantees hold only for discrete z; "
                "continuing with a continuous basis",
                RuntimeWarning,
                stacklevel=2,
            )
        for pc in phi_cols:
            for vc in v_cols:
                f.append(multiply(vc, pc, ann))
    f = _dedup(f)

    g = list(f)
    for fc in f:
        for pc in phi_cols:
            g.append(multiply(fc, pc, ann))
    g = _dedup(g)

    return RegressorPlan(mode=mode, basis=basis, num_v=num_v, f_columns=f, g_columns=g)


def custom_plan(basis: Basis, num_v: int, f_columns, g_columns) -> RegressorPlan:
    """A plan with explicitly given columns (used for competitor recipes)."""
    return RegressorPlan(
        mode="custom",
        basis=basis,
        num_v=num_v,
        f_columns=_dedup(f_columns),
        g_columns=_dedup(g_columns),
    )


def plain_plan(basis: Basis, num_v: int) -> RegressorPlan:
    """f = g = (1, V, Phi): the competitor regressors without interactions."""
    const = ColumnExpr()
    cols = [const] + [ColumnExpr(v_atoms=(i,)) for i in range(num_v)]
    cols += [ColumnExpr(zb_atoms=zb, sp_atoms=sp) for zb, sp in basis.fragments()]
    return custom_plan(basis, num_v, cols, cols)


def expand_row(z, v: np.ndarray, plan: RegressorPlan):
    """Materialize (f, g) for one observation."""
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if v.shape[0] != plan.num_v:
        raise ValueError(f"expected {plan.num_v} v entries, got {v.shape[0]}")
    if not np.all(np.isfinite(v)):
        raise DataError("non-finite v entries")
    Z = _as_z_matrix(z)
    zb = plan.basis.zb_matrix(Z)[0]
    sp = plan.basis.sp_matrix(Z)[0]

    def value(expr: ColumnExpr) -> float:
        out = 1.0
        for i in expr.v_atoms:
            out *= v[i]
        for j in expr.zb_atoms:
            out *= zb[j]
        for k in expr.sp_atoms:
            out *= sp[k]
        return out

    f = np.array([value(c) for c in plan.f_columns])
    g = np.array([value(c) for c in plan.g_columns])
    return f, g


def design_matrices(z: np.ndarray, v: np.ndarray, plan: RegressorPlan):
    """Materialize the full (F, G) design matrices for a sample."""
    Z = np.asarray(z, dtype=np.float64)
    if Z.ndim == 1:
        Z = Z.reshape(-1, 1)
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 1:
        v = v.reshape(-1, 1)
    n = Z.shape[0]
    if v.shape[0] != n:
        raise ValueError("z and v row counts differ")
    if v.shape[1] != plan.num_v:
        raise ValueError(f"expected {plan.num_v} v columns, got {v.shape[1]}")
    zb = plan.basis.zb_matrix(Z)
    sp = plan.basis.sp_matrix(Z)

    def build(columns):
        out = np.empty((n, len(columns)))
        for idx, expr in enumerate(columns):
            col = np.ones(n)
            for i in expr.v_atoms:
                col = col * v[:, i]
            for j in expr.zb_atoms:
                col = col * zb[:, j]
            for k in expr.sp_atoms:
                col = col * sp[:, k]
            out[:, idx] = col
        return out

    return build(plan.f_columns), build(plan.g_columns)


def plan_to_json(plan: RegressorPlan) -> str:
    doc = {
        "mode": plan.mode,
        "num_v": plan.num_v,
        "basis": plan.basis.to_dict(),
        "f_columns": [c.label() for c in plan.f_columns],
        "g_columns": [c.label() for c in plan.g_columns],
    }
    return json.dumps(doc, indent=2)


def plan_from_json(text: str) -> RegressorPlan:
    doc = json.loads(text)
    return RegressorPlan(
        mode=doc["mode"],
        basis=basis_from_dict(doc["basis"]),
        num_v=doc["num_v"],
        f_columns=tuple(ColumnExpr.from_label(l) for l in doc["f_columns"]),
        g_columns=tuple(ColumnExpr.from_label(l) for l in doc["g_columns"]),
    )
