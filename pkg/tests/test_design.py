"""Basis construction, regressor plans, structural dedup, and spline checks."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cstekit.design import (
    BinaryBasis,
    CategoricalBasis,
    ColumnExpr,
    CubicSplineBasis,
    LinearBasis,
    MixedBasis,
    MultiBinaryBasis,
    bspline_full,
    build_plan,
    categorical_basis_from_data,
    design_matrices,
    expand_row,
    multiply,
    phi_dag,
    phidag_matrix,
    plain_plan,
    plan_from_json,
    plan_to_json,
    quantile_knots,
    spline_basis,
    spline_basis_from_data,
)
from cstekit.errors import DataError, DegenerateDataError, UnknownLevelError


# ---------------------------------------------------------------------------
# quantile knots
# ---------------------------------------------------------------------------


def test_quantile_knots_on_regular_grid():
    z = np.arange(1, 100) / 100.0
    assert quantile_knots(z, 3) == pytest.approx([0.25, 0.50, 0.75], abs=1e-15)


def test_single_knot_is_near_median_of_symmetric_sample():
    z = np.concatenate([-np.arange(1, 51), np.arange(1, 51)]) / 100.0
    (knot,) = quantile_knots(z, 1)
    assert abs(knot) <= 0.011


def test_quantile_knots_match_sort_and_index_oracle():
    rng = np.random.default_rng(42)
    z = rng.uniform(-0.5, 0.5, 200)
    zs = np.sort(z)
    oracle = np.array([zs[int(np.ceil(p * 200)) - 1] for p in (0.25, 0.5, 0.75)])
    assert np.array_equal(quantile_knots(z, 3), oracle)


def test_quantile_knots_too_few_distinct_values():
    with pytest.raises(DegenerateDataError):
        quantile_knots(np.array([0.0, 1.0, 0.0, 1.0]), 3)


# ---------------------------------------------------------------------------
# spline basis
# ---------------------------------------------------------------------------


def deboor(z, t, degree):
    """Independent de Boor recursion for all B-splines on knot vector t."""
    nb = len(t) - degree - 1
    vals = np.zeros(nb)
    b = np.zeros((len(t) - 1, degree + 1))
    for i in range(len(t) - 1):
        b[i, 0] = 1.0 if (t[i] <= z < t[i + 1]) else 0.0
    if z == t[-1]:  # right-closed at the upper boundary
        for i in range(len(t) - 2, -1, -1):
            if t[i] < t[i + 1]:
                b[i, 0] = 1.0
                break
    for k in range(1, degree + 1):
        for i in range(len(t) - k - 1):
            left = 0.0
            if t[i + k] != t[i]:
                left = (z - t[i]) / (t[i + k] - t[i]) * b[i, k - 1]
            right = 0.0
            if t[i + k + 1] != t[i + 1]:
                right = (t[i + k + 1] - z) / (t[i + k + 1] - t[i + 1]) * b[i + 1, k - 1]
            b[i, k] = left + right
    for i in range(nb):
        vals[i] = b[i, degree]
    return vals


def test_full_bspline_partition_of_unity():
    knots = np.array([-0.25, 0.0, 0.25])
    for z in np.linspace(-0.5, 0.5, 23):
        full = bspline_full(z, knots, (-0.5, 0.5))
        assert full.sum() == pytest.approx(1.0, abs=1e-12)


def test_spline_dimension_for_three_knots_is_six():
    out = spline_basis(0.1, np.array([-0.25, 0.0, 0.25]), boundary=(-0.5, 0.5))
    assert out.shape == (6,)


def test_spline_matches_de_boor_recursion():
    knots = np.array([-0.25, 0.0, 0.25])
    lo, hi = -0.5, 0.5
    t = np.concatenate([[lo] * 4, knots, [hi] * 4])
    for z in [-0.43, -0.11, 0.0, 0.17, 0.33, 0.499]:
        ours = bspline_full(z, knots, (lo, hi))[0]
        oracle = deboor(z, t, 3)
        assert np.max(np.abs(ours - oracle)) < 1e-12


def test_spline_clamps_outside_boundary():
    knots = np.array([-0.25, 0.0, 0.25])
    inside = spline_basis(0.5, knots, boundary=(-0.5, 0.5))
    outside = spline_basis(1.7, knots, boundary=(-0.5, 0.5))
    assert np.array_equal(inside, outside)


def test_spline_columns_continuous_on_fine_grid():
    z = np.linspace(-0.5, 0.5, 4001)
    basis = CubicSplineBasis((-0.25, 0.0, 0.25), -0.5, 0.5)
    B = basis.sp_matrix(z.reshape(-1, 1))
    jumps = np.abs(np.diff(B, axis=0)).max()
    assert jumps < 1e-2  # grid spacing 2.5e-4, derivative O(10)
    assert np.all(np.abs(np.diff(B, axis=0)) < 1e-2)


# ---------------------------------------------------------------------------
# phi_dag
# ---------------------------------------------------------------------------


def test_phi_dag_binary():
    assert np.array_equal(phi_dag(0.0, BinaryBasis()), [1.0, 0.0])
    assert np.array_equal(phi_dag(1.0, BinaryBasis()), [1.0, 1.0])


def test_phi_dag_multi_binary():
    out = phi_dag(np.array([1.0, 1.0]), MultiBinaryBasis(2))
    assert np.array_equal(out, [1.0, 1.0, 1.0, 1.0])


def test_phi_dag_trichotomous_dummies():
    basis = CategoricalBasis((0.0, 1.0, 2.0), 0.0)
    assert np.array_equal(phi_dag(2.0, basis), [1.0, 0.0, 1.0])


def test_unknown_level_raises():
    basis = CategoricalBasis((0.0, 1.0), 0.0)
    with pytest.raises(UnknownLevelError):
        phi_dag(3.0, basis)


def test_saturation_for_discrete_kinds():
    bases = [
        BinaryBasis(),
        CategoricalBasis((0.0, 1.0, 2.0), 1.0),
        MultiBinaryBasis(2),
        MultiBinaryBasis(3),
    ]
    for basis in bases:
        P = np.vstack([phi_dag(pt, basis) for pt in basis.support_points()])
        assert P.shape[0] == P.shape[1]
        assert abs(np.linalg.det(P)) > 1e-9


# ---------------------------------------------------------------------------
# plans
# ---------------------------------------------------------------------------


def test_model_assisted_binary_dedups_z_squared():
    plan = build_plan("model_assisted", BinaryBasis(), 2)
    assert plan.f_labels() == ("1", "v0", "v1", "z0")
    assert plan.g_labels() == ("1", "v0", "v1", "z0", "v0*z0", "v1*z0")


def test_doubly_robust_binary_f_equals_g():
    plan = build_plan("doubly_robust", BinaryBasis(), 3)
    assert plan.f_columns == plan.g_columns
    assert plan.f_labels() == (
        "1", "v0", "v1", "v2", "z0", "v0*z0", "v1*z0", "v2*z0",
    )


def test_doubly_robust_trichotomous_f_equals_g():
    basis = CategoricalBasis((0.0, 1.0, 2.0), 0.0)
    plan = build_plan("doubly_robust", basis, 2)
    assert plan.f_columns == plan.g_columns
    # cross-dummies annihilate, squares collapse
    assert "z0*z1" not in plan.g_labels()


def test_doubly_robust_two_binary_f_equals_g():
    plan = build_plan("doubly_robust", MultiBinaryBasis(2), 1)
    assert plan.f_columns == plan.g_columns
    assert plan.f_labels() == (
        "1", "v0", "z0", "z1", "z0*z1", "v0*z0", "v0*z1", "v0*z0*z1",
    )


def test_model_assisted_continuous_block_structure():
    basis = CubicSplineBasis((-0.25, 0.0, 0.25), -0.5, 0.5)
    plan = build_plan("model_assisted", basis, 2)
    assert len(plan.f_columns) == 1 + 2 + 6
    # g = f + V x Phi (12) + upper-triangle Phi x Phi (21)
    assert len(plan.g_columns) == 9 + 12 + 21
    labels = plan.g_labels()
    assert "s0^2" in labels and "s0*s1" in labels and "s1*s0" not in labels


def test_dr_with_continuous_basis_warns():
    basis = CubicSplineBasis((-0.25, 0.0, 0.25), -0.5, 0.5)
    with pytest.warns(RuntimeWarning):
        build_plan("doubly_robust", basis, 1)


def test_build_plan_idempotent():
    basis = CubicSplineBasis((-0.25, 0.0, 0.25), -0.5, 0.5)
    assert build_plan("model_assisted", basis, 3) == build_plan("model_assisted", basis, 3)


def test_mixed_basis_products_reduce():
    mixed = MixedBasis(CubicSplineBasis((0.0,), -1.0, 1.0))
    plan = build_plan("model_assisted", mixed, 1)
    # z1 * (z1 B_k) must have collapsed to z1 B_k, not a new column
    labels = plan.g_labels()
    assert len(labels) == len(set(labels))


def test_expand_row_doubly_robust_binary():
    plan = build_plan("doubly_robust", BinaryBasis(), 1)
    f, g = expand_row(1.0, np.array([2.0]), plan)
    assert np.array_equal(f, [1.0, 2.0, 1.0, 2.0])
    assert np.array_equal(f, g)
    f0, _ = expand_row(0.0, np.array([2.0]), plan)
    assert np.array_equal(f0, [1.0, 2.0, 0.0, 0.0])


def test_expand_row_matches_per_atom_oracle():
    rng = np.random.default_rng(5)
    basis = CubicSplineBasis((-0.2, 0.1, 0.3), -0.5, 0.5)
    plan = build_plan("model_assisted", basis, 3)
    z = rng.uniform(-0.5, 0.5)
    v = rng.standard_normal(3)
    f, g = expand_row(z, v, plan)
    sp = basis.sp_matrix(np.array([[z]]))[0]
    for vec, cols in ((f, plan.f_columns), (g, plan.g_columns)):
        for val, expr in zip(vec, cols):
            expected = 1.0
            for i in expr.v_atoms:
                expected *= v[i]
            for k in expr.sp_atoms:
                expected *= sp[k]
            assert val == pytest.approx(expected, rel=1e-12, abs=1e-12)


def test_expand_row_rejects_nonfinite_v():
    plan = build_plan("model_assisted", BinaryBasis(), 1)
    with pytest.raises(DataError):
        expand_row(1.0, np.array([np.nan]), plan)


def test_design_matrices_match_expand_row():
    rng = np.random.default_rng(6)
    basis = spline_basis_from_data(rng.uniform(-1, 1, 50), 2)
    plan = build_plan("model_assisted", basis, 2)
    z = rng.uniform(-1, 1, 20)
    v = rng.standard_normal((20, 2))
    F, G = design_matrices(z, v, plan)
    for i in range(20):
        f, g = expand_row(z[i], v[i], plan)
        assert np.allclose(F[i], f, atol=1e-12)
        assert np.allclose(G[i], g, atol=1e-12)


def test_plain_plan_shape():
    plan = plain_plan(LinearBasis(), 2)
    assert plan.f_labels() == ("1", "v0", "v1", "s0")
    assert plan.f_columns == plan.g_columns


def test_plan_json_round_trip():
    for basis in (
        BinaryBasis(),
        CategoricalBasis((0.0, 1.0, 2.0), 2.0),
        MultiBinaryBasis(2),
        CubicSplineBasis((-0.25, 0.0, 0.25), -0.5, 0.5),
        MixedBasis(CubicSplineBasis((0.0,), -1.0, 1.0)),
    ):
        plan = build_plan("model_assisted", basis, 2)
        assert plan_from_json(plan_to_json(plan)) == plan


def test_categorical_reference_is_most_frequent():
    z = np.array([0.0, 1.0, 1.0, 2.0, 1.0, 0.0])
    basis = categorical_basis_from_data(z)
    assert basis.reference == 1.0
    assert basis.K == 2


# ---------------------------------------------------------------------------
# column expressions
# ---------------------------------------------------------------------------


@given(
    st.lists(st.integers(0, 5), max_size=4),
    st.lists(st.integers(0, 3), max_size=3),
    st.lists(st.integers(0, 3), max_size=3),
)
def test_column_expr_canonical_and_label_round_trip(v, zb, sp):
    expr = ColumnExpr(tuple(v), tuple(zb), tuple(sp))
    assert expr == ColumnExpr(tuple(reversed(v)), tuple(reversed(zb)), tuple(reversed(sp)))
    assert ColumnExpr.from_label(expr.label()) == expr


def test_multiply_idempotent_indicators():
    z = ColumnExpr(zb_atoms=(0,))
    assert multiply(z, z) == z


def test_multiply_annihilates_distinct_dummies():
    a = ColumnExpr(zb_atoms=(0,))
    b = ColumnExpr(zb_atoms=(1,))
    assert multiply(a, b, annihilating=True) is None
    assert multiply(a, b, annihilating=False) == ColumnExpr(zb_atoms=(0, 1))


def test_multiply_keeps_spline_powers():
    s = ColumnExpr(sp_atoms=(1,))
    assert multiply(s, s).sp_atoms == (1, 1)
    assert multiply(s, s).label() == "s1^2"
