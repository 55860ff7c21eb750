import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import linprog

from polytraj.basis import (
    MAX_DEGREE,
    BasisSpec,
    basis_change,
    basis_matrix,
    constant_coefficients,
    design_matrix,
    eval_basis,
    evaluate,
    stacked_basis_change,
)

FAMILIES = ["monomial", "bernstein"]


def test_monomial_values():
    np.testing.assert_allclose(eval_basis(BasisSpec("monomial", 3), 0.5), [1, 0.5, 0.25, 0.125])


def test_monomial_first_derivative_at_one():
    np.testing.assert_allclose(eval_basis(BasisSpec("monomial", 2), 1.0, order=1), [0, 1, 2])


def test_bernstein_values():
    np.testing.assert_allclose(eval_basis(BasisSpec("bernstein", 2), 0.5), [0.25, 0.5, 0.25])


@pytest.mark.parametrize("family", FAMILIES)
def test_order_above_degree_is_zero(family):
    spec = BasisSpec(family, 3)
    assert np.all(basis_matrix(spec, np.linspace(0, 1, 7), order=4) == 0)


@pytest.mark.parametrize("bad", [-0.1, 1.1, np.nan])
def test_tau_outside_unit_interval_rejected(bad):
    with pytest.raises(ValueError):
        basis_matrix(BasisSpec(), [0.2, bad])


def test_degree_limits():
    BasisSpec(degree=MAX_DEGREE)
    with pytest.raises(ValueError):
        BasisSpec(degree=MAX_DEGREE + 1)
    with pytest.raises(ValueError):
        BasisSpec(family="chebyshev")


def test_design_matrix_line_through_two_points():
    Phi = design_matrix(BasisSpec("monomial", 1), [0.0, 1.0])
    assert Phi.shape == (4, 4)
    p0, p1 = np.array([1.0, 2.0]), np.array([-3.0, 5.0])
    np.testing.assert_allclose(Phi.T @ np.r_[p0, p1], np.r_[p0, p0 + p1])


def test_design_matrix_degree_zero_is_identity():
    np.testing.assert_array_equal(design_matrix(BasisSpec("monomial", 0), [0.3]), np.eye(2))


def test_design_matrix_blocks(rng):
    spec = BasisSpec("bernstein", 5)
    taus = np.sort(rng.uniform(0, 1, 50))
    Phi = design_matrix(spec, taus)
    assert Phi.shape == (12, 100)
    for j in (0, 17, 49):
        np.testing.assert_allclose(Phi[:, 2 * j:2 * j + 2], np.kron(eval_basis(spec, taus[j])[:, None], np.eye(2)))


def test_bernstein_to_monomial_degree_one():
    M = basis_change(BasisSpec("bernstein", 1), BasisSpec("monomial", 1))
    np.testing.assert_allclose(M @ [2.0, 7.0], [2.0, 5.0])


@pytest.mark.parametrize("n", range(MAX_DEGREE + 1))
def test_basis_change_round_trip(n):
    a, b = BasisSpec("monomial", n), BasisSpec("bernstein", n)
    to_mono = basis_change(b, a)
    # entries of the Bernstein-to-monomial matrix grow like 3^n, so the
    # rounding floor of the product grows with them at the highest degrees
    tol = 1e-12 if n <= 10 else 1e-15 * np.abs(to_mono).max()
    np.testing.assert_allclose(basis_change(a, b) @ to_mono, np.eye(n + 1), atol=tol)


def test_basis_change_preserves_curve(rng):
    mono, bern = BasisSpec("monomial", 4), BasisSpec("bernstein", 4)
    coef = rng.normal(size=(5, 2))
    taus = rng.uniform(0, 1, 20)
    converted = basis_change(mono, bern) @ coef
    assert np.max(np.abs(evaluate(mono, coef, taus) - evaluate(bern, converted, taus))) < 1e-9


def test_stacked_basis_change_matches_per_axis(rng):
    mono, bern = BasisSpec("monomial", 3), BasisSpec("bernstein", 3)
    coef = rng.normal(size=(4, 2))
    np.testing.assert_allclose(stacked_basis_change(mono, bern) @ coef.ravel(),
                               (basis_change(mono, bern) @ coef).ravel())


@pytest.mark.parametrize("n", range(MAX_DEGREE + 1))
def test_bernstein_partition_of_unity(n):
    V = basis_matrix(BasisSpec("bernstein", n), np.linspace(0, 1, 101))
    assert np.max(np.abs(V.sum(axis=1) - 1.0)) < 1e-12


@pytest.mark.parametrize("family", FAMILIES)
def test_constant_coefficients(family):
    spec = BasisSpec(family, 4)
    np.testing.assert_allclose(basis_matrix(spec, np.linspace(0, 1, 9)) @ constant_coefficients(spec), 1.0)


def _in_hull(point, vertices):
    # feasibility of point = vertices^T lambda with lambda in the simplex
    k = vertices.shape[0]
    A_eq = np.vstack([vertices.T, np.ones(k)])
    res = linprog(np.zeros(k), A_eq=A_eq, b_eq=np.r_[point, 1.0], bounds=[(0, None)] * k)
    return res.status == 0


def test_bernstein_curve_in_control_hull(rng):
    spec = BasisSpec("bernstein", 5)
    for _ in range(10):
        ctrl = rng.normal(size=(6, 2))
        for p in evaluate(spec, ctrl, np.linspace(0, 1, 15)):
            assert _in_hull(p, ctrl)


@given(family=st.sampled_from(FAMILIES), n=st.integers(1, MAX_DEGREE), order=st.integers(1, 3),
       tau=st.floats(0.05, 0.95))
def test_derivative_matches_finite_difference(family, n, order, tau):
    spec = BasisSpec(family, n)
    h = 1e-6
    fd = (eval_basis(spec, tau + h, order - 1) - eval_basis(spec, tau - h, order - 1)) / (2 * h)
    exact = eval_basis(spec, tau, order)
    scale = max(np.max(np.abs(exact)), 1.0)
    assert np.max(np.abs(fd - exact)) / scale < 1e-6


@given(n=st.integers(0, 8), seed=st.integers(0, 2**31))
def test_basis_change_is_exact_for_any_coefficients(n, seed):
    rng = np.random.default_rng(seed)
    mono, bern = BasisSpec("monomial", n), BasisSpec("bernstein", n)
    coef = rng.normal(size=(n + 1, 2))
    taus = np.linspace(0, 1, 11)
    np.testing.assert_allclose(evaluate(bern, basis_change(mono, bern) @ coef, taus),
                               evaluate(mono, coef, taus), atol=1e-9)
