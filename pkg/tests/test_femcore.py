import math

import numpy as np
import pytest
import scipy.sparse as sp
from dataclasses import replace

from meshsens.femcore import (
    CoefficientError,
    Coefficients,
    FEFunction,
    SolverError,
    SparseSystem,
    assemble_primal,
    coefficients_from_spec,
    constant_coefficients,
    factorize,
    h1_error_vs_exact,
    h1_seminorm,
    l2_norm,
    l2_norm_of_function,
    paper_example,
    solve,
    solve_bvp,
)
from meshsens.bounds import UNIT_SQUARE_POINCARE
from meshsens.mesh import build_structured_mesh
from meshsens.quadrature import conical_product_rule

from conftest import random_simplex, single_element_mesh


def all_free(mesh):
    return np.ones(mesh.n_vertices, dtype=bool)


def oracle_element_matrix(coords, a, b, c, degree=10):
    """Pointwise loop over a high-order conical rule; no shared code with the
    assembler beyond the rule itself."""
    coords = np.asarray(coords, dtype=float)
    d = coords.shape[1]
    E = (coords[1:] - coords[0]).T
    vol = abs(np.linalg.det(E)) / math.factorial(d)
    Gi = np.linalg.inv(E)
    G = np.vstack([-Gi.sum(axis=0), Gi])
    rule = conical_product_rule(d, degree)
    n = d + 1
    A = np.zeros((n, n))
    for lam, w in zip(rule.bary, rule.weights):
        x = lam @ coords
        av, bv, cv = a(x), b(x), c(x)
        for i in range(n):
            for j in range(n):
                A[i, j] += w * vol * (av * G[j] @ G[i] + (bv @ G[j]) * lam[i] + cv * lam[j] * lam[i])
    return A


def poly_coefficients():
    return Coefficients(
        a=lambda x: 1.0 + x[..., 0] ** 2,
        b=lambda x: np.stack([1 + x[..., 1], 2 - x[..., 0] * x[..., 1]], axis=-1),
        c=lambda x: 2.0 + x[..., 0] * x[..., 1],
        f=lambda x: x[..., 0],
        a0=0.5,
    )


def test_reference_stiffness(ref_triangle):
    m = single_element_mesh(ref_triangle)
    A = assemble_primal(m, constant_coefficients(), free=all_free(m)).matrix.toarray()
    expected = np.array([[1, -0.5, -0.5], [-0.5, 0.5, 0], [-0.5, 0, 0.5]])
    np.testing.assert_allclose(A, expected, rtol=1e-12, atol=1e-15)


def test_mass_matrix_moment_formula(rng):
    for _ in range(5):
        x = random_simplex(rng, 2)
        m = single_element_mesh(x)
        K = assemble_primal(m, constant_coefficients(1.0, (0, 0), 1.0), free=all_free(m)).matrix
        S = assemble_primal(m, constant_coefficients(1.0, (0, 0), 0.0), free=all_free(m)).matrix
        vol = m.geometry.volume[0]
        expected = vol / 12 * np.array([[2, 1, 1], [1, 2, 1], [1, 1, 2]])
        np.testing.assert_allclose((K - S).toarray(), expected, rtol=1e-12)


@pytest.mark.parametrize("d", [1, 2, 3])
def test_polynomial_coefficients_match_oracle(rng, d):
    co = Coefficients(
        a=lambda x: 1.0 + x[..., 0] ** 2,
        b=lambda x: x @ np.arange(1.0, d * d + 1).reshape(d, d).T,
        c=lambda x: 2.0 + x[..., -1],
        f=lambda x: x[..., 0],
        a0=0.0,
    )
    for _ in range(3):
        x = random_simplex(rng, d)
        m = single_element_mesh(x)
        A = assemble_primal(m, co, free=all_free(m)).matrix.toarray()
        ref = oracle_element_matrix(m.vertices[m.elements[0]], co.a, co.b, co.c)
        np.testing.assert_allclose(A, ref, rtol=1e-12, atol=1e-12 * np.abs(ref).max())


def test_symmetric_when_b_zero(mesh8):
    co = replace(poly_coefficients(), b=lambda x: np.zeros(x.shape))
    A = assemble_primal(mesh8, co).matrix
    assert abs(A - A.T).max() <= 1e-12 * abs(A).max()


def test_system_shape_no_explicit_zeros(mesh8):
    s = assemble_primal(mesh8, paper_example())
    assert s.n == len(mesh8.interior) == 7 * 7 + 64
    assert isinstance(s.matrix, sp.csr_matrix)
    assert (s.matrix.data != 0).all()


def test_coefficient_below_a0_rejected(mesh8):
    co = replace(constant_coefficients(), a=lambda x: 0.5 + 0 * x[..., 0], a0=1.0)
    with pytest.raises(CoefficientError):
        assemble_primal(mesh8, co)


def test_coercivity_warning(mesh8):
    co = replace(constant_coefficients(), b=lambda x: 3 * x, grad_b=lambda x: np.broadcast_to(3 * np.eye(2), x.shape + (2,)))
    with pytest.warns(UserWarning):
        assemble_primal(mesh8, co)


# --- solver --------------------------------------------------------------------


def test_solve_identity():
    s = SparseSystem(sp.identity(5, format="csr"), np.eye(5)[0])
    np.testing.assert_array_equal(solve(s), np.eye(5)[0])


def test_solve_1d_poisson():
    # -u'' = 1 on (0,1), 4 interior nodes: the 3-point scheme reproduces x(1-x)/2
    h = 1 / 5
    A = sp.diags([-1, 2, -1], [-1, 0, 1], shape=(4, 4), format="csr")
    x = solve(SparseSystem(A, np.full(4, h * h)))
    np.testing.assert_allclose(x, [0.08, 0.12, 0.12, 0.08], rtol=1e-13)


def test_solve_zero_rhs():
    A = sp.diags([-1, 2, -1], [-1, 0, 1], shape=(4, 4), format="csr")
    assert not solve(SparseSystem(A, np.zeros(4))).any()


@pytest.mark.parametrize("method", ["direct", "gmres"])
def test_primal_residual(method):
    m = build_structured_mesh(20)
    s = assemble_primal(m, paper_example())
    x = solve(s, method=method)
    assert np.linalg.norm(s.matrix @ x - s.rhs) <= 1e-10 * np.linalg.norm(s.rhs)


def test_singular_system_reports_failure():
    A = sp.csr_matrix(np.array([[1.0, 1.0], [1.0, 1.0]]))
    with pytest.raises(SolverError):
        solve(SparseSystem(A, np.array([1.0, 0.0])))


def test_gmres_failure_carries_residual():
    rng = np.random.default_rng(0)
    # one restart cycle of 100 Krylov steps cannot solve a dense 400x400 system
    n = 400
    A = sp.csr_matrix(rng.normal(size=(n, n)))
    lin = factorize(SparseSystem(A, np.ones(n)), method="gmres", maxiter=1)
    lin._ilu = type("Id", (), {"solve": staticmethod(lambda r: r)})()
    with pytest.raises(SolverError) as exc:
        lin.solve(np.ones(n))
    assert exc.value.residual > 0


def test_unknown_solver_method():
    with pytest.raises(ValueError):
        factorize(SparseSystem(sp.identity(2, format="csr"), np.ones(2)), method="cg")


# --- BVP -------------------------------------------------------------------------


def test_zero_load_gives_zero(mesh8):
    u = solve_bvp(mesh8, constant_coefficients(1.0, (1.0, 2.0), 0.0, 0.0))
    assert not u.values.any()


def test_boundary_values_zero(mesh8):
    u = solve_bvp(mesh8, paper_example())
    assert not u.values[mesh8.boundary].any()
    assert u.values[mesh8.interior].any()


def test_galerkin_orthogonality(mesh8):
    co = paper_example()
    s = assemble_primal(mesh8, co)
    u = solve_bvp(mesh8, co)
    np.testing.assert_allclose(s.matrix @ u.interior_values, s.rhs, rtol=0, atol=1e-10 * np.linalg.norm(s.rhs))


def test_coercivity_witness(rng):
    co = paper_example()
    for n in (3, 5, 8):
        m = build_structured_mesh(n)
        A = assemble_primal(m, co).matrix
        for _ in range(34):
            x = rng.normal(size=A.shape[0])
            v = FEFunction.from_interior(m, x)
            assert x @ (A @ x) >= co.a0 * h1_seminorm(v) ** 2 - 1e-12 * abs(x @ (A @ x))


def test_convergence_first_order():
    co = paper_example()
    errs = [h1_error_vs_exact(solve_bvp(build_structured_mesh(n), co), co.exact_grad) for n in (10, 20, 40, 80)]
    rates = [math.log2(errs[i] / errs[i + 1]) for i in range(3)]
    assert all(0.85 <= r <= 1.15 for r in rates), rates
    assert errs[-1] < errs[0]


def test_stability_inequality():
    co = paper_example()
    for n in (8, 20):
        m = build_structured_mesh(n)
        u = solve_bvp(m, co)
        assert h1_seminorm(u) <= UNIT_SQUARE_POINCARE * l2_norm_of_function(m, co.f) / co.a0


# --- norms -----------------------------------------------------------------------


def test_norms_of_zero(mesh8):
    z = FEFunction(mesh8, np.zeros(mesh8.n_vertices))
    assert h1_seminorm(z) == 0 and l2_norm(z) == 0


def test_seminorm_of_linear_interpolant(mesh8):
    u = FEFunction.interpolate(mesh8, lambda x: x[..., 0])
    assert h1_seminorm(u) == pytest.approx(1.0, rel=1e-13)
    assert l2_norm(u) == pytest.approx(1 / math.sqrt(3), rel=1e-13)
    assert h1_error_vs_exact(u, lambda x: np.broadcast_to([1.0, 0.0], x.shape)) < 1e-13


def test_l2_norm_of_f_quadrature():
    # ||f||^2 = (13 pi^2)^2/4 + (2 pi)^2/4 + (6 pi)^2/4 (cross terms integrate to zero)
    exact = math.sqrt((169 * math.pi**4 + 4 * math.pi**2 + 36 * math.pi**2) / 4)
    val = l2_norm_of_function(build_structured_mesh(40), paper_example().f)
    assert val == pytest.approx(exact, rel=1e-6)


def test_example_load_matches_exact_solution():
    # -lap u + b.grad u by central differences
    co = paper_example()
    rng = np.random.default_rng(1)
    x = rng.uniform(0.1, 0.9, size=(20, 2))
    h = 1e-4
    lap = sum(
        (co.exact(x + h * e) - 2 * co.exact(x) + co.exact(x - h * e)) / h**2 for e in np.eye(2)
    )
    lhs = -lap + co.exact_grad(x) @ np.array([1.0, 2.0])
    np.testing.assert_allclose(co.f(x), lhs, rtol=1e-5, atol=1e-4)
    gf = np.stack([(co.f(x + h * e) - co.f(x - h * e)) / (2 * h) for e in np.eye(2)], axis=-1)
    np.testing.assert_allclose(co.grad_f(x), gf, rtol=1e-6, atol=1e-4)


def test_coefficients_from_spec():
    co = coefficients_from_spec("paper-example")
    assert co.b_sup == pytest.approx(math.sqrt(5))
    co = coefficients_from_spec({"name": "paper-example", "a0": 0.5})
    assert co.a0 == 0.5
    co = coefficients_from_spec({"a": 2.0, "b": [0, 1], "c": 1.0, "f": 3.0})
    assert co.a0 == 2.0 and co.has_gradients
    with pytest.raises(CoefficientError):
        coefficients_from_spec("nope")
    with pytest.raises(CoefficientError):
        coefficients_from_spec({"name": "paper-example", "bogus": 1})
