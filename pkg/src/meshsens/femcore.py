"""P1 finite elements for -div(a grad u) + b.grad u + c u = f with u = 0 on
the boundary.

Unknowns live on interior vertices only; boundary values are eliminated.
Coefficient callables take points of shape ``(..., d)``.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import SimplicialMesh
from .quadrature import DEFAULT_DEGREE, QuadratureRule, quadrature_rule

__all__ = [
    "CoefficientError",
    "SolverError",
    "Coefficients",
    "FEFunction",
    "SparseSystem",
    "LinearSolver",
    "COEFFICIENT_CATALOG",
    "coefficients_from_spec",
    "constant_coefficients",
    "paper_example",
    "element_quadrature",
    "assemble_primal",
    "factorize",
    "solve",
    "solve_bvp",
    "h1_seminorm",
    "l2_norm",
    "h1_error_vs_exact",
    "l2_norm_of_function",
    "DIRECT_SOLVE_LIMIT",
]

log = logging.getLogger(__name__)

DIRECT_SOLVE_LIMIT = 200_000
RESIDUAL_RTOL = 1e-10


class CoefficientError(ValueError):
    pass


class SolverError(RuntimeError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


@dataclass(frozen=True)
class Coefficients:
    """PDE data and the norms the sensitivity bounds need.

    ``grad_b(x)[..., i, j]`` is ``d b_i / d x_j``. Gradient callables are
    optional for solving the primal problem but required for sensitivities.
    """

    a: Callable
    b: Callable
    c: Callable
    f: Callable
    grad_a: Optional[Callable] = None
    grad_b: Optional[Callable] = None
    grad_c: Optional[Callable] = None
    grad_f: Optional[Callable] = None
    a0: float = 1.0
    a_sup: Optional[float] = None
    b_sup: Optional[float] = None
    c_sup: Optional[float] = None
    grad_a_sup: Optional[float] = None
    grad_b_sup: Optional[float] = None
    name: str = ""
    exact: Optional[Callable] = None
    exact_grad: Optional[Callable] = None

    @property
    def has_gradients(self) -> bool:
        return None not in (self.grad_a, self.grad_b, self.grad_c, self.grad_f)

    def require_gradients(self, which=("a", "b", "c", "f")):
        missing = [n for n in which if getattr(self, f"grad_{n}") is None]
        if missing:
            raise CoefficientError(
                "sensitivity needs analytic gradients; missing for " + ", ".join(missing)
            )

    def with_norms(self, **kw) -> "Coefficients":
        return replace(self, **kw)


def _const(value, d=None):
    value = np.asarray(value, dtype=float)

    def fn(x):
        x = np.asarray(x)
        return np.broadcast_to(value, x.shape[:-1] + value.shape).copy()

    return fn


def constant_coefficients(a=1.0, b=(0.0, 0.0), c=0.0, f=0.0, *, name="constant") -> Coefficients:
    """Constant data; all gradients are zero."""
    b = np.asarray(b, dtype=float)
    d = len(b)
    return Coefficients(
        a=_const(a),
        b=_const(b),
        c=_const(c),
        f=_const(f),
        grad_a=_const(np.zeros(d)),
        grad_b=_const(np.zeros((d, d))),
        grad_c=_const(np.zeros(d)),
        grad_f=_const(np.zeros(d)),
        a0=float(a),
        a_sup=abs(float(a)),
        b_sup=float(np.linalg.norm(b)),
        c_sup=abs(float(c)),
        grad_a_sup=0.0,
        grad_b_sup=0.0,
        name=name,
    )


def paper_example() -> Coefficients:
    """a = 1, b = (1, 2), c = 0 on the unit square with exact solution
    u = sin(2 pi x) sin(3 pi y)."""
    pi = math.pi

    def u(x):
        return np.sin(2 * pi * x[..., 0]) * np.sin(3 * pi * x[..., 1])

    def grad_u(x):
        X, Y = x[..., 0], x[..., 1]
        return np.stack(
            [
                2 * pi * np.cos(2 * pi * X) * np.sin(3 * pi * Y),
                3 * pi * np.sin(2 * pi * X) * np.cos(3 * pi * Y),
            ],
            axis=-1,
        )

    def f(x):
        X, Y = x[..., 0], x[..., 1]
        s2, c2 = np.sin(2 * pi * X), np.cos(2 * pi * X)
        s3, c3 = np.sin(3 * pi * Y), np.cos(3 * pi * Y)
        return 13 * pi**2 * s2 * s3 + 2 * pi * c2 * s3 + 6 * pi * s2 * c3

    def grad_f(x):
        X, Y = x[..., 0], x[..., 1]
        s2, c2 = np.sin(2 * pi * X), np.cos(2 * pi * X)
        s3, c3 = np.sin(3 * pi * Y), np.cos(3 * pi * Y)
        fx = 26 * pi**3 * c2 * s3 - 4 * pi**2 * s2 * s3 + 12 * pi**2 * c2 * c3
        fy = 39 * pi**3 * s2 * c3 + 6 * pi**2 * c2 * c3 - 18 * pi**2 * s2 * s3
        return np.stack([fx, fy], axis=-1)

    base = constant_coefficients(1.0, (1.0, 2.0), 0.0)
    return replace(base, f=f, grad_f=grad_f, name="paper-example", exact=u, exact_grad=grad_u)


COEFFICIENT_CATALOG: dict[str, Callable[[], Coefficients]] = {
    "paper-example": paper_example,
}


def coefficients_from_spec(spec) -> Coefficients:
    """Catalog name, or ``{"name": ..., "a0": ...}`` with numeric overrides,
    or an inline constant spec ``{"a": 1, "b": [0, 0], "c": 0, "f": 1}``."""
    if isinstance(spec, str):
        spec = {"name": spec}
    spec = dict(spec)
    if "name" in spec:
        name = spec.pop("name")
        if name not in COEFFICIENT_CATALOG:
            raise CoefficientError(f"unknown problem {name!r}; known: {sorted(COEFFICIENT_CATALOG)}")
        co = COEFFICIENT_CATALOG[name]()
    else:
        co = constant_coefficients(
            spec.pop("a", 1.0), spec.pop("b", (0.0, 0.0)), spec.pop("c", 0.0), spec.pop("f", 0.0),
            name="inline",
        )
    allowed = {"a0", "a_sup", "b_sup", "c_sup", "grad_a_sup", "grad_b_sup"}
    unknown = set(spec) - allowed
    if unknown:
        raise CoefficientError(f"unknown problem keys: {sorted(unknown)}")
    return replace(co, **{k: float(v) for k, v in spec.items()})


# --- functions on the mesh -------------------------------------------------


@dataclass(frozen=True, eq=False)
class FEFunction:
    """Continuous piecewise-linear function given by its vertex values."""

    mesh: SimplicialMesh
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != (self.mesh.n_vertices,):
            raise ValueError("one value per vertex expected")
        object.__setattr__(self, "values", vals)

    @classmethod
    def from_interior(cls, mesh: SimplicialMesh, x: np.ndarray) -> "FEFunction":
        vals = np.zeros(mesh.n_vertices)
        vals[mesh.interior] = x
        return cls(mesh, vals)

    @classmethod
    def interpolate(cls, mesh: SimplicialMesh, fn) -> "FEFunction":
        return cls(mesh, np.asarray(fn(mesh.vertices), dtype=float))

    @property
    def interior_values(self) -> np.ndarray:
        return self.values[self.mesh.interior]

    def gradients(self) -> np.ndarray:
        """Piecewise-constant gradient, shape ``(ne, d)``."""
        ue = self.values[self.mesh.elements]
        return np.einsum("ki,kij->kj", ue, self.mesh.geometry.grad_phi)

    def __sub__(self, other: "FEFunction") -> "FEFunction":
        return FEFunction(self.mesh, self.values - other.values)

    def __add__(self, other: "FEFunction") -> "FEFunction":
        return FEFunction(self.mesh, self.values + other.values)

    def __mul__(self, s: float) -> "FEFunction":
        return FEFunction(self.mesh, self.values * s)

    __rmul__ = __mul__


@dataclass(frozen=True)
class ElementQuadrature:
    """Quadrature data mapped to every element."""

    rule: QuadratureRule
    points: np.ndarray  # (ne, nq, d)
    wdet: np.ndarray  # (ne, nq) weights times |K|


def element_quadrature(mesh: SimplicialMesh, degree: int = DEFAULT_DEGREE) -> ElementQuadrature:
    rule = quadrature_rule(mesh.dim, degree)
    xe = mesh.vertices[mesh.elements]  # (ne, d+1, d)
    points = np.einsum("qi,kid->kqd", rule.bary, xe)
    wdet = mesh.geometry.volume[:, None] * rule.weights[None, :]
    return ElementQuadrature(rule, points, wdet)


# --- assembly --------------------------------------------------------------


@dataclass(frozen=True)
class SparseSystem:
    """Interior-DOF system ``A x = rhs`` in CSR storage."""

    matrix: sp.csr_matrix
    rhs: np.ndarray
    mesh: Optional[SimplicialMesh] = field(default=None, compare=False)
    free: Optional[np.ndarray] = field(default=None, compare=False)

    @property
    def n(self) -> int:
        return self.matrix.shape[0]


def _dof_map(mesh: SimplicialMesh, free) -> tuple[np.ndarray, np.ndarray]:
    if free is None:
        free = ~mesh.boundary
    free = np.asarray(free, dtype=bool)
    dof = np.full(mesh.n_vertices, -1, dtype=np.int64)
    idx = np.flatnonzero(free)
    dof[idx] = np.arange(len(idx))
    return dof, idx


def _check_coefficients(co: Coefficients, aq: np.ndarray, cq: np.ndarray, qp: np.ndarray, grad_b):
    low = aq < co.a0 * (1 - 1e-12)
    if low.any():
        k, q = np.argwhere(low)[0]
        raise CoefficientError(
            f"a = {aq[k, q]:.6g} < a0 = {co.a0:.6g} at quadrature point {qp[k, q].tolist()}"
        )
    if grad_b is not None:
        divb = np.trace(grad_b(qp), axis1=-2, axis2=-1)
        if (cq - 0.5 * divb < -1e-12).any():
            warnings.warn("c - div(b)/2 < 0 somewhere; coercivity is not guaranteed", stacklevel=3)


def element_matrices(mesh: SimplicialMesh, co: Coefficients, eq: ElementQuadrature):
    """Local bilinear-form matrices ``A_K[i, j] = B(phi_j, phi_i)`` and load
    vectors, shapes ``(ne, d+1, d+1)`` and ``(ne, d+1)``."""
    G = mesh.geometry.grad_phi  # (ne, n, d)
    lam = eq.rule.bary  # (nq, n)
    qp = eq.points
    aq = np.asarray(co.a(qp), dtype=float)
    bq = np.asarray(co.b(qp), dtype=float)
    cq = np.asarray(co.c(qp), dtype=float)
    fq = np.asarray(co.f(qp), dtype=float)
    _check_coefficients(co, aq, cq, qp, co.grad_b)

    w = eq.wdet
    stiff = np.einsum("k,kid,kjd->kij", (w * aq).sum(axis=1), G, G)
    # convection: (b . grad phi_j) phi_i
    bg = np.einsum("kqd,kjd->kqj", bq, G)
    conv = np.einsum("kq,qi,kqj->kij", w, lam, bg)
    mass = np.einsum("kq,qi,qj->kij", w * cq, lam, lam)
    load = np.einsum("kq,qi->ki", w * fq, lam)
    return stiff + conv + mass, load


def scatter_matrix(mesh: SimplicialMesh, local: np.ndarray, dof: np.ndarray, n: int) -> sp.csr_matrix:
    el = dof[mesh.elements]
    nloc = el.shape[1]
    rows = np.repeat(el, nloc, axis=1).ravel()
    cols = np.tile(el, (1, nloc)).ravel()
    vals = local.reshape(len(el), -1).ravel()
    keep = (rows >= 0) & (cols >= 0)
    A = sp.coo_matrix((vals[keep], (rows[keep], cols[keep])), shape=(n, n)).tocsr()
    A.sum_duplicates()
    A.eliminate_zeros()
    return A


def scatter_vector(mesh: SimplicialMesh, local: np.ndarray, dof: np.ndarray, n: int) -> np.ndarray:
    el = dof[mesh.elements].ravel()
    vals = local.ravel()
    keep = el >= 0
    return np.bincount(el[keep], weights=vals[keep], minlength=n)


def assemble_primal(
    mesh: SimplicialMesh,
    co: Coefficients,
    *,
    free: Optional[np.ndarray] = None,
    degree: int = DEFAULT_DEGREE,
) -> SparseSystem:
    """Assemble the Galerkin system over free (default: interior) vertices.

    ``free`` overrides which vertices carry unknowns; passing all-true gives
    the unconstrained element-level system used for checking local matrices.
    """
    dof, idx = _dof_map(mesh, free)
    eq = element_quadrature(mesh, degree)
    local, load = element_matrices(mesh, co, eq)
    n = len(idx)
    A = scatter_matrix(mesh, local, dof, n)
    rhs = scatter_vector(mesh, load, dof, n)
    return SparseSystem(A, rhs, mesh, dof >= 0)


# --- solving ---------------------------------------------------------------


class LinearSolver:
    """Factor once, solve many right-hand sides with a residual guarantee.

    Systems up to :data:`DIRECT_SOLVE_LIMIT` unknowns use sparse LU; larger
    ones use ILU-preconditioned GMRES.
    """

    def __init__(self, matrix, method: str = "auto", rtol: float = RESIDUAL_RTOL, maxiter: int = 2000):
        self.matrix = sp.csc_matrix(matrix)
        self.rtol = rtol
        self.maxiter = maxiter
        n = self.matrix.shape[0]
        if method == "auto":
            method = "direct" if n <= DIRECT_SOLVE_LIMIT else "gmres"
        if method not in ("direct", "gmres"):
            raise ValueError(f"unknown solver method {method!r}")
        self.method = method
        self._lu = None
        self._ilu = None
        if n and method == "direct":
            try:
                self._lu = spla.splu(self.matrix)
            except RuntimeError as exc:
                raise SolverError(f"factorization failed: {exc}") from exc
        elif n:
            self._ilu = spla.spilu(self.matrix, drop_tol=1e-5, fill_factor=20)

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        rhs = np.asarray(rhs, dtype=float)
        if rhs.size == 0:
            return rhs.copy()
        bnorm = np.linalg.norm(rhs)
        if bnorm == 0.0:
            return np.zeros_like(rhs)
        if self._lu is not None:
            x = self._lu.solve(rhs)
            # one step of iterative refinement keeps the residual contract on
            # poorly conditioned systems
            r = rhs - self.matrix @ x
            if np.linalg.norm(r) > self.rtol * bnorm:
                x += self._lu.solve(r)
        else:
            M = spla.LinearOperator(self.matrix.shape, self._ilu.solve)
            x, info = spla.gmres(
                self.matrix, rhs, M=M, rtol=self.rtol * 0.1, atol=0.0,
                restart=100, maxiter=self.maxiter,
            )
        res = float(np.linalg.norm(rhs - self.matrix @ x))
        if not np.isfinite(res) or res > self.rtol * bnorm:
            raise SolverError(
                f"{self.method} solve did not reach residual {self.rtol:g} "
                f"(achieved {res / bnorm:.3e})",
                residual=res,
            )
        return x


def factorize(system: SparseSystem, **kw) -> LinearSolver:
    return LinearSolver(system.matrix, **kw)


def solve(system: SparseSystem, **kw) -> np.ndarray:
    return factorize(system, **kw).solve(system.rhs)


def solve_bvp(mesh: SimplicialMesh, co: Coefficients, *, degree: int = DEFAULT_DEGREE, return_solver=False, **solver_kw):
    """Assemble and solve; returns ``u_h`` (and the factorized solver if
    ``return_solver``)."""
    system = assemble_primal(mesh, co, degree=degree)
    lin = factorize(system, **solver_kw)
    u = FEFunction.from_interior(mesh, lin.solve(system.rhs))
    return (u, lin) if return_solver else u


# --- norms -----------------------------------------------------------------


def h1_seminorm(u: FEFunction) -> float:
    """Exact ``||grad u||_{L2}`` from the piecewise-constant gradient."""
    g = u.gradients()
    return float(np.sqrt(np.sum(u.mesh.geometry.volume * np.einsum("kd,kd->k", g, g))))


def l2_norm(u: FEFunction, degree: int = DEFAULT_DEGREE) -> float:
    eq = element_quadrature(u.mesh, degree)
    uq = np.einsum("qi,ki->kq", eq.rule.bary, u.values[u.mesh.elements])
    return float(np.sqrt(np.sum(eq.wdet * uq**2)))


def l2_norm_of_function(mesh: SimplicialMesh, fn, degree: int = DEFAULT_DEGREE) -> float:
    """``||fn||_{L2}`` over the element union by quadrature."""
    eq = element_quadrature(mesh, degree)
    fq = np.asarray(fn(eq.points), dtype=float)
    return float(np.sqrt(np.sum(eq.wdet * fq**2)))


def h1_error_vs_exact(u: FEFunction, exact_grad, degree: int = DEFAULT_DEGREE) -> float:
    """``||grad(u_h - u)||_{L2}`` with the exact gradient sampled at
    quadrature points."""
    eq = element_quadrature(u.mesh, degree)
    gq = np.asarray(exact_grad(eq.points), dtype=float)
    diff = gq - u.gradients()[:, None, :]
    return float(np.sqrt(np.sum(eq.wdet * np.einsum("kqd,kqd->kq", diff, diff))))
