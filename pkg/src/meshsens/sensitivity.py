"""Material derivative of the FE solution under mesh deformation.

The derivative ``udot_h`` solves the primal bilinear form with a right-hand
side that depends on ``u_h``, the nodal velocities and the coefficient
gradients. :func:`validate_material_derivative` checks it against the
finite-difference quotient obtained by deforming the mesh and re-solving.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from .femcore import (
    Coefficients,
    FEFunction,
    LinearSolver,
    _dof_map,
    assemble_primal,
    element_quadrature,
    factorize,
    h1_seminorm,
    scatter_vector,
    solve_bvp,
)
from .mesh import MeshError, SimplicialMesh
from .quadrature import DEFAULT_DEGREE
from .velocity import deform_mesh, element_deformations

__all__ = [
    "SensitivityRhsBreakdown",
    "ValidationRecord",
    "assemble_sensitivity_rhs",
    "solve_sensitivity",
    "validate_material_derivative",
    "observed_orders",
]

log = logging.getLogger(__name__)

GROUPS = ("geometric", "a_term", "b_term", "c_term", "f_term")


@dataclass(frozen=True)
class SensitivityRhsBreakdown:
    """Right-hand side split by integral group, over interior DOFs.

    ``total`` is scattered from the per-element sum of all groups, so
    comparing it with ``sum_of_groups`` checks the bookkeeping.
    ``c_term_pre`` / ``f_term_pre`` hold the same two groups before
    integration by parts.
    """

    geometric: np.ndarray
    a_term: np.ndarray
    b_term: np.ndarray
    c_term: np.ndarray
    f_term: np.ndarray
    total: np.ndarray
    c_term_pre: np.ndarray
    f_term_pre: np.ndarray

    @property
    def sum_of_groups(self) -> np.ndarray:
        return self.geometric + self.a_term + self.b_term + self.c_term + self.f_term

    @property
    def total_pre(self) -> np.ndarray:
        return self.geometric + self.a_term + self.b_term + self.c_term_pre + self.f_term_pre


def _element_rhs_groups(mesh, co, u_h, v, degree):
    co.require_gradients()
    eq = element_quadrature(mesh, degree)
    lam = eq.rule.bary  # (nq, n)
    w = eq.wdet  # (ne, nq)
    qp = eq.points
    G = mesh.geometry.grad_phi  # (ne, n, d)

    g = u_h.gradients()  # (ne, d)
    uq = np.einsum("qi,ki->kq", lam, u_h.values[mesh.elements])
    v = np.asarray(v, dtype=float).reshape(mesh.vertices.shape)
    Xq = np.einsum("qi,kid->kqd", lam, v[mesh.elements])  # X_h at quadrature points
    _, S, div = element_deformations(mesh, v)

    aq = np.asarray(co.a(qp), dtype=float)
    bq = np.asarray(co.b(qp), dtype=float)
    cq = np.asarray(co.c(qp), dtype=float)
    fq = np.asarray(co.f(qp), dtype=float)
    gaq = np.asarray(co.grad_a(qp), dtype=float)
    gbq = np.asarray(co.grad_b(qp), dtype=float)
    gcq = np.asarray(co.grad_c(qp), dtype=float)
    gfq = np.asarray(co.grad_f(qp), dtype=float)

    g_dot_G = np.einsum("kd,kid->ki", g, G)  # grad u_h . grad psi_i
    G_dot_X = np.einsum("kid,kqd->kqi", G, Xq)  # grad psi_i . X_h

    # geometric: a grad u (S + S^T) grad psi + (b . S^T grad u) psi
    M = S + np.swapaxes(S, 1, 2)
    int_a = (w * aq).sum(axis=1)
    StG = np.einsum("kji,kj->ki", S, g)  # S^T g
    geo = int_a[:, None] * np.einsum("kd,kde,kie->ki", g, M, G)
    geo += np.einsum("kq,kq,qi->ki", w, np.einsum("kqd,kd->kq", bq, StG), lam)

    # a: -(grad a . X_h)(grad u . grad psi) - a (grad u . grad psi) div X_h
    ga_X = np.einsum("kqd,kqd->kq", gaq, Xq)
    a_term = -((w * ga_X).sum(axis=1) + int_a * div)[:, None] * g_dot_G

    # b: -((grad b X_h) . grad u) psi - (b . grad u) psi div X_h
    gbX_g = np.einsum("kqij,kqj,ki->kq", gbq, Xq, g)
    b_g = np.einsum("kqd,kd->kq", bq, g)
    b_term = -np.einsum("kq,kq,qi->ki", w, gbX_g + b_g * div[:, None], lam)

    # c: c psi (grad u . X_h) + c u_h (grad psi . X_h)
    g_X = np.einsum("kd,kqd->kq", g, Xq)
    c_term = np.einsum("kq,kq,qi->ki", w * cq, g_X, lam)
    c_term += np.einsum("kq,kq,kqi->ki", w * cq, uq, G_dot_X)

    # f: -f (grad psi . X_h)
    f_term = -np.einsum("kq,kqi->ki", w * fq, G_dot_X)

    # before integration by parts
    gc_X = np.einsum("kqd,kqd->kq", gcq, Xq)
    c_pre = -np.einsum("kq,qi->ki", w * (gc_X * uq + cq * uq * div[:, None]), lam)
    gf_X = np.einsum("kqd,kqd->kq", gfq, Xq)
    f_pre = np.einsum("kq,qi->ki", w * (gf_X + fq * div[:, None]), lam)

    return {
        "geometric": geo,
        "a_term": a_term,
        "b_term": b_term,
        "c_term": c_term,
        "f_term": f_term,
        "c_term_pre": c_pre,
        "f_term_pre": f_pre,
    }


def assemble_sensitivity_rhs(
    mesh: SimplicialMesh,
    co: Coefficients,
    u_h: FEFunction,
    v: np.ndarray,
    *,
    free: Optional[np.ndarray] = None,
    degree: int = DEFAULT_DEGREE,
) -> SensitivityRhsBreakdown:
    """Assemble every group of the sensitivity right-hand side.

    Raises :class:`~meshsens.femcore.CoefficientError` when a coefficient
    lacks an analytic gradient.
    """
    local = _element_rhs_groups(mesh, co, u_h, v, degree)
    dof, idx = _dof_map(mesh, free)
    n = len(idx)
    out = {k: scatter_vector(mesh, arr, dof, n) for k, arr in local.items()}
    total_local = sum(local[k] for k in GROUPS)
    out["total"] = scatter_vector(mesh, total_local, dof, n)
    return SensitivityRhsBreakdown(**out)


def solve_sensitivity(
    mesh: SimplicialMesh,
    co: Coefficients,
    u_h: FEFunction,
    v: np.ndarray,
    *,
    solver: Optional[LinearSolver] = None,
    degree: int = DEFAULT_DEGREE,
) -> FEFunction:
    """Solve for ``udot_h``; pass the primal ``solver`` to reuse its
    factorization."""
    if solver is None:
        solver = factorize(assemble_primal(mesh, co, degree=degree))
    rhs = assemble_sensitivity_rhs(mesh, co, u_h, v, degree=degree).total
    return FEFunction.from_interior(mesh, solver.solve(rhs))


@dataclass(frozen=True)
class ValidationRecord:
    t: float
    change_norm: float  # ||grad(u_h(t) - u_h)||
    fd_norm: float  # change_norm / t
    analytic_norm: float  # ||grad udot_h||
    discrepancy: float  # ||grad(udot_h - difference quotient)||
    ok: bool = True
    note: str = ""


def validate_material_derivative(
    mesh: SimplicialMesh,
    co: Coefficients,
    u_h: FEFunction,
    v: np.ndarray,
    t_list: Iterable[float],
    *,
    udot: Optional[FEFunction] = None,
    central: bool = False,
    degree: int = DEFAULT_DEGREE,
    solver_kw: Optional[dict] = None,
) -> list[ValidationRecord]:
    """Compare ``udot_h`` with ``(u_h(t) - u_h)/t`` for each ``t``.

    Shared connectivity makes the nodal-coefficient difference an FE function
    on the base mesh, so every norm is taken there. A ``t`` at which the
    deformed mesh inverts yields a record with ``ok=False`` and NaN norms.
    With ``central`` the quotient is ``(u_h(t) - u_h(-t)) / 2t``.
    """
    solver_kw = solver_kw or {}
    if udot is None:
        udot = solve_sensitivity(mesh, co, u_h, v, degree=degree)
    analytic = h1_seminorm(udot)
    v = np.asarray(v, dtype=float).reshape(mesh.vertices.shape)

    def resolve(vel, t):
        moved = deform_mesh(mesh, vel, t)
        ut = solve_bvp(moved, co, degree=degree, **solver_kw)
        return FEFunction(mesh, ut.values)

    records = []
    for t in t_list:
        t = float(t)
        if t <= 0:
            raise ValueError("t values must be positive")
        try:
            up = resolve(v, t)
            if central:
                um = resolve(-v, t)
                quotient = (up - um) * (1.0 / (2 * t))
            else:
                quotient = (up - u_h) * (1.0 / t)
        except MeshError as exc:
            log.warning("t=%g skipped: %s", t, exc)
            nan = math.nan
            records.append(ValidationRecord(t, nan, nan, analytic, nan, ok=False, note=str(exc)))
            continue
        change = h1_seminorm(up - u_h)
        records.append(
            ValidationRecord(
                t=t,
                change_norm=change,
                fd_norm=h1_seminorm(quotient),
                analytic_norm=analytic,
                discrepancy=h1_seminorm(udot - quotient),
            )
        )
    return records


def observed_orders(ts, errors) -> list[float]:
    """``log(e_i/e_{i+1}) / log(t_i/t_{i+1})`` for consecutive pairs."""
    ts = np.asarray(ts, dtype=float)
    e = np.asarray(errors, dtype=float)
    return [float(np.log(e[i] / e[i + 1]) / np.log(ts[i] / ts[i + 1])) for i in range(len(e) - 1)]
