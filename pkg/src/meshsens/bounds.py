"""A-priori bounds on ``||grad udot_h||`` for smooth and nonsmooth mesh
velocities."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .femcore import Coefficients, FEFunction, h1_seminorm, l2_norm_of_function
from .mesh import SimplicialMesh, mesh_quality
from .quadrature import DEFAULT_DEGREE
from .velocity import VelocityField

__all__ = [
    "UNIT_SQUARE_POINCARE",
    "BoundInputs",
    "BoundReport",
    "smooth_bound",
    "nonsmooth_bound",
    "bound_inputs",
    "verify_bounds",
]

# 1/sqrt(lambda_1) with lambda_1 = 2 pi^2 the first Dirichlet eigenvalue of (0,1)^2
UNIT_SQUARE_POINCARE = 1.0 / (math.sqrt(2.0) * math.pi)


@dataclass(frozen=True)
class BoundInputs:
    c_omega: float
    a0: float
    f_l2: float
    a_sup: float
    grad_a_sup: float
    b_sup: float
    grad_b_sup: float
    c_sup: float
    xdot_sup: float
    max_aspect: float
    min_height: float
    dim: int
    grad_xdot_sup: Optional[float] = None

    def __post_init__(self):
        if self.c_omega <= 0 or self.a0 <= 0:
            raise ValueError("C_Omega and a0 must be positive")
        for name in ("f_l2", "a_sup", "grad_a_sup", "b_sup", "grad_b_sup", "c_sup",
                     "xdot_sup", "max_aspect", "min_height"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.grad_xdot_sup is not None and self.grad_xdot_sup < 0:
            raise ValueError("grad_xdot_sup must be nonnegative")


def _size_factor(p: BoundInputs) -> float:
    C = p.c_omega
    return p.f_l2 * (1 + C * p.grad_a_sup + C**2 * p.grad_b_sup + 2 * C**2 * p.c_sup) * p.xdot_sup


def _shape_factor(p: BoundInputs) -> float:
    C, d = p.c_omega, p.dim
    return p.f_l2 * (3 * d * C * p.a_sup + 2 * d * C**2 * p.b_sup)


def smooth_bound(p: BoundInputs) -> float:
    """Bound on ``||grad udot_h||`` for a velocity with bounded gradient."""
    if p.grad_xdot_sup is None:
        raise ValueError("smooth bound needs the sup norm of the velocity gradient")
    return (_size_factor(p) + _shape_factor(p) * p.grad_xdot_sup * p.max_aspect) / p.a0


def nonsmooth_bound(p: BoundInputs) -> float:
    """Bound on ``||grad udot_h||`` using only ``||X||`` and ``min_K a_K``."""
    if p.min_height <= 0:
        raise ValueError("degenerate mesh: min element height must be positive")
    return (_size_factor(p) + _shape_factor(p) * p.xdot_sup / p.min_height) / p.a0


def bound_inputs(
    mesh: SimplicialMesh,
    co: Coefficients,
    vf: VelocityField,
    v: np.ndarray,
    *,
    c_omega: float = UNIT_SQUARE_POINCARE,
    degree: int = DEFAULT_DEGREE,
) -> BoundInputs:
    """Collect bound inputs; ``||X||`` falls back to the nodal maximum for
    fields without a closed-form sup norm (random nodal fields)."""
    missing = [n for n in ("a_sup", "b_sup", "c_sup", "grad_a_sup", "grad_b_sup")
               if getattr(co, n) is None]
    if missing:
        raise ValueError("coefficient norms missing: " + ", ".join(missing))
    q = mesh_quality(mesh)
    nodal = float(np.linalg.norm(v, axis=1).max()) if len(v) else 0.0
    xsup = nodal if vf.sup_norm is None else max(float(vf.sup_norm), nodal)
    return BoundInputs(
        c_omega=c_omega,
        a0=co.a0,
        f_l2=l2_norm_of_function(mesh, co.f, degree),
        a_sup=co.a_sup,
        grad_a_sup=co.grad_a_sup,
        b_sup=co.b_sup,
        grad_b_sup=co.grad_b_sup,
        c_sup=co.c_sup,
        xdot_sup=xsup,
        max_aspect=q.max_aspect,
        min_height=q.min_height,
        dim=mesh.dim,
        grad_xdot_sup=vf.grad_sup_norm if vf.kind == "analytic" else None,
    )


@dataclass(frozen=True)
class BoundReport:
    measured: float
    nonsmooth_rhs: float
    nonsmooth_ok: bool
    smooth_rhs: Optional[float] = None
    smooth_ok: Optional[bool] = None
    inputs: Optional[BoundInputs] = None

    @property
    def satisfied(self) -> bool:
        return self.nonsmooth_ok and self.smooth_ok is not False

    def as_dict(self) -> dict:
        out = {
            "measured": self.measured,
            "smooth_rhs": self.smooth_rhs,
            "smooth_ok": self.smooth_ok,
            "nonsmooth_rhs": self.nonsmooth_rhs,
            "nonsmooth_ok": self.nonsmooth_ok,
            "satisfied": self.satisfied,
        }
        if self.inputs is not None:
            out["inputs"] = asdict(self.inputs)
        return out


def verify_bounds(
    mesh: SimplicialMesh,
    co: Coefficients,
    vf: VelocityField,
    udot: FEFunction,
    v: np.ndarray,
    *,
    c_omega: float = UNIT_SQUARE_POINCARE,
    inputs: Optional[BoundInputs] = None,
) -> BoundReport:
    """Compare ``||grad udot_h||`` with every applicable bound."""
    p = inputs if inputs is not None else bound_inputs(mesh, co, vf, v, c_omega=c_omega)
    measured = h1_seminorm(udot)
    ns = nonsmooth_bound(p)
    sm = smooth_bound(p) if p.grad_xdot_sup is not None else None
    return BoundReport(
        measured=measured,
        nonsmooth_rhs=ns,
        nonsmooth_ok=measured <= ns,
        smooth_rhs=sm,
        smooth_ok=None if sm is None else measured <= sm,
        inputs=p,
    )
