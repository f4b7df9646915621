"""Mesh velocity fields, mesh deformation and per-element deformation data.

Nodal velocities are plain ``(nv, d)`` arrays. Boundary vertices are pinned:
:func:`sample_nodal_velocity` always returns zero rows for them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .mesh import MeshError, SimplicialMesh

__all__ = [
    "VelocityField",
    "ElementDeformation",
    "LemmaReport",
    "analytic_field",
    "random_field",
    "field_from_spec",
    "FIELD_CATALOG",
    "random_generator",
    "sample_nodal_velocity",
    "deform_mesh",
    "element_deformation",
    "element_deformations",
    "deformation_jacobian",
    "lemma_bounds_report",
    "estimate_sup_norms",
]

ESTIMATE_GRID = 512


@dataclass(frozen=True)
class VelocityField:
    """A mesh velocity, either an analytic map or seeded nodal noise.

    For analytic fields ``func`` maps points of shape ``(..., d)`` to
    velocities of the same shape and ``grad`` (optional) returns the Jacobian
    ``(..., d, d)`` with ``grad[..., i, j] = dX_i/dx_j``. ``norms_estimated``
    marks sup norms that came from sampling rather than closed form.
    """

    kind: str
    name: str = ""
    func: Optional[Callable] = None
    grad: Optional[Callable] = None
    seed: Optional[int] = None
    sup_norm: Optional[float] = None
    grad_sup_norm: Optional[float] = None
    norms_estimated: bool = False
    dim: int = 2

    @property
    def smooth(self) -> bool:
        return self.kind == "analytic" and self.grad_sup_norm is not None

    def scaled(self, alpha: float) -> "VelocityField":
        if self.kind != "analytic":
            raise ValueError("only analytic fields can be scaled")
        f, g = self.func, self.grad
        return VelocityField(
            kind="analytic",
            name=f"{alpha}*{self.name}",
            func=lambda x: alpha * f(x),
            grad=None if g is None else (lambda x: alpha * g(x)),
            sup_norm=None if self.sup_norm is None else abs(alpha) * self.sup_norm,
            grad_sup_norm=None if self.grad_sup_norm is None else abs(alpha) * self.grad_sup_norm,
            norms_estimated=self.norms_estimated,
            dim=self.dim,
        )


def estimate_sup_norms(func, grad=None, n: int = ESTIMATE_GRID):
    """Sample ``|X|`` and ``||grad X||_2`` on an ``n x n`` grid of the unit square."""
    s = (np.arange(n) + 0.5) / n
    X, Y = np.meshgrid(s, s)
    pts = np.stack([X, Y], axis=-1).reshape(-1, 2)
    sup = float(np.linalg.norm(func(pts), axis=-1).max())
    gsup = None
    if grad is not None:
        gsup = float(np.linalg.norm(grad(pts), ord=2, axis=(-2, -1)).max())
    return sup, gsup


def analytic_field(func, grad=None, *, name="", sup_norm=None, grad_sup_norm=None, dim=2):
    """Wrap an analytic velocity. Missing sup norms are estimated by sampling."""
    estimated = False
    if sup_norm is None or (grad is not None and grad_sup_norm is None):
        if dim != 2:
            raise ValueError("norm estimation is only implemented on the unit square")
        s, g = estimate_sup_norms(func, grad)
        estimated = True
        sup_norm = s if sup_norm is None else sup_norm
        grad_sup_norm = g if grad_sup_norm is None else grad_sup_norm
    return VelocityField(
        kind="analytic",
        name=name,
        func=func,
        grad=grad,
        sup_norm=sup_norm,
        grad_sup_norm=grad_sup_norm,
        norms_estimated=estimated,
        dim=dim,
    )


def random_field(seed: int, dim: int = 2) -> VelocityField:
    return VelocityField(kind="random", name="random", seed=int(seed), dim=dim)


# --- catalog ---------------------------------------------------------------


def _paper_smooth() -> VelocityField:
    # s(x, y) = sin(pi x) sin(2 pi y) applied to both components
    pi = math.pi

    def func(x):
        s = np.sin(pi * x[..., 0]) * np.sin(2 * pi * x[..., 1])
        return np.stack([s, s], axis=-1)

    def grad(x):
        gx = pi * np.cos(pi * x[..., 0]) * np.sin(2 * pi * x[..., 1])
        gy = 2 * pi * np.sin(pi * x[..., 0]) * np.cos(2 * pi * x[..., 1])
        row = np.stack([gx, gy], axis=-1)
        return np.stack([row, row], axis=-2)

    # Jacobian is (1,1)^T g^T, so ||.||_2 = sqrt(2)|g| with max |g| = 2 pi at x = 1/2, y = 0
    return VelocityField(
        kind="analytic",
        name="paper-smooth",
        func=func,
        grad=grad,
        sup_norm=math.sqrt(2.0),
        grad_sup_norm=2.0 * math.sqrt(2.0) * pi,
    )


def _zero() -> VelocityField:
    return VelocityField(
        kind="analytic",
        name="zero",
        func=lambda x: np.zeros_like(np.asarray(x, dtype=float)),
        grad=lambda x: np.zeros(np.shape(x) + (np.shape(x)[-1],)),
        sup_norm=0.0,
        grad_sup_norm=0.0,
    )


FIELD_CATALOG: dict[str, Callable[[], VelocityField]] = {
    "paper-smooth": _paper_smooth,
    "zero": _zero,
}


def field_from_spec(spec: dict) -> VelocityField:
    """Build a field from ``{"kind": "analytic", "name": ...}`` or
    ``{"kind": "random", "seed": ...}``."""
    kind = spec.get("kind")
    if kind == "analytic":
        name = spec.get("name")
        if name not in FIELD_CATALOG:
            raise ValueError(f"unknown analytic field {name!r}; known: {sorted(FIELD_CATALOG)}")
        return FIELD_CATALOG[name]()
    if kind == "random":
        if "seed" not in spec:
            raise ValueError("random velocity needs a seed")
        return random_field(int(spec["seed"]))
    raise ValueError(f"unknown velocity kind {kind!r}")


# --- sampling and deformation ---------------------------------------------


def random_generator(seed: int) -> np.random.Generator:
    """Counter-based Philox4x64 stream keyed by the 64-bit ``seed``."""
    return np.random.Generator(np.random.Philox(key=int(seed) & (2**64 - 1)))


def sample_nodal_velocity(mesh: SimplicialMesh, vf: VelocityField) -> np.ndarray:
    """Nodal velocities ``X(x_i)``; zero on boundary vertices.

    Random fields draw every component of every vertex independently and
    uniformly from ``(-1, 1)`` in vertex order, then pin the boundary.
    """
    d = mesh.dim
    if vf.kind == "analytic":
        v = np.array(vf.func(mesh.vertices), dtype=float).reshape(mesh.n_vertices, d)
    elif vf.kind == "random":
        rng = random_generator(vf.seed)
        v = rng.uniform(-1.0, 1.0, size=(mesh.n_vertices, d))
    else:
        raise ValueError(f"unknown velocity kind {vf.kind!r}")
    v[mesh.boundary] = 0.0
    return v


def deform_mesh(mesh: SimplicialMesh, v: np.ndarray, t: float) -> SimplicialMesh:
    """Move vertex ``i`` to ``x_i + t v_i`` keeping connectivity.

    Raises :class:`InvertedElementError` naming the first element whose
    orientation flips.
    """
    if t < 0:
        raise ValueError("t must be nonnegative")
    if t == 0:
        return mesh
    v = np.asarray(v, dtype=float).reshape(mesh.vertices.shape)
    return SimplicialMesh(mesh.vertices + t * v, mesh.elements, mesh.boundary)


@dataclass(frozen=True)
class ElementDeformation:
    edot: np.ndarray
    S: np.ndarray
    div_xdot: float


def element_deformations(mesh: SimplicialMesh, v: np.ndarray):
    """Batched ``(Edot, S = Edot E^{-1}, div X_h)`` over all elements."""
    v = np.asarray(v, dtype=float).reshape(mesh.vertices.shape)
    ve = v[mesh.elements]
    edot = np.swapaxes(ve[:, 1:, :] - ve[:, :1, :], 1, 2)
    S = edot @ mesh.geometry.inv
    div = np.trace(S, axis1=1, axis2=2)
    return edot, S, div


def element_deformation(mesh: SimplicialMesh, v: np.ndarray, k: int) -> ElementDeformation:
    if not 0 <= k < mesh.n_elements:
        raise IndexError(f"element index {k} out of range")
    v = np.asarray(v, dtype=float).reshape(mesh.vertices.shape)
    ve = v[mesh.elements[k]]
    edot = (ve[1:] - ve[0]).T
    S = edot @ mesh.geometry.inv[k]
    return ElementDeformation(edot=edot, S=S, div_xdot=float(np.trace(S)))


def deformation_jacobian(mesh0: SimplicialMesh, mesh_t: SimplicialMesh, k: int):
    """Jacobian ``E_{K(t)} E_{K(0)}^{-1}`` of the affine map ``K(0) -> K(t)``
    and its determinant."""
    if mesh0.elements.shape != mesh_t.elements.shape or not np.array_equal(
        mesh0.elements, mesh_t.elements
    ):
        raise MeshError("meshes do not share connectivity")
    J = mesh_t.geometry.edge_matrix[k] @ mesh0.geometry.inv[k]
    return J, float(np.linalg.det(J))


# --- lemma report ----------------------------------------------------------


@dataclass(frozen=True)
class LemmaReport:
    """Per-element norms of the deformation quantities and the bounds they
    are expected to satisfy. Arrays run over elements; ``None`` means the
    bound needs a gradient norm that the field does not have.
    """

    inv_norm: np.ndarray  # ||E_K^{-1}||_2
    edot_norm: np.ndarray  # ||Edot_K||_2
    div_abs: np.ndarray  # |div X_h| on K
    inv_bound: np.ndarray  # sqrt(d)/a_K
    edot_smooth_bound: Optional[np.ndarray]  # sqrt(d) h_K ||grad X||
    product_smooth_bound: Optional[np.ndarray]  # d h_K/a_K ||grad X||
    div_smooth_bound: Optional[float]  # d max(h_K/a_K) ||grad X||
    edot_nonsmooth_bound: np.ndarray  # sqrt(2d) ||X||
    edot_nonsmooth_bound_safe: np.ndarray  # 2 sqrt(d) ||X||
    product_nonsmooth_bound: np.ndarray  # d sqrt(2)/a_K ||X||
    product_nonsmooth_bound_safe: np.ndarray  # 2d/a_K ||X||
    div_nonsmooth_bound: float  # (d+1)/min a_K ||X||
    nodal_sup: float  # max_i |x_dot_i|
    sup_norm: float

    def checks(self, rtol: float = 1e-12) -> dict[str, np.ndarray]:
        """Boolean arrays, one per inequality, true where it holds."""
        slack = 1.0 + rtol
        prod = self.edot_norm * self.inv_norm
        out = {
            "inv_norm": self.inv_norm <= self.inv_bound * slack,
            "nodal_sup": np.array([self.nodal_sup <= self.sup_norm * slack]),
            "div_nonsmooth": self.div_abs <= self.div_nonsmooth_bound * slack,
            "edot_nonsmooth_safe": self.edot_norm <= self.edot_nonsmooth_bound_safe * slack,
            "product_nonsmooth_safe": prod <= self.product_nonsmooth_bound_safe * slack,
        }
        if self.edot_smooth_bound is not None:
            out["edot_smooth"] = self.edot_norm <= self.edot_smooth_bound * slack
            out["product_smooth"] = prod <= self.product_smooth_bound * slack
            out["div_smooth"] = self.div_abs <= self.div_smooth_bound * slack
        return out

    def nonsmooth_sharp_checks(self, rtol: float = 1e-12) -> dict[str, np.ndarray]:
        """The ``sqrt(2d)`` / ``d sqrt(2)`` constants; these can fail when
        neighbouring velocities point in opposite directions."""
        slack = 1.0 + rtol
        prod = self.edot_norm * self.inv_norm
        return {
            "edot_nonsmooth": self.edot_norm <= self.edot_nonsmooth_bound * slack,
            "product_nonsmooth": prod <= self.product_nonsmooth_bound * slack,
        }

    def violations(self, rtol: float = 1e-12) -> dict[str, int]:
        return {k: int((~v).sum()) for k, v in self.checks(rtol).items()}


def lemma_bounds_report(mesh: SimplicialMesh, v: np.ndarray, vf: VelocityField) -> LemmaReport:
    d = mesh.dim
    g = mesh.geometry
    edot, _, div = element_deformations(mesh, v)
    inv_norm = np.linalg.norm(g.inv, ord=2, axis=(1, 2))
    edot_norm = np.linalg.norm(edot, ord=2, axis=(1, 2))
    nodal_sup = float(np.linalg.norm(v, axis=1).max()) if len(v) else 0.0
    sup = nodal_sup if vf.sup_norm is None else float(vf.sup_norm)
    h, a = g.diameter, g.min_height
    gs = vf.grad_sup_norm
    return LemmaReport(
        inv_norm=inv_norm,
        edot_norm=edot_norm,
        div_abs=np.abs(div),
        inv_bound=math.sqrt(d) / a,
        edot_smooth_bound=None if gs is None else math.sqrt(d) * h * gs,
        product_smooth_bound=None if gs is None else d * h / a * gs,
        div_smooth_bound=None if gs is None else float(d * (h / a).max() * gs),
        edot_nonsmooth_bound=np.full(len(a), math.sqrt(2 * d) * sup),
        edot_nonsmooth_bound_safe=np.full(len(a), 2 * math.sqrt(d) * sup),
        product_nonsmooth_bound=d * math.sqrt(2) / a * sup,
        product_nonsmooth_bound_safe=2 * d / a * sup,
        div_nonsmooth_bound=float((d + 1) / a.min() * sup),
        nodal_sup=nodal_sup,
        sup_norm=sup,
    )
