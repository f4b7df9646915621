"""Simplicial meshes, element geometry from edge matrices, and mesh file I/O.

Elements are stored with positive orientation, so ``det(E_K) > 0`` holds for
every element of a constructed mesh. Geometry is computed for all elements at
once and cached on the mesh; meshes are treated as immutable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from itertools import combinations
from pathlib import Path

import numpy as np

__all__ = [
    "MeshError",
    "DegenerateElementError",
    "InvertedElementError",
    "MeshFormatError",
    "SimplicialMesh",
    "ElementGeometry",
    "MeshGeometry",
    "MeshQuality",
    "build_structured_mesh",
    "element_geometry",
    "simplex_geometry",
    "mesh_quality",
    "read_mesh",
    "write_mesh",
]

# relative to h^d; below this an element is considered flat
_DEGENERACY_RTOL = 1e-13


class MeshError(ValueError):
    pass


class DegenerateElementError(MeshError):
    def __init__(self, element: int, det: float):
        self.element = element
        self.det = det
        super().__init__(f"element {element} is degenerate (det(E_K) = {det:.3e})")


class InvertedElementError(MeshError):
    def __init__(self, element: int, det: float):
        self.element = element
        self.det = det
        super().__init__(f"element {element} is inverted (det(E_K) = {det:.3e})")


class MeshFormatError(MeshError):
    pass


@dataclass(frozen=True)
class ElementGeometry:
    """Geometry of a single simplex.

    ``inv_transpose`` holds the gradients of the barycentric basis functions
    attached to vertices 1..d as columns; ``grad_phi0`` is the gradient for
    vertex 0.
    """

    edge_matrix: np.ndarray
    inv_transpose: np.ndarray
    grad_phi0: np.ndarray
    volume: float
    diameter: float
    min_height: float

    @property
    def grad_phi(self) -> np.ndarray:
        """All ``d+1`` basis gradients as rows."""
        return np.vstack([self.grad_phi0, self.inv_transpose.T])


@dataclass(frozen=True)
class MeshGeometry:
    """Batched element geometry; leading axis runs over elements."""

    edge_matrix: np.ndarray  # (ne, d, d)
    det: np.ndarray  # (ne,)
    inv: np.ndarray  # (ne, d, d), E_K^{-1}
    grad_phi: np.ndarray  # (ne, d+1, d), row i = grad of phi_i
    volume: np.ndarray  # (ne,)
    diameter: np.ndarray  # (ne,) longest edge
    min_height: np.ndarray  # (ne,)


def _edge_matrices(vertices: np.ndarray, elements: np.ndarray) -> np.ndarray:
    x = vertices[elements]  # (ne, d+1, d)
    return np.swapaxes(x[:, 1:, :] - x[:, :1, :], 1, 2)


def _longest_edges(vertices: np.ndarray, elements: np.ndarray) -> np.ndarray:
    x = vertices[elements]
    nloc = elements.shape[1]
    h = np.zeros(len(elements))
    for i, j in combinations(range(nloc), 2):
        h = np.maximum(h, np.linalg.norm(x[:, i] - x[:, j], axis=1))
    return h


def _signed_dets(vertices: np.ndarray, elements: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    E = _edge_matrices(vertices, elements)
    det = np.linalg.det(E) if len(E) else np.zeros(0)
    scale = _longest_edges(vertices, elements) ** vertices.shape[1]
    return det, scale


def _compute_geometry(vertices: np.ndarray, elements: np.ndarray) -> MeshGeometry:
    d = vertices.shape[1]
    E = _edge_matrices(vertices, elements)
    det, scale = _signed_dets(vertices, elements)
    flat = np.abs(det) <= _DEGENERACY_RTOL * scale
    if flat.any():
        k = int(np.flatnonzero(flat)[0])
        raise DegenerateElementError(k, float(det[k]))
    inv = np.linalg.inv(E)
    # rows of E^{-1} are the gradients of phi_1..phi_d
    grads = np.empty((len(elements), d + 1, d))
    grads[:, 1:, :] = inv
    grads[:, 0, :] = -inv.sum(axis=1)
    min_height = 1.0 / np.linalg.norm(grads, axis=2).max(axis=1)
    return MeshGeometry(
        edge_matrix=E,
        det=det,
        inv=inv,
        grad_phi=grads,
        volume=det / math.factorial(d),
        diameter=_longest_edges(vertices, elements),
        min_height=min_height,
    )


def boundary_facets(elements: np.ndarray) -> np.ndarray:
    """Facets (sorted vertex tuples) that belong to exactly one element."""
    nloc = elements.shape[1]
    facets = np.concatenate(
        [np.delete(elements, i, axis=1) for i in range(nloc)], axis=0
    )
    facets = np.sort(facets, axis=1)
    uniq, counts = np.unique(facets, axis=0, return_counts=True)
    return uniq[counts == 1]


class SimplicialMesh:
    """A conforming simplicial mesh in ``d`` dimensions.

    Parameters
    ----------
    vertices : array_like, shape (nv, d)
    elements : array_like of int, shape (ne, d+1)
    boundary : array_like of bool, shape (nv,), optional
        Boundary flags. When omitted they are derived from the topological
        boundary of the element union.
    reorient : bool
        Swap two vertices of every negatively oriented element instead of
        raising :class:`InvertedElementError`.
    """

    def __init__(self, vertices, elements, boundary=None, *, reorient: bool = False):
        vertices = np.array(vertices, dtype=float)
        elements = np.array(elements, dtype=np.int64)
        if vertices.ndim == 1:
            vertices = vertices[:, None]
        d = vertices.shape[1]
        if d not in (1, 2, 3):
            raise MeshError(f"unsupported dimension {d}")
        if elements.ndim != 2 or elements.shape[1] != d + 1:
            raise MeshError(f"elements must have {d + 1} vertices each")
        nv = len(vertices)
        bad = (elements < 0) | (elements >= nv)
        if bad.any():
            k = int(np.flatnonzero(bad.any(axis=1))[0])
            raise MeshError(
                f"element {k} references vertex index out of range [0, {nv}): "
                f"{elements[k].tolist()}"
            )
        srt = np.sort(elements, axis=1)
        dup = (srt[:, 1:] == srt[:, :-1]).any(axis=1)
        if dup.any():
            k = int(np.flatnonzero(dup)[0])
            raise DegenerateElementError(k, 0.0)
        if not np.isfinite(vertices).all():
            raise MeshError("non-finite vertex coordinates")

        det, scale = _signed_dets(vertices, elements)
        flat = np.abs(det) <= _DEGENERACY_RTOL * scale
        if flat.any():
            k = int(np.flatnonzero(flat)[0])
            raise DegenerateElementError(k, float(det[k]))
        neg = det < 0
        if neg.any():
            if not reorient:
                k = int(np.flatnonzero(neg)[0])
                raise InvertedElementError(k, float(det[k]))
            elements = elements.copy()
            elements[neg, 0], elements[neg, 1] = elements[neg, 1], elements[neg, 0].copy()

        topo = np.zeros(nv, dtype=bool)
        topo[boundary_facets(elements).ravel()] = True
        if boundary is None:
            boundary = topo
        else:
            boundary = np.array(boundary, dtype=bool)
            if boundary.shape != (nv,):
                raise MeshError("boundary flags must have one entry per vertex")
            missing = topo & ~boundary
            if missing.any():
                raise MeshError(
                    f"vertex {int(np.flatnonzero(missing)[0])} lies on the "
                    "boundary but is not flagged"
                )

        self.vertices = vertices
        self.elements = elements
        self.boundary = boundary
        for arr in (self.vertices, self.elements, self.boundary):
            arr.setflags(write=False)

    @property
    def dim(self) -> int:
        return self.vertices.shape[1]

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    @cached_property
    def interior(self) -> np.ndarray:
        """Indices of interior (movable, unknown-carrying) vertices."""
        return np.flatnonzero(~self.boundary)

    @cached_property
    def geometry(self) -> MeshGeometry:
        return _compute_geometry(self.vertices, self.elements)

    def with_vertices(self, vertices) -> "SimplicialMesh":
        """Same connectivity and flags, new coordinates (validated)."""
        return SimplicialMesh(vertices, self.elements, self.boundary)

    def __repr__(self):
        return (
            f"SimplicialMesh(dim={self.dim}, n_vertices={self.n_vertices}, "
            f"n_elements={self.n_elements})"
        )


def simplex_geometry(coords) -> ElementGeometry:
    """Geometry of one simplex given its ``(d+1, d)`` vertex coordinates.

    Raises :class:`DegenerateElementError` (element index 0) for a flat
    simplex. Negative orientation is allowed here; the volume is ``|det|/d!``.
    """
    coords = np.asarray(coords, dtype=float)
    if coords.ndim == 1:
        coords = coords[:, None]
    d = coords.shape[1]
    E = (coords[1:] - coords[0]).T
    det = float(np.linalg.det(E))
    h = max(np.linalg.norm(coords[i] - coords[j]) for i, j in combinations(range(d + 1), 2))
    if abs(det) <= _DEGENERACY_RTOL * h**d:
        raise DegenerateElementError(0, det)
    inv_t = np.linalg.inv(E).T
    g0 = -inv_t.sum(axis=1)
    norms = np.concatenate([[np.linalg.norm(g0)], np.linalg.norm(inv_t, axis=0)])
    return ElementGeometry(
        edge_matrix=E,
        inv_transpose=inv_t,
        grad_phi0=g0,
        volume=abs(det) / math.factorial(d),
        diameter=float(h),
        min_height=float(1.0 / norms.max()),
    )


def element_geometry(mesh: SimplicialMesh, k: int) -> ElementGeometry:
    if not 0 <= k < mesh.n_elements:
        raise IndexError(f"element index {k} out of range")
    g = mesh.geometry
    return ElementGeometry(
        edge_matrix=g.edge_matrix[k].copy(),
        inv_transpose=g.inv[k].T.copy(),
        grad_phi0=g.grad_phi[k, 0].copy(),
        volume=float(g.volume[k]),
        diameter=float(g.diameter[k]),
        min_height=float(g.min_height[k]),
    )


def build_structured_mesh(n: int) -> SimplicialMesh:
    """Unit square split into ``n x n`` cells, each cut into four triangles
    by its diagonals.

    Grid vertices come first (row-major, ``j*(n+1) + i``), followed by one
    center vertex per cell.
    """
    if int(n) != n or n < 1:
        raise ValueError(f"N must be a positive integer, got {n!r}")
    n = int(n)
    s = np.linspace(0.0, 1.0, n + 1)
    X, Y = np.meshgrid(s, s)
    grid = np.column_stack([X.ravel(), Y.ravel()])
    c = (s[:-1] + s[1:]) / 2
    CX, CY = np.meshgrid(c, c)
    centers = np.column_stack([CX.ravel(), CY.ravel()])
    vertices = np.vstack([grid, centers])

    j, i = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    i, j = i.ravel(), j.ravel()
    p00 = j * (n + 1) + i
    p10 = p00 + 1
    p01 = p00 + (n + 1)
    p11 = p01 + 1
    ctr = (n + 1) ** 2 + j * n + i
    tris = np.stack(
        [
            np.column_stack([p00, p10, ctr]),
            np.column_stack([p10, p11, ctr]),
            np.column_stack([p11, p01, ctr]),
            np.column_stack([p01, p00, ctr]),
        ],
        axis=1,
    ).reshape(-1, 3)

    on_edge = np.isclose(vertices, 0.0) | np.isclose(vertices, 1.0)
    return SimplicialMesh(vertices, tris, on_edge.any(axis=1))


@dataclass(frozen=True)
class MeshQuality:
    max_aspect: float
    min_height: float
    max_diameter: float

    @property
    def kappa(self) -> float:
        """Smallest regularity constant valid for this mesh."""
        return self.max_aspect


def mesh_quality(mesh: SimplicialMesh) -> MeshQuality:
    g = mesh.geometry
    return MeshQuality(
        max_aspect=float((g.diameter / g.min_height).max()),
        min_height=float(g.min_height.min()),
        max_diameter=float(g.diameter.max()),
    )


# --- ASCII I/O -------------------------------------------------------------

_MAGIC = "meshsens"
_VERSION = "v1"


def write_mesh(mesh: SimplicialMesh, path) -> None:
    """Write ``mesh`` in the ``meshsens v1`` ASCII format.

    Coordinates are written with ``repr`` which round-trips doubles exactly.
    """
    lines = [f"{_MAGIC} {_VERSION} {mesh.dim} {mesh.n_vertices} {mesh.n_elements}"]
    lines.append("# vertices: coordinates, boundary flag")
    for x, b in zip(mesh.vertices, mesh.boundary):
        lines.append(" ".join(repr(float(v)) for v in x) + f" {int(b)}")
    lines.append("# elements: zero-based vertex indices")
    for e in mesh.elements:
        lines.append(" ".join(str(int(v)) for v in e))
    Path(path).write_text("\n".join(lines) + "\n")


def _parse_float(tok: str) -> float:
    try:
        return float(tok)
    except ValueError:
        return float.fromhex(tok)


def read_mesh(path, *, reorient: bool = False) -> SimplicialMesh:
    """Read a mesh written by :func:`write_mesh`.

    Inverted elements raise :class:`InvertedElementError` unless ``reorient``
    is set.
    """
    rows = []
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            rows.append(line.split())
    if not rows:
        raise MeshFormatError("empty mesh file")
    head = rows[0]
    if len(head) != 5 or head[0] != _MAGIC or head[1] != _VERSION:
        raise MeshFormatError(f"bad header: {' '.join(head)!r}")
    try:
        d, nv, ne = (int(v) for v in head[2:])
    except ValueError as exc:
        raise MeshFormatError(f"bad header: {' '.join(head)!r}") from exc
    if d not in (1, 2, 3) or nv < 0 or ne < 0:
        raise MeshFormatError(f"bad header: {' '.join(head)!r}")
    body = rows[1:]
    if len(body) != nv + ne:
        raise MeshFormatError(f"expected {nv + ne} data lines, found {len(body)}")

    vertices = np.empty((nv, d))
    boundary = np.empty(nv, dtype=bool)
    for i, row in enumerate(body[:nv]):
        if len(row) != d + 1 or row[-1] not in ("0", "1"):
            raise MeshFormatError(f"vertex line {i}: expected {d} coordinates and a 0/1 flag")
        try:
            vertices[i] = [_parse_float(t) for t in row[:d]]
        except ValueError as exc:
            raise MeshFormatError(f"vertex line {i}: {exc}") from exc
        boundary[i] = row[-1] == "1"

    elements = np.empty((ne, d + 1), dtype=np.int64)
    for k, row in enumerate(body[nv:]):
        if len(row) != d + 1:
            raise MeshFormatError(f"element line {k}: expected {d + 1} indices")
        try:
            elements[k] = [int(t) for t in row]
        except ValueError as exc:
            raise MeshFormatError(f"element line {k}: {exc}") from exc
    return SimplicialMesh(vertices, elements, boundary, reorient=reorient)
