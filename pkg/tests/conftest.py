import math
import sys

import numpy as np
import pytest

from meshsens.femcore import Coefficients
from meshsens.mesh import SimplicialMesh, build_structured_mesh
from meshsens.velocity import analytic_field


def point_to_facet_distance(coords, i):
    """Distance from vertex ``i`` to the affine hull of the opposite facet,
    by least-squares projection (independent of basis gradients)."""
    coords = np.asarray(coords, dtype=float)
    p = coords[i]
    facet = np.delete(coords, i, axis=0)
    if len(facet) == 1:
        return float(np.linalg.norm(p - facet[0]))
    B = (facet[1:] - facet[0]).T
    coef, *_ = np.linalg.lstsq(B, p - facet[0], rcond=None)
    return float(np.linalg.norm(p - facet[0] - B @ coef))


def random_simplex(rng, d, min_quality=0.05):
    while True:
        x = rng.uniform(-1, 1, size=(d + 1, d))
        E = (x[1:] - x[0]).T
        det = np.linalg.det(E)
        h = max(np.linalg.norm(x[i] - x[j]) for i in range(d + 1) for j in range(i))
        if abs(det) > min_quality * h**d:
            if det < 0:
                x[[0, 1]] = x[[1, 0]]
            return x


def single_element_mesh(coords):
    """One simplex with every vertex movable (harness mode)."""
    coords = np.asarray(coords, dtype=float)
    d = coords.shape[1]
    return SimplicialMesh(coords, [list(range(d + 1))], np.ones(d + 1, dtype=bool))


def quadratic_field(rng, d, box=1.0):
    """Random X_i(x) = c_i + A_ij x_j + Q_ijk x_j x_k with sup-norm upper
    bounds over the box [-box, box]^d from the coefficients."""
    c = rng.normal(size=d)
    A = rng.normal(size=(d, d))
    Q = rng.normal(size=(d, d, d)) * 0.5
    Q = (Q + np.swapaxes(Q, 1, 2)) / 2
    r = box * math.sqrt(d)
    qf = math.sqrt((Q**2).sum())
    sup = np.linalg.norm(c) + np.linalg.norm(A, "fro") * r + qf * r * r
    gsup = np.linalg.norm(A, "fro") + 2 * qf * r
    return analytic_field(
        lambda x: c + x @ A.T + np.einsum("ijk,...j,...k->...i", Q, x, x),
        lambda x: A + 2 * np.einsum("ijk,...k->...ij", Q, x),
        name="quadratic",
        sup_norm=float(sup),
        grad_sup_norm=float(gsup),
        dim=d,
    )


def poly_coefficients(rng):
    """Affine a, b, c and quadratic f with matching gradients, so that every
    integrand in the sensitivity groups is a polynomial of degree <= 4."""
    ga, gc = rng.normal(size=2) * 0.1, rng.normal(size=2) * 0.5
    B = rng.normal(size=(2, 2))
    Q = rng.normal(size=(2, 2))
    Q = Q + Q.T
    return Coefficients(
        a=lambda x: 2.0 + x @ ga,
        b=lambda x: np.array([1.0, -0.5]) + x @ B.T,
        c=lambda x: 3.0 + x @ gc,
        f=lambda x: 1.0 + np.einsum("...i,ij,...j->...", x, Q, x),
        grad_a=lambda x: np.broadcast_to(ga, x.shape),
        grad_b=lambda x: np.broadcast_to(B, x.shape + (2,)),
        grad_c=lambda x: np.broadcast_to(gc, x.shape),
        grad_f=lambda x: 2 * x @ Q,
        a0=1.5,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def mesh8():
    return build_structured_mesh(8)


@pytest.fixture
def ref_triangle():
    return np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
