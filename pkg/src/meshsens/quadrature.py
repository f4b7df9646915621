"""Quadrature rules on the reference simplex in barycentric form.

A rule is a pair ``(bary, weights)``: ``bary`` has shape ``(nq, d+1)`` and
``weights`` sum to one, so ``sum(w * f(x_q)) * |K|`` approximates the integral
over an element ``K``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from itertools import product

import numpy as np
from scipy.special import roots_jacobi

__all__ = ["QuadratureRule", "quadrature_rule", "conical_product_rule", "DEFAULT_DEGREE"]

DEFAULT_DEGREE = 4


@dataclass(frozen=True)
class QuadratureRule:
    bary: np.ndarray
    weights: np.ndarray
    degree: int

    @property
    def dim(self) -> int:
        return self.bary.shape[1] - 1

    def __len__(self):
        return len(self.weights)


def _dunavant4() -> QuadratureRule:
    # symmetric 6-point rule, exact for degree 4
    a1, w1 = 0.445948490915965, 0.223381589678011
    a2, w2 = 0.091576213509771, 0.109951743655322
    pts, wts = [], []
    for a, w in ((a1, w1), (a2, w2)):
        b = 1.0 - 2.0 * a
        pts += [(b, a, a), (a, b, a), (a, a, b)]
        wts += [w] * 3
    wts = np.array(wts)
    return QuadratureRule(np.array(pts), wts / wts.sum(), 4)


@lru_cache(maxsize=None)
def conical_product_rule(d: int, degree: int) -> QuadratureRule:
    """Collapsed-coordinate Gauss-Jacobi product rule exact to ``degree``.

    Works in any dimension and for any degree; used for d != 2 and as a
    high-order reference when checking other rules.
    """
    n = max(1, math.ceil((degree + 1) / 2))
    axes = []
    for k in range(d):
        alpha = d - 1 - k
        x, w = roots_jacobi(n, alpha, 0.0)
        axes.append(((x + 1.0) / 2.0, w / 2.0 ** (alpha + 1)))
    pts, wts = [], []
    for idx in product(range(n), repeat=d):
        t = [axes[k][0][i] for k, i in enumerate(idx)]
        w = math.prod(axes[k][1][i] for k, i in enumerate(idx))
        x = np.empty(d)
        rest = 1.0
        for k in range(d):
            x[k] = rest * t[k]
            rest *= 1.0 - t[k]
        pts.append(np.concatenate([[1.0 - x.sum()], x]))
        wts.append(w)
    wts = np.array(wts)
    return QuadratureRule(np.array(pts), wts / wts.sum(), degree)


@lru_cache(maxsize=None)
def quadrature_rule(d: int, degree: int = DEFAULT_DEGREE) -> QuadratureRule:
    """Default rule for dimension ``d`` exact for polynomials of ``degree``."""
    if d == 2 and degree == 4:
        return _dunavant4()
    return conical_product_rule(d, degree)
