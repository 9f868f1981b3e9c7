"""Gauss rules on the reference triangle and the unit interval."""
from dataclasses import dataclass
from functools import lru_cache

import numpy as np


@dataclass(frozen=True)
class QuadratureRule:
    """Quadrature rule on the reference triangle ``(0,0), (1,0), (0,1)``.

    Attributes:
        points: ``(Q, 3)`` barycentric coordinates.
        weights: ``(Q,)`` weights normalized to sum to 1, so that
            ``integral over T = |T| * sum(weights * values)``.
        degree: polynomial degree integrated exactly.
    """
    points: np.ndarray
    weights: np.ndarray
    degree: int

    @property
    def reference_points(self) -> np.ndarray:
        """Cartesian coordinates on the reference triangle, ``(Q, 2)``."""
        return self.points[:, 1:]

    def __len__(self) -> int:
        return len(self.weights)


@dataclass(frozen=True)
class LineRule:
    """Gauss-Legendre rule on ``[0, 1]`` with weights summing to 1."""
    points: np.ndarray
    weights: np.ndarray
    degree: int

    def __len__(self) -> int:
        return len(self.weights)


def _gauss_unit_interval(n: int):
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


@lru_cache(maxsize=None)
def triangle_rule(degree: int) -> QuadratureRule:
    """Collapsed Gauss rule exact for polynomials of total degree ``degree``.

    The square ``[0,1]^2`` is mapped onto the triangle by ``(s, t) -> (s, t(1-s))``;
    the Jacobian ``1 - s`` raises the degree in ``s`` by one, hence
    ``ceil((degree + 2) / 2)`` points per direction.
    """
    if degree < 0:
        raise ValueError(f"quadrature degree must be non-negative, got {degree}")
    n = (degree + 3) // 2
    s, ws = _gauss_unit_interval(n)
    t, wt = _gauss_unit_interval(n)
    ss, tt = np.meshgrid(s, t, indexing="ij")
    x = ss.ravel()
    y = (tt * (1.0 - ss)).ravel()
    weights = (np.outer(ws, wt) * (1.0 - ss)).ravel() * 2.0
    points = np.column_stack((1.0 - x - y, x, y))
    points.setflags(write=False)
    weights.setflags(write=False)
    return QuadratureRule(points=points, weights=weights, degree=degree)


@lru_cache(maxsize=None)
def line_rule(degree: int) -> LineRule:
    """Gauss-Legendre rule on ``[0, 1]`` exact up to ``degree``."""
    if degree < 0:
        raise ValueError(f"quadrature degree must be non-negative, got {degree}")
    points, weights = _gauss_unit_interval(degree // 2 + 1)
    points.setflags(write=False)
    weights.setflags(write=False)
    return LineRule(points=points, weights=weights, degree=degree)


def default_quadrature_degree(p: int) -> int:
    """Exactness degree ``max(4p, 2p+2)`` used for assembly and estimation."""
    return max(4 * p, 2 * p + 2)
