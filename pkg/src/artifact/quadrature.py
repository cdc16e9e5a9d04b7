"""Quadrature rules on the reference triangle, tetrahedron and unit sphere.

Points are returned in barycentric coordinates so that they can be mapped
onto any affine simplex.  Weights are normalised to sum to the reference
measure (1/2 for the triangle, 1/6 for the tetrahedron, 4*pi for S^2).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi, roots_legendre


@dataclass(frozen=True)
class SimplexRule:
    bary: np.ndarray  # (nq, d+1)
    weights: np.ndarray  # (nq,)
    degree: int


@dataclass(frozen=True)
class SphereQuadrature:
    """Nodes on S^2 with positive weights summing to 4*pi."""

    nodes: np.ndarray  # (k, 3) unit vectors
    weights: np.ndarray  # (k,)
    degree: int

    def __post_init__(self):
        if np.any(self.weights <= 0):
            raise ValueError("sphere weights must be positive")


def _gauss_jacobi01(n: int, alpha: float) -> tuple[np.ndarray, np.ndarray]:
    # nodes on [0, 1] for the weight (1 - x)^alpha
    if alpha == 0:
        x, w = roots_legendre(n)
    else:
        x, w = roots_jacobi(n, alpha, 0.0)
    return (1.0 + x) / 2.0, w / 2.0 ** (alpha + 1)


@lru_cache(maxsize=None)
def collapsed_triangle(degree: int) -> SimplexRule:
    """Duffy-collapsed Gauss rule, exact to the requested polynomial degree."""
    n = degree // 2 + 1
    a, wa = _gauss_jacobi01(n, 1.0)
    b, wb = _gauss_jacobi01(n, 0.0)
    x = np.repeat(a, n)
    y = np.outer(1.0 - a, b).ravel()
    w = np.outer(wa, wb).ravel()
    bary = np.column_stack([1.0 - x - y, x, y])
    return SimplexRule(bary, w, 2 * n - 1)


@lru_cache(maxsize=None)
def collapsed_tet(degree: int) -> SimplexRule:
    n = degree // 2 + 1
    a, wa = _gauss_jacobi01(n, 2.0)
    b, wb = _gauss_jacobi01(n, 1.0)
    c, wc = _gauss_jacobi01(n, 0.0)
    A, B, C = np.meshgrid(a, b, c, indexing="ij")
    W = wa[:, None, None] * wb[None, :, None] * wc[None, None, :]
    x = A
    y = B * (1.0 - A)
    z = C * (1.0 - A) * (1.0 - B)
    x, y, z, W = x.ravel(), y.ravel(), z.ravel(), W.ravel()
    bary = np.column_stack([1.0 - x - y - z, x, y, z])
    return SimplexRule(bary, W, 2 * n - 1)


@lru_cache(maxsize=None)
def tet_rule(degree: int = 2) -> SimplexRule:
    """Tetrahedron rule; the default is the symmetric 4-point degree-2 rule."""
    if degree <= 1:
        return SimplexRule(np.full((1, 4), 0.25), np.array([1.0 / 6.0]), 1)
    if degree == 2:
        a, b = 0.5854101966249685, 0.1381966011250105
        bary = np.full((4, 4), b)
        np.fill_diagonal(bary, a)
        return SimplexRule(bary, np.full(4, 1.0 / 24.0), 2)
    return collapsed_tet(degree)


@lru_cache(maxsize=None)
def tri_rule(degree: int = 4) -> SimplexRule:
    """Triangle rule; the default is the symmetric 6-point degree-4 rule."""
    if degree <= 1:
        return SimplexRule(np.full((1, 3), 1.0 / 3.0), np.array([0.5]), 1)
    if degree <= 4:
        a1, w1 = 0.445948490915965, 0.223381589678011
        a2, w2 = 0.091576213509771, 0.109951743655322
        pts = []
        for a in (a1, a2):
            c = 1.0 - 2.0 * a
            pts += [(c, a, a), (a, c, a), (a, a, c)]
        w = np.array([w1] * 3 + [w2] * 3) / 2.0
        return SimplexRule(np.array(pts), w, 4)
    return collapsed_triangle(degree)


@lru_cache(maxsize=None)
def sphere_rule(degree: int = 47) -> SphereQuadrature:
    """Product Gauss-Legendre (in z) times trapezoid (in azimuth) rule.

    Integrates every polynomial of total degree <= ``degree`` exactly.
    """
    nz = degree // 2 + 1
    nphi = 2 * nz
    z, wz = roots_legendre(nz)
    phi = 2.0 * np.pi * np.arange(nphi) / nphi
    Z, P = np.meshgrid(z, phi, indexing="ij")
    r = np.sqrt(1.0 - Z ** 2)
    nodes = np.column_stack([(r * np.cos(P)).ravel(), (r * np.sin(P)).ravel(), Z.ravel()])
    weights = np.repeat(wz, nphi) * (2.0 * np.pi / nphi)
    return SphereQuadrature(nodes, weights, 2 * nz - 1)
