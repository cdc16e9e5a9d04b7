"""Integral functionals J = int_Omega F_vol(x, u, sigma) dx + int_Gamma F_sur(x, u, sigma) dS.

Each functional returns its density and the partials with respect to
z1 = x, z2 = u and z3 = sigma at quadrature points.  A partial that is
identically zero is returned as ``None``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fem import DisplacementField, FunctionSpace, Loads, MaterialParams
from .quadrature import SphereQuadrature, sphere_rule, tet_rule, tri_rule

VOLUME = "volume"
SURFACE_U = "surface_u"
SURFACE_SIGMA = "surface_sigma"

Partials = tuple  # (F, dF/dz1, dF/dz2, dF/dz3)


# -- quadrature blocks -------------------------------------------------------------
@dataclass
class Block:
    """Quadrature points of all cells, or of a facet set traced from the owning cells."""

    cells: np.ndarray  # (r,) owning cell per row
    bary: np.ndarray  # (r, q, 4)
    w: np.ndarray  # (r, q) physical weights
    x: np.ndarray  # (r, q, 3)
    N: np.ndarray  # (r, q, nb)
    grads: np.ndarray  # (r, q, nb, 3)
    space: FunctionSpace
    facets: np.ndarray | None = None
    normal: np.ndarray | None = None  # (r, 3)

    @property
    def is_surface(self) -> bool:
        return self.facets is not None

    def field(self, coeffs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        U = coeffs[self.space.cell_nodes[self.cells]]
        val = np.einsum("rqi,rij->rqj", self.N, U)
        D = np.einsum("rqik,rij->rqjk", self.grads, U)
        return val, D

    def vh(self, nodal: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """P1 vertex interpolant V_h of corner values and its per-cell gradient."""
        Vc = nodal[self.space.mesh.corners[self.cells]]  # (r, 4, 3)
        V = np.einsum("rqa,raj->rqj", self.bary, Vc)
        DV = np.einsum("raj,rak->rjk", Vc, self.space.grad_lambda[self.cells])
        return V, np.broadcast_to(DV[:, None], V.shape + (3,))

    @property
    def tangent_projector(self) -> np.ndarray:
        n = self.normal
        P = np.eye(3) - np.einsum("ri,rj->rij", n, n)
        return np.broadcast_to(P[:, None], self.x.shape[:2] + (3, 3))

    def divergence(self, DV: np.ndarray) -> np.ndarray:
        """div V in the volume, div_Gamma V = I_Gamma : DV on facets."""
        if self.is_surface:
            return np.einsum("rqij,rqij->rq", self.tangent_projector, DV)
        return np.trace(DV, axis1=-2, axis2=-1)

    def identity(self) -> np.ndarray:
        if self.is_surface:
            return self.tangent_projector
        return np.broadcast_to(np.eye(3), self.x.shape[:2] + (3, 3))

    def scatter(self, vals: np.ndarray, grads_coef: np.ndarray | None = None) -> np.ndarray:
        """Assemble sum_q w [vals . phi_i e_a + (grads_coef grad phi_i)_a] into a (n_nodes, 3) array.

        vals: (r, q, 3); grads_coef: (r, q, 3, 3) with rows indexed by component.
        """
        out = np.zeros((self.space.n_nodes, 3))
        c = np.einsum("rq,rqi,rqa->ria", self.w, self.N, vals) if vals is not None else 0.0
        if grads_coef is not None:
            c = c + np.einsum("rq,rqak,rqik->ria", self.w, grads_coef, self.grads)
        if np.ndim(c):
            np.add.at(out, self.space.cell_nodes[self.cells], c)
        return out

    def scatter_vertices(self, b: np.ndarray | None, C: np.ndarray | None) -> np.ndarray:
        """Vertex sensitivities: d_a += sum_q w [C grad lambda_a + lambda_a b] for V_h = sum V_a lambda_a."""
        mesh = self.space.mesh
        out = np.zeros((len(mesh.points), 3))
        acc = np.zeros((len(self.cells), 4, 3))
        if b is not None:
            acc += np.einsum("rq,rqa,rqj->raj", self.w, self.bary, b)
        if C is not None:
            Cs = np.einsum("rq,rqjk->rjk", self.w, C)
            acc += np.einsum("rjk,rak->raj", Cs, self.space.grad_lambda[self.cells])
        np.add.at(out, mesh.corners[self.cells], acc)
        return out


def volume_block(space: FunctionSpace) -> Block:
    cache = space.__dict__.setdefault("_blocks", {})
    if "vol" not in cache:
        rule = tet_rule(2)
        cells = np.arange(space.mesh.n_cells)
        bary = np.broadcast_to(rule.bary, (len(cells),) + rule.bary.shape)
        N, grads = space.basis_grads(cells, np.ascontiguousarray(bary))
        w = 6.0 * space.volumes[:, None] * rule.weights[None, :]
        cache["vol"] = Block(cells, bary, w, space.map_points(cells, rule.bary), N, grads, space)
    return cache["vol"]


def surface_block(space: FunctionSpace, facets: np.ndarray) -> Block:
    facets = np.asarray(facets, dtype=np.int64)
    key = ("sur", facets.tobytes())
    cache = space.__dict__.setdefault("_blocks", {})
    if key not in cache:
        rule = tri_rule(4)
        area, normal = space.facet_geometry
        cells = space.mesh.facet_cell[facets]
        bary = space.facet_cell_bary(facets, rule.bary)
        N, grads = space.basis_grads(cells, bary)
        w = 2.0 * area[facets, None] * rule.weights[None, :]
        x = space.facet_points(facets, rule.bary)
        cache[key] = Block(cells, bary, w, x, N, grads, space, facets, normal[facets])
    return cache[key]


def stress_at(block: Block, coeffs: np.ndarray, mat: MaterialParams):
    u, Du = block.field(coeffs)
    return u, Du, mat.hooke(0.5 * (Du + np.swapaxes(Du, -1, -2)))


def facet_stress(u: DisplacementField, mat: MaterialParams, facets: np.ndarray):
    b = surface_block(u.space, facets)
    _, _, sig = stress_at(b, u.coefficients, mat)
    return sig, b.w


# -- functionals ----------------------------------------------------------------------
class Functional:
    """Base class; subclasses override ``vol`` and/or ``sur``."""

    name = "functional"
    kind = VOLUME
    has_volume = False
    has_surface = False
    state_dependent = True

    def vol(self, x, u, sigma) -> Partials:
        raise NotImplementedError

    def sur(self, x, u, sigma, n, facets) -> Partials:
        raise NotImplementedError

    def surface_facets(self, mesh) -> np.ndarray:
        return np.nonzero(mesh.neumann_mask)[0]


class VolumeFunctional(Functional):
    name = "volume"
    has_volume = True
    state_dependent = False

    def vol(self, x, u, sigma):
        return np.ones(x.shape[:-1]), None, None, None


class SurfaceAreaFunctional(Functional):
    """Area of the Neumann boundary (or of every facet)."""

    name = "area"
    kind = SURFACE_U
    has_surface = True
    state_dependent = False

    def __init__(self, all_facets: bool = True):
        self.all_facets = all_facets

    def sur(self, x, u, sigma, n, facets):
        return np.ones(x.shape[:-1]), None, None, None

    def surface_facets(self, mesh):
        return np.arange(len(mesh.facets)) if self.all_facets else super().surface_facets(mesh)


class ComplianceFunctional(Functional):
    """L(u) = int f.u dx + int_{Gamma_N} g.u dS."""

    name = "compliance"
    kind = SURFACE_U
    has_surface = True

    def __init__(self, loads: Loads):
        self.loads = loads
        self.has_volume = loads.f is not None

    def vol(self, x, u, sigma):
        f = self.loads.f
        fx = f.value(x.reshape(-1, 3)).reshape(x.shape)
        Df = f.gradient(x.reshape(-1, 3)).reshape(x.shape + (3,))
        return np.einsum("...i,...i->...", fx, u), np.einsum("...ik,...i->...k", Df, u), fx, None

    def _groups(self, mesh):
        return self.loads.traction_groups(mesh)

    def surface_facets(self, mesh):
        groups = self._groups(mesh)
        if not groups:
            return np.zeros(0, dtype=np.int64)
        return np.unique(np.concatenate([g[0] for g in groups]))

    def sur(self, x, u, sigma, n, facets):
        F = np.zeros(x.shape[:-1])
        d1 = np.zeros(x.shape)
        d2 = np.zeros(x.shape)
        for idx, data in self._current_groups:
            sel = np.isin(facets, idx)
            if not sel.any():
                continue
            xs = x[sel]
            g = data.value(xs.reshape(-1, 3)).reshape(xs.shape)
            Dg = data.gradient(xs.reshape(-1, 3)).reshape(xs.shape + (3,))
            F[sel] = np.einsum("...i,...i->...", g, u[sel])
            d1[sel] = np.einsum("...ik,...i->...k", Dg, u[sel])
            d2[sel] = g
        return F, d1, d2, None

    def bind(self, mesh):
        self._current_groups = self._groups(mesh)
        return self


class LcfFunctional(Functional):
    """J^lcf = int_Gamma N_det(sigma)^(-m) dS over Gamma_N (or the whole boundary)."""

    name = "lcf"
    kind = SURFACE_SIGMA
    has_surface = True

    def __init__(self, mat: MaterialParams, include_dirichlet: bool = False):
        from .reliability import LcfChain

        self.chain = LcfChain(mat)
        self.include_dirichlet = include_dirichlet

    def sur(self, x, u, sigma, n, facets):
        return self.chain.f_lcf(sigma), None, None, self.chain.df_lcf(sigma)

    def surface_facets(self, mesh):
        if self.include_dirichlet:
            return np.arange(len(mesh.facets))
        return super().surface_facets(mesh)


class CeramicFunctional(Functional):
    """J^cer = int_Omega (1/4pi) int_S2 (sigma_n^+/sigma_0)^m dn dx."""

    name = "cer"
    kind = VOLUME
    has_volume = True

    def __init__(self, mat: MaterialParams, quad: SphereQuadrature | None = None):
        self.mat = mat
        self.quad = quad or sphere_rule()

    def vol(self, x, u, sigma):
        from .reliability import df_cer, f_cer

        m, s0 = self.mat.m_cer, self.mat.sigma_0
        return f_cer(sigma, self.quad, m, s0), None, None, df_cer(sigma, self.quad, m, s0)


class StressMoment(Functional):
    """F_vol = sigma : A for a constant matrix A."""

    name = "stress_moment"
    has_volume = True

    def __init__(self, A: np.ndarray):
        self.A = np.asarray(A, dtype=float)

    def vol(self, x, u, sigma):
        F = np.einsum("...ij,ij->...", sigma, self.A)
        return F, None, None, np.broadcast_to(self.A, sigma.shape).copy()


class PointwiseFunctional(Functional):
    """Functional from user callbacks returning Partials tuples."""

    def __init__(self, vol=None, sur=None, kind=VOLUME, facets=None, name="custom"):
        self._vol, self._sur, self.kind, self._facets, self.name = vol, sur, kind, facets, name
        self.has_volume = vol is not None
        self.has_surface = sur is not None

    def vol(self, x, u, sigma):
        return self._vol(x, u, sigma)

    def sur(self, x, u, sigma, n, facets):
        q = np.broadcast_to(n[:, None], x.shape)
        return self._sur(x, u, sigma, q)

    def surface_facets(self, mesh):
        return super().surface_facets(mesh) if self._facets is None else np.asarray(self._facets)


def make_functional(name: str, mat: MaterialParams, loads: Loads | None = None) -> Functional:
    name = name.lower()
    if name == "lcf":
        return LcfFunctional(mat)
    if name == "cer":
        return CeramicFunctional(mat)
    if name == "volume":
        return VolumeFunctional()
    if name == "compliance":
        return ComplianceFunctional(loads or Loads())
    raise ValueError(f"unknown functional {name!r}")


# -- evaluation ------------------------------------------------------------------------------
@dataclass
class PartsAt:
    block: Block
    u: np.ndarray
    Du: np.ndarray
    sigma: np.ndarray
    F: np.ndarray
    d1: np.ndarray | None
    d2: np.ndarray | None
    d3: np.ndarray | None


def functional_parts(J: Functional, u: DisplacementField, mat: MaterialParams) -> list[PartsAt]:
    """Density and partials on the volume block and on the surface block of J."""
    space = u.space
    if isinstance(J, ComplianceFunctional):
        J.bind(space.mesh)
    out = []
    if J.has_volume:
        b = volume_block(space)
        uu, Du, sig = stress_at(b, u.coefficients, mat)
        out.append(PartsAt(b, uu, Du, sig, *J.vol(b.x, uu, sig)))
    if J.has_surface:
        facets = J.surface_facets(space.mesh)
        if len(facets):
            b = surface_block(space, facets)
            uu, Du, sig = stress_at(b, u.coefficients, mat)
            fac = np.broadcast_to(facets[:, None], b.w.shape)
            out.append(PartsAt(b, uu, Du, sig, *J.sur(b.x, uu, sig, b.normal, fac)))
    return out


def evaluate(J: Functional, u: DisplacementField, mat: MaterialParams) -> float:
    return float(sum(np.sum(p.block.w * p.F) for p in functional_parts(J, u, mat)))
