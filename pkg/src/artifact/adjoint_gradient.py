"""Adjoint states, Hadamard gradient densities and the distributed shape derivative.

Three adjoint right-hand sides are available:

* ``discrete``: l_J(v) = sum_q w [dF/dz2 . v + dF/dz3 : sigma(v)], the exact
  derivative of the discrete functional.  With it the distributed form
  reproduces the material-derivative form to rounding.
* ``weak``: surface stress dependence enters only through the tangential
  part, M : Sigma_Gamma(D_Gamma v); the traction part is carried by
  q = p + S*(M) in the Hadamard density.
* ``strong``: the weak rhs with the tangential derivatives moved onto M,
  h = dF/dz2 + kappa (l~ tr(M_G) n + mu I_G S n) - l~ grad_G tr(M_G) - mu div_G(I_G S).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sps
import scipy.sparse.linalg as spla

from .errors import ConfigError
from .fem import (
    DisplacementField,
    LinearSystem,
    Loads,
    MaterialParams,
    boundary_stress,
)
from .functionals import (
    SURFACE_SIGMA,
    Functional,
    PartsAt,
    functional_parts,
    surface_block,
    volume_block,
)
from .mesh import SurfaceGeometry, surface_geometry
from .shape_calculus import VelocityField, tangential_ops

ADJOINT_VARIANTS = ("discrete", "weak", "strong")


@dataclass
class AdjointSpec:
    functional: Functional
    variant: str = "discrete"

    @property
    def kind(self) -> str:
        return self.functional.kind


def lame_tilde(mat: MaterialParams) -> float:
    return 2.0 * mat.lam * mat.mu / (mat.lam + 2.0 * mat.mu)


def _tangential_coef(M: np.ndarray, P: np.ndarray, mat: MaterialParams) -> np.ndarray:
    """C with M : Sigma_Gamma(D_Gamma v) = C : Dv."""
    S = M + np.swapaxes(M, -1, -2)
    trG = np.einsum("...ij,...ij->...", P, M)
    return lame_tilde(mat) * trG[..., None, None] * P + mat.mu * P @ S @ P


def traction_adjoint(M: np.ndarray, n: np.ndarray, mat: MaterialParams) -> np.ndarray:
    """S*(M): the vector with M : S(t) = S*(M) . t for the stress S(t) having traction t."""
    S = M + np.swapaxes(M, -1, -2)
    trM = np.trace(M, axis1=-2, axis2=-1)
    nSn = np.einsum("...i,...ij,...j->...", n, S, n)
    Sn = np.einsum("...ij,...j->...i", S, n)
    tangential = Sn - np.einsum("...i,...->...i", n, np.einsum("...i,...i->...", n, Sn))
    return ((mat.lam * trM + mat.mu * nSn) / (mat.lam + 2 * mat.mu))[..., None] * n + tangential


def adjoint_rhs(u: DisplacementField, mat: MaterialParams, J: Functional, variant: str = "discrete",
                geometry: SurfaceGeometry | None = None) -> np.ndarray:
    if variant not in ADJOINT_VARIANTS:
        raise ConfigError(f"unknown adjoint variant {variant!r}")
    out = np.zeros((u.space.n_nodes, 3))
    for part in functional_parts(J, u, mat):
        b = part.block
        C = None
        if part.d3 is not None:
            if b.is_surface and variant != "discrete":
                if variant == "strong":
                    continue
                C = _tangential_coef(part.d3, b.tangent_projector, mat)
            else:
                C = mat.hooke(part.d3)
        if part.d2 is None and C is None:
            continue
        vals = part.d2 if part.d2 is not None else np.zeros(b.x.shape)
        out += b.scatter(vals, C)
    if variant == "strong" and J.has_surface and J.kind == SURFACE_SIGMA:
        out += _strong_surface_rhs(u, mat, J, geometry)
    return out.ravel()


def _surface_vertex_data(u: DisplacementField, mat: MaterialParams, J: Functional, geometry: SurfaceGeometry):
    """Density and partials of F_sur at boundary vertices, using averaged stresses."""
    mesh = u.space.mesh
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # P1 fields: D(sigma)[n] is zero
        sig_v, dsig_n = boundary_stress(u, mat, geometry)
    X = mesh.points[geometry.vertices]
    uv = u.coefficients[geometry.vertices]
    nv = geometry.vertex_normals
    mask = np.zeros(len(geometry.vertices), dtype=bool)
    facets = J.surface_facets(mesh) if J.has_surface else np.zeros(0, dtype=np.int64)
    if len(facets):
        mask[geometry.local_index(np.unique(mesh.facet_corners[facets]))] = True
    return X, uv, nv, sig_v, dsig_n, mask, facets


def _strong_surface_rhs(u, mat, J, geometry):
    space = u.space
    mesh = space.mesh
    geometry = geometry or surface_geometry(mesh)
    ops = tangential_ops(mesh, geometry)
    X, uv, nv, sig_v, _, mask, facets = _surface_vertex_data(u, mat, J, geometry)
    fac_v = np.broadcast_to(np.zeros(1, dtype=np.int64), (len(X),))
    F, d1, d2, M = J.sur(X[:, None], uv[:, None], sig_v[:, None], nv, fac_v[:, None])
    M = np.where(mask[:, None, None], M[:, 0], 0.0)
    P = np.eye(3) - np.einsum("vi,vj->vij", nv, nv)
    S = M + np.swapaxes(M, -1, -2)
    lt = lame_tilde(mat)
    trG = np.einsum("vij,vij->v", P, M)
    PS = P @ S
    kap = geometry.mean_curvature
    h = kap[:, None] * (lt * trG[:, None] * nv + mat.mu * np.einsum("vij,vj->vi", PS, nv))
    grad_tr = ops.triangle_to_vertex(ops.gradient(trG))
    grad_PS = ops.triangle_to_vertex(ops.gradient(PS.reshape(len(X), 9)).reshape(-1, 3, 3, 3))
    div_PS = np.einsum("vijj->vi", grad_PS)  # row-wise div_Gamma (per-triangle gradients are tangential)
    h -= lt * grad_tr + mat.mu * div_PS
    h = np.where(mask[:, None], h, 0.0)
    # int_{Gamma_N} h_h . v dS with h_h the P1 interpolant of the vertex values
    sb = surface_block(space, facets)
    mu_b = _facet_bary(sb)
    loc = geometry.local_index(mesh.facet_corners[facets])
    hq = np.einsum("fqk,fkj->fqj", mu_b, h[loc])
    res = sb.scatter(hq)
    return res


def surface_dual_norm(space, facets: np.ndarray, r: np.ndarray) -> float:
    """H^1(Gamma)-dual norm sqrt(r . (M + K)^{-1} r) of a load vector supported on the facet nodes.

    The weak rhs pairs M with D_Gamma v, so its Euclidean or L2 size does not
    converge under refinement; this norm does.
    """
    b = surface_block(space, facets)
    nodes = space.cell_nodes[b.cells]
    P = np.eye(3) - np.einsum("ri,rj->rij", b.normal, b.normal)
    Gt = np.einsum("rqak,rkl->rqal", b.grads, P)
    mass = np.einsum("rq,rqa,rqb->rab", b.w, b.N, b.N)
    loc = mass + np.einsum("rq,rqak,rqbk->rab", b.w, Gt, Gt)
    nb = nodes.shape[1]
    A = sps.csr_matrix((loc.ravel(), (np.repeat(nodes, nb, axis=1).ravel(), np.tile(nodes, (1, nb)).ravel())),
                       shape=(space.n_nodes, space.n_nodes))
    # trace nodes only: cell nodes off the facet have zero mass and rounding-level tangential gradients
    keep = np.unique(nodes[np.abs(mass).sum(axis=2) > 1e-12 * np.abs(mass).max()])
    R = np.asarray(r, dtype=float).reshape(space.n_nodes, -1)
    if np.abs(np.delete(R, keep, axis=0)).max(initial=0.0) > 1e-10 * np.abs(R).max(initial=0.0):
        raise ConfigError("load vector has entries off the facet nodes")
    lu = spla.splu(A[keep][:, keep].tocsc())
    Rk = R[keep]
    return float(np.sqrt(np.sum(Rk * lu.solve(Rk))))


def _facet_bary(block) -> np.ndarray:
    """Facet barycentrics (nf, nq, 3) recovered from the cell barycentrics of a surface block."""
    loc = block.space.mesh.facet_local_vertices[block.facets]
    return np.take_along_axis(block.bary, np.broadcast_to(loc[:, None, :], block.bary.shape[:2] + (3,)), axis=2)


def solve_adjoint(system: LinearSystem, u: DisplacementField, mat: MaterialParams, spec: AdjointSpec | Functional,
                  geometry: SurfaceGeometry | None = None, tol: float = 1e-10, method: str = "cg") -> DisplacementField:
    """p with B(v, p) = l_J(v), p = 0 on Gamma_D, reusing the state matrix."""
    spec = spec if isinstance(spec, AdjointSpec) else AdjointSpec(spec)
    rhs = adjoint_rhs(u, mat, spec.functional, spec.variant, geometry)
    if not rhs.any():
        return DisplacementField(system.space, np.zeros((system.space.n_nodes, 3)))
    x = system.solve(rhs, tol=tol, method=method)
    return DisplacementField(system.space, x.reshape(-1, 3))


# -- Hadamard density ----------------------------------------------------------------------
@dataclass
class ShapeGradientDensity:
    """G on Gamma_N: per boundary vertex (``values``) and at facet quadrature points (``point_values``)."""

    values: np.ndarray  # per boundary vertex (geometry numbering), zero off Gamma_N
    geometry: SurfaceGeometry
    on_neumann: np.ndarray  # bool per boundary vertex
    terms: dict  # per-vertex breakdown of G
    facets: np.ndarray  # facets carrying point values
    point_values: np.ndarray  # (nf, nq)
    block_w: np.ndarray  # (nf, nq) quadrature weights
    block_bary: np.ndarray  # (nf, nq, 3) facet barycentrics
    point_terms: dict | None = None  # facet-point breakdown of G

    def vertex_field(self, n_points: int) -> np.ndarray:
        out = np.zeros(n_points)
        out[self.geometry.vertices] = self.values
        return out


def _neumann_vertex_mask(mesh, geometry) -> np.ndarray:
    mask = np.zeros(len(geometry.vertices), dtype=bool)
    neu = np.nonzero(mesh.neumann_mask)[0]
    mask[geometry.local_index(np.unique(mesh.facet_corners[neu]))] = True
    dv = mesh.dirichlet_vertices
    if len(dv):
        mask[geometry.local_index(dv)] = False
    return mask


def _stress_gradient(space, coeffs, mat, cells) -> np.ndarray:
    """Constant per-cell gradient of sigma(u) for P2 fields, (nc, 3, 3, 3) with last index d/dx_k."""
    if space.degree == 1:
        return np.zeros((len(cells), 3, 3, 3))
    corner = np.broadcast_to(np.eye(4), (len(cells), 4, 4))
    _, grads = space.basis_grads(cells, np.ascontiguousarray(corner))
    Du = np.einsum("cqik,cij->cqjk", grads, coeffs[space.cell_nodes[cells]])
    sig = mat.hooke(0.5 * (Du + np.swapaxes(Du, -1, -2)))
    return np.einsum("caij,cak->cijk", sig, space.grad_lambda[cells])


def hadamard_density(u: DisplacementField, p: DisplacementField, mat: MaterialParams, loads: Loads,
                     J: Functional, geometry: SurfaceGeometry | None = None) -> ShapeGradientDensity:
    """G with dJ[V] = int_{Gamma_N} G V_n dS.

    G = F_vol + dF/dz1 . n + kappa F_sur + dF/dz2 . Du n + M : D(sigma(u))[n]
        + (f + kappa g + Dg n) . q - sigma(u) : D_Gamma q,   q = p + S*(M),
    evaluated at facet quadrature points from the owning-cell traces; p should
    come from the weak adjoint variant for stress-dependent surface densities.
    """
    space = u.space
    mesh = space.mesh
    if geometry is None:
        geometry = surface_geometry(mesh)
    if geometry.mean_curvature is None:
        raise ConfigError("mean curvature required for the Hadamard density")
    on_n = _neumann_vertex_mask(mesh, geometry)
    facets = np.nonzero(mesh.neumann_mask)[0]
    sb = surface_block(space, facets)
    shape = sb.w.shape
    n = np.broadcast_to(sb.normal[:, None], sb.x.shape)
    mu_b = _facet_bary(sb)
    loc = geometry.local_index(mesh.facet_corners[facets])
    kap = np.einsum("fqk,fk->fq", mu_b, geometry.mean_curvature[loc])
    uq, Du, sig = _stress(sb, u, mat)
    terms: dict[str, np.ndarray] = {}

    if J.has_volume:
        terms["F_vol"] = J.vol(sb.x, uq, sig)[0]
    M = np.zeros(sb.x.shape + (3,))
    sur_facets = J.surface_facets(mesh) if J.has_surface else np.zeros(0, dtype=np.int64)
    if len(sur_facets):
        on_j = np.isin(facets, sur_facets)[:, None]
        from .functionals import ComplianceFunctional

        if isinstance(J, ComplianceFunctional):
            J.bind(mesh)
        F, d1, d2, d3 = J.sur(sb.x, uq, sig, sb.normal, np.broadcast_to(facets[:, None], shape))
        terms["kappa_F"] = np.where(on_j, kap * F, 0.0)
        if d1 is not None:
            terms["dz1_n"] = np.where(on_j, np.einsum("fqi,fqi->fq", d1, n), 0.0)
        if d2 is not None:
            terms["dz2_Dun"] = np.where(on_j, np.einsum("fqi,fqij,fqj->fq", d2, Du, n), 0.0)
        if d3 is not None:
            M = np.where(on_j[..., None, None], d3, 0.0)
            dsig = _stress_gradient(space, u.coefficients, mat, sb.cells)
            dsig_n = np.einsum("fijk,fk->fij", dsig, sb.normal)
            terms["M_dsig_n"] = np.einsum("fqij,fij->fq", M, dsig_n)
    SM = traction_adjoint(M, n, mat)
    pq, Dp = sb.field(p.coefficients)
    q = pq + SM
    load = np.zeros(sb.x.shape)
    trac = np.zeros(sb.x.shape)
    X = sb.x.reshape(-1, 3)
    if loads.f is not None:
        load += loads.f.value(X).reshape(sb.x.shape)
    for idx, data in loads.traction_groups(mesh):
        sel = np.isin(facets, idx)
        xs = sb.x[sel].reshape(-1, 3)
        trac[sel] = data.value(xs).reshape(sb.x[sel].shape)
        Dg = data.gradient(xs).reshape(sb.x[sel].shape + (3,))
        load[sel] += kap[sel][..., None] * trac[sel] + np.einsum("fqij,fqj->fqi", Dg, n[sel])
    terms["load_q"] = np.einsum("fqi,fqi->fq", load, q)
    # sigma : D_Gamma p = sigma : Dp - (sigma n) . Dp n with sigma n = g on Gamma_N;
    # the full-gradient form avoids the discrete residual of sigma(u_h) n.
    terms["sigma_DGp"] = -np.einsum("fqij,fqij->fq", sig, Dp) + np.einsum("fqi,fqij,fqj->fq", trac, Dp, n)
    if np.any(M):
        SM_v = _vertex_traction_adjoint(u, mat, J, geometry, sur_facets)
        ops = tangential_ops(mesh, geometry)
        DG_SM = ops.gradient(SM_v)[facets][:, None]  # triangles follow mesh.facets
        terms["sigma_DGSM"] = -np.einsum("fqij,fqij->fq", sig, np.broadcast_to(DG_SM, sig.shape))
    Gq = sum(terms.values())
    # lumped L2 projection onto boundary vertices
    nv = len(geometry.vertices)
    wv = np.einsum("fq,fqk->fk", sb.w, mu_b)
    wsum = np.zeros(nv)
    np.add.at(wsum, loc, wv)
    wsum[wsum == 0] = 1.0

    def project(vals):
        acc = np.zeros(nv)
        np.add.at(acc, loc, np.einsum("fq,fqk,fq->fk", sb.w, mu_b, vals))
        return np.where(on_n, acc / wsum, 0.0)

    return ShapeGradientDensity(project(Gq), geometry, on_n, {k: project(v) for k, v in terms.items()},
                                facets, Gq, sb.w, mu_b, terms)


def _stress(block, u, mat):
    uq, Du = block.field(u.coefficients)
    return uq, Du, mat.hooke(0.5 * (Du + np.swapaxes(Du, -1, -2)))


def _vertex_traction_adjoint(u, mat, J, geometry, sur_facets) -> np.ndarray:
    """S*(M) at boundary vertices from vertex-averaged stresses; zero off the functional's facets."""
    X, uv, nv, sig_v, _, mask, _ = _surface_vertex_data(u, mat, J, geometry)
    fac0 = np.zeros((len(X), 1), dtype=np.int64)
    _, _, _, M = J.sur(X[:, None], uv[:, None], sig_v[:, None], nv, fac0)
    M = np.where(mask[:, None, None], M[:, 0], 0.0)
    return traction_adjoint(M, nv, mat)


def dj_from_gradient(G: ShapeGradientDensity, V: VelocityField, mesh) -> float:
    """int_{Gamma_N} G V_n dS with the facet quadrature of G and the vertex interpolant of V."""
    Vn_all = V.at_points(mesh)
    corners = mesh.facet_corners[G.facets]
    Vq = np.einsum("fqk,fkj->fqj", G.block_bary, Vn_all[corners])
    _, normal = mesh.facet_areas_normals()
    vn = np.einsum("fqj,fj->fq", Vq, normal[G.facets])
    return float(np.sum(G.block_w * G.point_values * vn))


def dj_from_vertex_gradient(G: ShapeGradientDensity, V: VelocityField, mesh) -> float:
    """Lumped-mass quadrature of int G V_n dS from the vertex values only."""
    geo = G.geometry
    Vv = V.at_points(mesh)[geo.vertices]
    Vn = np.einsum("vi,vi->v", Vv, geo.vertex_normals)
    return float(np.sum(geo.mass * G.values * Vn))


# -- distributed form ----------------------------------------------------------------------------
def distributed_sensitivity(u: DisplacementField, p: DisplacementField, mat: MaterialParams, loads: Loads,
                            J: Functional) -> np.ndarray:
    """Vector d per mesh point with dJ[V] = sum_a d_a . V_a over the vertices (exact with the discrete adjoint)."""
    space = u.space
    mesh = space.mesh
    d = np.zeros((len(mesh.points), 3))
    for part in functional_parts(J, u, mat):
        d += _functional_sensitivity(part, mat)
    vb = volume_block(space)
    _, Du = vb.field(u.coefficients)
    pq, Dp = vb.field(p.coefficients)
    sig_u = mat.hooke(0.5 * (Du + np.swapaxes(Du, -1, -2)))
    sig_p = mat.hooke(0.5 * (Dp + np.swapaxes(Dp, -1, -2)))
    C = (np.swapaxes(Dp, -1, -2) @ sig_u + np.swapaxes(Du, -1, -2) @ sig_p
         - np.einsum("rqij,rqij->rq", sig_u, Dp)[..., None, None] * np.eye(3))
    bvec = None
    if loads.f is not None:
        X = vb.x.reshape(-1, 3)
        f = loads.f.value(X).reshape(vb.x.shape)
        Df = loads.f.gradient(X).reshape(vb.x.shape + (3,))
        bvec = np.einsum("rqij,rqi->rqj", Df, pq)
        C = C + np.einsum("rqi,rqi->rq", f, pq)[..., None, None] * np.eye(3)
    d += vb.scatter_vertices(bvec, C)
    for idx, data in loads.traction_groups(mesh):
        sb = surface_block(space, idx)
        ps, _ = sb.field(p.coefficients)
        X = sb.x.reshape(-1, 3)
        g = data.value(X).reshape(sb.x.shape)
        Dg = data.gradient(X).reshape(sb.x.shape + (3,))
        bs = np.einsum("rqij,rqi->rqj", Dg, ps)
        Cs = np.einsum("rqi,rqi->rq", g, ps)[..., None, None] * sb.tangent_projector
        d += sb.scatter_vertices(bs, Cs)
    d[~np.isin(np.arange(len(mesh.points)), mesh.vertex_ids)] = 0.0
    return d


def _functional_sensitivity(part: PartsAt, mat: MaterialParams) -> np.ndarray:
    b = part.block
    C = part.F[..., None, None] * b.identity()
    if part.d3 is not None:
        C = C - np.swapaxes(part.Du, -1, -2) @ mat.hooke(part.d3)
    return b.scatter_vertices(part.d1, C)


def distributed_shape_derivative(u: DisplacementField, p: DisplacementField, mat: MaterialParams, loads: Loads,
                                 V: VelocityField, J: Functional) -> float:
    d = distributed_sensitivity(u, p, mat, loads, J)
    return float(np.sum(d * V.at_points(u.space.mesh)))


def adjoint_identity_terms(u: DisplacementField, p: DisplacementField, u_dot: DisplacementField,
                           mat: MaterialParams, loads: Loads, V: VelocityField, J: Functional) -> tuple[float, float]:
    """(l_J(u_dot), L_dot(p) - B_dot(u, p)); equal when p is the discrete adjoint."""
    from .shape_calculus import material_derivative_rhs

    lj = adjoint_rhs(u, mat, J, "discrete")
    rhs = material_derivative_rhs(u.space, u, mat, loads, V)
    return float(lj @ u_dot.vector), float(rhs @ p.vector)
