"""Velocity method: flow maps, transport, material derivatives and shape-derivative checks.

Discretely the domain moves with its vertices, x_a(t) = T_t(x_a), and P2
mid-edge nodes stay at edge midpoints.  Derivatives at t = 0 then depend
on V only through its vertex interpolant V_h, whose gradient DV_h is
constant per cell.  The material-derivative equation
    B(u_dot, v) = L_dot(v) - B_dot(u, v)
is therefore the exact derivative of the discrete state equation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .errors import FlowError
from .fem import (
    DisplacementField,
    FunctionSpace,
    LinearSystem,
    Loads,
    MaterialParams,
    assemble_elasticity,
    assemble_load,
)
from .functionals import Block, Functional, functional_parts, surface_block, volume_block
from .mesh import Mesh, SurfaceGeometry, surface_geometry
from .mesh.core import signed_volumes
from .quadrature import tri_rule


# -- velocity fields ---------------------------------------------------------------
@dataclass
class VelocityField:
    """V and DV either as analytic callbacks or as nodal values on a fixed mesh."""

    value: Callable[[np.ndarray], np.ndarray] | None = None
    grad: Callable[[np.ndarray], np.ndarray] | None = None
    nodal: np.ndarray | None = None
    dirichlet_safe: bool = False

    @classmethod
    def analytic(cls, value, grad=None, dirichlet_safe: bool = False) -> "VelocityField":
        return cls(value, grad, None, dirichlet_safe)

    @classmethod
    def from_nodal(cls, values: np.ndarray, dirichlet_safe: bool = False) -> "VelocityField":
        return cls(None, None, np.asarray(values, dtype=float), dirichlet_safe)

    @classmethod
    def zero(cls) -> "VelocityField":
        return cls.analytic(lambda x: np.zeros_like(x), lambda x: np.zeros(x.shape + (3,)))

    @classmethod
    def linear(cls, A: np.ndarray, c: np.ndarray | None = None) -> "VelocityField":
        A = np.asarray(A, dtype=float)
        c = np.zeros(3) if c is None else np.asarray(c, dtype=float)
        return cls.analytic(lambda x: x @ A.T + c, lambda x: np.broadcast_to(A, x.shape + (3,)).copy())

    @property
    def is_analytic(self) -> bool:
        return self.value is not None

    def at_points(self, mesh: Mesh) -> np.ndarray:
        """Values at every mesh point: V at vertices, edge averages at mid nodes."""
        if self.nodal is not None:
            vals = np.array(self.nodal, dtype=float)
            if vals.shape != mesh.points.shape:
                raise ValueError("nodal velocity does not match the mesh")
        else:
            vals = np.asarray(self.value(mesh.points), dtype=float)
        return mesh.snap_midpoints(vals)

    def __add__(self, other: "VelocityField") -> "VelocityField":
        return combine([(1.0, self), (1.0, other)])


def combine(terms: list[tuple[float, VelocityField]]) -> VelocityField:
    """Linear combination sum_k a_k V_k of analytic fields."""
    if not all(v.is_analytic for _, v in terms):
        if all(v.nodal is not None for _, v in terms):
            return VelocityField.from_nodal(sum(a * v.nodal for a, v in terms))
        raise ValueError("cannot mix analytic and nodal velocity fields")

    def val(x):
        return sum(a * v.value(x) for a, v in terms)

    def grad(x):
        return sum(a * v.grad(x) for a, v in terms)

    return VelocityField.analytic(val, grad, all(v.dirichlet_safe for _, v in terms))


# -- flow maps ------------------------------------------------------------------------
@dataclass
class Transport:
    t: float
    mapped_points: np.ndarray
    jacobians: np.ndarray
    gamma: np.ndarray
    omega: np.ndarray | None = None
    n_t: np.ndarray | None = None


def flow_map(V: VelocityField, t: float, points: np.ndarray, normals: np.ndarray | None = None,
             h_max: float = 1e-2) -> Transport:
    """RK4 for dy/dt = V(y) together with d(DT)/dt = DV(y) DT.

    For nodal velocities the perturbation of identity T_t = id + t V is used.
    """
    pts = np.asarray(points, dtype=float)
    n = len(pts)
    if V.is_analytic:
        if V.grad is None:
            raise ValueError("flow_map needs DV")
        steps = max(1, math.ceil(abs(t) / h_max))
        h = t / steps
        y = pts.copy()
        F = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()

        def rhs(y, F):
            return V.value(y), np.einsum("nij,njk->nik", V.grad(y), F)

        for _ in range(steps):
            k1y, k1F = rhs(y, F)
            k2y, k2F = rhs(y + 0.5 * h * k1y, F + 0.5 * h * k1F)
            k3y, k3F = rhs(y + 0.5 * h * k2y, F + 0.5 * h * k2F)
            k4y, k4F = rhs(y + h * k3y, F + h * k3F)
            y = y + h / 6.0 * (k1y + 2 * k2y + 2 * k3y + k4y)
            F = F + h / 6.0 * (k1F + 2 * k2F + 2 * k3F + k4F)
    else:
        if V.nodal is None or V.nodal.shape != pts.shape:
            raise ValueError("nodal velocity must be given at the mapped points")
        y = pts + t * V.nodal
        F = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()  # DT is per cell for nodal fields
    gamma = np.linalg.det(F)
    if np.any(gamma <= 0):
        raise FlowError(f"flow Jacobian not positive at t={t}")
    omega = n_t = None
    if normals is not None:
        cof = gamma[:, None] * np.einsum("nji,nj->ni", np.linalg.inv(F), normals)  # gamma DT^{-T} n
        omega = np.linalg.norm(cof, axis=1)
        n_t = cof / omega[:, None]
    return Transport(t, y, F, gamma, omega, n_t)


def flow_mesh(mesh: Mesh, V: VelocityField, t: float, h_max: float = 1e-2) -> Mesh:
    """Mesh with vertices moved by T_t (mid nodes re-snapped)."""
    if t == 0:
        return mesh
    verts = mesh.vertex_ids
    pts = mesh.points.copy()
    if V.is_analytic:
        pts[verts] = flow_map(V, t, mesh.points[verts], h_max=h_max).mapped_points
    else:
        pts[verts] = mesh.points[verts] + t * V.at_points(mesh)[verts]
    pts = mesh.snap_midpoints(pts)
    vol = signed_volumes(pts, mesh.corners)
    if np.any(vol <= 0):
        i = int(np.argmin(vol))
        raise FlowError(f"cell {i} inverted by the flow at t={t}")
    return Mesh(pts, mesh.cells, mesh.facets, mesh.facet_tags, mesh.tag_roles, validate=False)


# -- tangential operators --------------------------------------------------------------
@dataclass
class SurfaceOperator:
    geometry: SurfaceGeometry
    points: np.ndarray  # boundary vertex coordinates
    laplacian: sp.csr_matrix  # stiffness of -Laplace_Gamma
    mass: np.ndarray  # lumped
    tri_grads: np.ndarray  # (nt, 3, 3) tangential gradients of the hat functions per triangle

    @property
    def mass_matrix(self) -> sp.csr_matrix:
        return sp.diags(self.mass).tocsr()

    def gradient(self, f: np.ndarray) -> np.ndarray:
        """Per-triangle tangential gradient of a P1 surface function (nv,) or (nv, k)."""
        tri = self.geometry.triangles
        if f.ndim == 1:
            return np.einsum("tak,ta->tk", self.tri_grads, f[tri])
        return np.einsum("tak,taj->tjk", self.tri_grads, f[tri])

    def divergence(self, w: np.ndarray) -> np.ndarray:
        """Per-triangle div_Gamma of a P1 vector field (nv, 3)."""
        return np.trace(self.gradient(w), axis1=1, axis2=2)

    def laplace(self, f: np.ndarray) -> np.ndarray:
        """Vertex values of Laplace_Gamma f = -M^{-1} L f."""
        out = -(self.laplacian @ f)
        return out / (self.mass if f.ndim == 1 else self.mass[:, None])

    def triangle_to_vertex(self, vals: np.ndarray) -> np.ndarray:
        """Area-weighted average of per-triangle values onto vertices."""
        tri = self.geometry.triangles
        a = self.geometry.facet_areas
        nv = len(self.points)
        acc = np.zeros((nv,) + vals.shape[1:])
        wsum = np.zeros(nv)
        for k in range(3):
            np.add.at(acc, tri[:, k], a.reshape((-1,) + (1,) * (vals.ndim - 1)) * vals)
            np.add.at(wsum, tri[:, k], a)
        return acc / wsum.reshape((-1,) + (1,) * (vals.ndim - 1))


def tangential_ops(mesh: Mesh, geometry: SurfaceGeometry | None = None) -> SurfaceOperator:
    geometry = geometry or surface_geometry(mesh)
    X = mesh.points[geometry.vertices]
    tri = geometry.triangles
    p = X[tri]
    n = geometry.facet_normals
    a2 = 2.0 * geometry.facet_areas
    G = np.empty((len(tri), 3, 3))
    for k in range(3):
        e = p[:, (k + 2) % 3] - p[:, (k + 1) % 3]  # edge opposite vertex k
        G[:, k] = np.cross(n, e) / a2[:, None]
    return SurfaceOperator(geometry, X, geometry.laplacian, geometry.mass, G)


# -- Reynolds transport ----------------------------------------------------------------------
def reynolds_volume(space: FunctionSpace, density, density_dot, V: VelocityField) -> float:
    """int_Omega (u_dot + u div V) dx with callbacks density(x), density_dot(x)."""
    b = volume_block(space)
    x = b.x.reshape(-1, 3)
    div = np.trace(V.grad(x), axis1=1, axis2=2).reshape(b.w.shape)
    u = np.asarray(density(x), dtype=float).reshape(b.w.shape)
    ud = np.asarray(density_dot(x), dtype=float).reshape(b.w.shape)
    return float(np.sum(b.w * (ud + u * div)))


def reynolds_surface(space: FunctionSpace, density, density_dot, V: VelocityField, facets=None) -> float:
    """int_Gamma (y_dot + y div_Gamma V) dS using facet normals."""
    facets = np.arange(len(space.mesh.facets)) if facets is None else np.asarray(facets)
    rule = tri_rule(4)
    area, normal = space.facet_geometry
    x = space.facet_points(facets, rule.bary)
    w = 2.0 * area[facets, None] * rule.weights[None, :]
    X = x.reshape(-1, 3)
    DV = V.grad(X).reshape(x.shape + (3,))
    nn = normal[facets][:, None, :]
    divg = np.trace(DV, axis1=-2, axis2=-1) - np.einsum("fqi,fqij,fqj->fq", np.broadcast_to(nn, x.shape), DV,
                                                       np.broadcast_to(nn, x.shape))
    y = np.asarray(density(X), dtype=float).reshape(w.shape)
    yd = np.asarray(density_dot(X), dtype=float).reshape(w.shape)
    return float(np.sum(w * (yd + y * divg)))


# -- material derivative ------------------------------------------------------------------------
def _bdot_coef(Du: np.ndarray, DV: np.ndarray, mat: MaterialParams) -> np.ndarray:
    """Matrix C with B_dot(u, v) = int C : Dv, C = sigma_dot - sigma DV^T + div V sigma."""
    sig = mat.hooke(0.5 * (Du + np.swapaxes(Du, -1, -2)))
    sdot = -mat.hooke(Du @ DV)
    div = np.trace(DV, axis1=-2, axis2=-1)
    return sdot - sig @ np.swapaxes(DV, -1, -2) + div[..., None, None] * sig


def _load_at(block: Block, data) -> tuple[np.ndarray, np.ndarray]:
    """Load value and gradient at the block points."""
    X = block.x.reshape(-1, 3)
    val = data.value(X).reshape(block.x.shape)
    grad = data.gradient(X).reshape(block.x.shape + (3,))
    return val, grad


def material_derivative_rhs(space: FunctionSpace, u: DisplacementField, mat: MaterialParams, loads: Loads,
                            V: VelocityField) -> np.ndarray:
    """L_dot(v) - B_dot(u, v) for all basis functions v (flat dof vector)."""
    Vn = V.at_points(space.mesh)
    vb = volume_block(space)
    Vq, DV = vb.vh(Vn)
    _, Du = vb.field(u.coefficients)
    out = vb.scatter(None, -_bdot_coef(Du, DV, mat))
    if loads.f is not None:
        f, Df = _load_at(vb, loads.f)
        fV = np.einsum("rqij,rqj->rqi", Df, Vq) + f * vb.divergence(DV)[..., None]
        out += vb.scatter(fV)
    for idx, data in loads.traction_groups(space.mesh):
        sb = surface_block(space, idx)
        Vs, DVs = sb.vh(Vn)
        g, Dg = _load_at(sb, data)
        gV = np.einsum("rqij,rqj->rqi", Dg, Vs) + g * sb.divergence(DVs)[..., None]
        out += sb.scatter(gV)
    return out.ravel()


def solve_material_derivative(system: LinearSystem, u: DisplacementField, mat: MaterialParams, loads: Loads,
                              V: VelocityField, tol: float = 1e-10, method: str = "cg") -> DisplacementField:
    """u_dot with homogeneous Dirichlet data, reusing the state matrix."""
    rhs = material_derivative_rhs(system.space, u, mat, loads, V)
    x = system.solve(rhs, tol=tol, method=method)
    return DisplacementField(system.space, x.reshape(-1, 3))


def nodal_gradient(u: DisplacementField) -> np.ndarray:
    """Du at every node, averaged over the cells sharing the node (volume weights)."""
    space = u.space
    nb = space.nb
    ref = _reference_nodes(space.degree)
    cells = np.arange(space.mesh.n_cells)
    _, Du = space.evaluate(u.coefficients, cells, ref)  # (nc, nb, 3, 3)
    vol = space.volumes
    acc = np.zeros((space.n_nodes, 3, 3))
    wsum = np.zeros(space.n_nodes)
    for i in range(nb):
        np.add.at(acc, space.cell_nodes[:, i], vol[:, None, None] * Du[:, i])
        np.add.at(wsum, space.cell_nodes[:, i], vol)
    return acc / wsum[:, None, None]


def _reference_nodes(degree: int) -> np.ndarray:
    from .mesh.core import TET_EDGES

    lm = [np.eye(4)[i] for i in range(4)]
    if degree == 2:
        lm += [0.5 * (np.eye(4)[a] + np.eye(4)[b]) for a, b in TET_EDGES]
    return np.array(lm)


def local_shape_derivative(u: DisplacementField, u_dot: DisplacementField, V: VelocityField) -> np.ndarray:
    """Nodal values of u' = u_dot - Du V."""
    Vn = V.at_points(u.space.mesh)
    Du = nodal_gradient(u)
    return u_dot.coefficients - np.einsum("nij,nj->ni", Du, Vn)


def dj_material_form(J: Functional, u: DisplacementField, u_dot: DisplacementField, V: VelocityField,
                     mat: MaterialParams) -> float:
    """dJ[V] = sum_q w [div V F + dF/dz1 . V + dF/dz2 . u_dot + dF/dz3 : (sigma(u_dot) - Hooke(Du DV))]."""
    Vn = V.at_points(u.space.mesh)
    total = 0.0
    for part in functional_parts(J, u, mat):
        b = part.block
        Vq, DV = b.vh(Vn)
        integrand = b.divergence(DV) * part.F
        if part.d1 is not None:
            integrand = integrand + np.einsum("rqi,rqi->rq", part.d1, Vq)
        if part.d2 is not None or part.d3 is not None:
            ud, Dud = b.field(u_dot.coefficients)
            if part.d2 is not None:
                integrand = integrand + np.einsum("rqi,rqi->rq", part.d2, ud)
            if part.d3 is not None:
                sdot = mat.hooke(0.5 * (Dud + np.swapaxes(Dud, -1, -2))) - mat.hooke(part.Du @ DV)
                integrand = integrand + np.einsum("rqij,rqij->rq", part.d3, sdot)
        total += float(np.sum(b.w * integrand))
    return total


# -- problems and finite differences ----------------------------------------------------------
@dataclass
class Problem:
    mesh: Mesh
    mat: MaterialParams
    loads: Loads
    functional: Functional
    degree: int = 2
    tol: float = 1e-12
    method: str = "direct"

    def state(self, mesh: Mesh | None = None) -> tuple[DisplacementField, LinearSystem]:
        space = FunctionSpace(mesh if mesh is not None else self.mesh, self.degree)
        system = assemble_elasticity(space, self.mat)
        system.rhs = assemble_load(space, self.loads)
        if self.functional.state_dependent or system.rhs.any():
            x = system.solve(system.rhs, tol=self.tol, method=self.method)
        else:
            x = np.zeros(space.ndof)
        return DisplacementField(space, x.reshape(-1, 3)), system

    def value(self, mesh: Mesh | None = None) -> float:
        from .functionals import evaluate

        if not self.functional.state_dependent:
            space = FunctionSpace(mesh if mesh is not None else self.mesh, self.degree)
            return evaluate(self.functional, DisplacementField(space, np.zeros((space.n_nodes, 3))), self.mat)
        u, _ = self.state(mesh)
        return evaluate(self.functional, u, self.mat)


@dataclass
class FDResult:
    value: float
    values: list[float]  # central differences at t, t/2, t/4
    slope: float  # observed order from successive differences


def fd_shape_derivative(problem: Problem, V: VelocityField, t: float = 1e-3, levels: int = 3) -> FDResult:
    """Central difference (J(Omega_t) - J(Omega_-t)) / 2t on flowed meshes, re-solving the state."""
    vals = []
    for k in range(levels):
        tk = t / 2 ** k
        jp = problem.value(flow_mesh(problem.mesh, V, tk))
        jm = problem.value(flow_mesh(problem.mesh, V, -tk))
        vals.append((jp - jm) / (2 * tk))
    slope = float("nan")
    if levels >= 3:
        d1, d2 = abs(vals[0] - vals[1]), abs(vals[1] - vals[2])
        if d1 > 0 and d2 > 0:
            slope = math.log2(d1 / d2)
    return FDResult(vals[0], vals, slope)


def fd_material_derivative(problem: Problem, V: VelocityField, t: float = 1e-3) -> np.ndarray:
    """Central difference of the pulled-back state coefficients."""
    up, _ = problem.state(flow_mesh(problem.mesh, V, t))
    um, _ = problem.state(flow_mesh(problem.mesh, V, -t))
    return (up.coefficients - um.coefficients) / (2 * t)


def h1_norm(space: FunctionSpace, coeffs: np.ndarray) -> float:
    b = volume_block(space)
    w, Dw = b.field(coeffs)
    return float(np.sqrt(np.sum(b.w * (np.einsum("rqi,rqi->rq", w, w) + np.einsum("rqij,rqij->rq", Dw, Dw)))))


# -- parameter-sensitivity checker -------------------------------------------------------------
@dataclass
class SensitivityReport:
    q: np.ndarray
    fd: np.ndarray
    rel_error: float
    coercivity: list[float]
    ok: bool
    message: str = ""


def _min_eig(B) -> float:
    if sp.issparse(B):
        import scipy.sparse.linalg as spla

        if B.shape[0] <= 2000:
            return float(np.linalg.eigvalsh(B.toarray())[0])
        return float(spla.eigsh(B, k=1, sigma=0, which="LM", return_eigenvectors=False)[0])
    return float(np.linalg.eigvalsh(np.asarray(B))[0])


def _solve(B, r):
    if sp.issparse(B):
        import scipy.sparse.linalg as spla

        return spla.spsolve(B.tocsc(), r)
    return np.linalg.solve(B, r)


def param_sensitivity_check(b_family, l_family, t0: float = 0.0, h: float = 1e-4,
                            samples: int = 5) -> SensitivityReport:
    """Check q = B(t0)^{-1} (l_dot - B_dot u(t0)) against the central FD of u(t) = B(t)^{-1} l(t).

    ``b_family(t)`` returns (B, B_dot), ``l_family(t)`` returns (l, l_dot).
    Coercivity is the smallest eigenvalue of B at ``samples`` times in [t0-h, t0+h].
    """
    B0, Bd = b_family(t0)
    l0, ld = l_family(t0)
    coer = [_min_eig(b_family(t)[0]) for t in np.linspace(t0 - h, t0 + h, samples)]
    if min(coer) <= 0:
        return SensitivityReport(np.array([]), np.array([]), float("nan"), coer, False,
                                 "B(t) is not uniformly positive definite on the interval")
    u0 = _solve(B0, l0)
    q = _solve(B0, ld - Bd @ u0)
    up = _solve(b_family(t0 + h)[0], l_family(t0 + h)[0])
    um = _solve(b_family(t0 - h)[0], l_family(t0 - h)[0])
    fd = (up - um) / (2 * h)
    scale = max(np.linalg.norm(q), np.linalg.norm(fd), 1e-300)
    err = float(np.linalg.norm(q - fd) / scale)
    return SensitivityReport(q, fd, err, coer, True)


def elasticity_family(mesh: Mesh, mat: MaterialParams, loads: Loads, V: VelocityField, degree: int = 1):
    """(b_family, l_family) for the perturbed meshes x + t V_h, with exact matrix derivatives."""
    from .fem import assemble_stiffness_derivative

    Vn = V.at_points(mesh)

    def moved(t):
        pts = mesh.points + t * Vn
        return Mesh(pts, mesh.cells, mesh.facets, mesh.facet_tags, mesh.tag_roles, validate=False)

    def constrain(A, free):
        D = sp.diags(free.astype(float))
        return (D @ A @ D + sp.diags(1.0 - free)).tocsr()

    def b_family(t):
        space = FunctionSpace(moved(t), degree)
        sys_ = assemble_elasticity(space, mat)
        Kd = assemble_stiffness_derivative(space, mat, Vn)
        free = sys_.free_mask
        D = sp.diags(free.astype(float))
        return constrain(sys_.matrix, free), (D @ Kd @ D).tocsr()

    def l_family(t):
        m = moved(t)
        space = FunctionSpace(m, degree)
        sys_ = assemble_elasticity(space, mat)
        lv = assemble_load(space, loads)
        ld = load_rate(space, loads, VelocityField.from_nodal(Vn))
        lv[~sys_.free_mask] = 0.0
        ld[~sys_.free_mask] = 0.0
        return lv, ld

    return b_family, l_family


def load_rate(space: FunctionSpace, loads: Loads, V: VelocityField) -> np.ndarray:
    """L_dot(v) alone (no B_dot term)."""
    zero = DisplacementField(space, np.zeros((space.n_nodes, 3)))
    return material_derivative_rhs(space, zero, MaterialParams(), loads, V)


__all__ = [
    "VelocityField", "combine", "Transport", "flow_map", "flow_mesh", "SurfaceOperator", "tangential_ops",
    "reynolds_volume", "reynolds_surface", "material_derivative_rhs", "solve_material_derivative",
    "local_shape_derivative", "nodal_gradient", "dj_material_form", "Problem", "FDResult",
    "fd_shape_derivative", "fd_material_derivative", "h1_norm", "SensitivityReport",
    "param_sensitivity_check", "elasticity_family", "load_rate",
]
