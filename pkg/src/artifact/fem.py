"""Lagrange P1/P2 elasticity on straight-sided tetrahedra.

Weak problem: find u with u = u_D on Gamma_D and
    B(u, v) = int lam tr e(u) tr e(v) + 2 mu e(u):e(v) dx = L(v)
    L(v) = int <f, v> dx + int_{Gamma_N} <g, v> dS.
DOFs are node-major: dof = 3 * node + component.
"""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import MeshError, SolverError
from .mesh import Mesh
from .mesh.core import TET_EDGES, TRI_EDGES
from .quadrature import tet_rule, tri_rule

ArrayFn = Callable[[np.ndarray], np.ndarray]

DIRECT_LIMIT = 60000  # largest system the "auto" method and the Korn check factorize


def test_mode() -> bool:
    return os.environ.get("ARTIFACT_TEST_MODE", "") not in ("", "0")


# -- material --------------------------------------------------------------
@dataclass
class MaterialParams:
    E: float = 70000.0
    nu: float = 0.3
    K: float = 443.9
    n_hat: float = 0.064
    sigma_f_prime: float = 2536.0
    eps_f_prime: float = 0.254
    b: float = -0.07
    c: float = -0.593
    m: float = 2.0
    sigma_0: float = 100.0
    m_cer: float = 5.0
    amplitude_factor: float = 1.0  # sigma_v is scaled by this before the LCF chain
    lam: float | None = None
    mu: float | None = None

    def __post_init__(self):
        if self.lam is None:
            self.lam = self.E * self.nu / ((1 + self.nu) * (1 - 2 * self.nu))
        if self.mu is None:
            self.mu = self.E / (2 * (1 + self.nu))
        if not (self.lam >= 0 and self.mu > 0):
            raise ValueError("need lam >= 0 and mu > 0")
        if not (self.b < 0 and self.c < 0):
            raise ValueError("CMB exponents b, c must be negative")
        if not (self.m > 0 and 0 < self.n_hat < 1):
            raise ValueError("need m > 0 and 0 < n_hat < 1")
        if not (self.E > 0 and self.K > 0 and self.sigma_f_prime > 0 and self.eps_f_prime > 0):
            raise ValueError("E, K, sigma_f', eps_f' must be positive")

    @classmethod
    def lame(cls, lam: float, mu: float, **kw) -> "MaterialParams":
        return cls(lam=lam, mu=mu, **kw)

    def hooke(self, eps: np.ndarray) -> np.ndarray:
        """lam tr(A) I + mu (A + A^T) for (..., 3, 3) arrays (A need not be symmetric)."""
        tr = np.trace(eps, axis1=-2, axis2=-1)
        return self.lam * tr[..., None, None] * np.eye(3) + self.mu * (eps + np.swapaxes(eps, -1, -2))


# -- fields ------------------------------------------------------------------
@dataclass
class VectorData:
    """Vector-valued load data: value x -> (n, 3) and optional gradient x -> (n, 3, 3)."""

    value: ArrayFn
    grad: ArrayFn | None = None

    @classmethod
    def make(cls, obj) -> "VectorData | None":
        if obj is None:
            return None
        if isinstance(obj, VectorData):
            return obj
        if callable(obj):
            return cls(obj, None)
        c = np.asarray(obj, dtype=float).reshape(3)
        if not np.any(c):
            return None
        return cls(lambda x, c=c: np.broadcast_to(c, (len(x), 3)).copy(),
                   lambda x: np.zeros((len(x), 3, 3)))

    def gradient(self, x: np.ndarray) -> np.ndarray:
        if self.grad is None:
            raise ValueError("load gradient required for shape derivatives")
        return self.grad(x)


@dataclass
class Loads:
    """Volume force f and Neumann tractions g (one entry per facet tag, or ``"*"`` for all)."""

    f: VectorData | None = None
    g: dict = field(default_factory=dict)

    @classmethod
    def make(cls, f=None, g=None) -> "Loads":
        if g is None:
            gd = {}
        elif isinstance(g, dict):
            gd = {k: VectorData.make(v) for k, v in g.items()}
        else:
            gd = {"*": VectorData.make(g)}
        gd = {k: v for k, v in gd.items() if v is not None}
        return cls(VectorData.make(f), gd)

    def traction_groups(self, mesh: Mesh) -> list[tuple[np.ndarray, VectorData]]:
        """Pairs (facet indices, traction data) restricted to Neumann facets."""
        out = []
        neu = mesh.neumann_mask
        for key, data in self.g.items():
            if key == "*":
                idx = np.nonzero(neu)[0]
            else:
                sel = mesh.facet_tags == int(key)
                if np.any(sel & ~neu):
                    warnings.warn(f"traction on Dirichlet tag {key} ignored")
                idx = np.nonzero(sel & neu)[0]
            if len(idx):
                out.append((idx, data))
        return out


# -- basis functions -----------------------------------------------------------
def basis(lmb: np.ndarray, degree: int) -> tuple[np.ndarray, np.ndarray]:
    """Tet Lagrange basis at barycentric points.

    lmb: (..., 4).  Returns N (..., nb) and dN/dlambda (..., nb, 4).
    """
    if degree == 1:
        N = lmb.copy()
        dN = np.broadcast_to(np.eye(4), lmb.shape[:-1] + (4, 4)).copy()
        return N, dN
    sh = lmb.shape[:-1]
    N = np.empty(sh + (10,))
    dN = np.zeros(sh + (10, 4))
    for i in range(4):
        N[..., i] = lmb[..., i] * (2 * lmb[..., i] - 1)
        dN[..., i, i] = 4 * lmb[..., i] - 1
    for k, (a, b) in enumerate(TET_EDGES):
        N[..., 4 + k] = 4 * lmb[..., a] * lmb[..., b]
        dN[..., 4 + k, a] = 4 * lmb[..., b]
        dN[..., 4 + k, b] = 4 * lmb[..., a]
    return N, dN


def tri_basis(mu_: np.ndarray, degree: int) -> np.ndarray:
    if degree == 1:
        return mu_.copy()
    sh = mu_.shape[:-1]
    N = np.empty(sh + (6,))
    for i in range(3):
        N[..., i] = mu_[..., i] * (2 * mu_[..., i] - 1)
    for k, (a, b) in enumerate(TRI_EDGES):
        N[..., 3 + k] = 4 * mu_[..., a] * mu_[..., b]
    return N


# -- function space ------------------------------------------------------------
class FunctionSpace:
    """Vector Lagrange space of degree 1 or 2 on ``mesh.to_degree(degree)``."""

    def __init__(self, mesh: Mesh, degree: int | None = None):
        degree = mesh.degree if degree is None else degree
        if degree not in (1, 2):
            raise ValueError("degree must be 1 or 2")
        self.degree = degree
        self.mesh = mesh.to_degree(degree)
        self.cell_nodes = self.mesh.cells
        self.facet_nodes = self.mesh.facets
        self.n_nodes = len(self.mesh.points)
        self.ndof = 3 * self.n_nodes
        self.nb = self.cell_nodes.shape[1]

    @property
    def points(self) -> np.ndarray:
        return self.mesh.points

    @cached_property
    def geometry(self) -> tuple[np.ndarray, np.ndarray]:
        """(volume, grad lambda) per cell; grad lambda has shape (nc, 4, 3)."""
        p = self.mesh.points[self.mesh.corners]
        Jm = np.swapaxes(p[:, 1:] - p[:, :1], 1, 2)  # columns are edge vectors
        det = np.linalg.det(Jm)
        Jinv = np.linalg.inv(Jm)  # rows are grad lambda_1..3
        G = np.empty((len(p), 4, 3))
        G[:, 1:] = Jinv
        G[:, 0] = -Jinv.sum(axis=1)
        return det / 6.0, G

    @property
    def volumes(self) -> np.ndarray:
        return self.geometry[0]

    @property
    def grad_lambda(self) -> np.ndarray:
        return self.geometry[1]

    def cell_dofs(self, cells=None) -> np.ndarray:
        n = self.cell_nodes if cells is None else self.cell_nodes[cells]
        return (3 * n[..., None] + np.arange(3)).reshape(len(n), -1)

    def map_points(self, cells: np.ndarray, lmb: np.ndarray) -> np.ndarray:
        """Physical coordinates of barycentric points; lmb (nc, nq, 4) or (nq, 4)."""
        p = self.mesh.points[self.mesh.corners[cells]]  # (nc, 4, 3)
        if lmb.ndim == 2:
            return np.einsum("qa,cak->cqk", lmb, p)
        return np.einsum("cqa,cak->cqk", lmb, p)

    def basis_grads(self, cells: np.ndarray, lmb: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Values (nc, nq, nb) and physical gradients (nc, nq, nb, 3)."""
        N, dN = basis(lmb, self.degree)
        G = self.grad_lambda[cells]
        if lmb.ndim == 2:
            grads = np.einsum("qia,cak->cqik", dN, G)
            N = np.broadcast_to(N, (len(cells),) + N.shape)
        else:
            grads = np.einsum("cqia,cak->cqik", dN, G)
        return N, grads

    def evaluate(self, coeffs: np.ndarray, cells: np.ndarray, lmb: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Field values (nc, nq, 3) and gradients Du (nc, nq, 3, 3), Du[i, k] = d u_i / d x_k."""
        N, grads = self.basis_grads(cells, lmb)
        U = coeffs[self.cell_nodes[cells]]  # (nc, nb, 3)
        val = np.einsum("cqi,cij->cqj", N, U)
        Du = np.einsum("cqik,cij->cqjk", grads, U)
        return val, Du

    # facet data
    @cached_property
    def facet_geometry(self) -> tuple[np.ndarray, np.ndarray]:
        return self.mesh.facet_areas_normals()

    def facet_cell_bary(self, facets: np.ndarray, mu_: np.ndarray) -> np.ndarray:
        """Cell barycentric coordinates (nf, nq, 4) of facet points given by facet bary mu (nq, 3)."""
        loc = self.mesh.facet_local_vertices[facets]  # (nf, 3)
        out = np.zeros((len(facets), len(mu_), 4))
        rows = np.arange(len(facets))
        for k in range(3):
            out[rows[:, None], np.arange(len(mu_))[None, :], loc[:, k : k + 1]] = mu_[None, :, k]
        return out

    def facet_points(self, facets: np.ndarray, mu_: np.ndarray) -> np.ndarray:
        p = self.mesh.points[self.mesh.facet_corners[facets]]
        return np.einsum("qa,fak->fqk", mu_, p)

    def interpolate(self, fn: ArrayFn) -> np.ndarray:
        return np.asarray(fn(self.mesh.points), dtype=float).reshape(self.n_nodes, 3)

    def vertex_interpolant(self, vertex_values: np.ndarray) -> np.ndarray:
        """Extend corner-vertex values linearly to all nodes (P1 interpolant)."""
        out = np.array(vertex_values, dtype=float, copy=True)
        if self.degree == 2:
            c = self.cell_nodes
            for k, (a, b) in enumerate(TET_EDGES):
                out[c[:, 4 + k]] = 0.5 * (out[c[:, a]] + out[c[:, b]])
        return out

    @cached_property
    def dirichlet_dofs(self) -> np.ndarray:
        nodes = self.mesh.dirichlet_nodes
        return (3 * nodes[:, None] + np.arange(3)).ravel()


@dataclass
class DisplacementField:
    space: FunctionSpace
    coefficients: np.ndarray  # (n_nodes, 3)

    @property
    def degree(self) -> int:
        return self.space.degree

    @property
    def vector(self) -> np.ndarray:
        return self.coefficients.ravel()


# -- assembly ------------------------------------------------------------------
def _stiffness_quadrature(degree: int):
    return tet_rule(0 if degree == 1 else 2)


def element_stiffness(grads: np.ndarray, wdet: np.ndarray, lam: float, mu: float,
                      grads2: np.ndarray | None = None) -> np.ndarray:
    """(nc, 3nb, 3nb) element matrices from gradients (nc, nq, nb, 3) and weights (nc, nq).

    With ``grads2`` the test gradients ``grads`` and trial gradients ``grads2``
    differ (used for stiffness derivatives).
    """
    g2 = grads if grads2 is None else grads2
    T1 = np.einsum("cq,cqia,cqjb->ciajb", wdet, grads, g2)
    S = np.einsum("ciaja->cij", T1)
    nc, nb = grads.shape[0], grads.shape[2]
    K = lam * T1 + mu * np.swapaxes(T1, 2, 4)
    K += mu * S[:, :, None, :, None] * np.eye(3)[None, None, :, None, :]
    return K.reshape(nc, 3 * nb, 3 * nb)


def _assemble_cells(space: FunctionSpace, element_fn, chunk: int = 2000) -> sp.csr_matrix:
    nc = space.mesh.n_cells
    nd = space.ndof
    A = sp.csr_matrix((nd, nd))
    for s in range(0, nc, chunk):
        cells = np.arange(s, min(nc, s + chunk))
        Ke = element_fn(cells)
        dofs = space.cell_dofs(cells)
        n = dofs.shape[1]
        rows = np.repeat(dofs, n, axis=1).ravel()
        cols = np.tile(dofs, (1, n)).ravel()
        A = A + sp.coo_matrix((Ke.ravel(), (rows, cols)), shape=(nd, nd)).tocsr()
    return A


def assemble_elasticity(mesh_or_space, mat: MaterialParams, degree: int | None = None) -> "LinearSystem":
    """Stiffness matrix of B(., .) with the Dirichlet set of the mesh."""
    space = mesh_or_space if isinstance(mesh_or_space, FunctionSpace) else FunctionSpace(mesh_or_space, degree)
    rule = _stiffness_quadrature(space.degree)
    vol = space.volumes

    def element_fn(cells):
        _, grads = space.basis_grads(cells, rule.bary)
        wdet = 6.0 * vol[cells, None] * rule.weights[None, :]
        return element_stiffness(grads, wdet, mat.lam, mat.mu)

    A = _assemble_cells(space, element_fn)
    A = ((A + A.T) * 0.5).tocsr()
    return LinearSystem(A, space.dirichlet_dofs, space)


def assemble_stiffness_derivative(space: FunctionSpace, mat: MaterialParams, vertex_velocity: np.ndarray) -> sp.csr_matrix:
    """d/dt of the stiffness matrix when the vertices move with x + t V (affine cells)."""
    rule = _stiffness_quadrature(space.degree)
    vol = space.volumes
    Vc = vertex_velocity[space.mesh.corners]
    DV = np.einsum("caj,cak->cjk", Vc, space.grad_lambda)
    div = np.trace(DV, axis1=1, axis2=2)

    def element_fn(cells):
        _, grads = space.basis_grads(cells, rule.bary)
        gdot = -np.einsum("cki,cqnk->cqni", DV[cells], grads)  # -DV^T grad phi
        wdet = 6.0 * vol[cells, None] * rule.weights[None, :]
        K = element_stiffness(grads, wdet, mat.lam, mat.mu)
        return (element_stiffness(gdot, wdet, mat.lam, mat.mu, grads)
                + element_stiffness(grads, wdet, mat.lam, mat.mu, gdot) + div[cells, None, None] * K)

    return _assemble_cells(space, element_fn)


def assemble_load(mesh_or_space, f=None, g=None, degree: int | None = None, qdeg: int | None = None) -> np.ndarray:
    """Load vector of L(v); ``f`` and ``g`` accept constants, callables or VectorData."""
    space = mesh_or_space if isinstance(mesh_or_space, FunctionSpace) else FunctionSpace(mesh_or_space, degree)
    loads = f if isinstance(f, Loads) else Loads.make(f, g)
    b = np.zeros((space.n_nodes, 3))
    if loads.f is not None:
        rule = tet_rule(qdeg if qdeg is not None else 2 * space.degree + 2)
        cells = np.arange(space.mesh.n_cells)
        N, _ = basis(rule.bary, space.degree)
        x = space.map_points(cells, rule.bary)
        fv = loads.f.value(x.reshape(-1, 3)).reshape(x.shape)
        w = 6.0 * space.volumes[:, None] * rule.weights[None, :]
        contrib = np.einsum("cq,qi,cqk->cik", w, N, fv)
        np.add.at(b, space.cell_nodes, contrib)
    frule = tri_rule(qdeg if qdeg is not None else 4)
    area, _ = space.facet_geometry
    Nf = tri_basis(frule.bary, space.degree)
    for idx, data in loads.traction_groups(space.mesh):
        x = space.facet_points(idx, frule.bary)
        gv = data.value(x.reshape(-1, 3)).reshape(x.shape)
        w = 2.0 * area[idx, None] * frule.weights[None, :]
        contrib = np.einsum("fq,qi,fqk->fik", w, Nf, gv)
        np.add.at(b, space.facet_nodes[idx], contrib)
    return b.ravel()


# -- linear system ---------------------------------------------------------------
def rigid_modes(points: np.ndarray) -> np.ndarray:
    """(3n, 6) translations and infinitesimal rotations."""
    n = len(points)
    R = np.zeros((n, 3, 6))
    for k in range(3):
        R[:, k, k] = 1.0
    x, y, z = points.T
    R[:, 0, 3], R[:, 1, 3] = -y, x
    R[:, 1, 4], R[:, 2, 4] = -z, y
    R[:, 0, 5], R[:, 2, 5] = z, -x
    return R.reshape(3 * n, 6)


class LinearSystem:
    """Stiffness matrix plus Dirichlet constraint set; caches solver setup."""

    def __init__(self, matrix: sp.csr_matrix, dirichlet_dofs: np.ndarray, space: FunctionSpace | None = None):
        self.matrix = matrix.tocsr()
        self.dirichlet_dofs = np.asarray(dirichlet_dofs, dtype=np.int64)
        self.space = space
        self.rhs: np.ndarray | None = None
        self._lu = None
        self._amg = None
        self._korn: float | None = None

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @cached_property
    def free_mask(self) -> np.ndarray:
        m = np.ones(self.n, dtype=bool)
        m[self.dirichlet_dofs] = False
        return m

    @cached_property
    def constrained(self) -> sp.csr_matrix:
        """Symmetric elimination: Dirichlet rows/columns zeroed, unit diagonal."""
        d = self.free_mask.astype(float)
        D = sp.diags(d)
        A = (D @ self.matrix @ D).tocsr()
        A = A + sp.diags(1.0 - d)
        A.eliminate_zeros()
        return A.tocsr()

    def lift(self, rhs: np.ndarray, u_D: np.ndarray | None = None) -> np.ndarray:
        b = np.array(rhs, dtype=float, copy=True)
        if u_D is None:
            b[self.dirichlet_dofs] = 0.0
            return b
        ud = np.zeros(self.n)
        ud[self.dirichlet_dofs] = u_D
        b -= self.matrix @ ud
        b[self.dirichlet_dofs] = u_D
        return b

    @cached_property
    def block_jacobi(self) -> spla.LinearOperator:
        A = self.constrained
        n = self.n // 3
        blocks = np.zeros((n, 3, 3))
        for a in range(3):
            for c in range(3):
                d = A.diagonal(c - a)  # entries A[i, i + c - a]
                start = a if c >= a else c
                blocks[:, a, c] = d[3 * np.arange(n) + start]
        inv = np.linalg.inv(blocks)
        P = sp.bsr_matrix((inv, np.arange(n), np.arange(n + 1)), shape=(self.n, self.n)).tocsr()
        return spla.aslinearoperator(P)

    def _amg_precond(self):
        if self._amg is None:
            import pyamg

            B = rigid_modes(self.space.points) if self.space is not None else None
            if B is not None:
                B = B * self.free_mask[:, None]
            self._amg = pyamg.smoothed_aggregation_solver(self.constrained, B=B, max_coarse=500)
        return self._amg.aspreconditioner(cycle="V")

    def factorized(self):
        if self._lu is None:
            self._lu = spla.splu(self.constrained.tocsc())
        return self._lu

    def check_korn(self, iterations: int = 20) -> float:
        """Smallest Ritz value of the constrained matrix by inverse power iteration."""
        if self._korn is not None:
            return self._korn
        if len(self.dirichlet_dofs) == 0:
            raise SolverError("no Dirichlet constraints; the elasticity form is not coercive")
        A = self.constrained
        free = self.free_mask
        rng = np.random.default_rng(12345)
        x = rng.standard_normal(self.n) * free
        x /= np.linalg.norm(x)
        direct = self._lu is not None or self.n <= DIRECT_LIMIT
        M = None if direct else self._amg_precond()
        for _ in range(iterations):
            if direct:
                y = self.factorized().solve(x)
            else:
                y, _ = spla.cg(A, x, rtol=1e-8, M=M, maxiter=2000)
            y *= free
            x = y / np.linalg.norm(y)
        ritz = float(x @ (A @ x))
        if not ritz > 0:
            raise SolverError(f"constrained stiffness not positive definite (Ritz value {ritz:.3e})")
        self._korn = ritz
        return ritz

    def solve(self, rhs: np.ndarray, tol: float = 1e-10, method: str = "cg", u_D: np.ndarray | None = None,
              maxiter: int | None = None) -> np.ndarray:
        """Solve with homogeneous (or given) Dirichlet data; returns the full dof vector."""
        if not (0 < tol <= 1e-4):
            raise ValueError("tol must lie in (0, 1e-4]")
        if len(self.dirichlet_dofs) == 0:
            raise SolverError("Dirichlet set is empty")
        if method == "auto":
            method = "direct" if self.n <= DIRECT_LIMIT else "amg"
        if test_mode():
            if method == "direct":
                self.factorized()  # the Korn check then reuses the factorization
            self.check_korn()
        b = self.lift(rhs, u_D)
        nb = np.linalg.norm(b)
        if nb == 0:
            return np.zeros(self.n)
        A = self.constrained
        if method == "direct":
            lu = self.factorized()
            x = lu.solve(b)
            x += lu.solve(b - A @ x)  # one refinement step
            res = np.linalg.norm(A @ x - b) / nb
            if res > 1e-6:
                raise SolverError(f"direct solve residual {res:.3e}", res)
            return x
        elif method in ("cg", "amg"):
            M = self.block_jacobi if method == "cg" else self._amg_precond()
            maxiter = maxiter or max(2000, 4 * int(np.sqrt(self.n)) * 20)
            x, info = spla.cg(A, b, rtol=tol, atol=0.0, M=M, maxiter=maxiter)
            if info != 0:
                res = np.linalg.norm(A @ x - b) / nb
                raise SolverError(f"CG did not converge after {maxiter} iterations (residual {res:.3e})", res)
        else:
            raise ValueError(f"unknown solver method {method!r}")
        res = np.linalg.norm(A @ x - b) / nb
        if res > max(tol, 1e-12) * 10:
            raise SolverError(f"solve residual {res:.3e} above tolerance", res)
        return x


def solve(system: LinearSystem, rhs: np.ndarray | None = None, tol: float = 1e-10, method: str = "cg",
          u_D: np.ndarray | None = None) -> DisplacementField:
    b = system.rhs if rhs is None else rhs
    if b is None:
        raise ValueError("no right-hand side given")
    x = system.solve(b, tol=tol, method=method, u_D=u_D)
    return DisplacementField(system.space, x.reshape(-1, 3))


def solve_state(mesh: Mesh, mat: MaterialParams, loads: Loads, degree: int = 1, tol: float = 1e-10,
                method: str = "cg") -> tuple[DisplacementField, LinearSystem]:
    space = FunctionSpace(mesh, degree)
    if space.mesh.dirichlet_area() <= 0:
        raise MeshError("Dirichlet boundary has zero measure")
    system = assemble_elasticity(space, mat)
    system.rhs = assemble_load(space, loads)
    return solve(system, tol=tol, method=method), system


# -- stresses ----------------------------------------------------------------------
@dataclass
class StressField:
    sigma: np.ndarray  # (nc, nq, 3, 3)
    eps: np.ndarray
    bary: np.ndarray  # (nq, 4) evaluation points


def stress(u: DisplacementField, mat: MaterialParams, bary: np.ndarray | None = None) -> StressField:
    """sigma = lam div(u) I + mu (Du + Du^T) per cell (P1) or at the 4 Gauss points (P2)."""
    space = u.space
    if bary is None:
        bary = tet_rule(0 if space.degree == 1 else 2).bary
    cells = np.arange(space.mesh.n_cells)
    _, Du = space.evaluate(u.coefficients, cells, bary)
    eps = 0.5 * (Du + np.swapaxes(Du, -1, -2))
    return StressField(mat.hooke(eps), eps, bary)


def von_mises(sigma: np.ndarray) -> np.ndarray:
    dev = sigma - np.trace(sigma, axis1=-2, axis2=-1)[..., None, None] * np.eye(3) / 3.0
    return np.sqrt(1.5 * np.einsum("...ij,...ij->...", dev, dev))


def vertex_averages(space: FunctionSpace, cell_values: np.ndarray, vertices: np.ndarray | None = None) -> np.ndarray:
    """Volume-weighted average over adjacent cells; cell_values (nc, 4, ...) per local corner."""
    mesh = space.mesh
    vol = space.volumes
    n = len(mesh.points)
    acc = np.zeros((n,) + cell_values.shape[2:])
    wsum = np.zeros(n)
    for a in range(4):
        idx = mesh.corners[:, a]
        np.add.at(acc, idx, vol.reshape((-1,) + (1,) * (cell_values.ndim - 2)) * cell_values[:, a])
        np.add.at(wsum, idx, vol)
    if vertices is None:
        vertices = mesh.vertex_ids
    return acc[vertices] / wsum[vertices].reshape((-1,) + (1,) * (cell_values.ndim - 2))


def boundary_stress(u: DisplacementField, mat: MaterialParams, geometry) -> tuple[np.ndarray, np.ndarray]:
    """sigma and D(sigma(u))[n] at boundary vertices (volume-weighted cell averages).

    D(sigma)[n] uses per-cell stress gradients and vanishes for P1 fields.
    """
    space = u.space
    verts = geometry.vertices
    cells = np.arange(space.mesh.n_cells)
    corner_bary = np.eye(4)
    _, Du = space.evaluate(u.coefficients, cells, corner_bary)  # (nc, 4, 3, 3)
    sig = mat.hooke(0.5 * (Du + np.swapaxes(Du, -1, -2)))
    sig_v = vertex_averages(space, sig, verts)
    if space.degree == 1:
        warnings.warn("D(sigma)[n] vanishes identically for P1 fields")
        return sig_v, np.zeros_like(sig_v)
    # sigma is affine per cell: its gradient is sum_a sigma(corner a) (x) grad lambda_a
    G = space.grad_lambda
    dsig = np.einsum("caij,cak->cijk", sig, G)  # (nc, 3, 3, 3)
    dsig_c = np.broadcast_to(dsig[:, None], (len(cells), 4) + dsig.shape[1:])
    dsig_v = vertex_averages(space, np.ascontiguousarray(dsig_c), verts)
    dn = np.einsum("vijk,vk->vij", dsig_v, geometry.vertex_normals)
    return sig_v, dn
