"""Descent directions from the shape gradient and an Armijo shape-optimization loop.

Boundary directions (L2, surface Helmholtz) live on the boundary vertices and
are extended into the volume by an elastic solve with the boundary values as
Dirichlet data. The volume-extension direction solves eps(W):eps(V) = -dJ[V]
directly. Every trial step re-solves the state and measures the true J.
"""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .adjoint_gradient import (
    AdjointSpec,
    ShapeGradientDensity,
    distributed_sensitivity,
    hadamard_density,
    solve_adjoint,
)
from .errors import ConfigError, GeometryError, NumericError
from .failure_prob import WeibullModel, eta_from_j, weibull_quantile
from .fem import DisplacementField, FunctionSpace, LinearSystem, MaterialParams, assemble_elasticity
from .functionals import evaluate
from .mesh import Mesh, SurfaceGeometry, deform, mean_edge_length, quality, surface_geometry, write_vtk
from .shape_calculus import Problem

log = logging.getLogger(__name__)

L2 = "L2"
HELMHOLTZ = "HELMHOLTZ"
VOLUME_EXTENSION = "VOLUME_EXTENSION"
METHODS = (L2, HELMHOLTZ, VOLUME_EXTENSION)


@dataclass
class ArmijoParams:
    alpha0: float = 1.0  # first trial as a fraction of the step cap
    shrink: float = 0.5
    c1: float = 1e-4
    max_backtracks: int = 8

    def __post_init__(self):
        if not 0 < self.c1 < 1:
            raise ConfigError("Armijo c1 must lie in (0, 1)")
        if not 0 < self.shrink < 1:
            raise ConfigError("Armijo shrink must lie in (0, 1)")
        if self.alpha0 <= 0 or self.max_backtracks < 0:
            raise ConfigError("alpha0 must be positive and max_backtracks non-negative")


@dataclass
class DescentConfig:
    method: str = HELMHOLTZ
    c: float | None = None  # None: (2 * mean edge length)^2
    armijo: ArmijoParams = field(default_factory=ArmijoParams)
    max_iters: int = 10
    quality_floor: float = 0.05  # minimum normalised volume ratio
    step_cap: float | None = None  # max vertex move per step; None: 0.25 * mean edge length
    grad_tol: float = 0.0  # stop when ||G||_L2 <= grad_tol
    cutoff_layers: float = 2.0  # width of the Gamma_D cutoff band in mean edge lengths
    weibull_m: float = 2.0
    out_dir: str | None = None

    def __post_init__(self):
        self.method = str(self.method).upper()
        if self.method not in METHODS:
            raise ConfigError(f"unknown descent method {self.method!r}")
        if self.c is not None and self.c < 0:
            raise ConfigError("smoothing parameter c must be >= 0")
        if self.max_iters < 0 or self.quality_floor < 0 or self.cutoff_layers < 0:
            raise ConfigError("max_iters, quality_floor and cutoff_layers must be >= 0")
        if self.step_cap is not None and self.step_cap <= 0:
            raise ConfigError("step_cap must be positive")


@dataclass
class TraceRow:
    iteration: int
    j: float
    g_norm: float
    step: float  # max vertex displacement of the accepted step (0 if none)
    alpha: float
    dj: float  # directional derivative dJ[W] of the discrete functional
    quality: float
    eta: float
    q05: float
    accepted: bool
    backtracks: int
    j_trial: float = math.nan


@dataclass
class OptimizationTrace:
    rows: list[TraceRow] = field(default_factory=list)
    stop_reason: str = ""
    c1: float = 1e-4
    mesh: Mesh | None = None  # final accepted mesh

    @property
    def j_values(self) -> list[float]:
        """J at the start of each iteration followed by the last accepted value."""
        out = [r.j for r in self.rows]
        if self.rows and self.rows[-1].accepted:
            out.append(self.rows[-1].j_trial)
        return out

    @property
    def n_accepted(self) -> int:
        return sum(r.accepted for r in self.rows)

    def armijo_holds(self) -> bool:
        return all(r.j_trial <= r.j + self.c1 * r.alpha * r.dj for r in self.rows if r.accepted)

    def write_csv(self, path) -> None:
        names = list(TraceRow.__dataclass_fields__)
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(names)
            for r in self.rows:
                wr.writerow([_fmt(getattr(r, k)) for k in names])


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return "%.9e" % float(v)


# -- directions -----------------------------------------------------------------------------
def _density_values(G) -> np.ndarray:
    return G.values if isinstance(G, ShapeGradientDensity) else np.asarray(G, dtype=float)


def _fixed_vertex_mask(G, geometry: SurfaceGeometry) -> np.ndarray:
    if isinstance(G, ShapeGradientDensity):
        return ~G.on_neumann
    return np.zeros(len(geometry.vertices), dtype=bool)


def l2_direction(G, geometry: SurfaceGeometry) -> np.ndarray:
    """W = -G n at the boundary vertices (geometry numbering), zero on Gamma_D."""
    g = _density_values(G)
    W = -g[:, None] * geometry.vertex_normals
    W[_fixed_vertex_mask(G, geometry)] = 0.0
    return W


def cutoff_weights(mesh: Mesh, geometry: SurfaceGeometry, width: float) -> np.ndarray:
    """Smoothstep in the distance to the Gamma_D vertices: 0 on Gamma_D, 1 beyond ``width``."""
    dv = mesh.dirichlet_vertices
    if width <= 0 or len(dv) == 0:
        return np.ones(len(geometry.vertices))
    from scipy.spatial import cKDTree

    dist, _ = cKDTree(mesh.points[dv]).query(mesh.points[geometry.vertices])
    s = np.clip(dist / width, 0.0, 1.0)
    return s * s * s * (10.0 - 15.0 * s + 6.0 * s * s)


def helmholtz_smooth(f: np.ndarray, geometry: SurfaceGeometry, c: float, fixed: np.ndarray | None = None) -> np.ndarray:
    """w = (M + c L)^{-1} M f for vertex data f (nv,) or (nv, k), with w = 0 at ``fixed`` vertices."""
    if c < 0:
        raise ConfigError("smoothing parameter c must be >= 0")
    f = np.asarray(f, dtype=float)
    fixed = np.zeros(len(f), dtype=bool) if fixed is None else fixed
    free = np.nonzero(~fixed)[0]
    out = np.zeros_like(f)
    if len(free) == 0:
        return out
    A = (sp.diags(geometry.mass) + c * geometry.laplacian).tocsr()[free][:, free].tocsc()
    rhs = (geometry.mass.reshape((-1,) + (1,) * (f.ndim - 1)) * f)[free]
    try:
        lu = spla.splu(A)
    except RuntimeError as exc:
        raise NumericError(f"Helmholtz system is singular: {exc}") from exc
    out[free] = lu.solve(rhs)
    if not np.all(np.isfinite(out)):
        raise NumericError("Helmholtz solve produced non-finite values")
    return out


def helmholtz_direction(G, geometry: SurfaceGeometry, c: float, cutoff: np.ndarray | None = None) -> np.ndarray:
    """W = -(M + c L)^{-1} M (G n) per component, W = 0 on Gamma_D, optionally damped by ``cutoff``."""
    g = _density_values(G)
    W = -helmholtz_smooth(g[:, None] * geometry.vertex_normals, geometry, c, _fixed_vertex_mask(G, geometry))
    if cutoff is not None:
        W *= cutoff[:, None]
    return W


def _p1_system(mesh: Mesh, mat: MaterialParams, fixed_vertices: np.ndarray) -> tuple[LinearSystem, np.ndarray]:
    """P1 elasticity system on the corner vertices with the given vertices clamped.

    Returns the system and the map from mesh point index to P1 vertex index.
    """
    m1 = mesh.to_p1()
    space = FunctionSpace(m1, 1)
    K = assemble_elasticity(space, mat).matrix
    remap = -np.ones(len(mesh.points), dtype=np.int64)
    remap[mesh.vertex_ids] = np.arange(len(mesh.vertex_ids))
    fv = remap[np.asarray(fixed_vertices, dtype=np.int64)]
    dofs = (3 * fv[:, None] + np.arange(3)).ravel()
    return LinearSystem(K, dofs, space), remap


def harmonic_extension(mesh: Mesh, boundary_values: np.ndarray, geometry: SurfaceGeometry,
                       mat: MaterialParams, tol: float = 1e-10) -> np.ndarray:
    """Extend boundary-vertex values into the volume by an elastic solve; returns a field per mesh point."""
    W = np.asarray(boundary_values, dtype=float)
    out = np.zeros((len(mesh.points), 3))
    if not W.any():
        return out
    system, remap = _p1_system(mesh, mat, geometry.vertices)
    x = system.solve(np.zeros(system.n), tol=tol, method="direct", u_D=W.ravel())
    out[mesh.vertex_ids] = x.reshape(-1, 3)
    return mesh.snap_midpoints(out)


def volume_extension_direction(mesh: Mesh, d: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """W with int eps(W):eps(V) dx = -dJ[V] for all V (P1 vertex space), W = 0 on Gamma_D.

    ``d`` is the distributed sensitivity per mesh point, dJ[V] = sum_a d_a . V_a.
    """
    d = np.asarray(d, dtype=float)
    out = np.zeros((len(mesh.points), 3))
    if not d.any():
        return out
    system, remap = _p1_system(mesh, MaterialParams.lame(0.0, 0.5), mesh.dirichlet_vertices)
    rhs = np.zeros((len(mesh.vertex_ids), 3))
    rhs[remap[mesh.vertex_ids]] = -d[mesh.vertex_ids]
    x = system.solve(rhs.ravel(), tol=tol, method="direct")
    out[mesh.vertex_ids] = x.reshape(-1, 3)
    return mesh.snap_midpoints(out)


def gradient_norm(G: ShapeGradientDensity) -> float:
    """||G||_{L2(Gamma_N)} with the facet quadrature."""
    return float(np.sqrt(np.sum(G.block_w * G.point_values ** 2)))


# -- optimization loop ----------------------------------------------------------------------
@dataclass
class _Iterate:
    j: float
    G: ShapeGradientDensity
    d: np.ndarray  # exact discrete sensitivity per point


def _linearize(problem: Problem, mesh: Mesh) -> _Iterate:
    J, mat, loads = problem.functional, problem.mat, problem.loads
    u, system = problem.state(mesh)
    j = evaluate(J, u, mat)
    geometry = surface_geometry(u.space.mesh)
    if J.state_dependent:
        p_w = solve_adjoint(system, u, mat, AdjointSpec(J, "weak"), geometry, tol=problem.tol, method=problem.method)
        p_d = solve_adjoint(system, u, mat, AdjointSpec(J, "discrete"), tol=problem.tol, method=problem.method)
    else:
        p_w = p_d = DisplacementField(u.space, np.zeros((u.space.n_nodes, 3)))
    G = hadamard_density(u, p_w, mat, loads, J, geometry)
    d = distributed_sensitivity(u, p_d, mat, loads, J)
    return _Iterate(j, G, d)


def _weibull_summary(j: float, m: float) -> tuple[float, float]:
    if not j > 0:
        return math.inf, math.inf
    w = WeibullModel(eta_from_j(j, m), m)
    return w.eta, float(weibull_quantile(w, 0.05))


def direction(config: DescentConfig, mesh: Mesh, it: _Iterate, mat: MaterialParams, c: float) -> np.ndarray:
    """Descent field per mesh point for the configured method."""
    geometry = it.G.geometry
    if config.method == VOLUME_EXTENSION:
        return volume_extension_direction(mesh, it.d)
    if config.method == L2:
        Wb = l2_direction(it.G, geometry)
    else:
        width = config.cutoff_layers * mean_edge_length(mesh)
        Wb = helmholtz_direction(it.G, geometry, c, cutoff_weights(mesh, geometry, width))
    return harmonic_extension(mesh, Wb, geometry, mat)


def optimize(problem: Problem, config: DescentConfig | None = None) -> OptimizationTrace:
    """Steepest descent with Armijo backtracking on the true functional."""
    config = config or DescentConfig()
    arm = config.armijo
    trace = OptimizationTrace(c1=arm.c1)
    mesh = problem.mesh.to_degree(problem.degree)
    h = mean_edge_length(mesh)
    c = config.c if config.c is not None else (2.0 * h) ** 2
    cap = config.step_cap if config.step_cap is not None else 0.25 * h
    if config.out_dir:
        os.makedirs(config.out_dir, exist_ok=True)
        _snapshot(config.out_dir, 0, mesh)
    trace.mesh = mesh
    if config.max_iters == 0:
        trace.stop_reason = "max_iters"
        return trace
    it = _linearize(problem, mesh)
    for k in range(config.max_iters):
        q = quality(mesh)["min_volume_ratio"]
        eta, q05 = _weibull_summary(it.j, config.weibull_m)
        gn = gradient_norm(it.G)
        row = TraceRow(k, it.j, gn, 0.0, 0.0, 0.0, q, eta, q05, False, 0)
        if q < config.quality_floor:
            trace.rows.append(row)
            trace.stop_reason = "quality floor"
            break
        if gn <= config.grad_tol or not np.any(it.G.values):
            trace.rows.append(row)
            trace.stop_reason = "gradient"
            break
        W = direction(config, mesh, it, problem.mat, c)
        wmax = float(np.max(np.linalg.norm(W, axis=1)))
        row.dj = float(np.sum(it.d * W))
        if not row.dj < 0 or wmax == 0:
            trace.rows.append(row)
            trace.stop_reason = "not a descent direction"
            break
        alpha = arm.alpha0 * cap / wmax
        accepted = None
        floor_hits = evaluated = 0
        for b in range(arm.max_backtracks + 1):
            row.backtracks = b
            try:
                trial = deform(mesh, W, alpha)
            except GeometryError:
                alpha *= arm.shrink
                continue
            if quality(trial)["min_volume_ratio"] < config.quality_floor:
                floor_hits += 1
                alpha *= arm.shrink
                continue
            evaluated += 1
            jt = problem.value(trial)
            row.j_trial = jt
            if jt <= it.j + arm.c1 * alpha * row.dj:
                accepted = trial
                break
            alpha *= arm.shrink
        if accepted is None:
            trace.rows.append(row)
            trace.stop_reason = "quality floor" if floor_hits and not evaluated else "line search failed"
            break
        row.accepted, row.alpha, row.step = True, alpha, alpha * wmax
        trace.rows.append(row)
        log.info("iter %d: J %.6e -> %.6e, step %.3e", k, row.j, row.j_trial, row.step)
        mesh = accepted
        trace.mesh = mesh
        if config.out_dir:
            _snapshot(config.out_dir, k + 1, mesh)
        if k + 1 == config.max_iters:
            trace.stop_reason = "max_iters"
            break
        it = _linearize(problem, mesh)
    if config.out_dir:
        trace.write_csv(os.path.join(config.out_dir, "trace.csv"))
    return trace


def _snapshot(out_dir: str, k: int, mesh: Mesh) -> None:
    write_vtk(os.path.join(out_dir, f"iter_{k:03d}.vtk"), mesh)
