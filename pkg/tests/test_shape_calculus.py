import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from artifact.errors import FlowError
from artifact.fem import DisplacementField, FunctionSpace, Loads, MaterialParams, solve_state
from artifact.functionals import CeramicFunctional, ComplianceFunctional, VolumeFunctional
from artifact.mesh import cantilever, icosphere_ball, surface_geometry, unit_cube
from artifact.shape_calculus import (
    Problem,
    VelocityField,
    combine,
    dj_material_form,
    elasticity_family,
    fd_material_derivative,
    fd_shape_derivative,
    flow_map,
    flow_mesh,
    h1_norm,
    local_shape_derivative,
    material_derivative_rhs,
    param_sensitivity_check,
    reynolds_surface,
    reynolds_volume,
    solve_material_derivative,
    tangential_ops,
)
from oracles import wave_field

DILATION = VelocityField.linear(np.eye(3))
ROTATION = VelocityField.linear(np.array([[0.0, -1, 0], [1, 0, 0], [0, 0, 0]]))


# -- flow maps -----------------------------------------------------------------
def test_flow_zero_field(rng):
    x = rng.standard_normal((20, 3))
    n = x / np.linalg.norm(x, axis=1)[:, None]
    tr = flow_map(VelocityField.zero(), 0.3, x, n)
    np.testing.assert_array_equal(tr.mapped_points, x)
    np.testing.assert_allclose(tr.gamma, 1.0, atol=1e-15)
    np.testing.assert_allclose(tr.omega, 1.0, atol=1e-15)


@pytest.mark.parametrize("t", [0.05, 0.3, -0.2])
def test_flow_dilation(rng, t):
    x = rng.standard_normal((20, 3))
    tr = flow_map(DILATION, t, x)
    np.testing.assert_allclose(tr.mapped_points, np.exp(t) * x, atol=1e-10)
    np.testing.assert_allclose(tr.gamma, np.exp(3 * t), atol=1e-9)


def test_flow_rotation_preserves_volume(rng):
    tr = flow_map(ROTATION, 0.7, rng.standard_normal((30, 3)))
    np.testing.assert_allclose(tr.gamma, 1.0, atol=1e-9)


def test_flow_rejects_inversion():
    mesh = unit_cube(2)
    # nodal fields move by id + t V, which folds every cell once t V overshoots
    with pytest.raises(FlowError):
        flow_mesh(mesh, VelocityField.from_nodal(-3 * mesh.points), 0.5)


@settings(max_examples=20, deadline=None)
@given(st.floats(-0.3, 0.3), st.floats(-0.3, 0.3), st.integers(0, 1000))
def test_flow_semigroup(s, t, seed):
    V = wave_field(seed, amp=0.5)
    x = np.random.default_rng(seed).standard_normal((10, 3))
    a = flow_map(V, s + t, x, h_max=1e-3).mapped_points
    b = flow_map(V, s, flow_map(V, t, x, h_max=1e-3).mapped_points, h_max=1e-3).mapped_points
    np.testing.assert_allclose(a, b, atol=1e-8)


def test_transport_rates_at_zero():
    V = wave_field(3, amp=0.5)
    x = icosphere_ball(2).points
    g = surface_geometry(icosphere_ball(2))
    xb, nb = x[g.vertices], g.vertex_normals
    h = 1e-4
    p, m = flow_map(V, h, xb, nb, h_max=h), flow_map(V, -h, xb, nb, h_max=h)
    DV = V.grad(xb)
    div = np.trace(DV, axis1=1, axis2=2)
    divg = div - np.einsum("ni,nij,nj->n", nb, DV, nb)
    np.testing.assert_allclose((p.gamma - m.gamma) / (2 * h), div, atol=1e-6)
    np.testing.assert_allclose((p.omega - m.omega) / (2 * h), divg, atol=1e-6)


# -- tangential operators --------------------------------------------------------------
def smooth_w(X):
    return np.column_stack([np.sin(X[:, 1]) + X[:, 0] ** 2, X[:, 0] * X[:, 2], np.cos(X[:, 0]) + 0.5 * X[:, 2]])


def smooth_M(X):
    return np.stack([np.column_stack([X[:, 0] * X[:, 1], np.sin(X[:, 2]), X[:, 0]]),
                     np.column_stack([X[:, 2] ** 2, 1 + X[:, 1], X[:, 0] * X[:, 2]]),
                     np.column_stack([np.cos(X[:, 1]), X[:, 1], X[:, 2] ** 2])], axis=1)


def test_tangential_constant():
    ops = tangential_ops(icosphere_ball(2))
    f = np.full(len(ops.points), 3.0)
    assert np.abs(ops.gradient(f)).max() <= 1e-12
    assert np.abs(ops.laplace(f)).max() <= 1e-10
    np.testing.assert_allclose(np.asarray(ops.laplacian.sum(axis=1)).ravel(), 0.0, atol=1e-12)


def test_tangential_gradient_is_tangent():
    ops = tangential_ops(icosphere_ball(2))
    G = ops.gradient(np.sin(ops.points[:, 0]))
    assert np.abs(np.einsum("ti,ti->t", G, ops.geometry.facet_normals)).max() <= 1e-12


def test_sphere_laplace_eigenfunction():
    ops = tangential_ops(icosphere_ball(3))
    x1 = ops.points[:, 0]
    err = ops.laplace(x1) + 2 * x1
    assert np.sqrt(ops.mass @ err ** 2) / np.sqrt(ops.mass @ (2 * x1) ** 2) <= 0.03


def stokes_residuals(level):
    m = icosphere_ball(level, layers=1)
    g = surface_geometry(m)
    ops = tangential_ops(m, g)
    X, a, kap, n = ops.points, g.facet_areas, g.mean_curvature, g.vertex_normals
    W = smooth_w(X)
    lhs = np.sum(a * ops.divergence(W))
    rhs = np.sum(g.mass * kap * np.einsum("vi,vi->v", W, n))
    scalar = abs(lhs - rhs) / abs(rhs)
    M, v = smooth_M(X), W[:, ::-1]
    dM = ops.gradient(M.reshape(-1, 9)).reshape(-1, 3, 3, 3)
    div_cols = np.einsum("tiji->tj", dM)  # sum_i d_i M_ij
    tri = g.triangles
    lhs = np.sum(a * (np.einsum("tij,tji->t", M[tri].mean(axis=1), ops.gradient(v))
                      + np.einsum("ti,ti->t", div_cols, v[tri].mean(axis=1))))
    rhs = np.sum(g.mass * kap * np.einsum("vij,vi,vj->v", M, n, v))
    return scalar, abs(lhs - rhs) / abs(rhs)


def test_tangential_stokes():
    res = np.array([stokes_residuals(k) for k in (2, 3, 4)])
    assert np.all(res[-1] <= 0.02)
    assert np.all(np.diff(res, axis=0) < 0)


# -- Reynolds transport ------------------------------------------------------------------------
def test_reynolds_ball():
    space = FunctionSpace(icosphere_ball(3), 1)
    one, zero = (lambda x: np.ones(len(x))), (lambda x: np.zeros(len(x)))
    assert abs(reynolds_volume(space, one, zero, DILATION) - 4 * np.pi) <= 0.01 * 4 * np.pi
    assert abs(reynolds_surface(space, one, zero, DILATION) - 8 * np.pi) <= 0.02 * 8 * np.pi
    dot = lambda x: x[:, 0] ** 2
    assert reynolds_volume(space, one, dot, VelocityField.zero()) == pytest.approx(
        reynolds_volume(space, zero, dot, DILATION), rel=1e-14)


# -- material derivative --------------------------------------------------------------------------
@pytest.fixture(scope="module")
def beam():
    mesh = cantilever(n=(8, 2, 2))
    mat = MaterialParams()
    loads = Loads.make(f=(0, 0, -1e-3), g={2: (0.0, 1.0, -2.0)})
    u, system = solve_state(mesh, mat, loads, degree=2, method="direct")
    return mesh, mat, loads, u, system


def test_material_derivative_zero_field(beam):
    _, mat, loads, u, system = beam
    assert not np.any(material_derivative_rhs(system.space, u, mat, loads, VelocityField.zero()))
    assert not np.any(solve_material_derivative(system, u, mat, loads, VelocityField.zero()).coefficients)


def test_material_derivative_translation(beam):
    _, mat, loads, u, system = beam
    V = VelocityField.linear(np.zeros((3, 3)), np.array([0.3, -0.2, 0.5]))
    rhs = material_derivative_rhs(system.space, u, mat, loads, V)
    assert np.abs(rhs).max() <= 1e-12 * np.abs(system.rhs).max()
    ud = solve_material_derivative(system, u, mat, loads, V, method="direct")
    assert np.abs(ud.coefficients).max() <= 1e-10 * np.abs(u.coefficients).max()


def test_material_derivative_fd_oracle(beam):
    mesh, mat, loads, u, system = beam
    V = wave_field(5, clamp_axis=0, length=4.0)
    ud = solve_material_derivative(system, u, mat, loads, V, method="direct")
    problem = Problem(mesh, mat, loads, VolumeFunctional(), degree=2)
    nrm = h1_norm(system.space, ud.coefficients)
    assert h1_norm(system.space, ud.coefficients - fd_material_derivative(problem, V, 1e-3)) / nrm <= 1e-3
    # Richardson needs steps where truncation dominates rounding
    fds = [fd_material_derivative(problem, V, t) for t in (0.2, 0.1, 0.05)]
    d1 = h1_norm(system.space, fds[0] - fds[1])
    d2 = h1_norm(system.space, fds[1] - fds[2])
    assert abs(np.log2(d1 / d2) - 2.0) <= 0.3


def test_local_shape_derivative_fixed_field():
    space = FunctionSpace(unit_cube(2), 2)
    # quadratic, so the P2 interpolant and its nodal gradient are exact
    w = lambda x: np.column_stack([x[:, 0] * x[:, 1], x[:, 2] ** 2 - x[:, 1], x[:, 0] ** 2 - x[:, 2]])
    # geometric velocity is P1 (mid nodes carry edge averages)
    V = VelocityField.from_nodal(wave_field(2).at_points(space.mesh))
    u = DisplacementField(space, space.interpolate(w))
    t = 1e-4
    X = space.points
    # the pulled-back field w o T_t at fixed reference nodes
    ud = (w(X + t * V.nodal) - w(X - t * V.nodal)) / (2 * t)
    up = local_shape_derivative(u, DisplacementField(space, ud), V)
    assert np.abs(up).max() <= 1e-6
    assert np.abs(local_shape_derivative(u, DisplacementField(space, 0 * ud), VelocityField.zero())).max() == 0


def test_local_shape_derivative_on_clamp(beam):
    _, mat, loads, u, system = beam
    V = wave_field(1, clamp_axis=0, length=4.0)
    ud = solve_material_derivative(system, u, mat, loads, V, method="direct")
    up = local_shape_derivative(u, ud, V)
    assert np.abs(up[system.space.mesh.dirichlet_nodes]).max() <= 1e-14


# -- shape derivative evaluation ------------------------------------------------------------
def test_volume_material_form_is_divergence():
    space = FunctionSpace(icosphere_ball(2), 1)
    u = DisplacementField(space, np.zeros((space.n_nodes, 3)))
    V = wave_field(4)
    one, zero = (lambda x: np.ones(len(x))), (lambda x: np.zeros(len(x)))
    # both sides see the P1 interpolant of V, so compare with its exact divergence integral
    Vh = VelocityField.from_nodal(V.at_points(space.mesh))
    a = dj_material_form(VolumeFunctional(), u, u, Vh, MaterialParams())
    Vv = Vh.nodal[space.mesh.corners]
    DV = np.einsum("caj,cak->cjk", Vv, space.grad_lambda)
    assert a == pytest.approx(float(space.volumes @ np.trace(DV, axis1=1, axis2=2)), rel=1e-12)
    assert reynolds_volume(space, one, zero, DILATION) == pytest.approx(
        dj_material_form(VolumeFunctional(), u, u, DILATION, MaterialParams()), rel=1e-12)


def test_fd_volume_on_ball():
    problem = Problem(icosphere_ball(3), MaterialParams(), Loads(), VolumeFunctional(), degree=1)
    r = fd_shape_derivative(problem, DILATION, 1e-3)
    assert abs(r.value - 4 * np.pi) <= 0.01 * 4 * np.pi
    assert fd_shape_derivative(problem, VelocityField.zero(), 1e-3, levels=1).value == 0.0


def test_fd_slope_smooth_functional(beam):
    mesh, mat, loads, _, _ = beam
    problem = Problem(mesh, mat, loads, ComplianceFunctional(loads), degree=2)
    r = fd_shape_derivative(problem, wave_field(8, clamp_axis=0, length=4.0), 4e-2)
    assert abs(r.slope - 2.0) <= 0.3


def test_material_form_matches_fd_ceramic(beam):
    mesh, mat, loads, u, system = beam
    J = CeramicFunctional(mat)
    V = wave_field(6, clamp_axis=0, length=4.0)
    ud = solve_material_derivative(system, u, mat, loads, V, method="direct")
    fd = fd_shape_derivative(Problem(mesh, mat, loads, J, degree=2), V, 1e-3, levels=1).value
    assert abs(dj_material_form(J, u, ud, V, mat) - fd) <= 0.02 * abs(fd)


@settings(max_examples=10, deadline=None)
@given(st.floats(-2, 2), st.floats(-2, 2))
def test_material_form_linear_in_v(alpha, beta):
    space = FunctionSpace(unit_cube(2), 2)
    mat = MaterialParams()
    u = DisplacementField(space, 1e-3 * np.sin(space.points))
    V1, V2 = wave_field(11), wave_field(12)
    J = CeramicFunctional(mat)
    ud = DisplacementField(space, 1e-3 * np.cos(space.points))
    lhs = dj_material_form(J, u, ud, combine([(alpha, V1), (beta, V2)]), mat)
    # u_dot is held fixed, so the form is affine in V
    base = dj_material_form(J, u, ud, VelocityField.zero(), mat)
    rhs = base + sum(c * (dj_material_form(J, u, ud, Vk, mat) - base) for c, Vk in ((alpha, V1), (beta, V2)))
    assert lhs == pytest.approx(rhs, rel=1e-10, abs=1e-12 * abs(base))


# -- parameter sensitivity -----------------------------------------------------------------------
def test_sensitivity_constant_operator(rng):
    A = rng.standard_normal((20, 20))
    B0 = A @ A.T + 20 * np.eye(20)
    l0, l1 = rng.standard_normal(20), rng.standard_normal(20)
    rep = param_sensitivity_check(lambda t: (B0, np.zeros_like(B0)), lambda t: (l0 + t * l1, l1))
    assert rep.ok
    np.testing.assert_allclose(rep.q, np.linalg.solve(B0, l1), rtol=1e-12)


def test_sensitivity_random_spd(rng):
    A = rng.standard_normal((50, 50))
    B0 = A @ A.T + 50 * np.eye(50)
    C = rng.standard_normal((50, 50))
    B1 = 0.5 * (C + C.T)
    l0, l1 = rng.standard_normal(50), rng.standard_normal(50)
    rep = param_sensitivity_check(lambda t: (B0 + t * B1, B1), lambda t: (l0 + t * l1 + t * t * l0, l1 + 2 * t * l0),
                                  t0=0.01, h=1e-4)
    assert rep.ok and rep.rel_error <= 1e-7


def test_sensitivity_indefinite_reported():
    B = np.diag([1.0, -1.0])
    rep = param_sensitivity_check(lambda t: (B, 0 * B), lambda t: (np.ones(2), np.zeros(2)))
    assert not rep.ok and "positive definite" in rep.message


def test_elasticity_family_matches_material_derivative():
    mesh = cantilever(n=(4, 1, 1))
    mat = MaterialParams()
    loads = Loads.make(g={2: (0.0, 0.0, -1.0)})
    V = wave_field(9, clamp_axis=0, length=4.0)
    u, system = solve_state(mesh, mat, loads, degree=1, method="direct")
    ud = solve_material_derivative(system, u, mat, loads, V, method="direct")
    rep = param_sensitivity_check(*elasticity_family(mesh, mat, loads, V, degree=1), h=1e-5)
    assert rep.ok
    assert np.linalg.norm(rep.q - ud.vector) <= 1e-8 * np.linalg.norm(ud.vector)
