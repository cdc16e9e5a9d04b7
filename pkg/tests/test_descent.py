import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from artifact.descent_optimizer import (
    ArmijoParams,
    DescentConfig,
    cutoff_weights,
    harmonic_extension,
    helmholtz_direction,
    helmholtz_smooth,
    l2_direction,
    optimize,
    volume_extension_direction,
)
from artifact.errors import ConfigError
from artifact.fem import Loads, MaterialParams
from artifact.functionals import CeramicFunctional, LcfFunctional
from artifact.mesh import cantilever, icosphere_ball, mean_edge_length, surface_geometry
from artifact.shape_calculus import Problem


@pytest.fixture(scope="module")
def sphere():
    return surface_geometry(icosphere_ball(3))


def pairing(geometry, G, W):
    """Lumped int G (W . n) dS."""
    return float(np.sum(geometry.mass * G * np.einsum("vi,vi->v", W, geometry.vertex_normals)))


# -- configuration ------------------------------------------------------------------
@pytest.mark.parametrize("kw", [{"c1": 0.0}, {"c1": 1.0}, {"shrink": 1.0}, {"shrink": 0.0}, {"alpha0": 0.0},
                                {"max_backtracks": -1}])
def test_armijo_params_rejected(kw):
    with pytest.raises(ConfigError):
        ArmijoParams(**kw)


@pytest.mark.parametrize("kw", [{"method": "newton"}, {"c": -1.0}, {"max_iters": -1}, {"step_cap": 0.0}])
def test_descent_config_rejected(kw):
    with pytest.raises(ConfigError):
        DescentConfig(**kw)


def test_method_names_case_insensitive():
    assert DescentConfig(method="helmholtz").method == "HELMHOLTZ"


# -- boundary directions ----------------------------------------------------------------
def test_l2_direction(sphere, rng):
    assert not l2_direction(np.zeros(len(sphere.vertices)), sphere).any()
    G = rng.standard_normal(len(sphere.vertices))
    W = l2_direction(G, sphere)
    np.testing.assert_allclose(np.linalg.norm(W, axis=1), np.abs(G), rtol=1e-14)
    assert pairing(sphere, G, W) == pytest.approx(-np.sum(sphere.mass * G * G), rel=1e-14)


def test_helmholtz_zero_c_is_l2(sphere, rng):
    G = rng.standard_normal(len(sphere.vertices))
    np.testing.assert_allclose(helmholtz_direction(G, sphere, 0.0), l2_direction(G, sphere), atol=1e-10)


def test_helmholtz_sphere_spectrum():
    mesh = icosphere_ball(4)
    geo = surface_geometry(mesh)
    X = mesh.points[geo.vertices]
    c = 0.1
    for Y, ell in ((X[:, 0] * X[:, 1], 2), (X[:, 2], 1), (X[:, 0] ** 2 - X[:, 1] ** 2, 2)):
        w = helmholtz_smooth(Y, geo, c)
        factor = np.sum(geo.mass * w * Y) / np.sum(geo.mass * Y * Y)
        assert factor == pytest.approx(1.0 / (1.0 + c * ell * (ell + 1)), rel=0.02)


@pytest.mark.parametrize("c", [0.01, 0.1, 1.0])
def test_helmholtz_is_descent(sphere, rng, c):
    G = rng.standard_normal(len(sphere.vertices))
    assert pairing(sphere, G, helmholtz_direction(G, sphere, c)) < 0


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_helmholtz_seminorm_monotone(seed):
    geo = surface_geometry(icosphere_ball(2))
    f = np.random.default_rng(seed).standard_normal(len(geo.vertices))
    semis = [w @ (geo.laplacian @ w) for w in (helmholtz_smooth(f, geo, c) for c in (0.0, 0.01, 0.1, 1.0))]
    assert np.all(np.diff(semis) <= 1e-12 * semis[0])


def test_helmholtz_fixed_vertices(sphere, rng):
    fixed = sphere.vertex_normals[:, 2] < -0.5
    w = helmholtz_smooth(rng.standard_normal(len(sphere.vertices)), sphere, 0.1, fixed)
    assert np.all(w[fixed] == 0.0)


def test_helmholtz_rejects_negative_c(sphere):
    with pytest.raises(ConfigError):
        helmholtz_smooth(np.ones(len(sphere.vertices)), sphere, -0.1)


def test_cutoff_weights():
    mesh = cantilever(n=(8, 2, 2))
    geo = surface_geometry(mesh)
    h = mean_edge_length(mesh)
    w = cutoff_weights(mesh, geo, 2 * h)
    x = mesh.points[geo.vertices, 0]
    assert np.all(w[x == 0] == 0.0)
    assert np.all(w[x >= 2 * h + 1e-12] == 1.0)
    assert np.all((w >= 0) & (w <= 1))


# -- volume fields -----------------------------------------------------------------------------
def test_harmonic_extension_reproduces_affine():
    mesh = cantilever(n=(4, 2, 2))
    geo = surface_geometry(mesh)
    A = np.array([[0.1, 0.02, 0], [0, -0.05, 0.03], [0.01, 0, 0.02]])
    b = np.array([0.01, 0.0, -0.02])
    W = harmonic_extension(mesh, mesh.points[geo.vertices] @ A.T + b, geo, MaterialParams())
    np.testing.assert_allclose(W, mesh.points @ A.T + b, atol=1e-12)
    assert not harmonic_extension(mesh, np.zeros((len(geo.vertices), 3)), geo, MaterialParams()).any()


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_volume_extension_is_descent(seed):
    mesh = cantilever(n=(4, 1, 1))
    d = np.random.default_rng(seed).standard_normal(mesh.points.shape)
    W = volume_extension_direction(mesh, d)
    assert np.sum(d * W) < 0
    assert not W[mesh.dirichlet_vertices].any()


def test_volume_extension_zero():
    mesh = cantilever(n=(4, 1, 1))
    assert not volume_extension_direction(mesh, np.zeros(mesh.points.shape)).any()


# -- optimization loop -------------------------------------------------------------------------------
@pytest.fixture(scope="module")
def beam_problem():
    mat = MaterialParams()
    loads = Loads.make(g={2: (0.0, 0.0, -30.0)})
    return Problem(cantilever(n=(6, 2, 2)), mat, loads, CeramicFunctional(mat), degree=1, method="direct")


def test_zero_load_stops_immediately():
    mat = MaterialParams()
    tr = optimize(Problem(cantilever(n=(4, 1, 1)), mat, Loads(), LcfFunctional(mat), degree=1, method="direct"))
    assert tr.stop_reason == "gradient" and tr.n_accepted == 0 and len(tr.rows) == 1


@pytest.mark.parametrize("method", ["L2", "HELMHOLTZ", "VOLUME_EXTENSION"])
def test_descent_decreases(beam_problem, method):
    tr = optimize(beam_problem, DescentConfig(method=method, max_iters=3))
    js = tr.j_values
    assert tr.n_accepted == 3 and tr.stop_reason == "max_iters"
    assert np.all(np.diff(js) < 0)
    assert tr.armijo_holds()
    assert all(r.dj < 0 and r.quality >= 0.05 for r in tr.rows)
    moved = tr.mesh.points - beam_problem.mesh.points
    assert np.abs(moved[beam_problem.mesh.dirichlet_vertices]).max() == 0.0
    assert np.abs(moved).max() > 0


def test_rejected_step_terminates(beam_problem):
    cfg = DescentConfig(method="L2", max_iters=3, step_cap=50.0, armijo=ArmijoParams(max_backtracks=0))
    tr = optimize(beam_problem, cfg)
    assert len(tr.rows) == 1 and not tr.rows[0].accepted
    assert tr.stop_reason in ("line search failed", "quality floor")
    assert tr.mesh is not None and np.array_equal(tr.mesh.points, beam_problem.mesh.points)


def test_quality_floor_stop(beam_problem):
    tr = optimize(beam_problem, DescentConfig(max_iters=3, quality_floor=0.99))
    assert tr.stop_reason == "quality floor" and tr.n_accepted == 0


def test_trace_outputs(beam_problem, tmp_path):
    runs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        optimize(beam_problem, DescentConfig(max_iters=2, out_dir=str(out)))
        runs.append(out)
    rows = list(csv.DictReader(open(runs[0] / "trace.csv")))
    assert len(rows) == 2 and rows[0]["accepted"] == "1"
    assert float(rows[1]["j"]) < float(rows[0]["j"])
    assert sorted(p.name for p in runs[0].glob("iter_*.vtk")) == ["iter_000.vtk", "iter_001.vtk", "iter_002.vtk"]
    for name in ("trace.csv", "iter_002.vtk"):
        assert (runs[0] / name).read_bytes() == (runs[1] / name).read_bytes()
