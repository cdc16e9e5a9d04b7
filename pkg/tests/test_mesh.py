import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from artifact.errors import GeometryError, ParseError, TaggingError
from artifact.mesh import (
    DIRICHLET,
    NEUMANN,
    Mesh,
    bent_rod,
    deform,
    icosphere_ball,
    is_watertight,
    quality,
    read_gmsh,
    read_vtk,
    surface_euler_characteristic,
    surface_geometry,
    unit_cube,
    write_gmsh,
    write_vtk,
)
from artifact.mesh.generators import reference_tet


def write_tet_msh(path, tags=(1, 2, 3, 4), extra=""):
    faces = [(2, 3, 4), (1, 4, 3), (1, 2, 4), (1, 3, 2)]
    rows = [f"{k + 1} 2 2 {t} {t} {a} {b} {c}" for k, ((a, b, c), t) in enumerate(zip(faces, tags))]
    text = "\n".join([
        "$MeshFormat", "2.2 0 8", "$EndMeshFormat",
        "$PhysicalNames", "2", '2 1 "clamp"', '2 2 "load"', "$EndPhysicalNames",
        "$Nodes", "4", "1 0 0 0", "2 1 0 0", "3 0 1 0", "4 0 0 1", "$EndNodes",
        "$Elements", "5", *rows, "5 4 2 9 9 1 2 3 4", "$EndElements", extra,
    ])
    path.write_text(text)
    return path


# -- gmsh ingestion -----------------------------------------------------------
def test_read_single_tet(tmp_path):
    m = read_gmsh(write_tet_msh(tmp_path / "tet.msh"))
    assert m.n_cells == 1 and len(m.facets) == 4
    assert m.role_of_tag(1) == DIRICHLET and m.role_of_tag(2) == NEUMANN


def test_read_untagged_triangle(tmp_path):
    with pytest.raises(TaggingError):
        read_gmsh(write_tet_msh(tmp_path / "tet.msh", tags=(1, 2, 0, 2)))


def test_read_malformed_reports_line(tmp_path):
    p = write_tet_msh(tmp_path / "tet.msh")
    p.write_text(p.read_text().replace("3 0 1 0", "3 0 one 0"))
    with pytest.raises(ParseError) as exc:
        read_gmsh(p)
    assert exc.value.line == 13  # the node line "3 0 one 0"


def test_read_inverted_cell(tmp_path):
    p = write_tet_msh(tmp_path / "tet.msh")
    p.write_text(p.read_text().replace("5 4 2 9 9 1 2 3 4", "5 4 2 9 9 1 3 2 4"))
    with pytest.raises(GeometryError):
        read_gmsh(p)


@pytest.mark.parametrize("degree", [1, 2])
def test_gmsh_roundtrip(tmp_path, degree):
    m = unit_cube(2, degree=degree)
    write_gmsh(tmp_path / "c.msh", m, names={1: "clamp", 2: "load", 3: "free"})
    r = read_gmsh(tmp_path / "c.msh")
    assert r.degree == degree
    np.testing.assert_allclose(r.total_volume(), 1.0, atol=1e-12)
    assert r.dirichlet_area() == pytest.approx(m.dirichlet_area(), abs=1e-12)


def test_unit_cube_six_tets():
    m = unit_cube(1)
    assert m.n_cells == 6
    assert abs(m.total_volume() - 1.0) <= 1e-12


@pytest.mark.parametrize("level", [1, 2, 3])
def test_icosphere_watertight(level):
    m = icosphere_ball(level)
    assert is_watertight(m)
    assert surface_euler_characteristic(m) == 2


def test_icosphere_volume_converges():
    err = [abs(icosphere_ball(k).total_volume() - 4.0 * np.pi / 3.0) / (4.0 * np.pi / 3.0) for k in (1, 2, 3)]
    assert err[2] < 0.01
    assert err[0] > err[1] > err[2]


def test_rod_tags_and_volume():
    m = bent_rod(rings=2, stations=24, degree=1)
    assert set(np.unique(m.facet_tags)) == {1, 2, 3}
    # semicircular centreline of radius 2.5, disk of radius 0.5
    exact = np.pi * 2.5 * np.pi * 0.25
    assert abs(m.total_volume() - exact) / exact < 0.05
    assert m.dirichlet_area() == pytest.approx(np.pi / 4, rel=0.05)


def test_rejects_untagged_role():
    m = reference_tet()
    with pytest.raises(TaggingError):
        Mesh(m.points, m.cells, m.facets, m.facet_tags, {1: NEUMANN, 2: DIRICHLET, 3: NEUMANN})


# -- surface geometry -----------------------------------------------------------
def test_normals_unit_and_outward():
    m = unit_cube(2)
    g = surface_geometry(m)
    _, fn = m.facet_areas_normals()
    np.testing.assert_allclose(np.linalg.norm(fn, axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(g.vertex_normals, axis=1), 1.0, atol=1e-12)
    cc = m.points[m.corners[m.facet_cell]].mean(axis=1)
    fc = m.points[m.facet_corners].mean(axis=1)
    assert np.all(np.einsum("ij,ij->i", fc - cc, fn) > 0)


def test_flat_patch_zero_curvature():
    m = unit_cube(3)
    g = surface_geometry(m)
    X = m.points[g.vertices]
    # vertices interior to one face (not on a cube edge)
    inner = np.sum((X > 1e-9) & (X < 1 - 1e-9), axis=1) == 2
    assert inner.sum() > 0
    np.testing.assert_allclose(g.mean_curvature[inner], 0.0, atol=1e-10)


@pytest.mark.parametrize("radius,kappa", [(1.0, 2.0), (0.5, 4.0)])
def test_sphere_curvature(radius, kappa):
    g = surface_geometry(icosphere_ball(3, radius=radius))
    assert np.max(np.abs(g.mean_curvature - kappa)) / kappa <= 0.02


def test_integrated_curvature():
    R = 1.5
    g = surface_geometry(icosphere_ball(3, radius=R))
    total = float(g.mass @ g.mean_curvature)
    assert abs(total - 2 / R * 4 * np.pi * R * R) / (8 * np.pi * R) < 0.03


def test_laplacian_rows_and_mass():
    g = surface_geometry(icosphere_ball(2))
    np.testing.assert_allclose(np.asarray(g.laplacian.sum(axis=1)).ravel(), 0.0, atol=1e-12)
    assert np.all(g.mass > 0)


def test_degenerate_surface_triangle():
    m = reference_tet()
    pts = m.points * 1e-8  # facet areas ~5e-17 mm^2
    flat = Mesh(pts, m.cells, m.facets, m.facet_tags, m.tag_roles, validate=False)
    with pytest.raises(GeometryError):
        surface_geometry(flat)


@settings(max_examples=25, deadline=None)
@given(st.tuples(*[st.floats(-3, 3)] * 3))
def test_surface_divergence_constant(w):
    m = icosphere_ball(1)
    area, n = m.facet_areas_normals()
    assert abs(float(area @ (n @ np.asarray(w)))) <= 1e-10


# -- deformation and quality ------------------------------------------------------
def test_deform_zero_scale():
    m = unit_cube(2)
    d = np.random.default_rng(0).standard_normal(m.points.shape)
    np.testing.assert_array_equal(deform(m, d, 0.0).points, m.points)


@settings(max_examples=25, deadline=None)
@given(st.tuples(*[st.floats(-5, 5)] * 3))
def test_deform_translation(c):
    m = unit_cube(2)
    d = np.broadcast_to(np.asarray(c), m.points.shape)
    np.testing.assert_allclose(deform(m, d).cell_volumes(), m.cell_volumes(), atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.floats(-0.5, 1.0))
def test_deform_dilation(t):
    m = unit_cube(2, degree=2)
    v = deform(m, m.points, t).total_volume()
    assert abs(v - (1 + t) ** 3) <= 1e-12


def test_deform_inversion_reports_cell():
    m = unit_cube(1)
    d = np.zeros(m.points.shape)
    d[m.corners[3, 0]] = [5.0, 5.0, 5.0]
    with pytest.raises(GeometryError) as exc:
        deform(m, d)
    assert exc.value.index is not None and m.n_cells > exc.value.index >= 0


def test_quality_regular_tet():
    pts = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=float)
    m = Mesh(pts, [[0, 2, 1, 3]], [[2, 1, 3], [0, 3, 1], [0, 2, 3], [0, 1, 2]], [1, 1, 1, 2],
             {1: NEUMANN, 2: DIRICHLET})
    q = quality(m)
    assert abs(q["min_dihedral"] - np.arccos(1 / 3)) <= 1e-6
    assert q["min_volume_ratio"] == pytest.approx(1.0, abs=1e-12)


def test_quality_squashed():
    m = reference_tet()
    pts = m.points.copy()
    pts[3, 2] = 1e-6
    assert quality(m.with_points(pts))["min_volume_ratio"] < 1e-5
    assert quality(bent_rod(degree=1))["min_volume_ratio"] > 0


# -- vtk ----------------------------------------------------------------------
@pytest.mark.parametrize("degree", [1, 2])
def test_vtk_roundtrip(tmp_path, degree):
    m = unit_cube(1, degree=degree)
    u = np.random.default_rng(1).standard_normal(m.points.shape)
    write_vtk(tmp_path / "m.vtk", m, point_data={"displacement": u}, cell_data={"vm": np.arange(m.n_cells, dtype=float)})
    r = read_vtk(tmp_path / "m.vtk")
    np.testing.assert_allclose(r["points"], m.points, rtol=1e-9)
    np.testing.assert_allclose(r["point_data"]["displacement"], u, rtol=1e-9)
    assert set(np.unique(r["cell_types"])) == {10 if degree == 1 else 24}
