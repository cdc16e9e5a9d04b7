"""Tetrahedral mesh data model, boundary geometry and quality metrics."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from ..errors import GeometryError, MeshError, TaggingError

DIRICHLET = "DIRICHLET"
NEUMANN = "NEUMANN"

# Local edge ordering of the 10-node tetrahedron (Gmsh convention).
TET_EDGES = np.array([(0, 1), (1, 2), (2, 0), (3, 0), (3, 2), (3, 1)])
# Local edge ordering of the 6-node triangle.
TRI_EDGES = np.array([(0, 1), (1, 2), (2, 0)])
# Local faces of a tetrahedron, face k is opposite vertex k.
TET_FACES = np.array([(1, 2, 3), (0, 3, 2), (0, 1, 3), (0, 2, 1)])


def _face_keys(tri: np.ndarray, n: int) -> np.ndarray:
    s = np.sort(tri, axis=1).astype(np.int64)
    return (s[:, 0] * n + s[:, 1]) * n + s[:, 2]


def signed_volumes(points: np.ndarray, tets: np.ndarray) -> np.ndarray:
    p = points[tets[:, :4]]
    d = p[:, 1:] - p[:, :1]
    return np.linalg.det(d) / 6.0


def boundary_faces(tets: np.ndarray, n_points: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Faces that belong to exactly one cell.

    Returns the faces (oriented outward for positively oriented cells), the
    owning cell and the local index of the opposite vertex.
    """
    tets = tets[:, :4]
    faces = tets[:, TET_FACES].reshape(-1, 3)
    keys = _face_keys(faces, n_points)
    uniq, inv, counts = np.unique(keys, return_inverse=True, return_counts=True)
    once = counts[inv] == 1
    idx = np.nonzero(once)[0]
    cell = idx // 4
    local = idx % 4
    return faces[idx], cell, local


class Mesh:
    """Immutable tetrahedral mesh with tagged boundary facets.

    ``points`` holds every node (corner vertices and, for 10-node cells, the
    mid-edge nodes).  Geometry is always the affine map of the four corners.
    """

    def __init__(
        self,
        points,
        cells,
        facets,
        facet_tags,
        tag_roles: dict[int, str],
        validate: bool = True,
    ):
        self.points = np.ascontiguousarray(points, dtype=float)
        self.cells = np.ascontiguousarray(cells, dtype=np.int64)
        self.facets = np.ascontiguousarray(facets, dtype=np.int64)
        self.facet_tags = np.ascontiguousarray(facet_tags, dtype=np.int64)
        self.tag_roles = {int(k): str(v).upper() for k, v in tag_roles.items()}
        for arr in (self.points, self.cells, self.facets):
            arr.setflags(write=False)
        if self.cells.ndim != 2 or self.cells.shape[1] not in (4, 10):
            raise MeshError("cells must be 4- or 10-tuples")
        if self.facets.ndim != 2 or self.facets.shape[1] not in (3, 6):
            raise MeshError("facets must be 3- or 6-tuples")
        if (self.cells.shape[1] == 10) != (self.facets.shape[1] == 6):
            raise MeshError("cell and facet orders differ")
        if validate:
            self._validate()

    # -- basic properties -------------------------------------------------
    @property
    def degree(self) -> int:
        return 1 if self.cells.shape[1] == 4 else 2

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def corners(self) -> np.ndarray:
        return self.cells[:, :4]

    @property
    def facet_corners(self) -> np.ndarray:
        return self.facets[:, :3]

    @cached_property
    def vertex_ids(self) -> np.ndarray:
        """Indices of corner vertices (excludes mid-edge nodes)."""
        return np.unique(self.corners)

    def cell_volumes(self) -> np.ndarray:
        return signed_volumes(self.points, self.corners)

    def total_volume(self) -> float:
        return float(self.cell_volumes().sum())

    def role_of_tag(self, tag: int) -> str:
        return self.tag_roles[int(tag)]

    @cached_property
    def dirichlet_mask(self) -> np.ndarray:
        return np.array([self.tag_roles[int(t)] == DIRICHLET for t in self.facet_tags], dtype=bool)

    @property
    def neumann_mask(self) -> np.ndarray:
        return ~self.dirichlet_mask

    @cached_property
    def _facet_owner(self) -> tuple[np.ndarray, np.ndarray]:
        n = len(self.points)
        faces, cell, local = boundary_faces(self.corners, n)
        bkeys = _face_keys(faces, n)
        order = np.argsort(bkeys)
        fkeys = _face_keys(self.facet_corners, n)
        pos = np.searchsorted(bkeys[order], fkeys)
        pos = np.clip(pos, 0, len(order) - 1)
        ok = bkeys[order][pos] == fkeys
        if not np.all(ok):
            bad = int(np.nonzero(~ok)[0][0])
            raise MeshError(f"facet {bad} is not a boundary face of any cell")
        j = order[pos]
        return cell[j], local[j]

    @property
    def facet_cell(self) -> np.ndarray:
        return self._facet_owner[0]

    @property
    def facet_opposite(self) -> np.ndarray:
        """Local index (0..3) of the owning cell's vertex not on the facet."""
        return self._facet_owner[1]

    @cached_property
    def facet_local_vertices(self) -> np.ndarray:
        """For each facet corner, its local index (0..3) in the owning cell."""
        cc = self.corners[self.facet_cell]
        fc = self.facet_corners
        out = np.empty(fc.shape, dtype=np.int64)
        for k in range(3):
            out[:, k] = np.argmax(cc == fc[:, k : k + 1], axis=1)
        return out

    @cached_property
    def boundary_vertices(self) -> np.ndarray:
        return np.unique(self.facet_corners)

    @cached_property
    def dirichlet_vertices(self) -> np.ndarray:
        return np.unique(self.facet_corners[self.dirichlet_mask])

    @cached_property
    def dirichlet_nodes(self) -> np.ndarray:
        """All nodes (including mid-edge nodes) on Dirichlet facets."""
        return np.unique(self.facets[self.dirichlet_mask])

    def facet_areas_normals(self) -> tuple[np.ndarray, np.ndarray]:
        p = self.points[self.facet_corners]
        cr = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
        a2 = np.linalg.norm(cr, axis=1)
        return a2 / 2.0, cr / a2[:, None]

    def dirichlet_area(self) -> float:
        a, _ = self.facet_areas_normals()
        return float(a[self.dirichlet_mask].sum())

    # -- validation -------------------------------------------------------
    def _validate(self) -> None:
        vol = self.cell_volumes()
        if np.any(vol <= 0):
            i = int(np.argmin(vol))
            raise GeometryError(f"cell {i} has non-positive volume {vol[i]:.3e}", index=i)
        for t in np.unique(self.facet_tags):
            if int(t) not in self.tag_roles:
                raise TaggingError(f"facet tag {int(t)} has no boundary role")
        bad_roles = set(self.tag_roles.values()) - {DIRICHLET, NEUMANN}
        if bad_roles:
            raise TaggingError(f"unknown boundary roles {sorted(bad_roles)}")
        n = len(self.points)
        faces, _, _ = boundary_faces(self.corners, n)
        bkeys = np.sort(_face_keys(faces, n))
        fkeys = _face_keys(self.facet_corners, n)
        if len(np.unique(fkeys)) != len(fkeys):
            raise TaggingError("a boundary face carries more than one facet")
        if len(fkeys) != len(bkeys) or not np.array_equal(np.sort(fkeys), bkeys):
            missing = np.setdiff1d(bkeys, fkeys)
            if len(missing):
                raise TaggingError(f"{len(missing)} boundary faces carry no tagged facet")
            raise MeshError("facets that are not boundary faces are present")
        # outward orientation of facets
        _, normals = self.facet_areas_normals()
        cent_f = self.points[self.facet_corners].mean(axis=1)
        cent_c = self.points[self.corners[self.facet_cell]].mean(axis=1)
        if np.any(np.einsum("ij,ij->i", normals, cent_f - cent_c) <= 0):
            raise GeometryError("facet orientation is not outward")

    # -- derived meshes ---------------------------------------------------
    def with_points(self, points: np.ndarray, validate: bool = True) -> "Mesh":
        return Mesh(points, self.cells, self.facets, self.facet_tags, self.tag_roles, validate=validate)

    def to_p1(self) -> "Mesh":
        if self.degree == 1:
            return self
        used = self.vertex_ids
        remap = -np.ones(len(self.points), dtype=np.int64)
        remap[used] = np.arange(len(used))
        return Mesh(self.points[used], remap[self.corners], remap[self.facet_corners],
                    self.facet_tags, self.tag_roles, validate=False)

    def to_p2(self) -> "Mesh":
        """Insert mid-edge nodes at edge midpoints (straight-sided P2)."""
        if self.degree == 2:
            return self
        m = self.to_p1()
        nv = len(m.points)
        e = m.cells[:, TET_EDGES].reshape(-1, 2)
        e = np.sort(e, axis=1)
        key = e[:, 0] * nv + e[:, 1]
        ukey, inv = np.unique(key, return_inverse=True)
        a, b = ukey // nv, ukey % nv
        mid = 0.5 * (m.points[a] + m.points[b])
        pts = np.vstack([m.points, mid])
        cells = np.hstack([m.cells, nv + inv.reshape(-1, 6)])
        fe = np.sort(m.facets[:, TRI_EDGES].reshape(-1, 2), axis=1)
        fkey = fe[:, 0] * nv + fe[:, 1]
        fpos = np.searchsorted(ukey, fkey)
        facets = np.hstack([m.facets, nv + fpos.reshape(-1, 3)])
        return Mesh(pts, cells, facets, m.facet_tags, m.tag_roles, validate=False)

    def snap_midpoints(self, points: np.ndarray) -> np.ndarray:
        """Return ``points`` with mid-edge nodes moved to edge midpoints."""
        if self.degree == 1:
            return points
        pts = np.array(points, dtype=float, copy=True)
        c = self.cells
        for k, (i, j) in enumerate(TET_EDGES):
            pts[c[:, 4 + k]] = 0.5 * (pts[c[:, i]] + pts[c[:, j]])
        return pts

    def refine_uniform(self) -> "Mesh":
        """Split every tetrahedron into eight (red refinement), facets into four."""
        m = self.to_p1()
        p2 = m.to_p2()
        c = p2.cells
        v0, v1, v2, v3 = c[:, 0], c[:, 1], c[:, 2], c[:, 3]
        e01, e12, e20, e30, e32, e31 = (c[:, 4 + k] for k in range(6))
        children = [
            (v0, e01, e20, e30),
            (e01, v1, e12, e31),
            (e20, e12, v2, e32),
            (e30, e31, e32, v3),
            # inner octahedron split along the e20-e31 diagonal
            (e01, e12, e20, e31),
            (e01, e20, e30, e31),
            (e12, e32, e20, e31),
            (e20, e32, e30, e31),
        ]
        cells = np.vstack([np.column_stack(ch) for ch in children])
        vol = signed_volumes(p2.points, cells)
        neg = vol < 0
        cells[neg] = cells[neg][:, [0, 2, 1, 3]]
        f = p2.facets
        a, b, cc, ab, bc, ca = (f[:, k] for k in range(6))
        faces = np.vstack([
            np.column_stack([a, ab, ca]),
            np.column_stack([ab, b, bc]),
            np.column_stack([ca, bc, cc]),
            np.column_stack([ab, bc, ca]),
        ])
        tags = np.tile(p2.facet_tags, 4)
        return Mesh(p2.points, cells, faces, tags, self.tag_roles).to_degree(self.degree)

    def to_degree(self, degree: int) -> "Mesh":
        return self.to_p1() if degree == 1 else self.to_p2()


def orient_facets(points: np.ndarray, tets: np.ndarray, facets: np.ndarray) -> np.ndarray:
    """Reorder facet vertices so that normals point out of the owning cell."""
    n = len(points)
    faces, cell, _ = boundary_faces(tets, n)
    bkeys = _face_keys(faces, n)
    order = np.argsort(bkeys)
    fkeys = _face_keys(facets[:, :3], n)
    pos = np.clip(np.searchsorted(bkeys[order], fkeys), 0, len(order) - 1)
    owner = cell[order][pos]
    p = points[facets[:, :3]]
    nrm = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    cc = points[tets[owner, :4]].mean(axis=1)
    flip = np.einsum("ij,ij->i", nrm, p.mean(axis=1) - cc) < 0
    out = np.array(facets, copy=True)
    if facets.shape[1] == 3:
        out[flip] = out[flip][:, [0, 2, 1]]
    else:
        out[flip] = out[flip][:, [0, 2, 1, 5, 4, 3]]
    return out


# -- surface geometry ------------------------------------------------------
@dataclass(frozen=True)
class SurfaceGeometry:
    vertices: np.ndarray  # global indices of boundary vertices
    triangles: np.ndarray  # facets in local boundary-vertex numbering
    facet_areas: np.ndarray
    facet_normals: np.ndarray
    vertex_normals: np.ndarray
    mean_curvature: np.ndarray
    mass: np.ndarray  # lumped vertex areas (mixed Voronoi)
    laplacian: sp.csr_matrix  # cotangent stiffness, positive semi-definite

    def local_index(self, global_ids: np.ndarray) -> np.ndarray:
        return np.searchsorted(self.vertices, global_ids)


def cotangent_laplacian(X: np.ndarray, tri: np.ndarray) -> sp.csr_matrix:
    """Stiffness matrix L with (L f)_i = sum_j w_ij (f_i - f_j)."""
    n = len(X)
    rows, cols, vals = [], [], []
    for k in range(3):
        i, j, o = tri[:, (k + 1) % 3], tri[:, (k + 2) % 3], tri[:, k]
        u = X[i] - X[o]
        v = X[j] - X[o]
        cot = np.einsum("ij,ij->i", u, v) / np.linalg.norm(np.cross(u, v), axis=1)
        w = 0.5 * cot
        rows += [i, j, i, j]
        cols += [j, i, i, j]
        vals += [-w, -w, w, w]
    L = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    return L.tocsr()


def mixed_voronoi_areas(X: np.ndarray, tri: np.ndarray) -> np.ndarray:
    """Lumped vertex areas: Voronoi cells, with the obtuse-triangle fallback."""
    p = X[tri]
    area = 0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1)
    cots = np.empty((len(tri), 3))
    obtuse = np.zeros((len(tri), 3), dtype=bool)
    for k in range(3):
        u = p[:, (k + 1) % 3] - p[:, k]
        v = p[:, (k + 2) % 3] - p[:, k]
        dot = np.einsum("ij,ij->i", u, v)
        cots[:, k] = dot / (2.0 * area)
        obtuse[:, k] = dot < 0
    contrib = np.zeros((len(tri), 3))
    for k in range(3):
        i, j = (k + 1) % 3, (k + 2) % 3
        # edge opposite corner k, shared by corners i and j
        l2 = np.sum((p[:, i] - p[:, j]) ** 2, axis=1)
        contrib[:, i] += cots[:, k] * l2 / 8.0
        contrib[:, j] += cots[:, k] * l2 / 8.0
    any_obt = obtuse.any(axis=1)
    fallback = np.where(obtuse, area[:, None] / 2.0, area[:, None] / 4.0)
    contrib[any_obt] = fallback[any_obt]
    mass = np.zeros(len(X))
    for k in range(3):
        np.add.at(mass, tri[:, k], contrib[:, k])
    return mass


def surface_geometry(mesh: Mesh) -> SurfaceGeometry:
    """Unit normals, lumped mass, cotangent Laplacian and mean curvature.

    The mean curvature follows from kappa n = -Laplace_Gamma x with the
    lumped-mass normalisation; its sign is fixed by the outward vertex normal.
    """
    verts = mesh.boundary_vertices
    tri = np.searchsorted(verts, mesh.facet_corners)
    X = mesh.points[verts]
    p = X[tri]
    cr = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    a2 = np.linalg.norm(cr, axis=1)
    if np.any(a2 / 2.0 < 1e-14):
        i = int(np.argmin(a2))
        raise GeometryError(f"degenerate surface triangle {i}", index=i)
    area = a2 / 2.0
    fn = cr / a2[:, None]
    nv = len(verts)
    vn = np.zeros((nv, 3))
    for k in range(3):
        np.add.at(vn, tri[:, k], cr / 2.0)
    mass = mixed_voronoi_areas(X, tri)
    vn /= np.linalg.norm(vn, axis=1)[:, None]
    L = cotangent_laplacian(X, tri)
    Hn = (L @ X) / mass[:, None]
    kappa = np.einsum("ij,ij->i", Hn, vn)
    return SurfaceGeometry(verts, tri, area, fn, vn, kappa, mass, L)


def surface_euler_characteristic(mesh: Mesh) -> int:
    tri = mesh.facet_corners
    e = np.sort(tri[:, TRI_EDGES].reshape(-1, 2), axis=1)
    ne = len(np.unique(e, axis=0))
    return len(mesh.boundary_vertices) - ne + len(tri)


def is_watertight(mesh: Mesh) -> bool:
    tri = mesh.facet_corners
    e = np.sort(tri[:, TRI_EDGES].reshape(-1, 2), axis=1)
    _, counts = np.unique(e, axis=0, return_counts=True)
    return bool(np.all(counts == 2))


# -- deformation and quality ----------------------------------------------
def deform(mesh: Mesh, displacement: np.ndarray, scale: float = 1.0) -> Mesh:
    """Move every node by ``scale * displacement``.

    ``displacement`` is given per point.  Mid-edge nodes are re-snapped to
    edge midpoints so that P2 geometry stays straight-sided.
    """
    d = np.asarray(displacement, dtype=float)
    if d.shape != mesh.points.shape:
        raise MeshError(f"displacement shape {d.shape} does not match points {mesh.points.shape}")
    pts = mesh.snap_midpoints(mesh.points + scale * d)
    vol = signed_volumes(pts, mesh.corners)
    if np.any(vol <= 0):
        i = int(np.argmin(vol))
        raise GeometryError(f"deformation inverts cell {i}", index=i)
    return Mesh(pts, mesh.cells, mesh.facets, mesh.facet_tags, mesh.tag_roles, validate=False)


def _dihedral_angles(p: np.ndarray) -> np.ndarray:
    # p: (n, 4, 3); returns (n, 6) interior dihedral angles
    out = []
    for a, b in [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]:
        c, d = [k for k in range(4) if k not in (a, b)]
        e = p[:, b] - p[:, a]
        e = e / np.linalg.norm(e, axis=1)[:, None]
        u = p[:, c] - p[:, a]
        v = p[:, d] - p[:, a]
        u = u - np.einsum("ij,ij->i", u, e)[:, None] * e
        v = v - np.einsum("ij,ij->i", v, e)[:, None] * e
        cosang = np.einsum("ij,ij->i", u, v) / (np.linalg.norm(u, axis=1) * np.linalg.norm(v, axis=1))
        out.append(np.arccos(np.clip(cosang, -1.0, 1.0)))
    return np.column_stack(out)


def quality(mesh: Mesh) -> dict[str, float]:
    """Minimum normalised volume ratio and minimum dihedral angle.

    The volume ratio is 6*sqrt(2)*V / l_rms^3, equal to 1 for a regular
    tetrahedron and tending to 0 for slivers.
    """
    p = mesh.points[mesh.corners]
    vol = signed_volumes(mesh.points, mesh.corners)
    l2 = np.zeros(len(p))
    for a, b in [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]:
        l2 += np.sum((p[:, a] - p[:, b]) ** 2, axis=1)
    lrms = np.sqrt(l2 / 6.0)
    ratio = 6.0 * np.sqrt(2.0) * vol / lrms ** 3
    dih = _dihedral_angles(p)
    return {"min_volume_ratio": float(ratio.min()), "min_dihedral": float(dih.min())}


def mean_edge_length(mesh: Mesh) -> float:
    tri = mesh.facet_corners
    p = mesh.points
    e = np.sort(tri[:, TRI_EDGES].reshape(-1, 2), axis=1)
    e = np.unique(e, axis=0)
    return float(np.linalg.norm(p[e[:, 0]] - p[e[:, 1]], axis=1).mean())
