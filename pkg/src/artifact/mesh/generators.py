"""Mesh generators: reference tet, cube, box cantilever, ball, bent rod."""

from __future__ import annotations

import numpy as np
from scipy.spatial import Delaunay

from .core import DIRICHLET, NEUMANN, Mesh, boundary_faces, signed_volumes


def _orient(points: np.ndarray, tets: np.ndarray) -> np.ndarray:
    tets = np.array(tets, dtype=np.int64)
    neg = signed_volumes(points, tets) < 0
    tets[neg] = tets[neg][:, [0, 2, 1, 3]]
    return tets


def _from_tets(points, tets, tagger, tag_roles, degree=1) -> Mesh:
    tets = _orient(points, tets)
    faces, _, _ = boundary_faces(tets, len(points))
    tags = tagger(points[faces].mean(axis=1), faces)
    m = Mesh(points, tets, faces, tags, tag_roles)
    return m.to_degree(degree)


def reference_tet(degree: int = 1) -> Mesh:
    pts = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]])
    # face k (opposite vertex k) gets tag k + 1; the face x = 0 is clamped
    def tagger(cent, faces):
        return np.array([1 + [v for v in range(4) if v not in f][0] for f in faces])

    roles = {1: NEUMANN, 2: DIRICHLET, 3: NEUMANN, 4: NEUMANN}
    return _from_tets(pts, np.array([[0, 1, 2, 3]]), tagger, roles, degree)


def _grid_tets(nx: int, ny: int, nz: int) -> np.ndarray:
    """Kuhn (Freudenthal) split of each grid cube into six tetrahedra."""
    def vid(i, j, k):
        return (i * (ny + 1) + j) * (nz + 1) + k

    I, J, K = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    I, J, K = I.ravel(), J.ravel(), K.ravel()
    corner = {}
    for a in (0, 1):
        for b in (0, 1):
            for c in (0, 1):
                corner[(a, b, c)] = vid(I + a, J + b, K + c)
    tets = []
    import itertools

    for perm in itertools.permutations(range(3)):
        path = [(0, 0, 0)]
        cur = [0, 0, 0]
        for ax in perm:
            cur[ax] = 1
            path.append(tuple(cur))
        tets.append(np.column_stack([corner[p] for p in path]))
    return np.vstack(tets)


def box(
    lengths=(1.0, 1.0, 1.0),
    divisions=(1, 1, 1),
    degree: int = 1,
    clamp: str | None = "x0",
) -> Mesh:
    """Box [0,Lx]x[0,Ly]x[0,Lz] split into Kuhn tetrahedra.

    Tags: 1 for the clamped face (``clamp``, e.g. ``"x0"``), 2 for the
    opposite face, 3 for the remaining faces.  ``clamp=None`` tags all faces
    Neumann (tags 2/3 only).
    """
    nx, ny, nz = divisions
    Lx, Ly, Lz = lengths
    x = np.linspace(0, Lx, nx + 1)
    y = np.linspace(0, Ly, ny + 1)
    z = np.linspace(0, Lz, nz + 1)
    X, Y, Z = np.meshgrid(x, y, z, indexing="ij")
    pts = np.column_stack([X.ravel(), Y.ravel(), Z.ravel()])
    tets = _grid_tets(nx, ny, nz)
    ax = {"x": 0, "y": 1, "z": 2}
    tol = 1e-9 * max(lengths)

    def tagger(cent, faces):
        tags = np.full(len(cent), 3)
        if clamp is None:
            return tags
        a = ax[clamp[0]]
        lo = clamp[1] == "0"
        L = lengths[a]
        on_clamp = np.abs(cent[:, a] - (0.0 if lo else L)) < tol
        on_opp = np.abs(cent[:, a] - (L if lo else 0.0)) < tol
        tags[on_opp] = 2
        tags[on_clamp] = 1
        return tags

    roles = {1: DIRICHLET, 2: NEUMANN, 3: NEUMANN}
    return _from_tets(pts, tets, tagger, roles, degree)


def unit_cube(n: int = 1, degree: int = 1, clamp: str | None = "x0") -> Mesh:
    return box((1.0, 1.0, 1.0), (n, n, n), degree, clamp)


def cantilever(length=4.0, width=1.0, height=1.0, n=(8, 2, 2), degree: int = 1) -> Mesh:
    """Box beam clamped at x = 0, loaded face at x = length."""
    return box((length, width, height), n, degree, clamp="x0")


# -- sphere ----------------------------------------------------------------
_ICO_T = (1.0 + 5.0 ** 0.5) / 2.0


def icosphere_surface(level: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """Subdivided icosahedron projected to the unit sphere."""
    t = _ICO_T
    v = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=float)
    f = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ])
    v /= np.linalg.norm(v, axis=1)[:, None]
    for _ in range(level):
        nv = len(v)
        e = np.sort(np.vstack([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
        key = e[:, 0] * nv + e[:, 1]
        uk, inv = np.unique(key, return_inverse=True)
        mid = v[uk // nv] + v[uk % nv]
        mid /= np.linalg.norm(mid, axis=1)[:, None]
        m = nv + inv.reshape(3, -1).T  # (nf, 3): mids of edges 01, 12, 20
        a, b, c = f[:, 0], f[:, 1], f[:, 2]
        m01, m12, m20 = m[:, 0], m[:, 1], m[:, 2]
        f = np.vstack([
            np.column_stack([a, m01, m20]),
            np.column_stack([b, m12, m01]),
            np.column_stack([c, m20, m12]),
            np.column_stack([m01, m12, m20]),
        ])
        v = np.vstack([v, mid])
    return v, f


def _prism_tets(bot: np.ndarray, top: np.ndarray) -> np.ndarray:
    """Split prisms (bottom tri, top tri with matching order) into 3 tets.

    Vertices are sorted by their bottom index; quad-face diagonals then only
    depend on the global ordering and neighbouring prisms conform.
    """
    order = np.argsort(bot, axis=1)
    b = np.take_along_axis(bot, order, axis=1)
    t = np.take_along_axis(top, order, axis=1)
    return np.vstack([
        np.column_stack([b[:, 0], b[:, 1], b[:, 2], t[:, 2]]),
        np.column_stack([b[:, 0], b[:, 1], t[:, 1], t[:, 2]]),
        np.column_stack([b[:, 0], t[:, 0], t[:, 1], t[:, 2]]),
    ])


def icosphere_ball(level: int = 3, radius: float = 1.0, layers: int | None = None, degree: int = 1) -> Mesh:
    """Solid ball: concentric icosphere shells joined by split prisms.

    All boundary facets carry tag 2 (Neumann).  Use for geometry and
    transport checks; there is no clamp.
    """
    sv, sf = icosphere_surface(level)
    ns = len(sv)
    if layers is None:
        layers = max(1, 2 ** max(level - 1, 0))
    radii = radius * np.arange(1, layers + 1) / layers
    pts = [np.zeros((1, 3))] + [r * sv for r in radii]
    pts = np.vstack(pts)

    def sid(layer, s):  # layer 1..layers
        return 1 + (layer - 1) * ns + s

    tets = [np.column_stack([np.zeros(len(sf), dtype=np.int64), sid(1, sf[:, 0]), sid(1, sf[:, 1]), sid(1, sf[:, 2])])]
    for j in range(1, layers):
        tets.append(_prism_tets(sid(j, sf), sid(j + 1, sf)))
    tets = np.vstack(tets)
    return _from_tets(pts, tets, lambda c, f: np.full(len(c), 2), {2: NEUMANN}, degree)


# -- bent rod --------------------------------------------------------------
def disk_mesh(radius: float, rings: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Triangulated disk: centre plus ``rings`` concentric rings of 6k points."""
    pts = [np.zeros((1, 2))]
    for k in range(1, rings + 1):
        n = 6 * k
        th = 2 * np.pi * (np.arange(n) + 0.5 * (k % 2)) / n
        pts.append(radius * k / rings * np.column_stack([np.cos(th), np.sin(th)]))
    pts = np.vstack(pts)
    tri = Delaunay(pts).simplices
    a = pts[tri]
    cr = (a[:, 1, 0] - a[:, 0, 0]) * (a[:, 2, 1] - a[:, 0, 1]) - (a[:, 1, 1] - a[:, 0, 1]) * (a[:, 2, 0] - a[:, 0, 0])
    tri = tri[np.abs(cr) > 1e-12 * radius ** 2]
    outer = np.arange(len(pts) - 6 * rings, len(pts))
    return pts, tri, outer


ROD_CLAMP, ROD_LOAD, ROD_SURFACE = 1, 2, 3


def bent_rod(
    length: float = 6.0,
    height: float = 3.0,
    diameter: float = 1.0,
    rings: int = 2,
    stations: int = 24,
    degree: int = 2,
) -> Mesh:
    """Rod of circular cross-section swept along a half-ellipse centreline.

    ``length`` and ``height`` are the outer extents; the centreline is
    (a cos t, b sin t), t in [0, pi], with a = (length - diameter)/2 and
    b = height - diameter/2.  For length 6, height 3, diameter 1 this is a
    semicircle of radius 2.5.  Both end faces lie in the plane y = 0.
    Tags: 1 clamp (right end, x > 0), 2 load (left end), 3 lateral surface.
    """
    a = (length - diameter) / 2.0
    b = height - diameter / 2.0
    d2, tri, _ = disk_mesh(diameter / 2.0, rings)
    nd = len(d2)
    t = np.linspace(0.0, np.pi, stations + 1)
    C = np.column_stack([a * np.cos(t), b * np.sin(t), np.zeros_like(t)])
    T = np.column_stack([-a * np.sin(t), b * np.cos(t), np.zeros_like(t)])
    T /= np.linalg.norm(T, axis=1)[:, None]
    ez = np.array([0.0, 0.0, 1.0])
    N = np.cross(ez, T)  # in-plane normal; points inward (towards the centre)
    pts = (C[:, None, :] + d2[None, :, 0:1] * N[:, None, :] + d2[None, :, 1:2] * ez[None, None, :]).reshape(-1, 3)
    tets = []
    for s in range(stations):
        tets.append(_prism_tets(s * nd + tri, (s + 1) * nd + tri))
    tets = np.vstack(tets)
    ids_first = np.arange(nd)
    ids_last = stations * nd + np.arange(nd)

    def tagger(cent, faces):
        tags = np.full(len(faces), ROD_SURFACE)
        first = np.all(np.isin(faces, ids_first), axis=1)
        last = np.all(np.isin(faces, ids_last), axis=1)
        tags[first] = ROD_CLAMP  # t = 0 is the right end (x = +a)
        tags[last] = ROD_LOAD
        return tags

    roles = {ROD_CLAMP: DIRICHLET, ROD_LOAD: NEUMANN, ROD_SURFACE: NEUMANN}
    return _from_tets(pts, tets, tagger, roles, degree)


# 19.6 N on the pi/4 mm^2 cross-section of the free end, pulling along -x
ROD_TRACTION = (-19.6 / (np.pi / 4.0), 0.0, 0.0)

ROD_FAMILY = {
    # name: (outer length, outer height) in mm, diameter 1 mm
    "omega0": (6.05, 2.95),
    "omega1": (6.0, 3.0),
    "omega2": (5.95, 3.05),
}


def rod_resolution(level: int) -> tuple[int, int]:
    """(rings, stations) for a refinement level; level 0 is the coarse rod."""
    return 2 * 2 ** level, 24 * 2 ** level
