"""Gmsh MSH 2.2 ASCII reader and writer (tet4/tet10 cells, tri3/tri6 facets)."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ..errors import ParseError, TaggingError
from .core import DIRICHLET, NEUMANN, Mesh, orient_facets

_TET = {4: 4, 11: 10}
_TRI = {2: 3, 9: 6}
_DIRICHLET_WORDS = ("dirichlet", "clamp", "fixed", "support")


def _roles_from_names(names: dict[int, str], tags) -> dict[int, str]:
    roles = {}
    for t in tags:
        name = names.get(int(t), "").lower()
        roles[int(t)] = DIRICHLET if any(w in name for w in _DIRICHLET_WORDS) else NEUMANN
    return roles


def read_gmsh(path, tag_roles: dict[int, str] | None = None) -> Mesh:
    """Read a MSH 2.2 ASCII file.

    Boundary triangles must carry a non-zero physical tag.  When
    ``tag_roles`` is omitted, roles come from ``$PhysicalNames``: names
    containing "dirichlet", "clamp", "fixed" or "support" are Dirichlet,
    every other tag is Neumann.
    """
    lines = Path(path).read_text().splitlines()
    i = 0
    names: dict[int, str] = {}
    node_ids = node_xyz = None
    tets, tris, tri_tags = [], [], []

    def need(cond, msg, line):
        if not cond:
            raise ParseError(msg, line)

    n = len(lines)
    while i < n:
        s = lines[i].strip()
        if not s:
            i += 1
            continue
        if s == "$MeshFormat":
            need(i + 2 < n, "truncated $MeshFormat", i + 1)
            parts = lines[i + 1].split()
            need(len(parts) == 3 and parts[0].startswith("2.2") and parts[1] == "0", "only MSH 2.2 ASCII is supported", i + 2)
            need(lines[i + 2].strip() == "$EndMeshFormat", "expected $EndMeshFormat", i + 3)
            i += 3
        elif s == "$PhysicalNames":
            try:
                k = int(lines[i + 1])
            except (ValueError, IndexError):
                raise ParseError("bad physical-name count", i + 2)
            for j in range(k):
                ln = i + 2 + j
                parts = lines[ln].split(maxsplit=2) if ln < n else []
                need(len(parts) == 3, "bad physical name entry", ln + 1)
                names[int(parts[1])] = parts[2].strip().strip('"')
            need(i + 2 + k < n and lines[i + 2 + k].strip() == "$EndPhysicalNames", "expected $EndPhysicalNames", i + 3 + k)
            i += k + 3
        elif s == "$Nodes":
            try:
                k = int(lines[i + 1])
            except (ValueError, IndexError):
                raise ParseError("bad node count", i + 2)
            ids = np.empty(k, dtype=np.int64)
            xyz = np.empty((k, 3))
            for j in range(k):
                ln = i + 2 + j
                parts = lines[ln].split() if ln < n else []
                need(len(parts) == 4, "bad node line", ln + 1)
                try:
                    ids[j] = int(parts[0])
                    xyz[j] = [float(v) for v in parts[1:]]
                except ValueError:
                    raise ParseError("bad node line", ln + 1)
            need(i + 2 + k < n and lines[i + 2 + k].strip() == "$EndNodes", "expected $EndNodes", i + 3 + k)
            node_ids, node_xyz = ids, xyz
            i += k + 3
        elif s == "$Elements":
            try:
                k = int(lines[i + 1])
            except (ValueError, IndexError):
                raise ParseError("bad element count", i + 2)
            for j in range(k):
                ln = i + 2 + j
                try:
                    parts = [int(v) for v in lines[ln].split()]
                except (ValueError, IndexError):
                    raise ParseError("bad element line", ln + 1)
                need(len(parts) >= 3, "bad element line", ln + 1)
                etype, ntags = parts[1], parts[2]
                conn = parts[3 + ntags:]
                phys = parts[3] if ntags >= 1 else 0
                if etype in _TET:
                    need(len(conn) == _TET[etype], "wrong node count for tetrahedron", ln + 1)
                    tets.append(conn)
                elif etype in _TRI:
                    need(len(conn) == _TRI[etype], "wrong node count for triangle", ln + 1)
                    if phys == 0:
                        raise TaggingError(f"line {ln + 1}: boundary triangle without physical tag")
                    tris.append(conn)
                    tri_tags.append(phys)
            need(i + 2 + k < n and lines[i + 2 + k].strip() == "$EndElements", "expected $EndElements", i + 3 + k)
            i += k + 3
        elif s.startswith("$"):
            end = "$End" + s[1:]
            j = i + 1
            while j < n and lines[j].strip() != end:
                j += 1
            need(j < n, f"unterminated section {s}", i + 1)
            i = j + 1
        else:
            raise ParseError(f"unexpected content {s[:30]!r}", i + 1)

    if node_ids is None:
        raise ParseError("missing $Nodes section")
    if not tets:
        raise ParseError("no tetrahedra found")
    sizes = {len(t) for t in tets}
    need(len(sizes) == 1, "mixed tetrahedron orders", None)
    lookup = {int(v): j for j, v in enumerate(node_ids)}
    try:
        cells = np.array([[lookup[v] for v in t] for t in tets], dtype=np.int64)
        facets = np.array([[lookup[v] for v in t] for t in tris], dtype=np.int64).reshape(len(tris), -1)
    except KeyError as exc:
        raise ParseError(f"element references unknown node {exc.args[0]}")
    if facets.size and facets.shape[1] != (3 if cells.shape[1] == 4 else 6):
        raise ParseError("facet order does not match cell order")
    tags = np.array(tri_tags, dtype=np.int64)
    used = np.unique(np.concatenate([cells.ravel(), facets.ravel()]))
    remap = -np.ones(len(node_xyz), dtype=np.int64)
    remap[used] = np.arange(len(used))
    pts = node_xyz[used]
    cells, facets = remap[cells], remap[facets]
    facets = orient_facets(pts, cells, facets)
    roles = tag_roles if tag_roles is not None else _roles_from_names(names, np.unique(tags))
    return Mesh(pts, cells, facets, tags, roles)


def write_gmsh(path, mesh: Mesh, names: dict[int, str] | None = None) -> None:
    names = names or {t: f"{r.lower()}_{t}" for t, r in mesh.tag_roles.items()}
    tet_type = 4 if mesh.degree == 1 else 11
    tri_type = 2 if mesh.degree == 1 else 9
    out = ["$MeshFormat", "2.2 0 8", "$EndMeshFormat", "$PhysicalNames", str(len(names) + 1)]
    for t in sorted(names):
        out.append(f'2 {t} "{names[t]}"')
    out.append('3 100 "volume"')
    out.append("$EndPhysicalNames")
    out += ["$Nodes", str(len(mesh.points))]
    out += [f"{i + 1} {x:.17g} {y:.17g} {z:.17g}" for i, (x, y, z) in enumerate(mesh.points)]
    out += ["$EndNodes", "$Elements", str(len(mesh.facets) + len(mesh.cells))]
    k = 1
    for f, t in zip(mesh.facets, mesh.facet_tags):
        out.append(f"{k} {tri_type} 2 {t} {t} " + " ".join(str(v + 1) for v in f))
        k += 1
    for c in mesh.cells:
        out.append(f"{k} {tet_type} 2 100 100 " + " ".join(str(v + 1) for v in c))
        k += 1
    out.append("$EndElements")
    Path(path).write_text("\n".join(out) + "\n")
