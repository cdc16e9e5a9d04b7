"""VTK legacy ASCII writer and a matching minimal reader."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .core import Mesh

# 10-node tet: our edge order (01, 12, 20, 30, 32, 31) to VTK (01, 12, 20, 03, 13, 23)
_VTK_TET10 = [0, 1, 2, 3, 4, 5, 6, 7, 9, 8]


def _fmt(v: float) -> str:
    return "%.9e" % v


def write_vtk(path, mesh: Mesh, point_data: dict | None = None, cell_data: dict | None = None,
              title: str = "artifact") -> None:
    """Write an unstructured grid.

    ``point_data`` maps names to arrays of shape (n_points,) or (n_points, 3);
    ``cell_data`` likewise per cell.  Output is byte-stable for equal inputs.
    """
    point_data = point_data or {}
    cell_data = cell_data or {}
    n = len(mesh.points)
    nc = mesh.n_cells
    k = mesh.cells.shape[1]
    cells = mesh.cells if k == 4 else mesh.cells[:, _VTK_TET10]
    ctype = 10 if k == 4 else 24
    out = ["# vtk DataFile Version 3.0", title[:255], "ASCII", "DATASET UNSTRUCTURED_GRID"]
    out.append(f"POINTS {n} double")
    out += [" ".join(_fmt(x) for x in p) for p in mesh.points]
    out.append(f"CELLS {nc} {nc * (k + 1)}")
    out += [f"{k} " + " ".join(str(v) for v in c) for c in cells]
    out.append(f"CELL_TYPES {nc}")
    out += [str(ctype)] * nc

    def block(data: dict, size: int, head: str):
        if not data:
            return []
        lines = [f"{head} {size}"]
        for name in data:
            arr = np.asarray(data[name], dtype=float)
            if arr.shape[0] != size:
                raise ValueError(f"field {name!r} has {arr.shape[0]} rows, expected {size}")
            safe = name.replace(" ", "_")
            if arr.ndim == 1:
                lines += [f"SCALARS {safe} double 1", "LOOKUP_TABLE default"]
                lines += [_fmt(v) for v in arr]
            elif arr.shape[1] == 3:
                lines.append(f"VECTORS {safe} double")
                lines += [" ".join(_fmt(x) for x in r) for r in arr]
            else:
                raise ValueError(f"field {name!r} must be scalar or 3-vector")
        return lines

    out += block(point_data, n, "POINT_DATA")
    out += block(cell_data, nc, "CELL_DATA")
    Path(path).write_text("\n".join(out) + "\n")


def read_vtk(path) -> dict:
    """Parse files produced by :func:`write_vtk` (points, cells, fields)."""
    tok = Path(path).read_text().split("\n")
    i = 4
    res: dict = {"point_data": {}, "cell_data": {}}
    target = None
    while i < len(tok):
        line = tok[i].strip()
        if not line:
            i += 1
            continue
        parts = line.split()
        if parts[0] == "POINTS":
            n = int(parts[1])
            res["points"] = np.array([[float(x) for x in tok[i + 1 + j].split()] for j in range(n)])
            i += n + 1
        elif parts[0] == "CELLS":
            nc = int(parts[1])
            res["cells"] = np.array([[int(x) for x in tok[i + 1 + j].split()[1:]] for j in range(nc)])
            i += nc + 1
        elif parts[0] == "CELL_TYPES":
            nc = int(parts[1])
            res["cell_types"] = np.array([int(tok[i + 1 + j]) for j in range(nc)])
            i += nc + 1
        elif parts[0] in ("POINT_DATA", "CELL_DATA"):
            target = res["point_data"] if parts[0] == "POINT_DATA" else res["cell_data"]
            size = int(parts[1])
            i += 1
        elif parts[0] == "SCALARS":
            target[parts[1]] = np.array([float(tok[i + 2 + j]) for j in range(size)])
            i += size + 2
        elif parts[0] == "VECTORS":
            target[parts[1]] = np.array([[float(x) for x in tok[i + 1 + j].split()] for j in range(size)])
            i += size + 1
        else:
            i += 1
    return res
