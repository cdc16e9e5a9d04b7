from .core import (
    DIRICHLET,
    NEUMANN,
    TET_EDGES,
    Mesh,
    SurfaceGeometry,
    cotangent_laplacian,
    deform,
    is_watertight,
    mean_edge_length,
    quality,
    surface_euler_characteristic,
    surface_geometry,
)
from .generators import (
    ROD_CLAMP,
    ROD_FAMILY,
    ROD_LOAD,
    ROD_SURFACE,
    ROD_TRACTION,
    bent_rod,
    box,
    cantilever,
    icosphere_ball,
    icosphere_surface,
    reference_tet,
    rod_resolution,
    unit_cube,
)
from .gmsh import read_gmsh, write_gmsh
from .vtk import read_vtk, write_vtk

__all__ = [
    "DIRICHLET", "NEUMANN", "TET_EDGES", "Mesh", "SurfaceGeometry", "cotangent_laplacian", "deform",
    "is_watertight", "mean_edge_length", "quality", "surface_euler_characteristic", "surface_geometry",
    "ROD_CLAMP", "ROD_FAMILY", "ROD_LOAD", "ROD_SURFACE", "ROD_TRACTION", "bent_rod", "box", "cantilever",
    "icosphere_ball", "icosphere_surface", "reference_tet", "rod_resolution", "unit_cube",
    "read_gmsh", "write_gmsh", "read_vtk", "write_vtk",
]
