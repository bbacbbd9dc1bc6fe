"""Legacy ASCII VTK (v3.0) output for tetrahedral meshes."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .mesh import TetMesh

VTK_TETRA = 10


def write_vtk(path, mesh: TetMesh, point_data: dict | None = None, cell_data: dict | None = None,
              title: str = "ksafem") -> Path:
    """Write an unstructured grid with optional scalar point and cell fields."""
    path = Path(path)
    lines = ["# vtk DataFile Version 3.0", title[:255], "ASCII", "DATASET UNSTRUCTURED_GRID",
             f"POINTS {mesh.nvertices} double"]
    lines += [f"{x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.vertices]
    lines.append(f"CELLS {mesh.ntets} {5 * mesh.ntets}")
    lines += [f"4 {a} {b} {c} {d}" for a, b, c, d in mesh.tets]
    lines.append(f"CELL_TYPES {mesh.ntets}")
    lines += [str(VTK_TETRA)] * mesh.ntets
    for header, size, data in (("CELL_DATA", mesh.ntets, cell_data), ("POINT_DATA", mesh.nvertices, point_data)):
        if not data:
            continue
        lines.append(f"{header} {size}")
        for name, values in data.items():
            v = np.asarray(values, dtype=float).ravel()
            if v.size != size:
                raise ValueError(f"field {name!r} has {v.size} values, expected {size}")
            lines += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
            lines += [f"{x:.17g}" for x in v]
    path.write_text("\n".join(lines) + "\n")
    return path
