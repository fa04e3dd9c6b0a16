"""Legacy ASCII VTK export of point clouds with per-point fields."""

from __future__ import annotations

from pathlib import Path
from typing import Union

import numpy as np

from .errors import DimensionError

PathLike = Union[str, Path]
VTK_VERTEX = 1


def write_vtk_points(path: PathLike, points, fields, title: str = "geomdeeponet prediction",
                     sdf=None) -> Path:
    """Unstructured grid of VTK_VERTEX cells carrying ``field_1..field_c``
    (and optionally ``sdf``) as POINT_DATA scalars."""
    pts = np.asarray(points, dtype=np.float64)
    vals = np.asarray(fields, dtype=np.float64)
    if vals.ndim == 1:
        vals = vals[:, None]
    if pts.ndim != 2 or pts.shape[1] != 3 or vals.shape[0] != pts.shape[0]:
        raise DimensionError(f"points {pts.shape} and fields {vals.shape} do not align")
    n = len(pts)
    lines = [
        "# vtk DataFile Version 3.0",
        title.replace("\n", " ")[:255],
        "ASCII",
        "DATASET UNSTRUCTURED_GRID",
        f"POINTS {n} double",
    ]
    lines += [f"{x!r} {y!r} {z!r}" for x, y, z in pts.tolist()]
    lines.append(f"CELLS {n} {2 * n}")
    lines += [f"1 {i}" for i in range(n)]
    lines.append(f"CELL_TYPES {n}")
    lines += [str(VTK_VERTEX)] * n
    lines.append(f"POINT_DATA {n}")
    columns = [(f"field_{k + 1}", vals[:, k]) for k in range(vals.shape[1])]
    if sdf is not None:
        columns.append(("sdf", np.asarray(sdf, dtype=np.float64).reshape(n)))
    for name, col in columns:
        lines += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
        lines += [repr(v) for v in col.tolist()]
    path = Path(path)
    path.write_text("\n".join(lines) + "\n", encoding="ascii")
    return path


def read_vtk_point_data(path: PathLike) -> tuple[np.ndarray, dict]:
    """Parse a file written by :func:`write_vtk_points` into (points, {name: values})."""
    tokens = Path(path).read_text(encoding="ascii").split("\n")
    it = iter(tokens)
    points, data = None, {}
    for line in it:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "POINTS":
            n = int(parts[1])
            points = np.array([[float(v) for v in next(it).split()] for _ in range(n)])
        elif parts[0] == "SCALARS":
            next(it)  # lookup table
            data[parts[1]] = np.array([float(next(it)) for _ in range(len(points))])
    return points, data
