"""Legacy-ASCII VTK exporters for meshes, fields, and vessel trees."""

from __future__ import annotations

from typing import Dict, Iterable, Optional, Sequence, Union

import numpy as np

from .ioutil import atomic_write_text
from .mesh import SimplicialMesh
from .tree import VesselTree

__all__ = ["write_vtk_mesh", "write_vtk_trees"]

_CELL_TYPE = {2: 5, 3: 10}  # triangle, tetrahedron
_FMT = "%.17g"

FieldDict = Dict[str, np.ndarray]


def _fmt_row(row: Iterable[float]) -> str:
    return " ".join(_FMT % v for v in row)


def _points_block(points: np.ndarray) -> list:
    pts = np.asarray(points, dtype=float)
    if pts.shape[1] == 2:
        pts = np.column_stack([pts, np.zeros(len(pts))])
    out = [f"POINTS {len(pts)} double"]
    out.extend(_fmt_row(p) for p in pts)
    return out


def _data_blocks(data: Optional[FieldDict], n: int, kind: str) -> list:
    if not data:
        return []
    out = [f"{kind} {n}"]
    for name in sorted(data):
        arr = np.asarray(data[name], dtype=float)
        if arr.shape[0] != n:
            raise ValueError(
                f"field '{name}' has {arr.shape[0]} entries, expected {n}")
        if arr.ndim == 1:
            out.append(f"SCALARS {name} double 1")
            out.append("LOOKUP_TABLE default")
            out.extend(_FMT % v for v in arr)
        else:
            if arr.shape[1] == 2:
                arr = np.column_stack([arr, np.zeros(n)])
            if arr.shape[1] != 3:
                raise ValueError(f"field '{name}' must be scalar or vector")
            out.append(f"VECTORS {name} double")
            out.extend(_fmt_row(v) for v in arr)
    return out


def write_vtk_mesh(
    path,
    mesh: SimplicialMesh,
    point_data: Optional[FieldDict] = None,
    cell_data: Optional[FieldDict] = None,
    displacement: Optional[np.ndarray] = None,
    title: str = "perfusion fields",
) -> None:
    """Write a simplicial mesh with optional nodal/element fields.

    With a displacement the written points are the displaced positions
    (the field itself can still be attached as point data).
    """
    points = mesh.vertices
    if displacement is not None:
        points = points + np.asarray(displacement, dtype=float)
    lines = ["# vtk DataFile Version 3.0", title, "ASCII",
             "DATASET UNSTRUCTURED_GRID"]
    lines.extend(_points_block(points))
    elems = mesh.elements
    k = elems.shape[1]
    lines.append(f"CELLS {len(elems)} {len(elems) * (k + 1)}")
    lines.extend(f"{k} " + " ".join(str(i) for i in row) for row in elems)
    lines.append(f"CELL_TYPES {len(elems)}")
    lines.extend([str(_CELL_TYPE[mesh.dim])] * len(elems))
    lines.extend(_data_blocks(point_data, mesh.n_vertices, "POINT_DATA"))
    lines.extend(_data_blocks(cell_data, mesh.n_elements, "CELL_DATA"))
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_vtk_trees(
    path,
    trees: Union[VesselTree, Sequence[VesselTree]],
    title: str = "vessel trees",
) -> None:
    """Write the active segments of one or more trees as VTK line cells,
    with radius, flow, and tree index attached per segment."""
    if isinstance(trees, VesselTree):
        trees = [trees]
    pts, cells, radius, flow, tree_id = [], [], [], [], []
    offset = 0
    for t_idx, tree in enumerate(trees):
        pts.append(tree.nodes)
        act = np.flatnonzero(tree.active)
        cells.append(np.column_stack([tree.seg_prox[act] + offset,
                                      tree.seg_dist[act] + offset]))
        radius.append(tree.radius[act])
        flow.append(tree.flow[act])
        tree_id.append(np.full(len(act), t_idx, dtype=float))
        offset += tree.n_nodes
    points = np.vstack(pts)
    segs = np.vstack(cells)
    lines = ["# vtk DataFile Version 3.0", title, "ASCII",
             "DATASET UNSTRUCTURED_GRID"]
    lines.extend(_points_block(points))
    lines.append(f"CELLS {len(segs)} {len(segs) * 3}")
    lines.extend(f"2 {u} {v}" for u, v in segs)
    lines.append(f"CELL_TYPES {len(segs)}")
    lines.extend(["3"] * len(segs))
    lines.extend(_data_blocks(
        {"radius_mm": np.concatenate(radius),
         "flow_mm3_s": np.concatenate(flow),
         "tree_id": np.concatenate(tree_id)},
        len(segs), "CELL_DATA"))
    atomic_write_text(path, "\n".join(lines) + "\n")
