"""Simplicial meshes (triangles in 2D, tetrahedra in 3D) for the continuum
solvers: structured generators for verification, a lattice + Delaunay
generator for organ outlines, boundary-face bookkeeping with tags, clipping
by element centroid, and promotion of triangle meshes to quadratic nodes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Tuple

import numpy as np
from scipy.spatial import Delaunay

from .domain import PerfusionDomain
from .errors import DomainError
from .geometry import point_segment_distance

logger = logging.getLogger(__name__)

__all__ = ["SimplicialMesh", "rect_mesh", "box_mesh", "delaunay_mesh", "promote_p2"]

# local face -> corner vertices, ordered so normals point outward for
# positively oriented elements
_FACE_TABLE = {
    2: np.array([[0, 1], [1, 2], [2, 0]]),
    3: np.array([[1, 2, 3], [0, 3, 2], [0, 1, 3], [0, 2, 1]]),
}


@dataclass
class SimplicialMesh:
    """Corner vertices + element connectivity with boundary-face tags.

    boundary_faces rows hold corner vertex indices oriented outward;
    boundary_elems maps each boundary face to its owning element.
    """

    vertices: np.ndarray
    elements: np.ndarray
    boundary_faces: np.ndarray = field(default=None)  # type: ignore[assignment]
    boundary_elems: np.ndarray = field(default=None)  # type: ignore[assignment]
    boundary_tags: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        self.vertices = np.asarray(self.vertices, dtype=float)
        self.elements = np.asarray(self.elements, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] not in (2, 3):
            raise DomainError("mesh vertices must be (n, 2) or (n, 3)")
        if self.elements.shape[1] != self.vertices.shape[1] + 1:
            raise DomainError("element connectivity does not match dimension")
        self._fix_orientation()
        if self.boundary_faces is None:
            faces, owners = _find_boundary(self.elements, self.dim)
            self.boundary_faces = faces
            self.boundary_elems = owners
            self.boundary_tags = np.array(["outer"] * len(faces), dtype="<U16")

    # ------------------------------------------------------------------
    @property
    def dim(self) -> int:
        return self.vertices.shape[1]

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_elements(self) -> int:
        return self.elements.shape[0]

    def _fix_orientation(self) -> None:
        vol = _signed_measures(self.vertices, self.elements)
        flip = vol < 0
        if np.any(flip):
            cols = self.elements[flip][:, [0, 2, 1] if self.dim == 2 else [0, 1, 3, 2]]
            self.elements[flip] = cols
        if np.any(_signed_measures(self.vertices, self.elements) <= 0):
            raise DomainError("mesh contains degenerate elements")

    def centroids(self) -> np.ndarray:
        return self.vertices[self.elements].mean(axis=1)

    def volumes(self) -> np.ndarray:
        """Element areas (2D) or volumes (3D); positive by construction."""
        return _signed_measures(self.vertices, self.elements)

    def element_sizes(self) -> np.ndarray:
        """Longest edge per element."""
        corners = self.vertices[self.elements]
        m = self.elements.shape[1]
        best = np.zeros(self.n_elements)
        for i in range(m):
            for j in range(i + 1, m):
                d = np.linalg.norm(corners[:, i] - corners[:, j], axis=1)
                best = np.maximum(best, d)
        return best

    def boundary_element_mask(self) -> np.ndarray:
        """True for elements owning at least one boundary face."""
        mask = np.zeros(self.n_elements, dtype=bool)
        mask[self.boundary_elems] = True
        return mask

    def face_normals_and_measures(self) -> Tuple[np.ndarray, np.ndarray]:
        """Outward unit normals and lengths/areas of boundary faces."""
        pts = self.vertices[self.boundary_faces]
        if self.dim == 2:
            d = pts[:, 1] - pts[:, 0]
            meas = np.linalg.norm(d, axis=1)
            normals = np.stack([d[:, 1], -d[:, 0]], axis=1) / meas[:, None]
        else:
            n = np.cross(pts[:, 1] - pts[:, 0], pts[:, 2] - pts[:, 0])
            nn = np.linalg.norm(n, axis=1)
            meas = 0.5 * nn
            normals = n / nn[:, None]
        return normals, meas

    # ------------------------------------------------------------------
    def clip(self, removed: Callable[[np.ndarray], np.ndarray]) -> "SimplicialMesh":
        """Remove elements whose centroid lies in the resected region.

        Surviving faces keep their tags; faces exposed by the cut are
        tagged ``"cut"``.  Unused vertices are dropped and reindexed.
        """
        cents = self.centroids()
        pts = cents if self.dim == 3 else np.column_stack([cents, np.zeros(len(cents))])
        drop = np.asarray(removed(pts), dtype=bool)
        if not np.any(drop):
            return self
        keep_elems = self.elements[~drop]
        if keep_elems.size == 0:
            raise DomainError("clipping removed every element")
        used = np.unique(keep_elems)
        remap = -np.ones(self.n_vertices, dtype=np.int64)
        remap[used] = np.arange(used.size)
        new = SimplicialMesh(vertices=self.vertices[used], elements=remap[keep_elems])
        old_tags = {
            tuple(sorted(f)): t for f, t in zip(self.boundary_faces, self.boundary_tags)
        }
        for i, f in enumerate(new.boundary_faces):
            key = tuple(sorted(used[f]))
            new.boundary_tags[i] = old_tags.get(key, "cut")
        return new


# ----------------------------------------------------------------------


def _signed_measures(vertices: np.ndarray, elements: np.ndarray) -> np.ndarray:
    corners = vertices[elements]
    edges = corners[:, 1:] - corners[:, :1]
    if vertices.shape[1] == 2:
        return 0.5 * np.linalg.det(edges)
    return np.linalg.det(edges) / 6.0


def _find_boundary(elements: np.ndarray, dim: int) -> Tuple[np.ndarray, np.ndarray]:
    table = _FACE_TABLE[dim]
    faces = elements[:, table].reshape(-1, dim)  # (n_e * n_faces, dim)
    owners = np.repeat(np.arange(elements.shape[0]), table.shape[0])
    key = np.sort(faces, axis=1)
    _, inverse, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    on_boundary = counts[inverse] == 1
    return faces[on_boundary], owners[on_boundary]


# ----------------------------------------------------------------------
# generators


def rect_mesh(nx: int, ny: int, lengths=(1.0, 1.0), origin=(0.0, 0.0)) -> SimplicialMesh:
    """Structured triangle mesh of a rectangle, two triangles per cell."""
    xs = np.linspace(origin[0], origin[0] + lengths[0], nx + 1)
    ys = np.linspace(origin[1], origin[1] + lengths[1], ny + 1)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    verts = np.column_stack([X.ravel(), Y.ravel()])

    def vid(i, j):
        return i * (ny + 1) + j

    tris: List[List[int]] = []
    for i in range(nx):
        for j in range(ny):
            a, b, c, d = vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)
            tris.append([a, b, c])
            tris.append([a, c, d])
    return SimplicialMesh(vertices=verts, elements=np.array(tris))


def box_mesh(nx: int, ny: int, nz: int, lengths=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)) -> SimplicialMesh:
    """Structured tetrahedral mesh, six tets per hexahedral cell."""
    xs = np.linspace(origin[0], origin[0] + lengths[0], nx + 1)
    ys = np.linspace(origin[1], origin[1] + lengths[1], ny + 1)
    zs = np.linspace(origin[2], origin[2] + lengths[2], nz + 1)
    X, Y, Z = np.meshgrid(xs, ys, zs, indexing="ij")
    verts = np.column_stack([X.ravel(), Y.ravel(), Z.ravel()])

    def vid(i, j, k):
        return (i * (ny + 1) + j) * (nz + 1) + k

    # Kuhn subdivision: six tets sharing the main cell diagonal
    corner_offsets = [
        (0, 0, 0), (1, 0, 0), (0, 1, 0), (1, 1, 0),
        (0, 0, 1), (1, 0, 1), (0, 1, 1), (1, 1, 1),
    ]
    kuhn = [
        (0, 1, 3, 7), (0, 1, 5, 7), (0, 2, 3, 7),
        (0, 2, 6, 7), (0, 4, 5, 7), (0, 4, 6, 7),
    ]
    tets: List[List[int]] = []
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                ids = [vid(i + o[0], j + o[1], k + o[2]) for o in corner_offsets]
                for t in kuhn:
                    tets.append([ids[c] for c in t])
    return SimplicialMesh(vertices=verts, elements=np.array(tets))


def delaunay_mesh(domain: PerfusionDomain, h: float) -> SimplicialMesh:
    """Triangle mesh of a 2D domain: hexagonal interior lattice at spacing
    ``h`` plus boundary points resampled at ~``h``, triangulated and filtered
    by centroid."""
    if domain.dim != 2:
        raise DomainError("delaunay_mesh handles 2D domains")
    if h <= 0:
        raise DomainError("mesh spacing must be positive")
    lo, hi = domain.bbox()
    row_h = h * np.sqrt(3.0) / 2.0
    ys = np.arange(lo[1] - h, hi[1] + h, row_h)
    pts = []
    for r, y in enumerate(ys):
        off = 0.5 * h if r % 2 else 0.0
        xs = np.arange(lo[0] - h + off, hi[0] + h, h)
        pts.append(np.column_stack([xs, np.full(xs.size, y)]))
    lattice = np.concatenate(pts, axis=0)
    inside = domain.inside(lattice)
    # keep lattice points clear of the outline so boundary triangles stay fat
    verts = domain.vertices
    nxt = np.roll(np.arange(len(verts)), -1)
    lattice3 = np.column_stack([lattice, np.zeros(lattice.shape[0])])
    dmin = np.full(lattice.shape[0], np.inf)
    for a, b in zip(verts, verts[nxt]):
        dmin = np.minimum(dmin, point_segment_distance(lattice3, np.r_[a, 0.0], np.r_[b, 0.0]))
    interior = lattice[inside & (dmin > 0.5 * h)]

    ring = []
    for a, b in zip(verts, verts[nxt]):
        n_sub = max(1, int(np.ceil(np.linalg.norm(b - a) / h)))
        for s in range(n_sub):
            ring.append(a + (b - a) * (s / n_sub))
    boundary = np.array(ring)

    allpts = np.concatenate([interior, boundary], axis=0)
    tri = Delaunay(allpts)
    cents = allpts[tri.simplices].mean(axis=1)
    keep = domain.inside(cents)
    areas = _signed_measures(allpts, tri.simplices)
    keep &= np.abs(areas) > 1e-8 * h * h
    elements = tri.simplices[keep]
    used = np.unique(elements)
    remap = -np.ones(allpts.shape[0], dtype=np.int64)
    remap[used] = np.arange(used.size)
    mesh = SimplicialMesh(vertices=allpts[used], elements=remap[elements])
    logger.info("delaunay_mesh: %d vertices, %d triangles (h=%.3g)",
                mesh.n_vertices, mesh.n_elements, h)
    return mesh


# ----------------------------------------------------------------------


def promote_p2(mesh: SimplicialMesh) -> Tuple[np.ndarray, np.ndarray]:
    """Quadratic nodes for a triangle mesh.

    Returns (nodes, connectivity) where nodes stacks the corner vertices and
    the unique edge midpoints, and connectivity rows read
    [v0, v1, v2, m01, m12, m20].
    """
    if mesh.dim != 2:
        raise DomainError("quadratic promotion implemented for triangles")
    e = mesh.elements
    edges = np.concatenate([e[:, [0, 1]], e[:, [1, 2]], e[:, [2, 0]]], axis=0)
    key = np.sort(edges, axis=1)
    uniq, inverse = np.unique(key, axis=0, return_inverse=True)
    mids = 0.5 * (mesh.vertices[uniq[:, 0]] + mesh.vertices[uniq[:, 1]])
    nodes = np.concatenate([mesh.vertices, mids], axis=0)
    n = mesh.n_elements
    m01 = mesh.n_vertices + inverse[:n]
    m12 = mesh.n_vertices + inverse[n : 2 * n]
    m20 = mesh.n_vertices + inverse[2 * n :]
    conn = np.column_stack([e, m01, m12, m20])
    return nodes, conn
