"""Perfusion domains: closed 2D polygons and closed 3D triangle surfaces.

A domain answers inside-queries, measures itself, samples uniform points
(terminal sites), and serializes to simple delimited/ASCII formats.  Virtual
resections attach half-space sets whose intersection is treated as removed
material; the inside test composes them.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import DomainError, SamplingError

logger = logging.getLogger(__name__)

__all__ = ["PerfusionDomain", "read_polyline_csv", "write_polyline_csv",
           "read_surface_ascii", "write_surface_ascii"]

_RAY_DIR = np.array([0.577350269, 0.211324865, 0.788675134])  # irrational-ish


@dataclass
class PerfusionDomain:
    """Either a 2D polygon (``vertices`` only) or a 3D closed surface
    (``vertices`` + ``triangles``).

    removed_regions: each entry is an (n_planes, 6) array of rows
    [px, py, pz, nx, ny, nz]; a point is removed by an entry when its signed
    distance is negative for every plane of that entry.
    """

    vertices: np.ndarray
    triangles: Optional[np.ndarray] = None
    removed_regions: List[np.ndarray] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.vertices = np.asarray(self.vertices, dtype=float)
        if self.triangles is None:
            if self.vertices.ndim != 2 or self.vertices.shape[1] != 2:
                raise DomainError("2D domain expects an (n, 2) vertex array")
            if self.vertices.shape[0] < 3:
                raise DomainError("polygon needs at least 3 vertices")
            if np.allclose(self.vertices[0], self.vertices[-1]):
                self.vertices = self.vertices[:-1]
            if abs(_shoelace(self.vertices)) < 1e-12:
                raise DomainError("polygon is degenerate (zero area)")
        else:
            self.triangles = np.asarray(self.triangles, dtype=np.int64)
            if self.vertices.shape[1] != 3 or self.triangles.shape[1] != 3:
                raise DomainError("3D domain expects (n,3) vertices and (m,3) triangles")
            if abs(self._raw_volume()) < 1e-12:
                raise DomainError("surface encloses no volume")

    # ------------------------------------------------------------------
    @property
    def dim(self) -> int:
        return 2 if self.triangles is None else 3

    @classmethod
    def disk(cls, radius: float, center=(0.0, 0.0), n_boundary: int = 256) -> "PerfusionDomain":
        if radius <= 0:
            raise DomainError("disk radius must be positive")
        ang = np.linspace(0.0, 2.0 * np.pi, n_boundary, endpoint=False)
        verts = np.stack([center[0] + radius * np.cos(ang), center[1] + radius * np.sin(ang)], axis=1)
        return cls(vertices=verts)

    @classmethod
    def box3d(cls, lengths=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)) -> "PerfusionDomain":
        lx, ly, lz = lengths
        ox, oy, oz = origin
        v = np.array(
            [[ox, oy, oz], [ox + lx, oy, oz], [ox + lx, oy + ly, oz], [ox, oy + ly, oz],
             [ox, oy, oz + lz], [ox + lx, oy, oz + lz], [ox + lx, oy + ly, oz + lz],
             [ox, oy + ly, oz + lz]]
        )
        t = np.array(
            [[0, 2, 1], [0, 3, 2], [4, 5, 6], [4, 6, 7], [0, 1, 5], [0, 5, 4],
             [1, 2, 6], [1, 6, 5], [2, 3, 7], [2, 7, 6], [3, 0, 4], [3, 4, 7]]
        )
        return cls(vertices=v, triangles=t)

    # ------------------------------------------------------------------
    def bbox(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def _raw_volume(self) -> float:
        a = self.vertices[self.triangles[:, 0]]
        b = self.vertices[self.triangles[:, 1]]
        c = self.vertices[self.triangles[:, 2]]
        return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)

    def measure(self) -> float:
        """Area (2D) or volume (3D) of the pristine domain boundary."""
        if self.dim == 2:
            return abs(_shoelace(self.vertices))
        return abs(self._raw_volume())

    # ------------------------------------------------------------------
    def removed(self, points: np.ndarray) -> np.ndarray:
        """True where a point lies in any attached removed region."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        pts3 = _as3(points)
        out = np.zeros(points.shape[0], dtype=bool)
        for planes in self.removed_regions:
            inside_all = np.ones(points.shape[0], dtype=bool)
            for row in planes:
                signed = (pts3 - row[:3]) @ row[3:]
                inside_all &= signed < 0.0
            out |= inside_all
        return out

    def inside(self, points: np.ndarray) -> np.ndarray:
        """True for points in the domain interior (and not resected)."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if self.dim == 2:
            mask = _polygon_inside(points[:, :2], self.vertices)
        else:
            mask = self._surface_inside(points[:, :3])
        if self.removed_regions:
            mask &= ~self.removed(points)
        return mask

    def _surface_inside(self, points: np.ndarray) -> np.ndarray:
        a = self.vertices[self.triangles[:, 0]]
        e1 = self.vertices[self.triangles[:, 1]] - a
        e2 = self.vertices[self.triangles[:, 2]] - a
        d = _RAY_DIR
        out = np.zeros(points.shape[0], dtype=bool)
        pvec = np.cross(d, e2)
        det = np.einsum("ij,ij->i", e1, pvec)
        good = np.abs(det) > 1e-12
        inv = np.zeros_like(det)
        inv[good] = 1.0 / det[good]
        for k, p in enumerate(points):
            tvec = p - a
            u = np.einsum("ij,ij->i", tvec, pvec) * inv
            qvec = np.cross(tvec, e1)
            v = np.einsum("j,ij->i", d, qvec) * inv
            t = np.einsum("ij,ij->i", e2, qvec) * inv
            hits = good & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 1e-12)
            out[k] = (np.count_nonzero(hits) % 2) == 1
        return out

    def with_removed_region(self, planes: np.ndarray) -> "PerfusionDomain":
        """New domain with one more removed half-space intersection."""
        planes = np.atleast_2d(np.asarray(planes, dtype=float))
        if planes.shape[1] != 6:
            raise DomainError("each cutting plane needs 6 numbers: point and normal")
        return replace(self, removed_regions=self.removed_regions + [planes])

    # ------------------------------------------------------------------
    def sample_uniform(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """n uniform points inside the domain (rejection from the bbox).

        Returns (n, 3) with z = 0 for 2D domains.  Raises SamplingError when
        the acceptance rate collapses (empty or razor-thin domains).
        """
        if n < 1:
            raise SamplingError("need at least one sample")
        lo, hi = self.bbox()
        got: List[np.ndarray] = []
        count = 0
        attempts = 0
        max_attempts = 2000 * n + 100_000
        while count < n:
            m = min(4 * (n - count) + 64, 100_000)
            pts = rng.uniform(lo, hi, size=(m, lo.size))
            attempts += m
            keep = pts[self.inside(pts)]
            if keep.size:
                got.append(keep)
                count += keep.shape[0]
            if attempts > max_attempts:
                raise SamplingError(
                    f"rejection sampling accepted {count}/{n} after {attempts} draws"
                )
        pts = np.concatenate(got, axis=0)[:n]
        return _as3(pts)


# ----------------------------------------------------------------------


def _shoelace(verts: np.ndarray) -> float:
    x, y = verts[:, 0], verts[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def _polygon_inside(points: np.ndarray, verts: np.ndarray) -> np.ndarray:
    """Even-odd rule ray casting, vectorized over points and edges."""
    x = points[:, 0][:, None]
    y = points[:, 1][:, None]
    x0 = verts[:, 0][None, :]
    y0 = verts[:, 1][None, :]
    x1 = np.roll(verts[:, 0], -1)[None, :]
    y1 = np.roll(verts[:, 1], -1)[None, :]
    straddle = (y0 > y) != (y1 > y)
    with np.errstate(divide="ignore", invalid="ignore"):
        xs = x0 + (y - y0) * (x1 - x0) / (y1 - y0)
    crossing = straddle & (x < xs)
    return (np.count_nonzero(crossing, axis=1) % 2) == 1


def _as3(points: np.ndarray) -> np.ndarray:
    points = np.atleast_2d(points)
    if points.shape[1] == 3:
        return points
    out = np.zeros((points.shape[0], 3))
    out[:, : points.shape[1]] = points
    return out


# ----------------------------------------------------------------------
# file formats


def write_polyline_csv(domain: PerfusionDomain, path) -> None:
    if domain.dim != 2:
        raise DomainError("polyline CSV stores 2D domains only")
    lines = ["x_mm,y_mm"]
    for vx, vy in domain.vertices:
        lines.append(f"{format(vx, '.17g')},{format(vy, '.17g')}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_polyline_csv(path) -> PerfusionDomain:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "x_mm,y_mm":
            raise DomainError(f"unexpected polyline header: {header!r}")
        rows = [line.strip().split(",") for line in fh if line.strip()]
    if len(rows) < 3:
        raise DomainError("closed polyline needs at least 3 vertices")
    verts = np.array([[float(r[0]), float(r[1])] for r in rows])
    return PerfusionDomain(vertices=verts)


def write_surface_ascii(domain: PerfusionDomain, path) -> None:
    """Minimal ASCII triangle-soup writer (solid/facet/vertex grammar)."""
    if domain.dim != 3:
        raise DomainError("surface format stores 3D domains only")
    out = ["solid domain"]
    for tri in domain.triangles:
        a, b, c = domain.vertices[tri]
        n = np.cross(b - a, c - a)
        nn = np.linalg.norm(n)
        n = n / nn if nn > 0 else n
        out.append(f"  facet normal {n[0]:.9g} {n[1]:.9g} {n[2]:.9g}")
        out.append("    outer loop")
        for v in (a, b, c):
            out.append(
                f"      vertex {format(v[0], '.17g')} {format(v[1], '.17g')} {format(v[2], '.17g')}"
            )
        out.append("    endloop")
        out.append("  endfacet")
    out.append("endsolid domain")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(out) + "\n")


def read_surface_ascii(path) -> PerfusionDomain:
    verts: List[List[float]] = []
    tris: List[List[int]] = []
    index: dict = {}
    current: List[int] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "vertex":
                key = (parts[1], parts[2], parts[3])
                if key not in index:
                    index[key] = len(verts)
                    verts.append([float(parts[1]), float(parts[2]), float(parts[3])])
                current.append(index[key])
            elif parts[0] == "endfacet":
                if len(current) != 3:
                    raise DomainError("facet without exactly three vertices")
                tris.append(current)
                current = []
    if not tris:
        raise DomainError("surface file contains no facets")
    return PerfusionDomain(vertices=np.array(verts), triangles=np.array(tris))
