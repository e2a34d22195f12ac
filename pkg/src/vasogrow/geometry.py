"""Geometric primitives: distances, clipping, and AABB pruning.

Everything operates on batches of segments as numpy arrays; these kernels sit
on the hot path of intersection detection and homogenization.
"""

from __future__ import annotations

from typing import Dict, List, Tuple

import numpy as np

__all__ = [
    "point_segment_distance",
    "segment_pair_distance",
    "clip_segment_sphere",
    "BoxGrid",
]

_EPS = 1e-30


def point_segment_distance(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distance from each point to the matching segment [a, b]."""
    points = np.atleast_2d(points)
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    d = b - a
    denom = np.einsum("ij,ij->i", d, d)
    t = np.einsum("ij,ij->i", points - a, d)
    t = np.divide(t, denom, out=np.zeros_like(t), where=denom > _EPS)
    t = np.clip(t, 0.0, 1.0)
    closest = a + t[:, None] * d
    return np.linalg.norm(points - closest, axis=1)


def segment_pair_distance(
    p1: np.ndarray, q1: np.ndarray, p2: np.ndarray, q2: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Minimum distance between segment pairs [p1,q1] and [p2,q2].

    Returns (distance, s, t) with the closest points at p1 + s*(q1-p1) and
    p2 + t*(q2-p2).  Degenerate (zero length) segments are handled.
    """
    p1 = np.atleast_2d(p1)
    q1 = np.atleast_2d(q1)
    p2 = np.atleast_2d(p2)
    q2 = np.atleast_2d(q2)
    d1 = q1 - p1
    d2 = q2 - p2
    r = p1 - p2
    a = np.einsum("ij,ij->i", d1, d1)
    e = np.einsum("ij,ij->i", d2, d2)
    f = np.einsum("ij,ij->i", d2, r)
    c = np.einsum("ij,ij->i", d1, r)
    b = np.einsum("ij,ij->i", d1, d2)
    denom = a * e - b * b

    s = np.zeros(a.shape)
    ok = denom > _EPS
    s[ok] = np.clip((b * f - c * e)[ok] / denom[ok], 0.0, 1.0)

    t = np.divide(b * s + f, e, out=np.zeros(a.shape), where=e > _EPS)
    t_clamped = np.clip(t, 0.0, 1.0)
    redo = (t != t_clamped) | (e <= _EPS)
    t = t_clamped
    s_redo = np.divide(b * t - c, a, out=np.zeros(a.shape), where=a > _EPS)
    s = np.where(redo, np.clip(s_redo, 0.0, 1.0), s)

    c1 = p1 + s[:, None] * d1
    c2 = p2 + t[:, None] * d2
    return np.linalg.norm(c1 - c2, axis=1), s, t


def clip_segment_sphere(
    a: np.ndarray, b: np.ndarray, center: np.ndarray, radius: float, axes=None
) -> Tuple[np.ndarray, np.ndarray]:
    """Parameter interval [t0, t1] of each segment inside a sphere.

    ``axes`` restricts the distance to a coordinate subset, turning the
    sphere into an axis-aligned infinite cylinder (two-dimensional averaging
    volumes are circles extruded through the plane).  Empty intersections
    return t0 = t1 = 0.
    """
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    center = np.asarray(center, dtype=float)
    if axes is not None:
        a = a[:, axes]
        b = b[:, axes]
        center = center[list(axes)]
    d = b - a
    m = a - center[None, :]
    qa = np.einsum("ij,ij->i", d, d)
    qb = np.einsum("ij,ij->i", m, d)
    qc = np.einsum("ij,ij->i", m, m) - radius**2

    t0 = np.zeros(a.shape[0])
    t1 = np.zeros(a.shape[0])
    # degenerate segments: inside iff the point is inside
    degen = qa <= _EPS
    inside_pt = degen & (qc <= 0.0)
    t1[inside_pt] = 1.0

    disc = qb * qb - qa * qc
    hit = (~degen) & (disc > 0.0)
    sq = np.sqrt(np.maximum(disc[hit], 0.0))
    lo = (-qb[hit] - sq) / qa[hit]
    hi = (-qb[hit] + sq) / qa[hit]
    lo = np.clip(lo, 0.0, 1.0)
    hi = np.clip(hi, 0.0, 1.0)
    t0[hit] = lo
    t1[hit] = np.maximum(lo, hi)
    return t0, t1


class BoxGrid:
    """Uniform hash grid over axis-aligned boxes for pair pruning."""

    def __init__(self, lo: np.ndarray, hi: np.ndarray, cell: float):
        self.lo = np.atleast_2d(lo).astype(float)
        self.hi = np.atleast_2d(hi).astype(float)
        self.cell = float(cell)
        self.table: Dict[Tuple[int, ...], List[int]] = {}
        ilo = np.floor(self.lo / self.cell).astype(np.int64)
        ihi = np.floor(self.hi / self.cell).astype(np.int64)
        for i in range(self.lo.shape[0]):
            for key in _cell_range(ilo[i], ihi[i]):
                self.table.setdefault(key, []).append(i)

    def query_box(self, qlo: np.ndarray, qhi: np.ndarray) -> np.ndarray:
        """Indices of stored boxes whose AABB overlaps [qlo, qhi]."""
        qlo = np.asarray(qlo, dtype=float)
        qhi = np.asarray(qhi, dtype=float)
        ilo = np.floor(qlo / self.cell).astype(np.int64)
        ihi = np.floor(qhi / self.cell).astype(np.int64)
        found: List[int] = []
        for key in _cell_range(ilo, ihi):
            found.extend(self.table.get(key, ()))
        if not found:
            return np.empty(0, dtype=np.int64)
        idx = np.unique(np.asarray(found, dtype=np.int64))
        keep = np.all(self.lo[idx] <= qhi[None, :], axis=1) & np.all(
            self.hi[idx] >= qlo[None, :], axis=1
        )
        return idx[keep]

    def candidate_pairs(self, lo: np.ndarray, hi: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """All (stored, query) index pairs with overlapping AABBs."""
        lo = np.atleast_2d(lo)
        hi = np.atleast_2d(hi)
        left: List[np.ndarray] = []
        right: List[np.ndarray] = []
        for j in range(lo.shape[0]):
            idx = self.query_box(lo[j], hi[j])
            if idx.size:
                left.append(idx)
                right.append(np.full(idx.size, j, dtype=np.int64))
        if not left:
            return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
        return np.concatenate(left), np.concatenate(right)


def _cell_range(ilo: np.ndarray, ihi: np.ndarray):
    """Iterate integer grid keys covering [ilo, ihi] in up to 3 dims."""
    ranges = [range(int(l), int(h) + 1) for l, h in zip(ilo, ihi)]
    if len(ranges) == 2:
        for i in ranges[0]:
            for j in ranges[1]:
                yield (i, j)
    else:
        for i in ranges[0]:
            for j in ranges[1]:
                for k in ranges[2]:
                    yield (i, j, k)
