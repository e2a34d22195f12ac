"""Virtual surgical cuts on vascular trees, domains, and meshes.

A cut is the intersection of oriented half-spaces; material strictly on
the negative side of every plane is removed.  Vessel segments touching
the removed region are sealed whole, subtrees disconnected from the root
become orphans, and the surviving tree redistributes the unchanged
perfusion flow evenly over its remaining terminals (vasodilation).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Tuple

import numpy as np

from .domain import PerfusionDomain
from .errors import DevascularizationError
from .mesh import SimplicialMesh
from .tree import (
    HemodynamicParams,
    VesselTree,
    murray_radius,
    node_pressures,
    terminal_drops,
)

__all__ = [
    "CutSpec",
    "ResectionReport",
    "classify_cut",
    "find_orphans",
    "redistribute_flow",
    "apply_resection",
    "clip_domain",
    "removed_volume_fraction",
]

logger = logging.getLogger(__name__)

_TOL = 1e-12


@dataclass(frozen=True)
class CutSpec:
    """Removal region: points on the planes and outward normals.

    A location is removed when its signed distance to every plane is
    strictly negative, so a single plane removes a half-space and several
    planes carve out their intersection (e.g. a slab or a wedge).
    """

    points: np.ndarray
    normals: np.ndarray

    def __post_init__(self) -> None:
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        nrm = np.atleast_2d(np.asarray(self.normals, dtype=float))
        if pts.shape[1] == 2:  # planar cut given in the xy-plane
            pts = np.column_stack([pts, np.zeros(pts.shape[0])])
        if nrm.shape[1] == 2:
            nrm = np.column_stack([nrm, np.zeros(nrm.shape[0])])
        if pts.shape[0] == 0 or pts.shape != nrm.shape or pts.shape[1] != 3:
            raise ValueError("cut needs matching (k, 3) plane points and normals")
        mags = np.linalg.norm(nrm, axis=1)
        if np.any(mags < 1e-12):
            raise ValueError("cut plane normal has zero length")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "normals", nrm / mags[:, None])

    @property
    def n_planes(self) -> int:
        return self.points.shape[0]

    def signed_distances(self, points: np.ndarray) -> np.ndarray:
        """(n, k) signed distances; negative lies on the removed side."""
        p = np.atleast_2d(np.asarray(points, dtype=float))
        return np.einsum("nkd,kd->nk", p[:, None, :] - self.points[None], self.normals)

    def removed(self, points: np.ndarray) -> np.ndarray:
        """Boolean mask of points inside the removal region."""
        return np.all(self.signed_distances(points) < -_TOL, axis=1)

    def planes_array(self) -> np.ndarray:
        """(k, 6) rows [px, py, pz, nx, ny, nz] for domain bookkeeping."""
        return np.column_stack([self.points, self.normals])


def classify_cut(tree: VesselTree, cut: CutSpec) -> np.ndarray:
    """Segments removed by the cut (any part inside the removal region).

    The signed distance to each plane is affine along a straight segment,
    so each plane restricts the chord parameter to an interval; a segment
    is removed exactly when those intervals have a common point in [0, 1].
    """
    d_a = cut.signed_distances(tree.nodes[tree.seg_prox])  # (n, k)
    d_b = cut.signed_distances(tree.nodes[tree.seg_dist])
    n = tree.n_segments
    lo = np.zeros(n)
    hi = np.ones(n)
    for j in range(cut.n_planes):
        fa, fb = d_a[:, j], d_b[:, j]
        slope = fb - fa
        flat = np.abs(slope) < 1e-300
        with np.errstate(divide="ignore", invalid="ignore"):
            t_star = (-_TOL - fa) / slope
        up = ~flat & (slope > 0)  # distance grows: feasible below t*
        dn = ~flat & (slope < 0)  # distance falls: feasible above t*
        hi = np.where(up, np.minimum(hi, t_star), hi)
        lo = np.where(dn, np.maximum(lo, t_star), lo)
        hi = np.where(flat & (fa >= -_TOL), -np.inf, hi)
    return lo < hi


def find_orphans(tree: VesselTree, retained: np.ndarray) -> np.ndarray:
    """Retained segments no longer reachable from the root.

    Walks the retained graph from the root in proximal-to-distal
    direction; whatever retained segment the walk never enters has lost
    its supply path.
    """
    retained = np.asarray(retained, dtype=bool)
    children: list[list[int]] = [[] for _ in range(tree.n_nodes)]
    for s in np.flatnonzero(retained):
        children[int(tree.seg_prox[s])].append(int(s))
    reached = np.zeros(tree.n_segments, dtype=bool)
    stack = [int(tree.root)]
    while stack:
        u = stack.pop()
        for s in children[u]:
            if not reached[s]:
                reached[s] = True
                stack.append(int(tree.seg_dist[s]))
    return retained & ~reached


@dataclass(frozen=True)
class ResectionReport:
    """Partition of one tree's segments after a cut.

    Sealed = directly removed + orphaned; the three counts partition the
    segments that were active before the cut.
    """

    n_segments_before: int
    n_removed: int
    n_orphan: int
    n_active: int
    n_terminals_before: int
    n_terminals_active: int

    def __post_init__(self) -> None:
        if self.n_removed + self.n_orphan + self.n_active != self.n_segments_before:
            raise ValueError("resection counts do not partition the segment set")

    def as_dict(self) -> dict:
        return {
            "n_segments_before": self.n_segments_before,
            "n_removed": self.n_removed,
            "n_orphan": self.n_orphan,
            "n_active": self.n_active,
            "n_terminals_before": self.n_terminals_before,
            "n_terminals_active": self.n_terminals_active,
        }


def redistribute_flow(
    tree: VesselTree, params: HemodynamicParams, rescale: bool = True
) -> VesselTree:
    """Even flow redistribution over the active terminals of a sealed tree.

    Active terminals each receive q_perf / N_active; sealed segments carry
    zero flow and keep their radii, flow-carrying segments take fresh
    power-optimal radii (optionally rescaled so the flow-weighted mean
    root-to-terminal drop matches |delta_p| again), and active zero-flow
    stubs keep their pre-cut radii.  Pressures are rebuilt at the end.
    """
    act = tree.active
    parent = tree.parent_segment()
    term_active = tree.terminals[act[parent[tree.terminals]]]
    n_active = int(term_active.size)
    if n_active == 0:
        raise DevascularizationError(
            "no active terminals remain; the cut devascularizes the tree"
        )
    q_term = params.q_perf / n_active
    node_out = np.zeros(tree.n_nodes)
    node_out[term_active] = q_term
    flow = np.zeros(tree.n_segments)
    for s in tree.segments_by_depth(descending=True):
        if act[s]:
            flow[s] = node_out[tree.seg_dist[s]]
            node_out[tree.seg_prox[s]] += flow[s]
    radius = tree.radius.copy()
    carrying = act & (flow > 0.0)
    radius[carrying] = murray_radius(flow[carrying], params)
    out = replace(tree, flow=flow, radius=radius, pressure=None)
    if rescale:
        drops, flows = terminal_drops(out, params.viscosity)
        mean_drop = float(np.sum(drops * flows) / np.sum(flows))
        s = (mean_drop / abs(params.delta_p)) ** 0.25
        radius = out.radius.copy()
        radius[carrying] *= s
        out = replace(out, radius=radius, pressure=None)
    direction = 1 if params.delta_p > 0 else -1
    return node_pressures(out, params.p_root, params.viscosity, direction=direction)


def apply_resection(
    tree: VesselTree,
    cut: CutSpec,
    params: HemodynamicParams,
    rescale: bool = True,
) -> Tuple[VesselTree, ResectionReport]:
    """Seal cut and orphaned segments, then redistribute the inflow.

    Returns the updated tree (sealed segments inactive with zero flow and
    unchanged radii) and the partition report.
    """
    was_active = tree.active
    removed = classify_cut(tree, cut) & was_active
    retained = was_active & ~removed
    orphan = find_orphans(tree, retained)
    active = retained & ~orphan
    report_counts = dict(
        n_segments_before=int(was_active.sum()),
        n_removed=int(removed.sum()),
        n_orphan=int(orphan.sum()),
        n_active=int(active.sum()),
    )
    sealed_tree = replace(tree, active=active, pressure=None)
    parent = tree.parent_segment()
    report = ResectionReport(
        n_terminals_before=int(was_active[parent[tree.terminals]].sum()),
        n_terminals_active=int(active[parent[tree.terminals]].sum()),
        **report_counts,
    )
    out = redistribute_flow(sealed_tree, params, rescale=rescale)
    logger.info(
        "resection: %d removed, %d orphaned, %d active segments; "
        "%d of %d terminals survive",
        report.n_removed, report.n_orphan, report.n_active,
        report.n_terminals_active, report.n_terminals_before,
    )
    return out, report


def clip_domain(
    domain: PerfusionDomain, mesh: SimplicialMesh, cut: CutSpec
) -> Tuple[PerfusionDomain, SimplicialMesh]:
    """Remove the cut region from the mesh (by element centroid) and record
    it on the domain; exposed faces are tagged as cut boundary.  A cut that
    touches no element returns both inputs unchanged."""
    clipped = mesh.clip(cut.removed)
    if clipped is mesh:
        return domain, mesh
    return domain.with_removed_region(cut.planes_array()), clipped


def removed_volume_fraction(before: SimplicialMesh, after: SimplicialMesh) -> float:
    """Fraction of the meshed measure deleted by a clip."""
    v0 = float(np.abs(before.volumes()).sum())
    v1 = float(np.abs(after.volumes()).sum())
    return 1.0 - v1 / v0
