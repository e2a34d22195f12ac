"""Vessel tree data model and Poiseuille hemodynamics.

A tree is a rooted, directed graph of straight cylindrical segments.  Node
positions are always stored as 3-vectors; planar problems simply keep z = 0
(intersection-resolution may push interior nodes out of plane).  Segment flow
follows Kirchhoff's law with equal terminal outflows, radii follow a
power-minimizing cube-root law, and the absolute radii are fixed afterwards by
prescribing the flow-weighted mean root-to-terminal pressure drop.

All operations are pure: they return new :class:`VesselTree` instances and
never mutate their arguments.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import StructureError

logger = logging.getLogger(__name__)

__all__ = [
    "HemodynamicParams",
    "VesselTree",
    "TreeCost",
    "segment_resistance",
    "murray_radius",
    "mean_velocity",
    "propagate_flows",
    "node_pressures",
    "terminal_drops",
    "rescale_radii_to_drop",
    "tree_cost",
    "segment_weights",
    "assign_hemodynamics",
    "write_tree_csv",
    "read_tree_csv",
]


@dataclass(frozen=True)
class HemodynamicParams:
    """Blood and tissue constants for one tree (kg-mm-s units).

    viscosity:        dynamic viscosity, kg mm^-1 s^-1 (3.6 cP -> 3.6e-6)
    metabolic_demand: volumetric maintenance power density m_b, kg mm^-1 s^-3
    q_perf:           total perfusion flow through the root, mm^3/s
    p_root:           prescribed root pressure, kg mm^-1 s^-2
    delta_p:          prescribed mean root-to-terminal pressure drop; a
                      negative value marks a draining tree (pressure rises
                      from the root towards the terminals against the
                      segment orientation).
    """

    viscosity: float = 3.6e-6
    metabolic_demand: float = 0.6
    q_perf: float = 80.0
    p_root: float = 0.4
    delta_p: float = 0.2


@dataclass
class VesselTree:
    """Array-backed rooted vessel tree.

    nodes:     (n_nodes, 3) positions in mm
    seg_prox:  (n_segs,) proximal node index per segment
    seg_dist:  (n_segs,) distal node index per segment
    radius:    (n_segs,) segment radii in mm (0 until assigned)
    flow:      (n_segs,) segment flows in mm^3/s (0 until propagated)
    root:      index of the root node
    terminals: (n_term,) node indices of the terminal leaves
    active:    (n_segs,) bool; sealed segments (resection) are inactive
    pressure:  (n_nodes,) nodal pressures or None before assignment

    Treat instances as immutable; operations return modified copies.
    """

    nodes: np.ndarray
    seg_prox: np.ndarray
    seg_dist: np.ndarray
    root: int
    terminals: np.ndarray
    radius: np.ndarray = None  # type: ignore[assignment]
    flow: np.ndarray = None  # type: ignore[assignment]
    active: np.ndarray = None  # type: ignore[assignment]
    pressure: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        self.nodes = np.asarray(self.nodes, dtype=float).reshape(-1, 3)
        self.seg_prox = np.asarray(self.seg_prox, dtype=np.int64).ravel()
        self.seg_dist = np.asarray(self.seg_dist, dtype=np.int64).ravel()
        self.terminals = np.asarray(self.terminals, dtype=np.int64).ravel()
        n = self.n_segments
        if self.radius is None:
            self.radius = np.zeros(n)
        else:
            self.radius = np.asarray(self.radius, dtype=float).ravel()
        if self.flow is None:
            self.flow = np.zeros(n)
        else:
            self.flow = np.asarray(self.flow, dtype=float).ravel()
        if self.active is None:
            self.active = np.ones(n, dtype=bool)
        else:
            self.active = np.asarray(self.active, dtype=bool).ravel()

    # ------------------------------------------------------------------
    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_segments(self) -> int:
        return self.seg_prox.shape[0]

    def lengths(self) -> np.ndarray:
        d = self.nodes[self.seg_dist] - self.nodes[self.seg_prox]
        return np.linalg.norm(d, axis=1)

    def parent_segment(self) -> np.ndarray:
        """Index of the segment ending at each node, -1 for the root."""
        parent = np.full(self.n_nodes, -1, dtype=np.int64)
        parent[self.seg_dist] = np.arange(self.n_segments)
        return parent

    def copy(self) -> "VesselTree":
        return VesselTree(
            nodes=self.nodes.copy(),
            seg_prox=self.seg_prox.copy(),
            seg_dist=self.seg_dist.copy(),
            root=self.root,
            terminals=self.terminals.copy(),
            radius=self.radius.copy(),
            flow=self.flow.copy(),
            active=self.active.copy(),
            pressure=None if self.pressure is None else self.pressure.copy(),
        )

    # ------------------------------------------------------------------
    def node_depths(self) -> np.ndarray:
        """Hop distance from the root; -1 for nodes untouched by any segment."""
        depth = np.full(self.n_nodes, -1, dtype=np.int64)
        depth[self.root] = 0
        children: list[list[int]] = [[] for _ in range(self.n_nodes)]
        for s in range(self.n_segments):
            children[self.seg_prox[s]].append(self.seg_dist[s])
        stack = [self.root]
        while stack:
            u = stack.pop()
            for v in children[u]:
                if depth[v] >= 0:
                    raise StructureError("vessel graph contains a cycle or a node with two parents")
                depth[v] = depth[u] + 1
                stack.append(v)
        return depth

    def segments_by_depth(self, descending: bool = True) -> np.ndarray:
        """Segment indices ordered by the depth of their distal node."""
        depth = self.node_depths()
        order = np.argsort(depth[self.seg_dist], kind="stable")
        return order[::-1] if descending else order

    def validate(self) -> None:
        """Check the structural invariants of a rooted tree.

        Exactly one root, every non-root node has exactly one parent segment,
        the active graph is acyclic and connected, and terminals are leaves.
        """
        if self.n_segments == 0:
            raise StructureError("tree has no segments")
        counts = np.bincount(self.seg_dist, minlength=self.n_nodes)
        if counts[self.root] != 0:
            raise StructureError("root node has a parent segment")
        bad = np.nonzero(counts > 1)[0]
        if bad.size:
            raise StructureError(f"nodes with more than one parent segment: {bad[:5].tolist()}")
        used = np.zeros(self.n_nodes, dtype=bool)
        used[self.seg_prox] = True
        used[self.seg_dist] = True
        orphan = used & (counts == 0)
        orphan[self.root] = False
        if orphan.any():
            raise StructureError(
                f"nodes without a path from the root: {np.nonzero(orphan)[0][:5].tolist()}"
            )
        depth = self.node_depths()  # raises on cycles
        if np.any(depth[self.seg_dist] < 0):
            raise StructureError("segment unreachable from the root")
        has_child = np.zeros(self.n_nodes, dtype=bool)
        has_child[self.seg_prox] = True
        if has_child[self.terminals].any():
            raise StructureError("terminal node has children; terminals must stay leaves")
        if counts[self.terminals].min(initial=1) == 0:
            raise StructureError("terminal node is not connected to the tree")


@dataclass(frozen=True)
class TreeCost:
    """Total tree power and its maintenance/viscous split (kg mm^2 s^-3)."""

    total: float
    p_vol: float
    p_vis: float


# ----------------------------------------------------------------------
# local segment laws


def segment_resistance(length, radius, viscosity) -> np.ndarray:
    """Poiseuille resistance 8 eta l / (pi r^4)."""
    length = np.asarray(length, dtype=float)
    radius = np.asarray(radius, dtype=float)
    return 8.0 * viscosity * length / (np.pi * radius**4)


def murray_radius(flow, params: HemodynamicParams) -> np.ndarray:
    """Power-optimal radius (16 eta / (m_b pi^2))^(1/6) * Q^(1/3)."""
    flow = np.asarray(flow, dtype=float)
    c = (16.0 * params.viscosity / (params.metabolic_demand * np.pi**2)) ** (1.0 / 6.0)
    return c * np.cbrt(flow)


def mean_velocity(flow, radius) -> np.ndarray:
    """Cross-section averaged axial velocity Q / (pi r^2) in mm/s."""
    flow = np.asarray(flow, dtype=float)
    radius = np.asarray(radius, dtype=float)
    return flow / (np.pi * radius**2)


# ----------------------------------------------------------------------
# whole-tree operations


def propagate_flows(tree: VesselTree, params: HemodynamicParams) -> VesselTree:
    """Assign segment flows by Kirchhoff summation from the leaves to the root.

    Every terminal receives q_perf / n_terminals; interior segments carry the
    sum of their descendant terminal outflows.  Summation runs in a fixed
    leaf-to-root topological order, so results are bitwise reproducible.
    """
    tree.validate()
    n_term = tree.terminals.size
    if n_term == 0:
        raise StructureError("cannot propagate flow in a tree without terminals")
    q_term = params.q_perf / n_term
    node_out = np.zeros(tree.n_nodes)
    node_out[tree.terminals] = q_term
    flow = np.zeros(tree.n_segments)
    for s in tree.segments_by_depth(descending=True):
        flow[s] = node_out[tree.seg_dist[s]]
        node_out[tree.seg_prox[s]] += flow[s]
    if not np.isclose(node_out[tree.root], params.q_perf, rtol=1e-12):
        raise StructureError("flow summation did not conserve the perfusion flow")
    return replace(tree, flow=flow, pressure=None)


def node_pressures(
    tree: VesselTree, p_root: float, viscosity: float, direction: int = 1
) -> VesselTree:
    """Accumulate nodal pressures away from the root.

    ``direction=+1`` drops pressure along each segment by R*Q (supplying
    tree); ``direction=-1`` raises it (draining tree, where physical flow
    runs against the segment orientation).
    """
    if np.any(tree.radius[tree.active] <= 0.0):
        raise StructureError("node_pressures requires positive radii on active segments")
    res = np.zeros(tree.n_segments)
    act = tree.active
    res[act] = segment_resistance(tree.lengths()[act], tree.radius[act], viscosity)
    p = np.full(tree.n_nodes, np.nan)
    p[tree.root] = p_root
    for s in tree.segments_by_depth(descending=False):
        p[tree.seg_dist[s]] = p[tree.seg_prox[s]] - direction * res[s] * tree.flow[s]
    return replace(tree, pressure=p)


def terminal_drops(tree: VesselTree, viscosity: float) -> Tuple[np.ndarray, np.ndarray]:
    """Per-terminal root-to-terminal pressure drop and terminal flow.

    Returned as (drops, flows) aligned with ``tree.terminals``; used for the
    radius rescale and reported as a spread diagnostic.
    """
    probe = node_pressures(tree, 0.0, viscosity, direction=1)
    drops = -probe.pressure[tree.terminals]
    parent = tree.parent_segment()
    flows = tree.flow[parent[tree.terminals]]
    return drops, flows


def rescale_radii_to_drop(tree: VesselTree, delta_p: float, viscosity: float) -> VesselTree:
    """Scale all radii by one global factor so the flow-weighted mean
    root-to-terminal pressure drop equals ``|delta_p|``.

    Resistances scale with r^-4, so the factor (mean_drop / |delta_p|)^(1/4)
    realizes the prescribed drop exactly for any fixed geometry and flows.
    """
    if delta_p == 0.0:
        raise ValueError("delta_p must be nonzero to prescribe a pressure drop")
    drops, flows = terminal_drops(tree, viscosity)
    wsum = float(np.sum(flows))
    if wsum <= 0.0:
        raise StructureError("rescale requires positive terminal flows")
    mean_drop = float(np.sum(drops * flows) / wsum)
    if mean_drop <= 0.0:
        raise StructureError("mean pressure drop is not positive; assign flows and radii first")
    s = (mean_drop / abs(delta_p)) ** 0.25
    if abs(np.log(s)) > np.log(10.0):
        logger.warning("radius rescale factor %.3g is far from unity", s)
    return replace(tree, radius=tree.radius * s, pressure=None)


def segment_weights(tree: VesselTree, params: HemodynamicParams) -> np.ndarray:
    """Per-length power cost w_a = m_b pi r^2 + 8 eta Q^2 / (pi r^4)."""
    r = tree.radius
    q = tree.flow
    w = np.zeros(tree.n_segments)
    act = tree.active & (r > 0)
    w[act] = params.metabolic_demand * np.pi * r[act] ** 2 + (
        8.0 * params.viscosity / np.pi
    ) * q[act] ** 2 / r[act] ** 4
    return w


def tree_cost(tree: VesselTree, params: HemodynamicParams) -> TreeCost:
    """Total power cost sum_a (m_b pi l r^2 + 8 eta l Q^2 / (pi r^4))."""
    lengths = tree.lengths()
    act = tree.active & (tree.radius > 0)
    r = tree.radius[act]
    q = tree.flow[act]
    l = lengths[act]
    p_vol = float(np.sum(params.metabolic_demand * np.pi * l * r**2))
    p_vis = float(np.sum(8.0 * params.viscosity * l * q**2 / (np.pi * r**4)))
    return TreeCost(total=p_vol + p_vis, p_vol=p_vol, p_vis=p_vis)


def assign_hemodynamics(tree: VesselTree, params: HemodynamicParams) -> VesselTree:
    """Flows, power-optimal radii, drop-rescaled radii and nodal pressures.

    The sign of ``params.delta_p`` selects the pressure accumulation
    direction: positive drops towards the terminals (supplying tree),
    negative rises (draining tree).
    """
    out = propagate_flows(tree, params)
    out = replace(out, radius=murray_radius(out.flow, params))
    out = rescale_radii_to_drop(out, params.delta_p, params.viscosity)
    direction = 1 if params.delta_p > 0 else -1
    return node_pressures(out, params.p_root, params.viscosity, direction=direction)


# ----------------------------------------------------------------------
# delimited-text persistence

_CSV_HEADER = "seg_id,prox_id,dist_id,xu,yu,zu,xv,yv,zv,radius_mm,flow_mm3_s"


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_tree_csv(tree: VesselTree, path) -> None:
    """Write one row per segment; floats carry full precision (17 digits)."""
    xu = tree.nodes[tree.seg_prox]
    xv = tree.nodes[tree.seg_dist]
    lines = [_CSV_HEADER]
    for s in range(tree.n_segments):
        cells = [str(s), str(int(tree.seg_prox[s])), str(int(tree.seg_dist[s]))]
        cells += [_fmt(v) for v in xu[s]]
        cells += [_fmt(v) for v in xv[s]]
        cells += [_fmt(tree.radius[s]), _fmt(tree.flow[s])]
        lines.append(",".join(cells))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_tree_csv(path) -> VesselTree:
    """Inverse of :func:`write_tree_csv` (exact up to float round-trip)."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != _CSV_HEADER:
            raise StructureError(f"unexpected tree CSV header: {header!r}")
        rows = [line.strip().split(",") for line in fh if line.strip()]
    if not rows:
        raise StructureError("tree CSV contains no segments")
    seg_prox = np.array([int(r[1]) for r in rows], dtype=np.int64)
    seg_dist = np.array([int(r[2]) for r in rows], dtype=np.int64)
    n_nodes = int(max(seg_prox.max(), seg_dist.max())) + 1
    nodes = np.zeros((n_nodes, 3))
    for r in rows:
        u, v = int(r[1]), int(r[2])
        nodes[u] = [float(r[3]), float(r[4]), float(r[5])]
        nodes[v] = [float(r[6]), float(r[7]), float(r[8])]
    radius = np.array([float(r[9]) for r in rows])
    flow = np.array([float(r[10]) for r in rows])
    is_dist = np.zeros(n_nodes, dtype=bool)
    is_dist[seg_dist] = True
    is_prox = np.zeros(n_nodes, dtype=bool)
    is_prox[seg_prox] = True
    roots = np.nonzero(is_prox & ~is_dist)[0]
    if roots.size != 1:
        raise StructureError(f"tree CSV does not define exactly one root (found {roots.size})")
    terminals = np.nonzero(is_dist & ~is_prox)[0]
    tree = VesselTree(
        nodes=nodes,
        seg_prox=seg_prox,
        seg_dist=seg_dist,
        root=int(roots[0]),
        terminals=terminals,
        radius=radius,
        flow=flow,
    )
    tree.validate()
    return tree
