"""Upscaling discrete vessel trees into per-element continuum parameters.

The resolved trees are split at a radius threshold into an ``upper``
hierarchy (kept discrete) and a ``lower`` one (averaged away).  Moving-window
averages over spherical (3D) or circular (2D, unit thickness) volumes turn
the lower hierarchies into anisotropic permeability tensors and inter-
compartment perfusion coefficients, the flow entering the lower supply
hierarchy becomes a Gaussian source density, and the draining connection
back to the discrete tree becomes a pressure-coupled sink with its own
reference pressure field.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigError, DomainError, StructureError
from .geometry import clip_segment_sphere
from .mesh import SimplicialMesh
from .tree import HemodynamicParams, VesselTree

logger = logging.getLogger(__name__)

__all__ = [
    "HierarchySplit",
    "HomogenizationConfig",
    "InflowSource",
    "ElementParams",
    "split_hierarchy",
    "permeability_tensor",
    "homogenize_all",
]


@dataclass(frozen=True)
class HierarchySplit:
    """Partition of a tree's active segments at a radius threshold.

    upper/lower: (n_segments,) masks; inactive segments are in neither.
    v_conn:      node indices shared by the two sub-hierarchies (the root
                 alone when everything is lower).
    a_conn:      lower segments whose proximal node is a connecting node;
                 these carry the full exchanged flow.
    """

    upper: np.ndarray
    lower: np.ndarray
    v_conn: np.ndarray
    a_conn: np.ndarray


@dataclass(frozen=True)
class HomogenizationConfig:
    """Averaging controls (lengths in mm).

    r_thresh:  hierarchy split radius; segments with radius <= r_thresh
               are averaged away.
    av_radius: radius of the moving averaging volume.
    sigma:     inflow Gaussian width; defaults to av_radius / 5.
    k_micro:   isotropic capillary permeability, mm^3 s / kg.
    k_floor:   small isotropic addition keeping tensors invertible in
               vessel-free elements.
    scale_separation_factor: warn when av_radius < factor * r_thresh.
    """

    r_thresh: float = 0.1
    av_radius: float = 1.0
    sigma: Optional[float] = None
    k_micro: float = 1.0 / 180.0
    k_floor: float = 1e-8
    scale_separation_factor: float = 10.0


@dataclass(frozen=True)
class InflowSource:
    """Sum of normalized Gaussians carrying the flow entering the bed.

    Evaluates a d-dimensional density (mm^3/s per mm^d); each connecting
    node u contributes flow_u * (2 pi sigma^2)^(-d/2) exp(-|x-x_u|^2 /
    (2 sigma^2)).  Nearly all of each Gaussian's mass lies inside the
    tissue when sigma is small against the domain.
    """

    nodes: np.ndarray
    flows: np.ndarray
    sigma: float
    dim: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "nodes", np.atleast_2d(np.asarray(self.nodes, dtype=float)))
        object.__setattr__(self, "flows", np.asarray(self.flows, dtype=float).ravel())
        if self.sigma <= 0.0:
            raise DomainError("source width sigma must be positive")
        if self.nodes.shape[0] != self.flows.shape[0]:
            raise StructureError("one flow per source node required")
        if self.dim not in (2, 3):
            raise DomainError("source dimension must be 2 or 3")

    def __call__(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))[:, : self.dim]
        if self.nodes.shape[0] == 0:
            return np.zeros(pts.shape[0])
        src = self.nodes[:, : self.dim]
        d2 = ((pts[:, None, :] - src[None, :, :]) ** 2).sum(axis=2)
        norm = (2.0 * np.pi * self.sigma**2) ** (self.dim / 2.0)
        return (self.flows[None, :] * np.exp(-d2 / (2.0 * self.sigma**2))).sum(axis=1) / norm

    def total(self) -> float:
        return float(self.flows.sum())


@dataclass
class ElementParams:
    """Per-element continuum parameters (struct of arrays, m elements).

    Permeability tensors are stored as full (m, 3, 3) symmetric arrays;
    planar models use the upper-left 2x2 block.  ``outflow`` flags the
    elements whose averaging volume sees a draining connecting node.
    """

    k_supply: np.ndarray
    k_drain: np.ndarray
    k_micro: np.ndarray
    beta_supply: np.ndarray
    beta_drain: np.ndarray
    beta_out: np.ndarray
    theta_in: np.ndarray
    p_out: np.ndarray
    outflow: np.ndarray
    source: InflowSource
    p_ref_supply: float = 0.0
    p_ref_drain: float = 0.0
    av_volume: float = 0.0

    @property
    def n_elements(self) -> int:
        return self.beta_supply.shape[0]


# ----------------------------------------------------------------------
# hierarchy split


def split_hierarchy(tree: VesselTree, r_thresh: float) -> HierarchySplit:
    """Split active segments into resolved (upper) and averaged (lower).

    Radii strictly above the threshold stay resolved.  When nothing
    exceeds the threshold the root node is the single connector feeding
    the averaged bed.
    """
    if r_thresh <= 0.0:
        raise DomainError("hierarchy split radius must be positive")
    act = tree.active
    upper = act & (tree.radius > r_thresh)
    lower = act & ~upper
    if not lower.any():
        empty = np.empty(0, dtype=np.int64)
        return HierarchySplit(upper=upper, lower=lower, v_conn=empty, a_conn=empty)
    if not upper.any():
        v_conn = np.array([tree.root], dtype=np.int64)
    else:
        up_nodes = np.union1d(tree.seg_prox[upper], tree.seg_dist[upper])
        lo_nodes = np.union1d(tree.seg_prox[lower], tree.seg_dist[lower])
        v_conn = np.intersect1d(up_nodes, lo_nodes)
    a_conn = np.flatnonzero(lower & np.isin(tree.seg_prox, v_conn))
    return HierarchySplit(upper=upper, lower=lower, v_conn=v_conn, a_conn=a_conn)


# ----------------------------------------------------------------------
# permeability


def _av_volume(radius: float, dim: int) -> float:
    if dim == 2:
        return float(np.pi * radius**2)
    return float(4.0 / 3.0 * np.pi * radius**3)


def permeability_tensor(
    center: np.ndarray,
    radius: float,
    a: np.ndarray,
    b: np.ndarray,
    radii: np.ndarray,
    viscosity: float,
    dim: int,
    v_av: Optional[float] = None,
) -> np.ndarray:
    """Directional average of Poiseuille conductances inside one volume.

    Segments are clipped to the averaging volume; each retained part of
    length ell contributes r^4 * ell * (e x e) with e the full-segment
    unit direction, scaled by pi / (8 eta V_av).  In 2D the volume is a
    circle extruded through the plane (unit thickness).
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    radii = np.asarray(radii, dtype=float).ravel()
    if v_av is None:
        v_av = _av_volume(radius, dim)
    axes = (0, 1) if dim == 2 else None
    t0, t1 = clip_segment_sphere(a, b, center, radius, axes=axes)
    dt = t1 - t0
    sel = dt > 0.0
    K = np.zeros((3, 3))
    if not sel.any():
        return K
    dx = (b - a)[sel]
    length = np.linalg.norm(dx, axis=1)
    ok = length > 0.0
    dx, length = dx[ok], length[ok]
    w = radii[sel][ok] ** 4 * dt[sel][ok] / length
    K[:, :] = np.einsum("k,ki,kj->ij", w, dx, dx)
    return K * (np.pi / (8.0 * viscosity * v_av))


# ----------------------------------------------------------------------
# full element sweep


def _segment_midpoint_tree(tree: VesselTree, seg_ids: np.ndarray, dim: int):
    a = tree.nodes[tree.seg_prox[seg_ids]]
    b = tree.nodes[tree.seg_dist[seg_ids]]
    mids = 0.5 * (a + b)
    half = 0.5 * np.linalg.norm((b - a)[:, :dim] if dim == 2 else b - a, axis=1)
    coords = mids[:, :dim]
    return cKDTree(coords), float(half.max()) if half.size else 0.0


def _idw(values: np.ndarray, dists: np.ndarray) -> float:
    """Inverse-distance interpolation; exact hit wins."""
    if dists.min() < 1e-12:
        return float(values[dists.argmin()])
    w = 1.0 / dists
    return float((values * w).sum() / w.sum())


def homogenize_all(
    mesh: SimplicialMesh,
    supply: VesselTree,
    drain: VesselTree,
    params_supply: HemodynamicParams,
    params_drain: HemodynamicParams,
    cfg: HomogenizationConfig,
) -> ElementParams:
    """Per-element parameters from the two trees on one mesh.

    Permeability averages clip every active lower segment to the element's
    averaging volume.  Perfusion coefficients follow the end-node
    convention: segments count in their entire length whenever their
    distal node lies inside the volume.  The inflow source carries the
    connecting-node flows of the supplying tree; the outflow sink couples
    elements near draining connecting nodes to the interpolated discrete
    pressure there.
    """
    for name, t in (("supplying", supply), ("draining", drain)):
        if t.pressure is None:
            raise StructureError(f"{name} tree needs nodal pressures before averaging")
    if cfg.av_radius <= 0.0:
        raise DomainError("averaging radius must be positive")
    if cfg.av_radius < cfg.scale_separation_factor * cfg.r_thresh:
        warnings.warn(
            "averaging radius is below %.0fx the hierarchy split radius; "
            "scale separation is weak" % cfg.scale_separation_factor,
            UserWarning,
            stacklevel=2,
        )

    dim = mesh.dim
    R = float(cfg.av_radius)
    v_av = _av_volume(R, dim)
    sigma = cfg.sigma if cfg.sigma is not None else R / 5.0
    m = mesh.n_elements
    cents = mesh.centroids()

    split_s = split_hierarchy(supply, cfg.r_thresh)
    split_d = split_hierarchy(drain, cfg.r_thresh)
    if split_s.a_conn.size == 0:
        raise ConfigError("supplying tree never crosses the split radius; "
                          "no flow reaches the averaged bed")
    if split_d.a_conn.size == 0:
        raise ConfigError("draining tree never crosses the split radius; "
                          "no outflow region exists")

    p_ref_s = params_supply.p_root - params_supply.delta_p
    p_ref_d = params_drain.p_root - params_drain.delta_p

    k_supply = np.zeros((m, 3, 3))
    k_drain = np.zeros((m, 3, 3))
    beta_supply = np.zeros(m)
    beta_drain = np.zeros(m)
    beta_out = np.zeros(m)
    p_out = np.zeros(m)
    outflow = np.zeros(m, dtype=bool)
    p_bar_drain = np.full(m, np.nan)

    for tree, split, params, K_out, beta, which in (
        (supply, split_s, params_supply, k_supply, beta_supply, "supply"),
        (drain, split_d, params_drain, k_drain, beta_drain, "drain"),
    ):
        lower_ids = np.flatnonzero(split.lower)
        a = tree.nodes[tree.seg_prox[lower_ids]]
        b = tree.nodes[tree.seg_dist[lower_ids]]
        rad = tree.radius[lower_ids]
        kd_mid, max_half = _segment_midpoint_tree(tree, lower_ids, dim)
        cand_lists = kd_mid.query_ball_point(cents, R + max_half)

        # end-node membership for the averages
        dist_xy = tree.nodes[tree.seg_dist[lower_ids]][:, :dim]
        kd_end = cKDTree(dist_xy)
        member_lists = kd_end.query_ball_point(cents, R)

        p_node = tree.pressure
        p_a = 0.5 * (p_node[tree.seg_prox[lower_ids]] + p_node[tree.seg_dist[lower_ids]])
        v_a = np.pi * rad**2 * np.linalg.norm(b - a, axis=1)
        term_parent = tree.parent_segment()[tree.terminals]
        is_term = np.isin(lower_ids, term_parent[tree.active[term_parent]])
        flow = tree.flow[lower_ids]
        p_ref = params.p_root - params.delta_p

        for e in range(m):
            cand = cand_lists[e]
            if cand:
                idx = np.asarray(cand, dtype=np.int64)
                K_out[e] = permeability_tensor(
                    cents[e] if dim == 3 else np.append(cents[e], 0.0),
                    R, a[idx], b[idx], rad[idx], params.viscosity, dim, v_av,
                )
            mem = member_lists[e]
            if not mem:
                continue
            midx = np.asarray(mem, dtype=np.int64)
            vol = v_a[midx]
            if vol.sum() <= 0.0:
                continue
            p_bar = float((p_a[midx] * vol).sum() / vol.sum())
            if which == "drain":
                p_bar_drain[e] = p_bar
            q_bar = float(flow[midx][is_term[midx]].sum()) / v_av
            gap = abs(p_bar - p_ref)
            if q_bar > 0.0 and gap > 0.0:
                beta[e] = q_bar / gap

    # inflow source at the supplying connecting nodes
    conn_s = split_s.v_conn
    q_in = np.zeros(conn_s.size)
    prox_map = {int(n): i for i, n in enumerate(conn_s)}
    for s in split_s.a_conn:
        q_in[prox_map[int(supply.seg_prox[s])]] += supply.flow[s]
    source = InflowSource(nodes=supply.nodes[conn_s], flows=q_in, sigma=sigma, dim=dim)
    cents3 = cents if dim == 3 else np.column_stack([cents, np.zeros(m)])
    theta_in = source(cents3)

    # outflow sink around the draining connecting nodes
    conn_d = split_d.v_conn
    q_out_node = np.zeros(conn_d.size)
    pmap = {int(n): i for i, n in enumerate(conn_d)}
    for s in split_d.a_conn:
        q_out_node[pmap[int(drain.seg_prox[s])]] += drain.flow[s]
    p_conn = drain.pressure[conn_d]
    kd_conn = cKDTree(drain.nodes[conn_d][:, :dim])
    near_lists = kd_conn.query_ball_point(cents, R)
    for e in range(m):
        near = near_lists[e]
        if near:
            nidx = np.asarray(near, dtype=np.int64)
            d = np.linalg.norm(drain.nodes[conn_d[nidx]][:, :dim] - cents[e], axis=1)
            p_out[e] = _idw(p_conn[nidx], d)
            q_bar = float(q_out_node[nidx].sum()) / v_av
            p_bar = p_bar_drain[e] if np.isfinite(p_bar_drain[e]) else p_ref_d
            gap = abs(p_bar - p_out[e])
            if q_bar > 0.0 and gap > 0.0:
                beta_out[e] = q_bar / gap
                outflow[e] = True
        else:
            d, j = kd_conn.query(cents[e])
            p_out[e] = float(p_conn[j])
    if not outflow.any():
        raise ConfigError("no element couples to the draining tree; "
                          "enlarge the averaging radius")

    eye = np.eye(3)[None, :, :]
    k_supply += cfg.k_floor * eye
    k_drain += cfg.k_floor * eye
    k_micro = np.broadcast_to(cfg.k_micro * np.eye(3), (m, 3, 3)).copy()

    logger.info(
        "homogenized %d elements: %d outflow, source %.4g mm^3/s, "
        "max beta_s %.3g, max beta_d %.3g",
        m, int(outflow.sum()), source.total(),
        beta_supply.max(), beta_drain.max(),
    )
    return ElementParams(
        k_supply=k_supply, k_drain=k_drain, k_micro=k_micro,
        beta_supply=beta_supply, beta_drain=beta_drain, beta_out=beta_out,
        theta_in=theta_in, p_out=p_out, outflow=outflow, source=source,
        p_ref_supply=p_ref_s, p_ref_drain=p_ref_d, av_volume=v_av,
    )
