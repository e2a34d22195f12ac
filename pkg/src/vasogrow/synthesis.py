"""Synthesis of coupled, non-intersecting vascular trees.

Pipeline per organ: sample terminal sites, connect each tree as a fan from
its root, improve the topology by simulated annealing over subtree-regraft
moves with local geometric relaxation, then optimize all free node positions
globally.  The two trees are kept apart by clearance constraints between
nearby node pairs; where segment axes still pass too close, degree-two
"excursion" nodes are inserted at the closest-approach points and pushed
sideways, and the geometry problem is re-solved until no vessel pair
violates its clearance.

Segment weights scale as flow^(2/3) at optimal radii, so topology and
geometry can be optimized without tracking radii; the global radius scale is
re-fit to the prescribed root-to-terminal pressure drop afterwards.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import minimize
from scipy.spatial import cKDTree

from .domain import PerfusionDomain
from .errors import ConvergenceError, SamplingError, StructureError
from .geometry import segment_pair_distance
from .tree import (
    HemodynamicParams,
    VesselTree,
    murray_radius,
    node_pressures,
    propagate_flows,
    rescale_radii_to_drop,
)

logger = logging.getLogger(__name__)

__all__ = [
    "SynthesisConfig",
    "CoupledTrees",
    "fan_tree",
    "weighted_length_cost",
    "sa_optimize_topology",
    "optimize_geometry",
    "detect_intersections",
    "virtual_connections",
    "split_segment",
    "sample_coupled_terminals",
    "generate_coupled_trees",
]


@dataclass
class SynthesisConfig:
    """Knobs for topology search and constrained geometry optimization."""

    n_terminals: int = 250
    seed: int = 0
    # simulated annealing over regraft moves
    t0_factor: float = 0.1
    cooling: float = 0.95
    min_temp_factor: float = 6e-3
    swaps_per_temp: Optional[int] = None  # default: one per terminal
    relax_sweeps: int = 2
    full_relax_below: int = 12
    neighbor_k: int = 12
    kd_rebuild_every: int = 256
    # clearance / geometry
    clearance_eps: float = 0.01
    clearance_margin: float = 0.5  # extra eps fraction enforced at nodes
    al_iterations: int = 12
    al_rho0: float = 10.0
    lbfgs_maxiter: int = 500
    resolve_rounds: int = 12
    rescale_rounds: int = 6
    max_excursions_per_segment: int = 6
    terminal_separation_factor: float = 2.0


@dataclass
class CoupledTrees:
    """A supplying and a draining tree sharing one perfusion domain."""

    supply: VesselTree
    drain: VesselTree
    params_supply: HemodynamicParams
    params_drain: HemodynamicParams
    # node-pair length floors keeping excursion nodes off their chord
    floors_supply: List[Tuple[int, int, float]] = field(default_factory=list)
    floors_drain: List[Tuple[int, int, float]] = field(default_factory=list)


def cost_coefficient(params: HemodynamicParams) -> float:
    """Segment cost per unit length divided by flow^(2/3) at optimal radii."""
    m_b, eta = params.metabolic_demand, params.viscosity
    return 1.5 * m_b * np.pi * (16.0 * eta / (m_b * np.pi**2)) ** (1.0 / 3.0)


def weighted_length_cost(tree: VesselTree, params: HemodynamicParams) -> float:
    """Total weighted length with weights at radius-optimal scaling."""
    kw = cost_coefficient(params)
    return float(np.sum(kw * tree.flow ** (2.0 / 3.0) * tree.lengths()))


def fan_tree(root_xyz: np.ndarray, terminals: np.ndarray,
             params: HemodynamicParams) -> VesselTree:
    """Star topology: one segment from the root to every terminal."""
    terminals = np.atleast_2d(np.asarray(terminals, dtype=float))
    n = terminals.shape[0]
    nodes = np.vstack([np.asarray(root_xyz, dtype=float).reshape(1, -1), terminals])
    tree = VesselTree(
        nodes=nodes,
        seg_prox=np.zeros(n, dtype=np.int64),
        seg_dist=np.arange(1, n + 1, dtype=np.int64),
        root=0,
        terminals=np.arange(1, n + 1, dtype=np.int64),
        radius=np.ones(n),
        flow=np.ones(n),
    )
    tree = propagate_flows(tree, params)
    tree.radius = murray_radius(tree.flow, params)
    return tree


# ======================================================================
# simulated annealing over regraft moves
# ======================================================================


class _SaState:
    """Mutable rooted tree with incremental cost and per-move undo.

    Node slots: 0 root, 1..n_term terminals, rest branch nodes.  Every
    mutation snapshots the touched node once per move, so a rejected move
    restores exactly.
    """

    def __init__(self, root_xyz, terminals, q_term: float, kw: float):
        n_term = terminals.shape[0]
        cap = 2 * n_term + 4
        self.n_term = n_term
        self.kw = kw
        self.pos = np.zeros((cap, 3))
        self.pos[0] = root_xyz
        self.pos[1 : n_term + 1] = terminals
        self.parent = -np.ones(cap, dtype=np.int64)
        self.flow = np.zeros(cap)
        self.ecost = np.zeros(cap)
        self.children: List[List[int]] = [[] for _ in range(cap)]
        self.alive = np.zeros(cap, dtype=bool)
        self.alive[: n_term + 1] = True
        self.n_used = n_term + 1
        self.free: List[int] = []
        # fan init
        self.children[0] = list(range(1, n_term + 1))
        self.parent[1 : n_term + 1] = 0
        self.flow[1 : n_term + 1] = q_term
        self.flow[0] = q_term * n_term
        for u in range(1, n_term + 1):
            self.ecost[u] = self._edge_cost(u)
        self.total = float(self.ecost[1 : n_term + 1].sum())
        # per-move transaction state
        self._saved: Dict[int, tuple] = {}
        self._ops: List[tuple] = []
        self._saved_total = self.total
        self._dirty: set = set()

    # -- transactional helpers -----------------------------------------
    def _edge_cost(self, u: int) -> float:
        p = self.parent[u]
        d = float(np.linalg.norm(self.pos[p] - self.pos[u]))
        return d * self.kw * self.flow[u] ** (2.0 / 3.0)

    def _touch(self, u: int) -> None:
        if u not in self._saved:
            self._saved[u] = (
                self.pos[u].copy(),
                int(self.parent[u]),
                float(self.flow[u]),
                float(self.ecost[u]),
                list(self.children[u]),
                bool(self.alive[u]),
            )

    def begin(self) -> None:
        self._saved = {}
        self._ops = []
        self._saved_total = self.total
        self._dirty = set()

    def rollback(self) -> None:
        for u, (pos, par, flw, ec, ch, al) in self._saved.items():
            self.pos[u] = pos
            self.parent[u] = par
            self.flow[u] = flw
            self.ecost[u] = ec
            self.children[u] = ch
            self.alive[u] = al
        for op in reversed(self._ops):
            if op[0] == "alloc_free":
                self.free.append(op[1])
            elif op[0] == "alloc_new":
                self.n_used -= 1
            elif op[0] == "freed":
                self.free.pop()
        self.total = self._saved_total

    def _alloc(self) -> int:
        if self.free:
            idx = self.free.pop()
            self._ops.append(("alloc_free", idx))
        else:
            idx = self.n_used
            self.n_used += 1
            self._ops.append(("alloc_new", idx))
        self._touch(idx)
        return idx

    def _release(self, idx: int) -> None:
        self.free.append(idx)
        self._ops.append(("freed", idx))

    # -- structural move ------------------------------------------------
    def _ancestors(self, u: int):
        while u != -1:
            yield u
            u = int(self.parent[u])

    def _in_detached_subtree(self, z: int, v: int) -> bool:
        for a in self._ancestors(z):
            if a == v:
                return True
        return False

    def regraft(self, v: int, z: int) -> bool:
        """Detach subtree at v and re-insert it on the edge above z.

        Returns False (after rolling back internal bookkeeping) when the
        proposal is structurally invalid.
        """
        p = int(self.parent[v])
        if p == -1 or (p == 0 and len(self.children[0]) == 1):
            return False
        if z == v or z == 0 or not self.alive[z]:
            return False
        q_v = float(self.flow[v])
        # detach v
        self._touch(p)
        self._touch(v)
        self.children[p].remove(v)
        self.parent[v] = -1
        for a in self._ancestors(p):
            self._touch(a)
            self.flow[a] -= q_v
            self._dirty.add(a)
        # splice p if it became a pass-through branch node
        if p != 0 and p > self.n_term and len(self.children[p]) == 1:
            c = self.children[p][0]
            g = int(self.parent[p])
            self._touch(c)
            self._touch(g)
            self.children[g].remove(p)
            self.children[g].append(c)
            self.parent[c] = g
            self.total -= self.ecost[p]
            self.ecost[p] = 0.0
            self.alive[p] = False
            self.children[p] = []
            self.parent[p] = -1
            self._release(p)
            self._dirty.add(c)
            self._dirty.discard(p)
        if not self.alive[z] or self._in_detached_subtree(z, v):
            return False
        # insert branch node b on edge (w, z), hang v under it
        w = int(self.parent[z])
        b = self._alloc()
        self._touch(w)
        self._touch(z)
        self.alive[b] = True
        self.pos[b] = 0.5 * (self.pos[w] + self.pos[z])
        self.children[w].remove(z)
        self.children[w].append(b)
        self.parent[b] = w
        self.children[b] = [z, v]
        self.parent[z] = b
        self.parent[v] = b
        self.flow[b] = self.flow[z] + q_v
        for a in self._ancestors(w):
            self._touch(a)
            self.flow[a] += q_v
            self._dirty.add(a)
        self._dirty.update((b, z, v))
        return True

    # -- geometric relaxation -------------------------------------------
    def relax(self, nodes: Sequence[int], sweeps: int) -> None:
        """Weighted Fermat-point sweeps over the given branch nodes."""
        for _ in range(sweeps):
            for u in nodes:
                if u == 0 or u <= self.n_term or not self.alive[u]:
                    continue
                num = np.zeros(3)
                den = 0.0
                ok = True
                for c in self.children[u]:
                    d = float(np.linalg.norm(self.pos[c] - self.pos[u]))
                    if d < 1e-12:
                        ok = False
                        break
                    wt = self.kw * self.flow[c] ** (2.0 / 3.0) / d
                    num += wt * self.pos[c]
                    den += wt
                p = int(self.parent[u])
                if ok and p != -1:
                    d = float(np.linalg.norm(self.pos[p] - self.pos[u]))
                    if d < 1e-12:
                        ok = False
                    else:
                        wt = self.kw * self.flow[u] ** (2.0 / 3.0) / d
                        num += wt * self.pos[p]
                        den += wt
                if ok and den > 0.0:
                    self._touch(u)
                    self.pos[u] = num / den
                    self._dirty.add(u)
                    self._dirty.update(self.children[u])

    def refresh_cost(self) -> None:
        for u in sorted(self._dirty):
            if self.alive[u] and self.parent[u] != -1:
                self._touch(u)
                new = self._edge_cost(u)
                self.total += new - self.ecost[u]
                self.ecost[u] = new

    def recompute_total(self) -> float:
        tot = 0.0
        for u in range(self.n_used):
            if self.alive[u] and self.parent[u] != -1:
                tot += self._edge_cost(u)
        return tot

    def branch_nodes(self) -> List[int]:
        return [u for u in range(self.n_term + 1, self.n_used) if self.alive[u]]

    # -- snapshots for elitism -------------------------------------------
    def snapshot(self) -> tuple:
        return (
            self.pos.copy(), self.parent.copy(), self.flow.copy(),
            self.ecost.copy(), [list(c) for c in self.children],
            self.alive.copy(), self.n_used, list(self.free), self.total,
        )

    def restore(self, snap: tuple) -> None:
        (self.pos, self.parent, self.flow, self.ecost, children,
         self.alive, self.n_used, free, self.total) = (
            snap[0].copy(), snap[1].copy(), snap[2].copy(), snap[3].copy(),
            [list(c) for c in snap[4]], snap[5].copy(), snap[6], list(snap[7]),
            snap[8],
        )
        self.children = children


def _state_to_tree(state: _SaState, params: HemodynamicParams) -> VesselTree:
    alive_ids = [u for u in range(state.n_used) if state.alive[u]]
    remap = {u: i for i, u in enumerate(alive_ids)}
    nodes = state.pos[alive_ids]
    prox, dist, flow = [], [], []
    for u in alive_ids:
        p = int(state.parent[u])
        if p != -1:
            prox.append(remap[p])
            dist.append(remap[u])
            flow.append(state.flow[u])
    flow_arr = np.array(flow)
    tree = VesselTree(
        nodes=nodes,
        seg_prox=np.array(prox, dtype=np.int64),
        seg_dist=np.array(dist, dtype=np.int64),
        root=remap[0],
        terminals=np.array([remap[u] for u in range(1, state.n_term + 1)], dtype=np.int64),
        radius=murray_radius(flow_arr, params),
        flow=flow_arr,
    )
    return tree


def sa_optimize_topology(
    root_xyz: np.ndarray,
    terminals: np.ndarray,
    params: HemodynamicParams,
    cfg: SynthesisConfig,
    rng: np.random.Generator,
) -> VesselTree:
    """Anneal the tree topology starting from a root fan.

    Proposals regraft a random subtree next to one of its geometrically
    nearest nodes; affected branch nodes are locally relaxed before the
    Metropolis test.  A per-stage elite snapshot guards against late uphill
    drift.
    """
    terminals = np.atleast_2d(np.asarray(terminals, dtype=float))
    if terminals.shape[1] == 2:
        terminals = np.column_stack([terminals, np.zeros(terminals.shape[0])])
    n = terminals.shape[0]
    q_term = params.q_perf / n
    state = _SaState(_to3(root_xyz), terminals, q_term,
                     cost_coefficient(params))
    if n < 2 or cfg.min_temp_factor >= 1.0:
        return _state_to_tree(state, params)

    n_stages = max(0, int(math.ceil(math.log(cfg.min_temp_factor)
                                    / math.log(cfg.cooling))))
    swaps = cfg.swaps_per_temp if cfg.swaps_per_temp is not None else max(n, 32)
    temp = cfg.t0_factor * state.total
    full_relax = n <= cfg.full_relax_below

    best = state.snapshot()
    kd: Optional[cKDTree] = None
    kd_ids: np.ndarray = np.empty(0, dtype=np.int64)
    since_rebuild = cfg.kd_rebuild_every

    for stage in range(n_stages):
        for _ in range(swaps):
            if since_rebuild >= cfg.kd_rebuild_every:
                mask = state.alive[: state.n_used]
                kd_ids = np.flatnonzero(mask)
                kd = cKDTree(state.pos[kd_ids])
                since_rebuild = 0
            since_rebuild += 1
            v = int(rng.integers(1, state.n_used))
            if not state.alive[v]:
                continue
            k = min(cfg.neighbor_k + 1, len(kd_ids))
            _, nz = kd.query(state.pos[v], k=k)
            cand = kd_ids[np.atleast_1d(nz)]
            cand = cand[(cand != v) & (cand != 0)]
            if cand.size == 0:
                continue
            z = int(cand[rng.integers(cand.size)])
            state.begin()
            if not state.regraft(v, z):
                state.rollback()
                continue
            if full_relax:
                state.relax(state.branch_nodes(), 8)
            else:
                b = int(state.parent[v])
                w = int(state.parent[b]) if b != -1 else -1
                local = [u for u in (b, w, v, z) if u != -1]
                state.relax(local, cfg.relax_sweeps)
            state.refresh_cost()
            delta = state.total - state._saved_total
            if delta > 0 and rng.random() >= math.exp(-delta / max(temp, 1e-300)):
                state.rollback()
        temp *= cfg.cooling
        if state.total < best[8] - 1e-15:
            best = state.snapshot()
    if best[8] < state.total:
        state.restore(best)
    if full_relax:
        state.begin()
        state.relax(state.branch_nodes(), 200)
        state.refresh_cost()
    logger.info("annealing: %d terminals, cost %.6g", n, state.total)
    return _state_to_tree(state, params)


# ======================================================================
# constrained global geometry
# ======================================================================


def optimize_geometry(
    trees: Sequence[VesselTree],
    params_list: Sequence[HemodynamicParams],
    constraints: Optional[np.ndarray] = None,
    cfg: Optional[SynthesisConfig] = None,
) -> List[VesselTree]:
    """Minimize total weighted length over free node positions.

    Roots and terminals stay pinned.  ``constraints`` rows are
    (i, j, dmin) in global node indices (tree node blocks stacked in
    order): the optimizer enforces ||x_i - x_j|| >= dmin with an augmented
    Lagrangian; rows where both nodes are pinned are ignored.
    """
    cfg = cfg or SynthesisConfig()
    offsets = np.cumsum([0] + [t.n_nodes for t in trees])
    X = np.vstack([t.nodes for t in trees])
    free = np.ones(X.shape[0], dtype=bool)
    seg_u: List[np.ndarray] = []
    seg_v: List[np.ndarray] = []
    wts: List[np.ndarray] = []
    for t, p, off in zip(trees, params_list, offsets):
        free[off + t.root] = False
        free[off + t.terminals] = False
        seg_u.append(off + t.seg_prox)
        seg_v.append(off + t.seg_dist)
        wts.append(cost_coefficient(p) * t.flow ** (2.0 / 3.0))
    su = np.concatenate(seg_u)
    sv = np.concatenate(seg_v)
    w = np.concatenate(wts)
    free_idx = np.flatnonzero(free)
    if free_idx.size == 0:
        return [t.copy() for t in trees]

    if constraints is not None and len(constraints):
        constraints = np.asarray(constraints, dtype=float)
        ci = constraints[:, 0].astype(np.int64)
        cj = constraints[:, 1].astype(np.int64)
        # small internal margin so round-off cannot eat the clearance
        dmin = constraints[:, 2] + 1e-6
        movable = free[ci] | free[cj]
        if not np.all(movable):
            fixed_rows = ~movable
            gap = np.linalg.norm(X[ci[fixed_rows]] - X[cj[fixed_rows]], axis=1)
            if np.any(gap < constraints[fixed_rows, 2]):
                raise ConvergenceError(
                    "clearance violated between two pinned nodes; "
                    "terminal sampling is too dense for these radii"
                )
        ci, cj, dmin = ci[movable], cj[movable], dmin[movable]
    else:
        ci = cj = np.empty(0, dtype=np.int64)
        dmin = np.empty(0)

    P = X.copy()

    def fg(xf: np.ndarray, lam: np.ndarray, rho: float):
        P[free_idx] = xf.reshape(-1, 3)
        d = P[su] - P[sv]
        L = np.maximum(np.linalg.norm(d, axis=1), 1e-12)
        f = float(np.sum(w * L))
        G = np.zeros_like(P)
        unit = d / L[:, None]
        np.add.at(G, su, w[:, None] * unit)
        np.add.at(G, sv, -w[:, None] * unit)
        if ci.size:
            dc = P[ci] - P[cj]
            Lc = np.maximum(np.linalg.norm(dc, axis=1), 1e-12)
            c = Lc - dmin
            act = c <= lam / rho
            f += float(np.sum(np.where(act, -lam * c + 0.5 * rho * c * c,
                                       -lam * lam / (2.0 * rho))))
            dpsi = np.where(act, -lam + rho * c, 0.0)
            gv = dpsi[:, None] * (dc / Lc[:, None])
            np.add.at(G, ci, gv)
            np.add.at(G, cj, -gv)
        return f, G[free_idx].ravel()

    x0 = X[free_idx].ravel()
    lam = np.zeros(ci.size)
    rho = cfg.al_rho0
    prev_viol = np.inf
    n_outer = cfg.al_iterations if ci.size else 1
    for _ in range(n_outer):
        res = minimize(
            fg, x0, args=(lam, rho), jac=True, method="L-BFGS-B",
            options={"maxiter": cfg.lbfgs_maxiter, "ftol": 1e-14,
                     "gtol": 1e-10, "maxcor": 20},
        )
        x0 = res.x
        if not ci.size:
            break
        P[free_idx] = x0.reshape(-1, 3)
        c = np.linalg.norm(P[ci] - P[cj], axis=1) - dmin
        viol = float(np.maximum(0.0, -c).max(initial=0.0))
        if viol < 1e-7:
            break
        lam = np.maximum(0.0, lam - rho * c)
        if viol > 0.3 * prev_viol:
            rho *= 4.0
        prev_viol = viol

    P[free_idx] = x0.reshape(-1, 3)
    out = []
    for t, off in zip(trees, offsets):
        t2 = t.copy()
        t2.nodes = P[off : off + t.n_nodes].copy()
        out.append(t2)
    return out


# ======================================================================
# intersections and excursions
# ======================================================================


def _parent_radius_per_node(tree: VesselTree) -> np.ndarray:
    r = np.zeros(tree.n_nodes)
    r[tree.seg_dist] = tree.radius
    return r


def virtual_connections(
    t1: VesselTree, t2: VesselTree, eps: float, chunk: int = 512
) -> np.ndarray:
    """Node pairs of opposite trees close enough to need a clearance bound.

    Returns rows (i1, i2, dmin) with dmin the radii sum plus threshold;
    membership uses 1.25x the radii sum.  Roots are excluded (no parent
    radius, and they are pinned far apart by construction).
    """
    r1 = _parent_radius_per_node(t1)
    r2 = _parent_radius_per_node(t2)
    keep1 = np.ones(t1.n_nodes, dtype=bool)
    keep1[t1.root] = False
    keep2 = np.ones(t2.n_nodes, dtype=bool)
    keep2[t2.root] = False
    id1 = np.flatnonzero(keep1)
    id2 = np.flatnonzero(keep2)
    P1, P2 = t1.nodes[id1], t2.nodes[id2]
    rows = []
    for s in range(0, id1.size, chunk):
        blk = slice(s, min(s + chunk, id1.size))
        d = np.linalg.norm(P1[blk, None, :] - P2[None, :, :], axis=2)
        rsum = r1[id1[blk], None] + r2[id2[None, :]]
        thresh = np.maximum(1.25 * rsum, rsum + 2.0 * eps)
        ii, jj = np.nonzero(d < thresh)
        if ii.size:
            gi = id1[blk][ii]
            gj = id2[jj]
            rows.append(np.column_stack([gi, gj, r1[gi] + r2[gj] + eps]))
    if not rows:
        return np.empty((0, 3))
    return np.concatenate(rows, axis=0)


def detect_intersections(
    t1: VesselTree, t2: VesselTree, eps: float, chunk: int = 512
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Segment pairs whose axes pass closer than the radii sum plus eps.

    Returns (pairs (m, 2), distances (m,), s-parameters on the first tree's
    segment, t-parameters on the second's).  Inactive segments are skipped.
    """
    act1 = np.flatnonzero(t1.active)
    act2 = np.flatnonzero(t2.active)
    A1, B1 = t1.nodes[t1.seg_prox[act1]], t1.nodes[t1.seg_dist[act1]]
    A2, B2 = t2.nodes[t2.seg_prox[act2]], t2.nodes[t2.seg_dist[act2]]
    r1, r2 = t1.radius[act1], t2.radius[act2]
    c1, c2 = 0.5 * (A1 + B1), 0.5 * (A2 + B2)
    h1 = 0.5 * np.linalg.norm(B1 - A1, axis=1)
    h2 = 0.5 * np.linalg.norm(B2 - A2, axis=1)
    pairs, dists, svals, tvals = [], [], [], []
    for s in range(0, act1.size, chunk):
        blk = slice(s, min(s + chunk, act1.size))
        d = np.linalg.norm(c1[blk, None, :] - c2[None, :, :], axis=2)
        reach = (h1[blk, None] + r1[blk, None] + eps) + (h2[None, :] + r2[None, :])
        ii, jj = np.nonzero(d < reach)
        if not ii.size:
            continue
        gi = np.arange(act1.size)[blk][ii]
        dist, sp, tp = segment_pair_distance(A1[gi], B1[gi], A2[jj], B2[jj])
        hit = dist < r1[gi] + r2[jj] + eps
        if np.any(hit):
            pairs.append(np.column_stack([act1[gi[hit]], act2[jj[hit]]]))
            dists.append(dist[hit])
            svals.append(sp[hit])
            tvals.append(tp[hit])
    if not pairs:
        return (np.empty((0, 2), dtype=np.int64), np.empty(0), np.empty(0),
                np.empty(0))
    return (np.concatenate(pairs).astype(np.int64), np.concatenate(dists),
            np.concatenate(svals), np.concatenate(tvals))


def split_segment(
    tree: VesselTree, seg: int, point: np.ndarray
) -> Tuple[VesselTree, int, float, float]:
    """Insert a degree-two node on a segment at the given position.

    Both halves inherit the segment's flow, radius, and active flag.
    Returns (tree, new node id, chord length prox->node, node->dist).
    """
    t = tree.copy()
    u = int(t.seg_prox[seg])
    wnode = int(t.seg_dist[seg])
    e = t.n_nodes
    t.nodes = np.vstack([t.nodes, np.asarray(point, dtype=float).reshape(1, 3)])
    t.seg_dist[seg] = e
    t.seg_prox = np.append(t.seg_prox, e)
    t.seg_dist = np.append(t.seg_dist, wnode)
    t.radius = np.append(t.radius, t.radius[seg])
    t.flow = np.append(t.flow, t.flow[seg])
    t.active = np.append(t.active, t.active[seg])
    if t.pressure is not None:
        t.pressure = None
    l1 = float(np.linalg.norm(t.nodes[e] - t.nodes[u]))
    l2 = float(np.linalg.norm(t.nodes[wnode] - t.nodes[e]))
    return t, e, l1, l2


def _excursion_direction(a: np.ndarray, b: np.ndarray, sign: float) -> np.ndarray:
    """Off-chord unit direction: +/-z projected perpendicular to the chord,
    falling back to any perpendicular when the chord is z-aligned."""
    axis = b - a
    nn = np.linalg.norm(axis)
    axis = axis / nn if nn > 0 else np.array([1.0, 0.0, 0.0])
    zhat = np.array([0.0, 0.0, 1.0])
    perp = zhat - np.dot(zhat, axis) * axis
    if np.linalg.norm(perp) < 1e-8:
        perp = np.array([1.0, 0.0, 0.0]) - axis[0] * axis
    perp /= np.linalg.norm(perp)
    return sign * perp


def _plan_pockets(
    tree: VesselTree,
    hits: Dict[int, List[Tuple[float, float, float, int]]],
    cap: int,
    reuse_frac: float = 0.75,
    merge_frac: float = 0.6,
    no_reuse: Optional[set] = None,
) -> Tuple[Dict[int, List[List[object]]], Dict[int, int]]:
    """Decide, per segment, where contact pockets get their anchor node.

    ``hits`` maps segment -> [(distance, param, radii_sum, key)].  Pockets
    within ``reuse_frac`` radii-sums of an existing non-root endpoint
    reuse it (keys listed in ``no_reuse`` never do); the rest are grouped
    deepest-first, merging pockets within ``merge_frac`` radii-sums of an
    already chosen spot, capped per segment.  Returns the insertion plan
    (segment -> [[param, radii_sum, keys]]) and the endpoint reuse map
    (key -> node id).
    """
    forbidden = no_reuse if no_reuse is not None else set()
    inserts: Dict[int, List[List[object]]] = {}
    reuse: Dict[int, int] = {}
    for seg in sorted(hits):
        u = int(tree.seg_prox[seg])
        w = int(tree.seg_dist[seg])
        a, b = tree.nodes[u], tree.nodes[w]
        L = float(np.linalg.norm(b - a))
        chosen: List[List[object]] = []
        for d, p, rsum, key in sorted(hits[seg]):
            if key not in forbidden:
                if p * L < reuse_frac * rsum and u != tree.root:
                    reuse[key] = u
                    continue
                if (1.0 - p) * L < reuse_frac * rsum:
                    reuse[key] = w
                    continue
            merged = False
            for c in chosen:
                if abs(float(c[0]) - p) * L < merge_frac * rsum:
                    c[2].append(key)
                    merged = True
                    break
            if merged:
                continue
            if len(chosen) >= cap:
                c = min(chosen, key=lambda c: abs(float(c[0]) - p))
                c[2].append(key)
            else:
                chosen.append([p, rsum, [key]])
        if chosen:
            inserts[seg] = chosen
    return inserts, reuse


def _apply_inserts(
    tree: VesselTree,
    inserts: Dict[int, List[List[object]]],
    sign: float,
    floors: List[Tuple[int, int, float]],
    eps: float,
) -> Tuple[VesselTree, Dict[int, int]]:
    """Split segments at the planned pockets, offsetting each new node
    off-chord by the local clearance bound, and chain length floors
    between the consecutive nodes at their creation chord fractions."""
    node_of: Dict[int, int] = {}
    for seg in sorted(inserts):
        plan = sorted(inserts[seg], key=lambda c: float(c[0]))
        u = int(tree.seg_prox[seg])
        w = int(tree.seg_dist[seg])
        a = tree.nodes[u].copy()
        b = tree.nodes[w].copy()
        L = float(np.linalg.norm(b - a))
        cur, s_prev, prev_node = seg, 0.0, u
        for p, rsum, keys in plan:
            p = min(max(float(p), 0.02), 0.98)
            if prev_node != u and p - s_prev < 0.01:
                for key in keys:  # lands on the node just inserted
                    node_of[key] = prev_node
                continue
            mag = float(rsum) + eps
            pt = a + p * (b - a) + mag * _excursion_direction(a, b, sign)
            tree, e, _, _ = split_segment(tree, cur, pt)
            floors.append((prev_node, e, (p - s_prev) * L))
            cur = tree.n_segments - 1
            s_prev, prev_node = p, e
            for key in keys:
                node_of[key] = e
        floors.append((prev_node, w, (1.0 - s_prev) * L))
    return tree, node_of


def _resolve_round(
    t1: VesselTree,
    t2: VesselTree,
    pairs: np.ndarray,
    dists: np.ndarray,
    svals: np.ndarray,
    tvals: np.ndarray,
    floors1: List[Tuple[int, int, float]],
    floors2: List[Tuple[int, int, float]],
    sticky: List[Tuple[int, int]],
    eps_nlp: float,
    cfg: SynthesisConfig,
) -> Tuple[VesselTree, VesselTree]:
    """Give every detected contact pocket a node on each tree and pin the
    pair in the constraint set; new nodes are excursion splits, or nearby
    endpoints when the pocket already grazes one."""
    hits1: Dict[int, List[Tuple[float, float, float, int]]] = {}
    hits2: Dict[int, List[Tuple[float, float, float, int]]] = {}
    for key, ((s1, s2), d, sp, tp) in enumerate(zip(pairs, dists, svals, tvals)):
        rsum = float(t1.radius[s1] + t2.radius[s2])
        hits1.setdefault(int(s1), []).append((float(d), float(sp), rsum, key))
        hits2.setdefault(int(s2), []).append((float(d), float(tp), rsum, key))
    cap = cfg.max_excursions_per_segment
    seen = set(sticky)
    # a pocket whose endpoint anchors are already a constrained pair is not
    # being fixed by them: forbid reuse so it gets fresh on-pocket nodes
    _, dry1 = _plan_pockets(t1, hits1, cap)
    _, dry2 = _plan_pockets(t2, hits2, cap)
    stuck = {
        key for key in range(len(pairs))
        if key in dry1 and key in dry2 and (dry1[key], dry2[key]) in seen
    }
    ins1, reuse1 = _plan_pockets(t1, hits1, cap, no_reuse=stuck)
    ins2, reuse2 = _plan_pockets(t2, hits2, cap, no_reuse=stuck)
    t1, new1 = _apply_inserts(t1, ins1, +1.0, floors1, eps_nlp)
    t2, new2 = _apply_inserts(t2, ins2, -1.0, floors2, eps_nlp)
    new1.update(reuse1)
    new2.update(reuse2)
    for key in range(len(pairs)):
        pair = (new1[key], new2[key])
        if pair not in seen:
            seen.add(pair)
            sticky.append(pair)
    return t1, t2


# ======================================================================
# coupled generation
# ======================================================================


def sample_coupled_terminals(
    domain: PerfusionDomain,
    n_supply: int,
    n_drain: int,
    root_supply: np.ndarray,
    root_drain: np.ndarray,
    params_supply: HemodynamicParams,
    params_drain: HemodynamicParams,
    cfg: SynthesisConfig,
    rng: np.random.Generator,
) -> Tuple[np.ndarray, np.ndarray]:
    """Terminal sites for both trees with cross-tree separation.

    Pinned nodes of the two trees must already satisfy the clearance bound,
    so drain terminals keep a safety distance from supply terminals and
    both sets keep clear of the opposite root.
    """
    fac = cfg.terminal_separation_factor
    rt1 = float(murray_radius(params_supply.q_perf / n_supply, params_supply))
    rt2 = float(murray_radius(params_drain.q_perf / n_drain, params_drain))
    rr1 = float(murray_radius(params_supply.q_perf, params_supply))
    rr2 = float(murray_radius(params_drain.q_perf, params_drain))
    d_tt = fac * (rt1 + rt2 + cfg.clearance_eps)
    d_r1 = fac * (rr2 + rt1 + cfg.clearance_eps)  # supply terminal vs drain root
    d_r2 = fac * (rr1 + rt2 + cfg.clearance_eps)  # drain terminal vs supply root
    root_s = np.asarray(root_supply, dtype=float).reshape(1, 3)
    root_d = np.asarray(root_drain, dtype=float).reshape(1, 3)

    def _filtered(n, avoid_pts, d_avoid, d_root, root_pt):
        out: List[np.ndarray] = []
        count, tries = 0, 0
        avoid = cKDTree(avoid_pts) if len(avoid_pts) else None
        while count < n:
            tries += 1
            if tries > 200:
                raise SamplingError("terminal separation cannot be met")
            pts = domain.sample_uniform(2 * (n - count) + 16, rng)
            ok = np.linalg.norm(pts - root_pt, axis=1) > d_root
            if avoid is not None:
                dd, _ = avoid.query(pts)
                ok &= dd > d_avoid
            pts = pts[ok][: n - count]
            if pts.size:
                out.append(pts)
                count += pts.shape[0]
        return np.concatenate(out, axis=0)

    terms1 = _filtered(n_supply, [], 0.0, d_r1, root_d)
    terms2 = _filtered(n_drain, terms1, d_tt, d_r2, root_s)
    return terms1, terms2


def generate_coupled_trees(
    domain: PerfusionDomain,
    root_supply: np.ndarray,
    root_drain: np.ndarray,
    params_supply: HemodynamicParams,
    params_drain: HemodynamicParams,
    cfg: SynthesisConfig,
    n_drain: Optional[int] = None,
) -> CoupledTrees:
    """Full synthesis: sample, anneal each tree, then jointly optimize
    geometry with clearance constraints, inserting excursion nodes until
    the trees are intersection-free at radii consistent with the
    prescribed pressure drops."""
    rng = np.random.default_rng(cfg.seed)
    n1 = cfg.n_terminals
    n2 = n_drain if n_drain is not None else cfg.n_terminals
    root_s = _to3(root_supply)
    root_d = _to3(root_drain)
    terms1, terms2 = sample_coupled_terminals(
        domain, n1, n2, root_s, root_d, params_supply, params_drain, cfg, rng
    )
    t1 = sa_optimize_topology(root_s, terms1, params_supply, cfg, rng)
    t2 = sa_optimize_topology(root_d, terms2, params_drain, cfg, rng)
    t1 = rescale_radii_to_drop(t1, params_supply.delta_p, params_supply.viscosity)
    t2 = rescale_radii_to_drop(t2, params_drain.delta_p, params_drain.viscosity)

    eps = cfg.clearance_eps
    eps_nlp = eps * (1.0 + cfg.clearance_margin)  # node bound above detection
    floors1: List[Tuple[int, int, float]] = []
    floors2: List[Tuple[int, int, float]] = []
    sticky: List[Tuple[int, int]] = []  # cross-tree excursion node pairs

    def _constraint_rows() -> np.ndarray:
        off = t1.n_nodes  # second tree's block starts here in stacked order
        con = []
        vc = virtual_connections(t1, t2, eps_nlp)
        if len(vc):
            vc = vc.copy()
            vc[:, 1] += off
            con.append(vc)
        if sticky:
            r1 = _parent_radius_per_node(t1)
            r2 = _parent_radius_per_node(t2)
            st = np.array(sticky, dtype=np.int64)
            con.append(np.column_stack(
                [st[:, 0], st[:, 1] + off, r1[st[:, 0]] + r2[st[:, 1]] + eps_nlp]
            ))
        if floors1:
            f = np.array(floors1, dtype=float)
            con.append(f)
        if floors2:
            f = np.array(floors2, dtype=float)
            f[:, 0] += off
            f[:, 1] += off
            con.append(f)
        return np.concatenate(con, axis=0) if con else np.empty((0, 3))

    for outer in range(cfg.rescale_rounds):
        for inner in range(cfg.resolve_rounds):
            rows = _constraint_rows()
            t1, t2 = optimize_geometry(
                [t1, t2], [params_supply, params_drain], rows, cfg
            )
            if len(rows):
                pts = np.vstack([t1.nodes, t2.nodes])
                gap = np.linalg.norm(
                    pts[rows[:, 0].astype(int)] - pts[rows[:, 1].astype(int)],
                    axis=1,
                ) - rows[:, 2]
                nlp_res = float(max(0.0, -gap.min()))
            else:
                nlp_res = 0.0
            pairs, dists, svals, tvals = detect_intersections(t1, t2, eps)
            logger.info(
                "resolve %d.%d: %d contacts (worst %.4g), %d + %d segments, "
                "%d rows (residual %.3g)",
                outer, inner, len(pairs),
                float((t1.radius[pairs[:, 0]] + t2.radius[pairs[:, 1]]
                       + eps - dists).max()) if len(pairs) else 0.0,
                t1.n_segments, t2.n_segments, len(rows), nlp_res,
            )
            if not len(pairs):
                break
            t1, t2 = _resolve_round(
                t1, t2, pairs, dists, svals, tvals,
                floors1, floors2, sticky, eps_nlp, cfg,
            )
        else:
            raise ConvergenceError("intersection resolution did not terminate")
        r1_old = t1.radius.copy()
        r2_old = t2.radius.copy()
        t1 = rescale_radii_to_drop(t1, params_supply.delta_p, params_supply.viscosity)
        t2 = rescale_radii_to_drop(t2, params_drain.delta_p, params_drain.viscosity)
        f1 = float(t1.radius[0] / r1_old[0])
        f2 = float(t2.radius[0] / r2_old[0])
        pairs, _, _, _ = detect_intersections(t1, t2, eps)
        if not len(pairs) and abs(f1 - 1.0) < 1e-3 and abs(f2 - 1.0) < 1e-3:
            break
    else:
        pairs, _, _, _ = detect_intersections(t1, t2, eps)
        if len(pairs):
            raise ConvergenceError("radius rescaling kept reintroducing contacts")

    t1 = node_pressures(t1, params_supply.p_root, params_supply.viscosity,
                        direction=1 if params_supply.delta_p > 0 else -1)
    t2 = node_pressures(t2, params_drain.p_root, params_drain.viscosity,
                        direction=1 if params_drain.delta_p > 0 else -1)
    logger.info(
        "coupled trees: %d + %d segments, %d length floors",
        t1.n_segments, t2.n_segments, len(floors1) + len(floors2),
    )
    return CoupledTrees(
        supply=t1, drain=t2,
        params_supply=params_supply, params_drain=params_drain,
        floors_supply=floors1, floors_drain=floors2,
    )


def _to3(x) -> np.ndarray:
    x = np.asarray(x, dtype=float).ravel()
    if x.size == 2:
        return np.array([x[0], x[1], 0.0])
    return x
