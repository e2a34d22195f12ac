"""Cut classification, orphan detection, and flow redistribution.

Oracles: a dense point-sampling classifier for segment removal, an
iterate-to-fixpoint reachability check for orphans, and the cube-root /
fourth-root Murray scalings for even flow redistribution.
"""

import numpy as np
import pytest

from vasogrow.domain import PerfusionDomain
from vasogrow.errors import DevascularizationError, DomainError
from vasogrow.mesh import delaunay_mesh, rect_mesh
from vasogrow.resection import (
    CutSpec,
    ResectionReport,
    apply_resection,
    classify_cut,
    clip_domain,
    find_orphans,
    redistribute_flow,
    removed_volume_fraction,
)
from vasogrow.tree import (
    HemodynamicParams,
    VesselTree,
    assign_hemodynamics,
    murray_radius,
    node_pressures,
)

PAR = HemodynamicParams()


def _random_tree(n_segments: int, rng: np.random.Generator) -> VesselTree:
    """Random rooted tree grown by attaching each new node to a random
    existing one; terminal set recomputed from the final leaves."""
    nodes = [np.array([0.0, 0.0, 0.0])]
    prox, dist = [], []
    for i in range(1, n_segments + 1):
        parent = int(rng.integers(0, i))
        nodes.append(rng.uniform(-10.0, 10.0, size=3))
        prox.append(parent)
        dist.append(i)
    prox = np.array(prox)
    dist = np.array(dist)
    has_child = np.zeros(n_segments + 1, dtype=bool)
    has_child[prox] = True
    terms = np.flatnonzero(~has_child & (np.arange(n_segments + 1) != 0))
    return VesselTree(
        nodes=np.array(nodes), seg_prox=prox, seg_dist=dist, root=0,
        terminals=terms, radius=np.full(n_segments, 0.1),
    )


def _balanced_tree(depth: int) -> VesselTree:
    """Complete binary tree over 2**depth terminals lined up on y=0."""
    n_leaf = 2**depth
    leaves = [np.array([float(i), 0.0, 0.0]) for i in range(n_leaf)]
    nodes = []
    prox, dist = [], []
    level = []
    for p in leaves:
        nodes.append(p)
        level.append(len(nodes) - 1)
    y = 1.0
    while len(level) > 1:
        nxt = []
        for a, b in zip(level[::2], level[1::2]):
            mid = 0.5 * (nodes[a] + nodes[b]) + np.array([0.0, y, 0.0])
            nodes.append(mid)
            m = len(nodes) - 1
            prox += [m, m]
            dist += [a, b]
            nxt.append(m)
        level = nxt
        y *= 2.0
    root_attach = level[0]
    nodes.append(nodes[root_attach] + np.array([0.0, 4.0 * y, 0.0]))
    root = len(nodes) - 1
    prox.append(root)
    dist.append(root_attach)
    return VesselTree(
        nodes=np.array(nodes), seg_prox=np.array(prox), seg_dist=np.array(dist),
        root=root, terminals=np.arange(n_leaf),
    )


# ----------------------------------------------------------------------
# CutSpec


def test_cutspec_validates_and_normalizes():
    cut = CutSpec(points=[[0.0, 0.0, 0.0]], normals=[[2.0, 0.0, 0.0]])
    assert np.allclose(np.linalg.norm(cut.normals, axis=1), 1.0)
    with pytest.raises(ValueError):
        CutSpec(points=np.empty((0, 3)), normals=np.empty((0, 3)))
    with pytest.raises(ValueError):
        CutSpec(points=[[0.0, 0.0, 0.0]], normals=[[0.0, 0.0, 0.0]])


def test_cutspec_removed_is_halfspace_intersection():
    # slab -1 < x < 1: removed needs x-1 < 0 AND -x-1 < 0... using
    # negative-side convention: planes at x=1 (normal +x) and x=-1 (normal -x)
    cut = CutSpec(
        points=[[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]],
        normals=[[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]],
    )
    pts = np.array([[0.0, 5.0, 0.0], [2.0, 0.0, 0.0], [-2.0, 0.0, 0.0]])
    assert list(cut.removed(pts)) == [True, False, False]


# ----------------------------------------------------------------------
# classify_cut


def test_classify_cut_missing_tree_retains_all():
    tree = _balanced_tree(3)
    cut = CutSpec(points=[[0.0, -50.0, 0.0]], normals=[[0.0, 1.0, 0.0]])
    assert not classify_cut(tree, cut).any()


def test_classify_cut_containing_tree_removes_all():
    tree = _balanced_tree(3)
    cut = CutSpec(points=[[0.0, 1e4, 0.0]], normals=[[0.0, 1.0, 0.0]])
    assert classify_cut(tree, cut).all()


def test_classify_cut_matches_dense_sampling_oracle():
    rng = np.random.default_rng(42)
    t = np.linspace(0.0, 1.0, 4001)[None, :, None]
    for case in range(20):
        tree = _random_tree(60, rng)
        pt = rng.uniform(-4.0, 4.0, size=3)
        nrm = rng.normal(size=3)
        planes = [(pt, nrm)]
        if case % 2:  # every other case uses a slab (interval intersection)
            planes.append((pt + 1.5 * nrm / np.linalg.norm(nrm), -nrm))
        cut = CutSpec(
            points=[p for p, _ in planes], normals=[n for _, n in planes]
        )
        removed = classify_cut(tree, cut)
        a = tree.nodes[tree.seg_prox][:, None, :]
        b = tree.nodes[tree.seg_dist][:, None, :]
        samples = a + t * (b - a)  # (n_seg, 4001, 3)
        oracle = cut.removed(samples.reshape(-1, 3)).reshape(len(removed), -1)
        assert np.array_equal(removed, oracle.any(axis=1))


def test_classify_cut_bisected_fan_removes_half():
    # terminals at x = 0..7, remove x > 3.5 with an outward +x normal region:
    # removed side is the negative side, so aim the normal at -x
    tree = _balanced_tree(3)
    cut = CutSpec(points=[[3.5, 0.0, 0.0]], normals=[[-1.0, 0.0, 0.0]])
    removed = classify_cut(tree, cut)
    term_par = tree.parent_segment()[tree.terminals]
    assert removed[term_par].sum() == 4
    root_seg = int(np.flatnonzero(tree.seg_prox == tree.root)[0])
    assert not removed[root_seg]


# ----------------------------------------------------------------------
# find_orphans


def _reachable_fixpoint(tree: VesselTree, retained: np.ndarray) -> np.ndarray:
    """Oracle: grow the root-connected node set by sweeping the segment
    list until nothing changes (no queue, order independent)."""
    ok_node = {int(tree.root)}
    changed = True
    while changed:
        changed = False
        for s in range(tree.n_segments):
            if retained[s] and int(tree.seg_prox[s]) in ok_node:
                if int(tree.seg_dist[s]) not in ok_node:
                    ok_node.add(int(tree.seg_dist[s]))
                    changed = True
    reach = np.zeros(tree.n_segments, dtype=bool)
    for s in range(tree.n_segments):
        reach[s] = retained[s] and int(tree.seg_prox[s]) in ok_node
    return retained & ~reach


def test_find_orphans_matches_fixpoint_oracle():
    rng = np.random.default_rng(3)
    for _ in range(50):
        tree = _random_tree(100, rng)
        retained = rng.random(100) > 0.25
        assert np.array_equal(
            find_orphans(tree, retained), _reachable_fixpoint(tree, retained)
        )


def test_single_interior_removal_orphans_whole_subtree():
    tree = _balanced_tree(3)
    # the root segment ends at the top branch point; drop one of its children
    root_seg = int(np.flatnonzero(tree.seg_prox == tree.root)[0])
    top = int(tree.seg_dist[root_seg])
    first_children = np.flatnonzero(tree.seg_prox == top)
    retained = np.ones(tree.n_segments, dtype=bool)
    retained[first_children[0]] = False
    orphan = find_orphans(tree, retained)
    # everything below that child is orphaned: 2 children + 4 grandchildren
    assert orphan.sum() == 6
    assert not orphan[~retained].any()


def test_no_removals_no_orphans():
    tree = _balanced_tree(2)
    retained = np.ones(tree.n_segments, dtype=bool)
    assert not find_orphans(tree, retained).any()


# ----------------------------------------------------------------------
# redistribute_flow


def test_halving_terminals_doubles_flow_and_scales_radii():
    base = assign_hemodynamics(_balanced_tree(4), PAR)
    term_par = base.parent_segment()[base.terminals]
    cut = CutSpec(points=[[7.5, 0.0, 0.0]], normals=[[-1.0, 0.0, 0.0]])
    resected, report = apply_resection(base, cut, PAR, rescale=False)
    act = resected.active
    carrying = act & (resected.flow > 0)
    assert report.n_terminals_active == 8
    # even redistribution: every active terminal flow exactly doubles
    f_new = resected.flow[term_par[:8]]
    f_old = base.flow[term_par[:8]]
    assert np.allclose(f_new, 2.0 * f_old, rtol=1e-14)
    # rescale=False leaves pure power-optimal radii r = c Q^(1/3)
    assert np.array_equal(
        resected.radius[carrying], murray_radius(resected.flow[carrying], PAR)
    )
    # every segment whose flow doubled gets the cube-root dilation; the
    # root keeps carrying the full inflow, so its flow ratio stays one
    below_root = carrying & (base.flow < PAR.q_perf * (1.0 - 1e-12))
    murray_ratio = (
        resected.flow[below_root] / base.flow[below_root]
    ) ** (1.0 / 3.0)
    assert np.allclose(murray_ratio, 2.0 ** (1.0 / 3.0), rtol=1e-14)
    root_seg = int(np.flatnonzero(base.seg_prox == base.root)[0])
    assert resected.flow[root_seg] == pytest.approx(PAR.q_perf, rel=1e-14)


def test_rescaled_redistribution_realizes_drop_and_fourth_root():
    base = assign_hemodynamics(_balanced_tree(4), PAR)
    cut = CutSpec(points=[[7.5, 0.0, 0.0]], normals=[[-1.0, 0.0, 0.0]])
    resected, _ = apply_resection(base, cut, PAR, rescale=True)
    carrying = resected.active & (resected.flow > 0)
    # doubled segments dilate by the cube root times one global drop
    # rescale factor; the root's flow is unchanged, so its ratio IS that
    # global factor, and the factor sits below one (resistance fell)
    root_seg = int(np.flatnonzero(base.seg_prox == base.root)[0])
    s_glob = resected.radius[root_seg] / base.radius[root_seg]
    assert 0.9 < s_glob < 1.0
    doubled = carrying & (base.flow < PAR.q_perf * (1.0 - 1e-12))
    assert np.allclose(
        resected.radius[doubled] / base.radius[doubled],
        2.0 ** (1.0 / 3.0) * s_glob,
        rtol=1e-12,
    )
    # flow-weighted mean root-to-terminal drop equals the prescribed drop
    probe = node_pressures(resected, 0.0, PAR.viscosity, direction=1)
    par_seg = resected.parent_segment()[resected.terminals]
    w = resected.flow[par_seg]
    drops = -probe.pressure[resected.terminals]
    assert np.sum(drops * w) / np.sum(w) == pytest.approx(PAR.delta_p, rel=1e-12)


def test_nothing_removed_is_identity():
    base = assign_hemodynamics(_balanced_tree(3), PAR)
    cut = CutSpec(points=[[0.0, -99.0, 0.0]], normals=[[0.0, 1.0, 0.0]])
    out, report = apply_resection(base, cut, PAR, rescale=True)
    assert report.n_removed == 0 and report.n_orphan == 0
    assert np.allclose(out.radius, base.radius, rtol=1e-12)
    assert np.allclose(out.flow, base.flow, rtol=1e-14)
    assert out.active.all()


def test_sealed_segments_zero_flow_keep_radius():
    base = assign_hemodynamics(_balanced_tree(3), PAR)
    cut = CutSpec(points=[[5.5, 0.0, 0.0]], normals=[[-1.0, 0.0, 0.0]])
    resected, report = apply_resection(base, cut, PAR, rescale=True)
    sealed = ~resected.active
    assert sealed.any()
    assert np.all(resected.flow[sealed] == 0.0)
    assert np.array_equal(resected.radius[sealed], base.radius[sealed])
    # stubs: active but flowless segments also keep their radius
    stubs = resected.active & (resected.flow == 0.0)
    if stubs.any():
        assert np.array_equal(resected.radius[stubs], base.radius[stubs])


def test_redistribution_law_random_cuts():
    # radius law r = c Q^(1/3) * s with one global rescale factor s, exact
    # conservation, and the partition invariant, across random plane cuts
    rng = np.random.default_rng(11)
    checked = 0
    for _ in range(12):
        tree = _random_tree(80, rng)
        base = assign_hemodynamics(tree, PAR)
        u = rng.normal(size=3)
        u /= np.linalg.norm(u)
        # remove the cap beyond a plane 3..6 mm out; the root stays inside
        cut = CutSpec(points=[rng.uniform(3.0, 6.0) * u], normals=[-u])
        try:
            resected, report = apply_resection(base, cut, PAR, rescale=True)
        except DevascularizationError:
            continue
        checked += 1
        carrying = resected.active & (resected.flow > 0)
        s_each = resected.radius[carrying] / murray_radius(
            resected.flow[carrying], PAR
        )
        assert np.allclose(s_each, s_each[0], rtol=1e-12)
        par_seg = resected.parent_segment()[resected.terminals]
        flows = resected.flow[par_seg]
        active_terms = flows > 0
        assert np.allclose(
            flows[active_terms], PAR.q_perf / report.n_terminals_active,
            rtol=1e-14,
        )
        assert flows.sum() == pytest.approx(PAR.q_perf, rel=1e-13)
        assert (
            report.n_removed + report.n_orphan + report.n_active
            == report.n_segments_before
        )
        # terminals that survived as whole untouched subtrees of the root
        # dilate: their flow scaled by N/N_active >= 1
        if report.n_terminals_active < report.n_terminals_before:
            gained = carrying & (
                resected.flow > base.flow * (1.0 + 1e-12)
            )
            assert gained.any()
    assert checked >= 5


def test_stub_segment_keeps_radius_and_carries_nothing():
    from dataclasses import replace

    base = assign_hemodynamics(_balanced_tree(2), PAR)
    root_seg = int(np.flatnonzero(base.seg_prox == base.root)[0])
    top = int(base.seg_dist[root_seg])
    right = int(np.flatnonzero(base.seg_prox == top)[1])
    right_mid = int(base.seg_dist[right])
    act = np.ones(base.n_segments, dtype=bool)
    act[np.flatnonzero(base.seg_prox == right_mid)] = False  # seal the leaves
    out = redistribute_flow(replace(base, active=act), PAR, rescale=True)
    assert out.active[right] and out.flow[right] == 0.0
    assert out.radius[right] == base.radius[right]
    par = out.parent_segment()[out.terminals[:2]]
    assert np.allclose(out.flow[par], PAR.q_perf / 2.0, rtol=1e-14)


def test_total_devascularization_raises():
    base = assign_hemodynamics(_balanced_tree(2), PAR)
    # remove everything below the root segment
    cut = CutSpec(points=[[0.0, 3.5, 0.0]], normals=[[0.0, -1.0, 0.0]])
    with pytest.raises(DevascularizationError):
        apply_resection(base, cut, PAR)


def test_conservation_after_resection():
    base = assign_hemodynamics(_balanced_tree(4), PAR)
    # remove x < 2.5 (terminals 0..2); the tree spine sits at x = 7.5
    cut = CutSpec(points=[[2.5, 0.0, 0.0]], normals=[[1.0, 0.0, 0.0]])
    resected, _ = apply_resection(base, cut, PAR)
    par_seg = resected.parent_segment()[resected.terminals]
    total = resected.flow[par_seg].sum()
    assert total == pytest.approx(PAR.q_perf, rel=1e-14)


# ----------------------------------------------------------------------
# clip_domain


def test_clip_domain_halves_disk_area():
    dom = PerfusionDomain.disk(10.0)
    mesh = delaunay_mesh(dom, 0.8)
    cut = CutSpec(points=[[0.0, 0.0, 0.0]], normals=[[1.0, 0.0, 0.0]])
    dom2, mesh2 = clip_domain(dom, mesh, cut)
    a0 = np.abs(mesh.volumes()).sum()
    a1 = np.abs(mesh2.volumes()).sum()
    assert a1 == pytest.approx(0.5 * a0, rel=0.05)
    frac = removed_volume_fraction(mesh, mesh2)
    assert frac == pytest.approx(0.5, abs=0.05)
    assert "cut" in set(mesh2.boundary_tags.tolist())
    assert dom2.removed(np.array([[-5.0, 0.0, 0.0]]))[0]


def test_clip_domain_missing_cut_is_identity():
    dom = PerfusionDomain.disk(5.0)
    mesh = delaunay_mesh(dom, 1.0)
    # removed side (negative) faces away from the disk
    cut = CutSpec(points=[[50.0, 0.0, 0.0]], normals=[[-1.0, 0.0, 0.0]])
    dom2, mesh2 = clip_domain(dom, mesh, cut)
    assert mesh2 is mesh and dom2 is dom


def test_clip_domain_empty_remainder_errors():
    dom = PerfusionDomain.disk(5.0)
    mesh = delaunay_mesh(dom, 1.0)
    # the whole disk sits on the negative side: everything removed
    cut = CutSpec(points=[[100.0, 0.0, 0.0]], normals=[[1.0, 0.0, 0.0]])
    with pytest.raises(DomainError):
        clip_domain(dom, mesh, cut)
