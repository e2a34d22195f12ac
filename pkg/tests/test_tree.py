"""Vessel tree hemodynamics against independent oracles.

Expected values are computed by routes independent of the implementation:
path-walking flow summation, scalar numerical minimization for the optimal
radius, and per-leaf pressure accumulation.
"""

import numpy as np
import pytest
from scipy.optimize import minimize_scalar

from vasogrow import units
from vasogrow.errors import StructureError
from vasogrow.tree import (
    HemodynamicParams,
    VesselTree,
    assign_hemodynamics,
    mean_velocity,
    murray_radius,
    node_pressures,
    propagate_flows,
    read_tree_csv,
    rescale_radii_to_drop,
    segment_resistance,
    terminal_drops,
    tree_cost,
    write_tree_csv,
)

PARAMS = HemodynamicParams()


def random_tree(rng, n_terminals=16):
    """Random rooted tree: terminals attach to root or earlier branch nodes."""
    nodes = [np.array([0.0, 0.0, 0.0])]
    seg_prox, seg_dist = [], []
    terminals = []
    branch_ids = [0]
    for _ in range(n_terminals):
        # grow a random chain of 0-2 branch nodes, then a terminal
        parent = int(rng.choice(branch_ids))
        for _ in range(int(rng.integers(0, 3))):
            nodes.append(rng.uniform(-10, 10, size=3))
            seg_prox.append(parent)
            seg_dist.append(len(nodes) - 1)
            parent = len(nodes) - 1
            branch_ids.append(parent)
        nodes.append(rng.uniform(-10, 10, size=3))
        seg_prox.append(parent)
        seg_dist.append(len(nodes) - 1)
        terminals.append(len(nodes) - 1)
    return VesselTree(
        nodes=np.array(nodes),
        seg_prox=np.array(seg_prox),
        seg_dist=np.array(seg_dist),
        root=0,
        terminals=np.array(terminals),
    )


def oracle_flows(tree, q_perf):
    """Independent route: walk each terminal's root path and accumulate."""
    q_term = q_perf / tree.terminals.size
    parent = tree.parent_segment()
    flow = np.zeros(tree.n_segments)
    for t in tree.terminals:
        node = int(t)
        while node != tree.root:
            s = int(parent[node])
            flow[s] += q_term
            node = int(tree.seg_prox[s])
    return flow


def oracle_pressure(tree, p_root, viscosity, direction=1):
    """Independent route: per-node walk to the root, summing R*Q."""
    parent = tree.parent_segment()
    lengths = tree.lengths()
    p = np.zeros(tree.n_nodes)
    for v in range(tree.n_nodes):
        node, drop = v, 0.0
        while node != tree.root:
            s = int(parent[node])
            drop += segment_resistance(lengths[s], tree.radius[s], viscosity) * tree.flow[s]
            node = int(tree.seg_prox[s])
        p[v] = p_root - direction * drop
    return p


# ----------------------------------------------------------------------


def test_microwatt_conversion_is_identity():
    # 1 uW/mm^3 = 1e-6 kg m^2 s^-3 / mm^3 = 1 kg mm^-1 s^-3
    assert units.MICROWATT_PER_MM3 == 1.0
    assert units.CENTIPOISE == pytest.approx(1e-6, rel=0, abs=0)
    # table value: 3.6 cP in kg-mm-s units
    assert 3.6 * units.CENTIPOISE == pytest.approx(3.6e-6)


def test_segment_resistance_example():
    r = segment_resistance(10.0, 0.5, 3.6e-6)
    assert r == pytest.approx(1.4667e-3, rel=1e-3)


def test_flow_propagation_matches_path_summation_oracle():
    rng = np.random.default_rng(704)
    for _ in range(5):
        tree = random_tree(rng, n_terminals=int(rng.integers(4, 40)))
        out = propagate_flows(tree, PARAMS)
        assert np.allclose(out.flow, oracle_flows(tree, PARAMS.q_perf), rtol=1e-12)


def test_terminal_flow_at_disk_scale():
    # fan with the full benchmark terminal count
    n = 21_991
    rng = np.random.default_rng(3)
    nodes = np.vstack([[0.0, 0.0, 0.0], rng.uniform(-10, 10, size=(n, 3))])
    tree = VesselTree(
        nodes=nodes,
        seg_prox=np.zeros(n, dtype=int),
        seg_dist=np.arange(1, n + 1),
        root=0,
        terminals=np.arange(1, n + 1),
    )
    out = propagate_flows(tree, HemodynamicParams(q_perf=80.0))
    assert np.allclose(out.flow, 80.0 / n)
    assert out.flow[0] == pytest.approx(3.638e-3, rel=1e-3)


def test_flow_conservation_at_junctions():
    rng = np.random.default_rng(11)
    tree = propagate_flows(random_tree(rng, 25), PARAMS)
    # at every interior node: inflow equals sum of child outflows
    for v in range(tree.n_nodes):
        kids = np.nonzero(tree.seg_prox == v)[0]
        if kids.size == 0 or v == tree.root:
            continue
        parent_seg = np.nonzero(tree.seg_dist == v)[0][0]
        extra = PARAMS.q_perf / tree.terminals.size if v in tree.terminals else 0.0
        assert tree.flow[parent_seg] == pytest.approx(tree.flow[kids].sum() + extra, rel=1e-12)


def test_murray_radius_matches_numerical_minimizer():
    for q in (0.05, 1.0, 80.0):
        cost = lambda r: PARAMS.metabolic_demand * np.pi * r**2 + (
            8 * PARAMS.viscosity / np.pi
        ) * q**2 / r**4
        res = minimize_scalar(cost, bounds=(1e-4, 10.0), method="bounded",
                              options={"xatol": 1e-12})
        assert murray_radius(q, PARAMS) == pytest.approx(res.x, rel=1e-6)


def test_murray_radius_table_value():
    # root of the supplying disk tree: Q = 80 mm^3/s -> about 0.63 mm
    assert murray_radius(80.0, PARAMS) == pytest.approx(0.63, abs=0.005)


def test_murray_stationarity():
    q = 2.7
    r = float(murray_radius(q, PARAMS))
    cost = lambda rr: PARAMS.metabolic_demand * np.pi * rr**2 + (
        8 * PARAMS.viscosity / np.pi
    ) * q**2 / rr**4
    assert cost(1.01 * r) > cost(r)
    assert cost(0.99 * r) > cost(r)


def test_power_split_two_to_one_at_murray_radii():
    rng = np.random.default_rng(5)
    tree = propagate_flows(random_tree(rng, 30), PARAMS)
    tree.radius = murray_radius(tree.flow, PARAMS)
    c = tree_cost(tree, PARAMS)
    assert c.p_vol == pytest.approx(2.0 * c.p_vis, rel=1e-10)
    assert c.total == pytest.approx(c.p_vol + c.p_vis)


def test_tree_cost_single_segment_equals_minimizer_value():
    q = 1.0
    cost = lambda r: PARAMS.metabolic_demand * np.pi * r**2 + (
        8 * PARAMS.viscosity / np.pi
    ) * q**2 / r**4
    res = minimize_scalar(cost, bounds=(1e-4, 10.0), method="bounded",
                          options={"xatol": 1e-12})
    tree = VesselTree(
        nodes=np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]),
        seg_prox=[0],
        seg_dist=[1],
        root=0,
        terminals=[1],
        radius=[murray_radius(q, PARAMS)],
        flow=[q],
    )
    assert tree_cost(tree, PARAMS).total == pytest.approx(res.fun, rel=1e-9)


def test_mean_velocity_root_value():
    # Q = 80 mm^3/s through r = 0.63 mm -> about 64 mm/s
    assert mean_velocity(80.0, 0.63) == pytest.approx(64.2, abs=0.2)


def test_node_pressures_match_per_leaf_oracle():
    rng = np.random.default_rng(21)
    tree = propagate_flows(random_tree(rng, 12), PARAMS)
    tree.radius = murray_radius(tree.flow, PARAMS)
    for direction in (1, -1):
        out = node_pressures(tree, 0.4, PARAMS.viscosity, direction=direction)
        oracle = oracle_pressure(tree, 0.4, PARAMS.viscosity, direction=direction)
        assert np.allclose(out.pressure, oracle, rtol=1e-10, atol=1e-14)


def test_pressure_monotone_decreasing_towards_terminals():
    rng = np.random.default_rng(8)
    tree = propagate_flows(random_tree(rng, 20), PARAMS)
    tree.radius = murray_radius(tree.flow, PARAMS)
    out = node_pressures(tree, 0.4, PARAMS.viscosity, direction=1)
    for s in range(tree.n_segments):
        assert out.pressure[tree.seg_dist[s]] < out.pressure[tree.seg_prox[s]]


def test_rescale_realizes_prescribed_drop():
    rng = np.random.default_rng(99)
    tree = propagate_flows(random_tree(rng, 16), PARAMS)
    tree.radius = murray_radius(tree.flow, PARAMS)
    out = rescale_radii_to_drop(tree, 0.2, PARAMS.viscosity)
    # oracle: recompute the flow-weighted mean drop from scratch
    drops, flows = terminal_drops(out, PARAMS.viscosity)
    mean_drop = np.sum(drops * flows) / np.sum(flows)
    assert mean_drop == pytest.approx(0.2, rel=1e-10)


def test_rescale_handles_negative_delta_p():
    rng = np.random.default_rng(100)
    tree = propagate_flows(random_tree(rng, 10), PARAMS)
    tree.radius = murray_radius(tree.flow, PARAMS)
    out = rescale_radii_to_drop(tree, -0.045, PARAMS.viscosity)
    drops, flows = terminal_drops(out, PARAMS.viscosity)
    assert np.sum(drops * flows) / np.sum(flows) == pytest.approx(0.045, rel=1e-10)


def test_assign_hemodynamics_draining_pressure_rises():
    rng = np.random.default_rng(42)
    drain = HemodynamicParams(p_root=0.0, delta_p=-0.045)
    tree = assign_hemodynamics(random_tree(rng, 14), drain)
    # draining tree: terminal pressures sit above the root outlet pressure
    assert np.all(tree.pressure[tree.terminals] > tree.pressure[tree.root])
    assert tree.pressure[tree.root] == pytest.approx(0.0)


def test_structural_validation_errors():
    # two parents for one node
    with pytest.raises(StructureError):
        VesselTree(
            nodes=np.zeros((3, 3)),
            seg_prox=[0, 0],
            seg_dist=[1, 1],
            root=0,
            terminals=[1],
        ).validate()
    # cycle
    with pytest.raises(StructureError):
        VesselTree(
            nodes=np.zeros((3, 3)),
            seg_prox=[0, 1, 2],
            seg_dist=[1, 2, 1],
            root=0,
            terminals=[2],
        ).validate()
    # no terminals
    t = VesselTree(
        nodes=np.zeros((2, 3)),
        seg_prox=[0],
        seg_dist=[1],
        root=0,
        terminals=np.array([], dtype=int),
    )
    with pytest.raises(StructureError):
        propagate_flows(t, PARAMS)


def test_zero_delta_p_rejected():
    rng = np.random.default_rng(1)
    tree = propagate_flows(random_tree(rng, 6), PARAMS)
    tree.radius = murray_radius(tree.flow, PARAMS)
    with pytest.raises(ValueError):
        rescale_radii_to_drop(tree, 0.0, PARAMS.viscosity)


def test_tree_csv_round_trip(tmp_path):
    rng = np.random.default_rng(77)
    tree = assign_hemodynamics(random_tree(rng, 18), PARAMS)
    path = tmp_path / "tree.csv"
    write_tree_csv(tree, path)
    back = read_tree_csv(path)
    assert np.array_equal(back.seg_prox, tree.seg_prox)
    assert np.array_equal(back.seg_dist, tree.seg_dist)
    assert np.array_equal(back.nodes, tree.nodes)  # %.17g round-trips exactly
    assert np.array_equal(back.radius, tree.radius)
    assert np.array_equal(back.flow, tree.flow)
    assert back.root == tree.root
    assert np.array_equal(np.sort(back.terminals), np.sort(tree.terminals))


def test_tree_csv_header_enforced(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("a,b,c\n1,2,3\n")
    with pytest.raises(StructureError):
        read_tree_csv(path)
