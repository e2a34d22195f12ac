"""Hierarchy splitting and per-element averaging of tree data.

Oracles: hand enumeration of a three-level tree, closed-form permeability
of axis-aligned tubes, rotation equivariance, hand perfusion coefficients,
Gaussian peak/decay/mass values, and translation invariance of the fields.
"""

import numpy as np
import pytest

from vasogrow.domain import PerfusionDomain
from vasogrow.errors import ConfigError, DomainError
from vasogrow.homogenize import (
    ElementParams,
    HierarchySplit,
    HomogenizationConfig,
    InflowSource,
    homogenize_all,
    permeability_tensor,
    split_hierarchy,
)
from vasogrow.mesh import delaunay_mesh
from vasogrow.synthesis import SynthesisConfig, generate_coupled_trees
from vasogrow.tree import HemodynamicParams, VesselTree

ETA = 3.6e-6


def _three_level_tree() -> VesselTree:
    # root(0) -> n1; n1 -> n2, n3; n2 -> t4, t5; n3 -> t6, t7
    nodes = np.array([
        [0.0, 3.0, 0.0],
        [0.0, 2.0, 0.0],
        [-1.0, 1.0, 0.0],
        [1.0, 1.0, 0.0],
        [-1.5, 0.0, 0.0],
        [-0.5, 0.0, 0.0],
        [0.5, 0.0, 0.0],
        [1.5, 0.0, 0.0],
    ])
    prox = np.array([0, 1, 1, 2, 2, 3, 3])
    dist = np.array([1, 2, 3, 4, 5, 6, 7])
    radius = np.array([0.30, 0.15, 0.15, 0.05, 0.05, 0.05, 0.05])
    flow = np.array([4.0, 2.0, 2.0, 1.0, 1.0, 1.0, 1.0])
    t = VesselTree(
        nodes=nodes, seg_prox=prox, seg_dist=dist, root=0,
        terminals=np.array([4, 5, 6, 7]), radius=radius, flow=flow,
    )
    # simple synthetic pressures falling with depth
    t.pressure = np.array([0.4, 0.3, 0.25, 0.25, 0.2, 0.2, 0.2, 0.2])
    return t


# ----------------------------------------------------------------------
# split_hierarchy


def test_split_three_level_hand_enumeration():
    tree = _three_level_tree()
    split = split_hierarchy(tree, 0.1)
    assert np.array_equal(np.flatnonzero(split.upper), [0, 1, 2])
    assert np.array_equal(np.flatnonzero(split.lower), [3, 4, 5, 6])
    assert sorted(split.v_conn.tolist()) == [2, 3]
    assert sorted(split.a_conn.tolist()) == [3, 4, 5, 6]


def test_split_all_upper_when_threshold_below_min():
    tree = _three_level_tree()
    split = split_hierarchy(tree, 0.01)
    assert split.upper.all() and not split.lower.any()
    assert split.v_conn.size == 0 and split.a_conn.size == 0


def test_split_all_lower_when_threshold_above_max():
    tree = _three_level_tree()
    split = split_hierarchy(tree, 1.0)
    assert split.lower.all() and not split.upper.any()
    # the root node acts as the single connector feeding the bed
    assert split.v_conn.tolist() == [0]
    assert split.a_conn.tolist() == [0]


def test_split_requires_positive_threshold():
    with pytest.raises(DomainError):
        split_hierarchy(_three_level_tree(), 0.0)


def test_split_partitions_only_active_segments():
    tree = _three_level_tree()
    tree.active[3] = False
    split = split_hierarchy(tree, 0.1)
    assert not split.upper[3] and not split.lower[3]
    assert 3 not in split.a_conn.tolist()


# ----------------------------------------------------------------------
# permeability_tensor


def test_permeability_single_axis_aligned_tube():
    a = np.array([[-0.5, 0.0, 0.0]])
    b = np.array([[0.5, 0.0, 0.0]])
    r = np.array([0.05])
    v_av = np.pi * 1.0**2  # unit-thickness disk
    K = permeability_tensor(
        np.zeros(3), 1.0, a, b, r, ETA, dim=2
    )
    k_xx = np.pi * r[0] ** 4 * 1.0 / (8.0 * ETA * v_av)
    assert K[0, 0] == pytest.approx(k_xx, rel=1e-12)
    assert abs(K[1, 1]) < 1e-18 and abs(K[0, 1]) < 1e-18


def test_permeability_clips_to_averaging_volume():
    # only the first half of the tube lies inside the unit circle
    a = np.array([[0.0, 0.0, 0.0]])
    b = np.array([[2.0, 0.0, 0.0]])
    r = np.array([0.05])
    K = permeability_tensor(np.zeros(3), 1.0, a, b, r, ETA, dim=2)
    v_av = np.pi
    k_xx = np.pi * r[0] ** 4 * 1.0 / (8.0 * ETA * v_av)  # clipped length 1
    assert K[0, 0] == pytest.approx(k_xx, rel=1e-12)


def test_permeability_empty_av_is_zero():
    a = np.array([[10.0, 0.0, 0.0]])
    b = np.array([[11.0, 0.0, 0.0]])
    K = permeability_tensor(np.zeros(3), 1.0, a, b, np.array([0.1]), ETA, dim=2)
    assert np.all(K == 0.0)


def test_permeability_rotation_equivariance():
    rng = np.random.default_rng(5)
    a = rng.uniform(-0.8, 0.8, size=(20, 3))
    b = a + rng.uniform(-0.5, 0.5, size=(20, 3))
    r = rng.uniform(0.02, 0.08, size=20)
    K = permeability_tensor(np.zeros(3), 2.0, a, b, r, ETA, dim=3)
    ang = 0.7
    R = np.array([
        [np.cos(ang), -np.sin(ang), 0.0],
        [np.sin(ang), np.cos(ang), 0.0],
        [0.0, 0.0, 1.0],
    ])
    K_rot = permeability_tensor(
        np.zeros(3), 2.0, a @ R.T, b @ R.T, r, ETA, dim=3
    )
    assert np.allclose(K_rot, R @ K @ R.T, atol=1e-12 * max(1.0, K.max()))


def test_permeability_symmetric_psd():
    rng = np.random.default_rng(9)
    a = rng.uniform(-1.0, 1.0, size=(30, 3))
    b = a + rng.uniform(-0.4, 0.4, size=(30, 3))
    K = permeability_tensor(
        np.zeros(3), 1.5, a, b, rng.uniform(0.01, 0.1, 30), ETA, dim=3
    )
    assert np.allclose(K, K.T)
    assert np.linalg.eigvalsh(K).min() >= -1e-14


# ----------------------------------------------------------------------
# inflow source


def test_source_peak_and_decay():
    src = InflowSource(
        nodes=np.array([[0.0, 0.0, 0.0]]), flows=np.array([1.0]),
        sigma=0.2, dim=2,
    )
    peak = 1.0 / (2.0 * np.pi * 0.2**2)
    assert src(np.zeros((1, 3)))[0] == pytest.approx(peak, rel=1e-14)
    far = src(np.array([[10 * 0.2, 0.0, 0.0]]))[0]
    assert far < 1e-20 * peak


def test_source_mass_within_one_percent():
    dom = PerfusionDomain.disk(5.0)
    mesh = delaunay_mesh(dom, 0.25)
    rng = np.random.default_rng(2)
    pts = dom.sample_uniform(40, rng) * 0.7  # keep nodes away from the rim
    flows = rng.uniform(0.5, 2.0, size=40)
    src = InflowSource(nodes=pts, flows=flows, sigma=0.2, dim=2)
    cents = np.column_stack([mesh.centroids(), np.zeros(mesh.n_elements)])
    total = float(np.sum(src(cents) * np.abs(mesh.volumes())))
    assert abs(total - flows.sum()) / flows.sum() < 0.01


def test_source_requires_positive_sigma():
    with pytest.raises(DomainError):
        InflowSource(
            nodes=np.zeros((1, 3)), flows=np.ones(1), sigma=0.0, dim=2
        )


# ----------------------------------------------------------------------
# homogenize_all on a synthesized coupled scene


@pytest.fixture(scope="module")
def scene():
    dom = PerfusionDomain.disk(5.0)
    cfg = SynthesisConfig(n_terminals=12, seed=7)
    p_sup = HemodynamicParams(q_perf=10.0)
    p_dra = HemodynamicParams(q_perf=10.0, p_root=0.0, delta_p=-0.045)
    coupled = generate_coupled_trees(
        dom, np.array([0.0, 5.0, 0.0]), np.array([0.0, -5.0, 0.0]),
        p_sup, p_dra, cfg,
    )
    mesh = delaunay_mesh(dom, 0.6)
    # threshold just above both trees' terminal radii so that every
    # root-to-terminal path enters the lower hierarchy
    r_term = 0.0
    for t in (coupled.supply, coupled.drain):
        par = t.parent_segment()[t.terminals]
        r_term = max(r_term, float(t.radius[par].max()))
    hcfg = HomogenizationConfig(r_thresh=1.05 * r_term, av_radius=2.5)
    return dom, mesh, coupled, hcfg


def test_homogenize_all_field_invariants(scene):
    _, mesh, coupled, hcfg = scene
    ep = homogenize_all(
        mesh, coupled.supply, coupled.drain,
        coupled.params_supply, coupled.params_drain, hcfg,
    )
    m = mesh.n_elements
    assert ep.k_supply.shape == (m, 3, 3) and ep.k_drain.shape == (m, 3, 3)
    for K in (ep.k_supply, ep.k_drain, ep.k_micro):
        assert np.allclose(K, np.swapaxes(K, 1, 2))
        eig = np.linalg.eigvalsh(K)
        assert eig.min() >= -1e-14
    assert np.all(ep.beta_supply >= 0.0)
    assert np.all(ep.beta_drain >= 0.0)
    assert np.all(ep.beta_out >= 0.0)
    assert np.all(ep.theta_in >= 0.0)
    assert ep.outflow.any()
    assert np.array_equal(ep.outflow, ep.beta_out > 0.0)
    # some elements see supply terminals, so the coupling is alive
    assert ep.beta_supply.max() > 0.0 and ep.beta_drain.max() > 0.0
    # micro tensor: isotropic default value
    assert np.allclose(ep.k_micro, (1.0 / 180.0) * np.eye(3)[None, :, :])


def test_homogenize_source_sums_to_connecting_flow(scene):
    _, mesh, coupled, hcfg = scene
    ep = homogenize_all(
        mesh, coupled.supply, coupled.drain,
        coupled.params_supply, coupled.params_drain, hcfg,
    )
    # the Gaussian source carries the full flow entering the lower
    # hierarchy of the supplying tree
    split = split_hierarchy(coupled.supply, hcfg.r_thresh)
    q_conn = coupled.supply.flow[split.a_conn].sum()
    assert ep.source.flows.sum() == pytest.approx(q_conn, rel=1e-12)
    assert q_conn == pytest.approx(coupled.params_supply.q_perf, rel=1e-9)


def test_homogenize_translation_invariance(scene):
    dom, mesh, coupled, hcfg = scene
    ep0 = homogenize_all(
        mesh, coupled.supply, coupled.drain,
        coupled.params_supply, coupled.params_drain, hcfg,
    )
    shift = np.array([8.0, -4.0, 0.0])
    mesh2 = type(mesh)(
        vertices=mesh.vertices + shift[: mesh.vertices.shape[1]],
        elements=mesh.elements,
        boundary_faces=mesh.boundary_faces,
        boundary_elems=mesh.boundary_elems,
        boundary_tags=mesh.boundary_tags,
    )
    sup2 = coupled.supply.copy()
    sup2.nodes = sup2.nodes + shift
    dra2 = coupled.drain.copy()
    dra2.nodes = dra2.nodes + shift
    ep1 = homogenize_all(
        mesh2, sup2, dra2,
        coupled.params_supply, coupled.params_drain, hcfg,
    )
    # the betas divide by a pressure gap that can be small, amplifying
    # last-bit coordinate rounding; the comparison is still far tighter
    # than any membership flip could produce
    assert np.allclose(ep1.beta_supply, ep0.beta_supply, rtol=5e-6, atol=1e-15)
    assert np.allclose(ep1.beta_drain, ep0.beta_drain, rtol=5e-6, atol=1e-15)
    assert np.allclose(ep1.beta_out, ep0.beta_out, rtol=5e-6, atol=1e-15)
    assert np.allclose(ep1.theta_in, ep0.theta_in, rtol=1e-9, atol=1e-20)
    assert np.allclose(ep1.k_supply, ep0.k_supply, rtol=1e-9, atol=1e-18)


def test_homogenize_sealed_segments_contribute_nothing(scene):
    _, mesh, coupled, hcfg = scene
    ep0 = homogenize_all(
        mesh, coupled.supply, coupled.drain,
        coupled.params_supply, coupled.params_drain, hcfg,
    )
    # seal every supply segment except the path needed for structure:
    # simply deactivate all lower supply segments in a corner and check
    # the betas cannot increase anywhere
    sup = coupled.supply.copy()
    split = split_hierarchy(sup, hcfg.r_thresh)
    par = sup.parent_segment()[sup.terminals]
    seal = np.setdiff1d(par, split.a_conn)[:4]  # keep the bed connected
    sup.active[seal] = False
    sup.flow[seal] = 0.0
    ep1 = homogenize_all(
        mesh, sup, coupled.drain,
        coupled.params_supply, coupled.params_drain, hcfg,
    )
    # permeability mass can only go down when vessels are sealed
    tr0 = np.trace(ep0.k_supply, axis1=1, axis2=2)
    tr1 = np.trace(ep1.k_supply, axis1=1, axis2=2)
    assert np.all(tr1 <= tr0 + 1e-18)
    assert tr1.sum() < tr0.sum()


def test_homogenize_without_drain_connectors_raises(scene):
    _, mesh, coupled, hcfg = scene
    # threshold below every radius: no lower hierarchy, no outflow region
    bad = HomogenizationConfig(r_thresh=1e-6, av_radius=1.0)
    with pytest.raises(ConfigError):
        homogenize_all(
            mesh, coupled.supply, coupled.drain,
            coupled.params_supply, coupled.params_drain, bad,
        )


def test_scale_separation_warning(scene):
    _, mesh, coupled, hcfg = scene
    tight = HomogenizationConfig(r_thresh=hcfg.r_thresh, av_radius=0.5)
    with pytest.warns(UserWarning):
        homogenize_all(
            mesh, coupled.supply, coupled.drain,
            coupled.params_supply, coupled.params_drain, tight,
        )
