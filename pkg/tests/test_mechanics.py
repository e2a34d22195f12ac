"""Finite-growth hyperelasticity with boundary springs and porosity.

Oracles: independently assembled small-strain stiffness, central finite
differences of the residual at random states, the stress-free uniformly
grown configuration, and root-finding on the pressure-porosity relation.
"""

import numpy as np
import pytest
from scipy.optimize import brentq

from vasogrow.domain import PerfusionDomain
from vasogrow.errors import PhysicalRangeError
from vasogrow.mechanics import (
    MaterialParams,
    assemble_mechanics,
    contact_traction,
    deformation_gradients,
    porosity_field,
    solve_displacement,
)
from vasogrow.mesh import box_mesh, delaunay_mesh, rect_mesh


def test_material_params_derived_moduli():
    mp = MaterialParams(young=5.0, poisson=0.35)
    assert mp.mu == pytest.approx(5.0 / 2.7, rel=1e-12)
    assert mp.lam == pytest.approx(5.0 * 0.35 / (1.35 * 0.3), rel=1e-12)
    assert mp.bulk == pytest.approx(5.0 / (3.0 * 0.3), rel=1e-12)
    with pytest.raises(ValueError):
        MaterialParams(poisson=0.5)
    with pytest.raises(ValueError):
        MaterialParams(young=-1.0)


# ----------------------------------------------------------------------
# contact springs


def test_contact_traction_values():
    mp = MaterialParams()
    z0, dz0 = contact_traction(np.array([0.0]), mp)
    assert z0[0] == 0.0
    assert dz0[0] == pytest.approx(mp.contact_alpha / mp.contact_u0, rel=1e-12)
    z1, _ = contact_traction(np.array([mp.contact_u0]), mp)
    assert abs(z1[0] - mp.contact_alpha * np.tanh(1.0)) < 1e-12
    zbig, dzbig = contact_traction(np.array([50.0 * mp.contact_u0]), mp)
    assert zbig[0] == pytest.approx(mp.contact_alpha, rel=1e-12)
    assert dzbig[0] < 1e-12


def test_contact_traction_is_odd():
    mp = MaterialParams()
    u = np.linspace(-3.0, 3.0, 7)
    z, dz = contact_traction(u, mp)
    assert np.allclose(z, -z[::-1], atol=1e-15)
    assert np.all(dz > 0.0) and np.allclose(dz, dz[::-1], atol=1e-15)


# ----------------------------------------------------------------------
# residual/tangent consistency


def _random_state(mesh, rng, scale=0.05):
    m = mesh.n_elements
    n = mesh.n_vertices
    u = scale * rng.standard_normal((n, mesh.dim))
    theta = rng.uniform(1.0, 1.5, size=m)
    p = rng.uniform(-0.01, 0.02, size=m)
    return u, theta, p


def test_tangent_matches_finite_differences_2d():
    mesh = rect_mesh(2, 2)
    mp = MaterialParams()
    rng = np.random.default_rng(11)
    for _ in range(10):
        u, theta, p = _random_state(mesh, rng)
        R, K = assemble_mechanics(mesh, u, theta, p, mp)
        direction = rng.standard_normal(u.size)
        h = 1e-6
        up = u + h * direction.reshape(u.shape)
        um = u - h * direction.reshape(u.shape)
        Rp, _ = assemble_mechanics(mesh, up, theta, p, mp)
        Rm, _ = assemble_mechanics(mesh, um, theta, p, mp)
        fd = (Rp - Rm) / (2.0 * h)
        an = K @ direction
        assert np.linalg.norm(an - fd) < 1e-6 * max(np.linalg.norm(an), 1e-12)


def test_tangent_matches_finite_differences_3d():
    mesh = box_mesh(1, 1, 1)
    mp = MaterialParams()
    rng = np.random.default_rng(12)
    for _ in range(4):
        u, theta, p = _random_state(mesh, rng, scale=0.03)
        R, K = assemble_mechanics(mesh, u, theta, p, mp)
        direction = rng.standard_normal(u.size)
        h = 1e-6
        Rp, _ = assemble_mechanics(mesh, u + h * direction.reshape(u.shape), theta, p, mp)
        Rm, _ = assemble_mechanics(mesh, u - h * direction.reshape(u.shape), theta, p, mp)
        fd = (Rp - Rm) / (2.0 * h)
        an = K @ direction
        assert np.linalg.norm(an - fd) < 1e-6 * max(np.linalg.norm(an), 1e-12)


def test_small_strain_limit_matches_linear_elasticity():
    # independent plane-strain assembly from B-matrices and the D matrix
    mesh = rect_mesh(2, 3)
    mp = MaterialParams(contact_alpha=0.0)
    _, K = assemble_mechanics(
        mesh, np.zeros((mesh.n_vertices, 2)),
        np.ones(mesh.n_elements), np.zeros(mesh.n_elements), mp,
    )
    lam, mu = mp.lam, mp.mu
    D = np.array([
        [lam + 2 * mu, lam, 0.0], [lam, lam + 2 * mu, 0.0], [0.0, 0.0, mu],
    ])
    n = mesh.n_vertices
    K_ref = np.zeros((2 * n, 2 * n))
    verts = mesh.vertices[mesh.elements]
    areas = mesh.volumes()
    for e in range(mesh.n_elements):
        x = verts[e]
        J = np.stack([x[1] - x[0], x[2] - x[0]], axis=1)
        G = np.linalg.inv(J).T @ np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]]).T
        G = G.T  # (3, 2) nodal gradients
        B = np.zeros((3, 6))
        for a in range(3):
            B[0, 2 * a] = G[a, 0]
            B[1, 2 * a + 1] = G[a, 1]
            B[2, 2 * a] = G[a, 1]
            B[2, 2 * a + 1] = G[a, 0]
        Ke = areas[e] * B.T @ D @ B
        idx = np.concatenate([[2 * v, 2 * v + 1] for v in mesh.elements[e]])
        K_ref[np.ix_(idx, idx)] += Ke
    assert np.allclose(K.toarray(), K_ref, rtol=1e-9, atol=1e-12)


# ----------------------------------------------------------------------
# displacement solves


def test_zero_growth_zero_displacement():
    mesh = rect_mesh(3, 3)
    mp = MaterialParams()
    sol = solve_displacement(
        mesh, np.ones(mesh.n_elements), np.zeros(mesh.n_elements), mp,
    )
    assert np.allclose(sol.u, 0.0, atol=1e-12)
    assert np.allclose(sol.J, 1.0, atol=1e-12)


def test_free_growth_is_stress_free_dilation():
    dom = PerfusionDomain.disk(5.0)
    mesh = delaunay_mesh(dom, 0.8)
    mp = MaterialParams(contact_alpha=0.0)
    theta = np.full(mesh.n_elements, 1.7)
    sol = solve_displacement(
        mesh, theta, np.zeros(mesh.n_elements), mp,
    )
    assert np.abs(sol.J - 1.7).max() < 1e-8
    assert np.abs(sol.cauchy).max() < 1e-8 * mp.mu
    # planar dilation: u = (sqrt(theta) - 1) x up to a rigid motion
    g = np.sqrt(1.7)
    F_expected = g * np.eye(2)
    assert np.allclose(sol.F, F_expected[None], atol=1e-7)


def test_free_growth_3d_box():
    mesh = box_mesh(2, 2, 2)
    mp = MaterialParams(contact_alpha=0.0)
    theta = np.full(mesh.n_elements, 1.3)
    sol = solve_displacement(mesh, theta, np.zeros(mesh.n_elements), mp)
    assert np.abs(sol.J - 1.3).max() < 1e-8
    assert np.abs(sol.cauchy).max() < 1e-8 * mp.mu


def test_contact_confines_growth():
    dom = PerfusionDomain.disk(5.0)
    mesh = delaunay_mesh(dom, 0.8)
    theta = np.full(mesh.n_elements, 1.4)
    p = np.zeros(mesh.n_elements)
    free = solve_displacement(mesh, theta, p, MaterialParams(contact_alpha=0.0))
    held = solve_displacement(mesh, theta, p, MaterialParams(contact_alpha=0.2))
    assert held.J.mean() < free.J.mean()
    assert held.J.mean() > 1.0  # growth still wins overall


def test_deformation_gradients_affine_field():
    mesh = rect_mesh(3, 2, lengths=(2.0, 1.0))
    A = np.array([[1.1, 0.2], [-0.05, 0.9]])
    u = mesh.vertices @ (A - np.eye(2)).T
    F, J = deformation_gradients(mesh, u)
    assert np.allclose(F, A[None], atol=1e-13)
    assert np.allclose(J, np.linalg.det(A), atol=1e-13)


# ----------------------------------------------------------------------
# porosity postprocess


def test_porosity_zero_pressure():
    mp = MaterialParams(porosity0=0.2)
    phi = porosity_field(np.zeros(3), np.array([1.0, 1.25, 2.0]), mp)
    assert phi[0] == pytest.approx(0.2, abs=1e-14)
    assert phi[1] == pytest.approx(1.0 - 0.8 / 1.25, rel=1e-12)


def test_porosity_matches_root_finder():
    mp = MaterialParams(porosity0=0.2)
    rng = np.random.default_rng(4)
    p = rng.uniform(-0.5 * mp.bulk, 2.0 * mp.bulk, size=20)
    J = rng.uniform(0.8, 2.0, size=20)
    phi = porosity_field(p, J, mp)
    for k in range(20):
        f = lambda js: p[k] + mp.bulk * (1.0 / (1.0 - mp.porosity0) - 1.0 / js)
        js = brentq(f, 1e-9, 1e9, xtol=1e-15, rtol=1e-15)
        assert phi[k] == pytest.approx(1.0 - js / J[k], abs=1e-12)


def test_porosity_out_of_range_pressure():
    mp = MaterialParams(porosity0=0.2)
    bad = -mp.bulk / (1.0 - mp.porosity0)
    with pytest.raises(PhysicalRangeError):
        porosity_field(np.array([bad]), np.ones(1), mp)
