"""Quasi-static finite growth: Neo-Hookean skeleton, pore pressure,
boundary springs, and the porosity postprocess.

The deformation gradient splits multiplicatively into an elastic part and
an isotropic growth part F_g = theta^(1/d) I, so a uniformly grown body
free of constraints is stress-free with J = theta.  The second
Piola-Kirchhoff stress carries an additional -J p C^-1 term from the pore
fluid.  All exterior faces rest on saturating tanh springs; rigid-body
rotations (and translations when the springs are off) are removed with
Lagrange multiplier rows.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConvergenceError, PhysicalRangeError
from .mesh import SimplicialMesh

logger = logging.getLogger(__name__)

__all__ = [
    "MaterialParams",
    "MechanicsSolution",
    "contact_traction",
    "pk2_stress",
    "assemble_mechanics",
    "deformation_gradients",
    "solve_displacement",
    "porosity_field",
]


@dataclass(frozen=True)
class MaterialParams:
    """Tissue constants (kg-mm-s units, stresses in kg mm^-1 s^-2).

    young/poisson: skeleton elasticity; porosity0: reference fluid
    fraction; contact_alpha: saturation traction of the boundary springs
    (0 disables them); contact_u0: displacement scale of the springs;
    theta_max, k_growth (1/h), m_growth: growth-law constants.
    """

    young: float = 5.0
    poisson: float = 0.35
    porosity0: float = 0.2
    contact_alpha: float = 5e-3
    contact_u0: float = 1.0
    theta_max: float = 2.0
    k_growth: float = 0.01
    m_growth: float = 1.0

    def __post_init__(self) -> None:
        if self.young <= 0.0:
            raise ValueError("Young's modulus must be positive")
        if not 0.0 < self.poisson < 0.5:
            raise ValueError("Poisson ratio must lie in (0, 0.5)")
        if not 0.0 < self.porosity0 < 1.0:
            raise ValueError("reference porosity must lie in (0, 1)")
        if self.theta_max <= 1.0:
            raise ValueError("growth limit theta_max must exceed 1")
        if self.k_growth <= 0.0:
            raise ValueError("growth rate constant must be positive")

    @property
    def lam(self) -> float:
        nu = self.poisson
        return self.young * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))

    @property
    def mu(self) -> float:
        return self.young / (2.0 * (1.0 + self.poisson))

    @property
    def bulk(self) -> float:
        return self.young / (3.0 * (1.0 - 2.0 * self.poisson))


# ----------------------------------------------------------------------
# constitutive pieces


def contact_traction(u_n: np.ndarray, params: MaterialParams):
    """Spring traction and stiffness for normal boundary displacement."""
    u_n = np.asarray(u_n, dtype=float)
    if params.contact_alpha == 0.0:
        return np.zeros_like(u_n), np.zeros_like(u_n)
    x = u_n / params.contact_u0
    zeta = params.contact_alpha * np.tanh(x)
    with np.errstate(over="ignore"):
        sech2 = 1.0 / np.cosh(x) ** 2
    return zeta, params.contact_alpha / params.contact_u0 * sech2


def pk2_stress(
    C: np.ndarray, theta: np.ndarray, p_micro: np.ndarray,
    params: MaterialParams, want_tangent: bool = True,
) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Second Piola-Kirchhoff stress and material tangent per element.

    C is (m, d, d); theta and p_micro are (m,).  The tangent is
    CC = 2 dS/dC with the pore pressure held fixed (staggered scheme).
    """
    d = C.shape[-1]
    lam, mu = params.lam, params.mu
    Ci = np.linalg.inv(C)
    detC = np.linalg.det(C)
    if np.any(detC <= 0.0):
        raise PhysicalRangeError("element inverted: det C <= 0")
    L = np.log(detC)
    J = np.sqrt(detC)
    lnt = np.log(theta)
    g2 = theta ** (2.0 / d)
    eye = np.eye(d)
    coef_l = 0.5 * lam * (L - 2.0 * lnt) - J * p_micro
    S = coef_l[:, None, None] * Ci + mu * ((1.0 / g2)[:, None, None] * eye - Ci)
    if not want_tangent:
        return S, None
    coef_a = lam - J * p_micro
    coef_b = 2.0 * mu + 2.0 * J * p_micro - lam * (L - 2.0 * lnt)
    CiCi = np.einsum("eij,ekl->eijkl", Ci, Ci)
    sym = 0.5 * (
        np.einsum("eik,ejl->eijkl", Ci, Ci) + np.einsum("eil,ejk->eijkl", Ci, Ci)
    )
    CC = coef_a[:, None, None, None, None] * CiCi \
        + coef_b[:, None, None, None, None] * sym
    return S, CC


# ----------------------------------------------------------------------
# assembly


_DN_TRI = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
_DN_TET = np.array([
    [-1.0, -1.0, -1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0],
])


def _gradients(mesh: SimplicialMesh):
    """Physical shape gradients (m, nloc, d) and element measures."""
    verts = mesh.vertices[mesh.elements]
    jac = np.stack([verts[:, k + 1] - verts[:, 0] for k in range(mesh.dim)], axis=2)
    inv_jt = np.linalg.inv(jac).transpose(0, 2, 1)
    dn = _DN_TRI if mesh.dim == 2 else _DN_TET
    G = np.einsum("mde,ne->mnd", inv_jt, dn)
    return G, mesh.volumes()


def deformation_gradients(mesh: SimplicialMesh, u: np.ndarray):
    """Element deformation gradients and Jacobians from nodal displacements."""
    G, _ = _gradients(mesh)
    u_el = u[mesh.elements]
    F = np.eye(mesh.dim)[None] + np.einsum("eai,eaj->eij", u_el, G)
    return F, np.linalg.det(F)


def assemble_mechanics(
    mesh: SimplicialMesh,
    u: np.ndarray,
    theta: np.ndarray,
    p_micro: np.ndarray,
    params: MaterialParams,
):
    """Internal-force residual and consistent tangent (interleaved dofs).

    Includes the boundary-spring contributions (midpoint rule per face).
    Raises PhysicalRangeError on inverted elements so callers can cut
    the load increment.
    """
    dim = mesh.dim
    G, vol = _gradients(mesh)
    u_el = u[mesh.elements]
    F = np.eye(dim)[None] + np.einsum("eai,eaj->eij", u_el, G)
    if np.any(np.linalg.det(F) <= 0.0):
        raise PhysicalRangeError("element inverted during assembly")
    C = np.einsum("eki,ekj->eij", F, F)
    S, CC = pk2_stress(C, theta, p_micro, params)

    P = np.einsum("eij,ejk->eik", F, S)
    r_el = np.einsum("eik,eak,e->eai", P, G, vol)
    geo = np.einsum("eaj,ejl,ebl,e->eab", G, S, G, vol)
    mat = np.einsum("eaj,eim,emjpq,ekp,ebq,e->eaibk", G, F, CC, F, G, vol)
    nloc = G.shape[1]
    k_el = mat + geo[:, :, None, :, None] * np.eye(dim)[None, None, :, None, :]

    ndof = mesh.n_vertices * dim
    dofs = (mesh.elements[:, :, None] * dim + np.arange(dim)[None, None, :])
    dofs = dofs.reshape(mesh.n_elements, nloc * dim)
    R = np.bincount(dofs.ravel(), weights=r_el.reshape(-1), minlength=ndof)
    ii = np.repeat(dofs, nloc * dim, axis=1).ravel()
    jj = np.tile(dofs, (1, nloc * dim)).ravel()
    K = sp.coo_matrix(
        (k_el.reshape(mesh.n_elements, -1).ravel(), (ii, jj)),
        shape=(ndof, ndof),
    ).tocsr()

    if params.contact_alpha != 0.0:
        normals, meas = mesh.face_normals_and_measures()
        faces = mesh.boundary_faces
        nv = faces.shape[1]
        u_mid = u[faces].mean(axis=1)
        u_n = np.einsum("fd,fd->f", u_mid, normals)
        zeta, dzeta = contact_traction(u_n, params)
        rf = (meas * zeta)[:, None, None] * normals[:, None, :] / nv
        rf = np.broadcast_to(rf, (faces.shape[0], nv, dim))
        fdofs = (faces[:, :, None] * dim + np.arange(dim)[None, None, :])
        fdofs = fdofs.reshape(faces.shape[0], nv * dim)
        R = R + np.bincount(fdofs.ravel(), weights=rf.reshape(-1), minlength=ndof)
        nn = np.einsum("fi,fk->fik", normals, normals)
        kf = (meas * dzeta)[:, None, None, None, None] \
            * nn[:, None, :, None, :] / (nv * nv)
        kf = np.broadcast_to(kf, (faces.shape[0], nv, dim, nv, dim))
        fi = np.repeat(fdofs, nv * dim, axis=1).ravel()
        fj = np.tile(fdofs, (1, nv * dim)).ravel()
        K = K + sp.coo_matrix(
            (kf.reshape(faces.shape[0], -1).ravel(), (fi, fj)),
            shape=(ndof, ndof),
        ).tocsr()
    return R, K


# ----------------------------------------------------------------------
# nonlinear solve


@dataclass
class MechanicsSolution:
    u: np.ndarray
    F: np.ndarray
    J: np.ndarray
    cauchy: np.ndarray
    newton_iterations: int
    substeps: int


def _rigid_modes(mesh: SimplicialMesh, include_translations: bool) -> np.ndarray:
    dim = mesh.dim
    x = mesh.vertices - mesh.vertices.mean(axis=0)
    n = mesh.n_vertices
    rows = []
    if include_translations:
        for k in range(dim):
            mode = np.zeros((n, dim))
            mode[:, k] = 1.0
            rows.append(mode.ravel())
    if dim == 2:
        mode = np.column_stack([-x[:, 1], x[:, 0]])
        rows.append(mode.ravel())
    else:
        for axis in range(3):
            omega = np.zeros(3)
            omega[axis] = 1.0
            rows.append(np.cross(omega[None, :], x).ravel())
    C = np.array(rows)
    return C / np.linalg.norm(C, axis=1, keepdims=True)


def _newton(mesh, u0, lam0, theta, p_micro, params, C, rtol, max_iter):
    u = u0.copy()
    lam = lam0.copy()
    r0 = None
    nc = C.shape[0]
    for it in range(max_iter):
        try:
            R, K = assemble_mechanics(mesh, u, theta, p_micro, params)
        except PhysicalRangeError:
            return None
        top = R + C.T @ lam
        bot = C @ u.ravel()
        rn = np.sqrt(np.linalg.norm(top) ** 2 + np.linalg.norm(bot) ** 2)
        if not np.isfinite(rn):
            return None
        if r0 is None:
            r0 = rn
        if rn <= max(rtol * r0, 1e-14):
            return u, lam, it
        A = sp.bmat([[K, sp.csr_matrix(C.T)], [sp.csr_matrix(C), None]],
                    format="csc")
        try:
            delta = spla.splu(A).solve(np.concatenate([-top, -bot]))
        except RuntimeError:
            return None
        u = u + delta[:-nc].reshape(u.shape)
        lam = lam + delta[-nc:]
    return None


def solve_displacement(
    mesh: SimplicialMesh,
    theta: np.ndarray,
    p_micro: np.ndarray,
    params: MaterialParams,
    rtol: float = 1e-8,
    max_newton: int = 25,
    min_step: float = 1.0 / 64.0,
) -> MechanicsSolution:
    """Newton solve of the grown equilibrium with load substepping.

    The growth factor and pore pressure ramp together from the trivial
    state; each failed increment is halved down to ``min_step``.
    """
    theta = np.asarray(theta, dtype=float)
    p_micro = np.broadcast_to(np.asarray(p_micro, dtype=float),
                              (mesh.n_elements,))
    C = _rigid_modes(mesh, include_translations=params.contact_alpha == 0.0)
    u = np.zeros((mesh.n_vertices, mesh.dim))
    lam = np.zeros(C.shape[0])
    done, step = 0.0, 1.0
    total_newton, substeps = 0, 0
    while done < 1.0:
        s = min(1.0, done + step)
        res = _newton(
            mesh, u, lam, 1.0 + s * (theta - 1.0), s * p_micro, params,
            C, rtol, max_newton,
        )
        if res is None:
            step *= 0.5
            if step < min_step:
                raise ConvergenceError(
                    "mechanics Newton failed below the minimum load step"
                )
            continue
        u, lam, iters = res
        total_newton += iters
        substeps += 1
        done = s
        step = min(step * 2.0, 1.0)
    F, J = deformation_gradients(mesh, u)
    Cfin = np.einsum("eki,ekj->eij", F, F)
    S, _ = pk2_stress(Cfin, theta, p_micro, params, want_tangent=False)
    cauchy = np.einsum("e,eij,ejk,elk->eil", 1.0 / J, F, S, F)
    logger.info(
        "mechanics solve: %d substeps, %d Newton iterations, "
        "J range [%.6g, %.6g]", substeps, total_newton, J.min(), J.max(),
    )
    return MechanicsSolution(
        u=u, F=F, J=J, cauchy=cauchy,
        newton_iterations=total_newton, substeps=substeps,
    )


# ----------------------------------------------------------------------
# porosity


def porosity_field(p_micro: np.ndarray, J: np.ndarray,
                   params: MaterialParams) -> np.ndarray:
    """Current fluid fraction from pore pressure and volume change.

    The skeleton volume ratio solves p = -kappa (1/(1-phi0) - 1/J_skel);
    pressures at or below -kappa/(1-phi0) have no physical root.
    """
    p = np.asarray(p_micro, dtype=float)
    denom = p / params.bulk + 1.0 / (1.0 - params.porosity0)
    if np.any(denom <= 0.0):
        raise PhysicalRangeError(
            "pore pressure at or below the skeleton collapse limit"
        )
    j_skel = 1.0 / denom
    return 1.0 - j_skel / np.asarray(J, dtype=float)
