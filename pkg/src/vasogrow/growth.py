"""Hyperperfusion-driven tissue growth: evolution law, configuration
transforms, and the staggered perfusion-growth-mechanics loop.

Each step solves the three-compartment Darcy problem on the fixed
reference mesh (only the capillary permeability is pulled back through
the current deformation), compares the spatial supply-to-capillary
exchange against its homeostatic reference, advances the growth factor
with an explicit Euler step, and re-equilibrates the mechanics.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, replace
from typing import List, Optional, Tuple

import numpy as np
from scipy.spatial import cKDTree

from .fem import PerfusionSolution, recover_fields, solve_three_compartment
from .homogenize import ElementParams
from .mechanics import (
    MaterialParams,
    deformation_gradients,
    porosity_field,
    solve_displacement,
)
from .mesh import SimplicialMesh

logger = logging.getLogger(__name__)

__all__ = [
    "GrowthConfig",
    "GrowthState",
    "growth_criterion",
    "growth_scaling",
    "step_growth_factor",
    "transfer_field",
    "update_parameters",
    "pull_back_parameters",
    "spatial_exchange",
    "run_growth",
]


# ----------------------------------------------------------------------
# growth law


def growth_criterion(q_supply: np.ndarray, q_equi: np.ndarray) -> np.ndarray:
    """Relative excess of the exchange magnitude over its reference.

    Elements with a vanishing reference are flagged non-growing (0).
    """
    q = np.abs(np.asarray(q_supply, dtype=float))
    ref = np.abs(np.asarray(q_equi, dtype=float))
    out = np.zeros_like(q)
    ok = ref > 0.0
    out[ok] = (q[ok] - ref[ok]) / ref[ok]
    return out


def growth_scaling(theta: np.ndarray, params: MaterialParams) -> np.ndarray:
    """Rate coefficient vanishing as theta approaches its cap."""
    th = np.asarray(theta, dtype=float)
    if np.any(th > params.theta_max):
        warnings.warn("growth factor above its cap; clamping", UserWarning,
                      stacklevel=2)
        th = np.minimum(th, params.theta_max)
    frac = (params.theta_max - th) / (params.theta_max - 1.0)
    return params.k_growth * frac**params.m_growth


def step_growth_factor(theta: np.ndarray, gamma: np.ndarray, dt: float,
                       params: MaterialParams) -> np.ndarray:
    """Explicit Euler update, active only under hyperperfusion."""
    k = growth_scaling(theta, params)
    out = theta + dt * k * np.maximum(gamma, 0.0)
    return np.clip(out, 1.0, params.theta_max)


def transfer_field(src_points: np.ndarray, values: np.ndarray,
                   dst_points: np.ndarray) -> np.ndarray:
    """Nearest-point transfer of an element field between meshes."""
    src = np.atleast_2d(np.asarray(src_points, dtype=float))
    dst = np.atleast_2d(np.asarray(dst_points, dtype=float))
    _, idx = cKDTree(src).query(dst)
    return np.asarray(values)[idx]


# ----------------------------------------------------------------------
# configuration-dependent parameters


def _pad_f(F: np.ndarray) -> np.ndarray:
    F = np.asarray(F, dtype=float)
    if F.shape[-1] == 3:
        return F
    m = F.shape[0]
    out = np.broadcast_to(np.eye(3), (m, 3, 3)).copy()
    out[:, :2, :2] = F
    return out


def update_parameters(ep0: ElementParams, F: np.ndarray,
                      J: np.ndarray) -> ElementParams:
    """Push parameters from the reference into the current configuration.

    Permeability transforms as J^-1 F K F^T, exchange coefficients and
    source densities as J^-1.  The capillary tensor is a property of the
    deforming microvasculature itself and stays fixed in the current
    configuration.
    """
    J = np.asarray(J, dtype=float)
    if np.any(J <= 0.0):
        raise ValueError("deformation Jacobian must stay positive")
    F3 = _pad_f(F)
    push = lambda K: np.einsum("e,eij,ejk,elk->eil", 1.0 / J, F3, K, F3)
    return replace(
        ep0,
        k_supply=push(ep0.k_supply),
        k_drain=push(ep0.k_drain),
        k_micro=ep0.k_micro.copy(),
        beta_supply=ep0.beta_supply / J,
        beta_drain=ep0.beta_drain / J,
        beta_out=ep0.beta_out / J,
        theta_in=ep0.theta_in / J,
    )


def pull_back_parameters(ep: ElementParams, F: np.ndarray,
                         J: np.ndarray) -> ElementParams:
    """Inverse transform of :func:`update_parameters`.

    Also pulls the (spatially constant) capillary tensor back to the
    reference configuration, which is exactly what the reference-domain
    perfusion solve of the growth loop needs.
    """
    J = np.asarray(J, dtype=float)
    if np.any(J <= 0.0):
        raise ValueError("deformation Jacobian must stay positive")
    Fi = np.linalg.inv(_pad_f(F))
    pull = lambda K: np.einsum("e,eij,ejk,elk->eil", J, Fi, K, Fi)
    return replace(
        ep,
        k_supply=pull(ep.k_supply),
        k_drain=pull(ep.k_drain),
        k_micro=pull(ep.k_micro),
        beta_supply=ep.beta_supply * J,
        beta_drain=ep.beta_drain * J,
        beta_out=ep.beta_out * J,
        theta_in=ep.theta_in * J,
    )


def _micro_reference(ep0: ElementParams, F: np.ndarray,
                     J: np.ndarray) -> np.ndarray:
    Fi = np.linalg.inv(_pad_f(F))
    return np.einsum("e,eij,ejk,elk->eil", np.asarray(J, dtype=float),
                     Fi, ep0.k_micro, Fi)


def spatial_exchange(
    mesh: SimplicialMesh,
    ep0: ElementParams,
    order: int = 1,
    F: Optional[np.ndarray] = None,
    J: Optional[np.ndarray] = None,
    tol: float = 1e-10,
) -> Tuple[np.ndarray, PerfusionSolution]:
    """Reference-domain Darcy solve returning the spatial supply exchange.

    With a deformation given, the capillary permeability is pulled back
    first and the element exchange density is mapped by 1/J.
    """
    if F is None:
        ep_ref = ep0
        J = np.ones(mesh.n_elements)
    else:
        J = np.asarray(J, dtype=float)
        ep_ref = replace(ep0, k_micro=_micro_reference(ep0, F, J))
    sol = solve_three_compartment(mesh, ep_ref, tol=tol)
    fields = recover_fields(sol, ep_ref)
    return fields.q_supply / J, sol


# ----------------------------------------------------------------------
# staggered loop


@dataclass(frozen=True)
class GrowthConfig:
    """Time discretization and coupling controls.

    dt/t_end in hours.  The skeleton is loaded by the deviation of the
    capillary pressure from a baseline: pressure_offset None means the
    initial state is taken as mechanically equilibrated and its pressure
    field becomes the baseline; a number fixes the baseline explicitly.
    """

    dt: float = 2.0
    t_end: float = 300.0
    order: int = 1
    pressure_offset: Optional[float] = None
    newton_rtol: float = 1e-8
    darcy_tol: float = 1e-10


@dataclass
class GrowthState:
    """Snapshot of one staggered step (reference-mesh fields)."""

    t: float
    theta: np.ndarray
    u: np.ndarray
    J: np.ndarray
    gamma: np.ndarray
    q_spatial: np.ndarray
    p_supply: np.ndarray
    p_micro: np.ndarray
    p_drain: np.ndarray
    p_micro_el: np.ndarray
    volume: float
    porosity: np.ndarray


def run_growth(
    mesh: SimplicialMesh,
    ep0: ElementParams,
    q_equi: np.ndarray,
    material: MaterialParams,
    cfg: GrowthConfig,
) -> List[GrowthState]:
    """March the perfusion-growth-mechanics system to t_end.

    Returns one state per time level including t = 0.  The homeostatic
    reference q_equi is a spatial exchange density on the same element
    layout (transfer it with :func:`transfer_field` when it comes from a
    different mesh).
    """
    n_steps = int(round(cfg.t_end / cfg.dt))
    vol_ref = mesh.volumes()
    m = mesh.n_elements
    theta = np.ones(m)
    u = np.zeros((mesh.n_vertices, mesh.dim))
    baseline: Optional[np.ndarray] = None
    if cfg.pressure_offset is not None:
        baseline = np.full(m, float(cfg.pressure_offset))
    states: List[GrowthState] = []
    for step in range(n_steps + 1):
        t = step * cfg.dt
        F, J = deformation_gradients(mesh, u)
        q_sp, sol = spatial_exchange(mesh, ep0, cfg.order, F, J,
                                     tol=cfg.darcy_tol)
        fields = recover_fields(sol, ep0)
        gamma = growth_criterion(q_sp, q_equi)
        if baseline is None:
            baseline = fields.p_micro.copy()
        p_mech = fields.p_micro - baseline
        phi = porosity_field(p_mech, J, material)
        states.append(GrowthState(
            t=t, theta=theta.copy(), u=u.copy(), J=J, gamma=gamma,
            q_spatial=q_sp, p_supply=sol.p_supply, p_micro=sol.p_micro,
            p_drain=sol.p_drain, p_micro_el=fields.p_micro,
            volume=float(np.sum(J * vol_ref)), porosity=phi,
        ))
        if step == n_steps:
            break
        theta = step_growth_factor(theta, gamma, cfg.dt, material)
        mech = solve_displacement(mesh, theta, p_mech, material,
                                  rtol=cfg.newton_rtol)
        u = mech.u
        logger.info(
            "growth step %d/%d: t=%.1f h, theta mean %.4f, volume %.4g",
            step + 1, n_steps, t + cfg.dt, theta.mean(),
            float(np.sum(mech.J * vol_ref)),
        )
    return states
