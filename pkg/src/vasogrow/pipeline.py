"""Staged scenario runs: synthesis, homogenization, perfusion, resection,
regrowth, and reporting, with resumable on-disk artifacts and a manifest.

Every stage writes its artifacts under its own subdirectory of the output
directory and records their SHA-256 digests in ``manifest.json`` (sorted
keys, no timestamps, so reruns of a deterministic scenario produce an
identical manifest).  ``resume`` restarts the run at a later stage by
loading the artifacts the earlier stages left behind.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import report as rpt
from .config import ScenarioConfig, dump_config
from .domain import PerfusionDomain
from .errors import ConfigError
from .fem import mass_audit, recover_fields, solve_three_compartment
from .growth import run_growth, transfer_field
from .homogenize import ElementParams, InflowSource, homogenize_all
from .ioutil import atomic_write_bytes, atomic_write_json, atomic_write_text
from .mesh import SimplicialMesh, delaunay_mesh
from .resection import apply_resection, clip_domain, removed_volume_fraction
from .synthesis import CoupledTrees, generate_coupled_trees
from .tree import VesselTree
from .vtk_io import write_vtk_mesh, write_vtk_trees

logger = logging.getLogger(__name__)

__all__ = ["STAGES", "PipelineContext", "run_pipeline", "run_stage",
           "auto_r_thresh"]

STAGES = ("gen-trees", "homogenize", "perfuse", "resect", "rehomogenize",
          "grow", "report")

_FMT = "%.17g"


# ----------------------------------------------------------------------
# array persistence helpers


def _savez(path, **arrays) -> None:
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    atomic_write_bytes(path, buf.getvalue())


def _tree_arrays(prefix: str, tree: VesselTree) -> Dict[str, np.ndarray]:
    out = {
        f"{prefix}_nodes": tree.nodes,
        f"{prefix}_prox": tree.seg_prox,
        f"{prefix}_dist": tree.seg_dist,
        f"{prefix}_radius": tree.radius,
        f"{prefix}_flow": tree.flow,
        f"{prefix}_active": tree.active,
        f"{prefix}_root": np.array(tree.root),
        f"{prefix}_terminals": tree.terminals,
    }
    if tree.pressure is not None:
        out[f"{prefix}_pressure"] = tree.pressure
    return out


def _tree_from_arrays(prefix: str, data) -> VesselTree:
    tree = VesselTree(
        nodes=data[f"{prefix}_nodes"],
        seg_prox=data[f"{prefix}_prox"],
        seg_dist=data[f"{prefix}_dist"],
        root=int(data[f"{prefix}_root"]),
        terminals=data[f"{prefix}_terminals"],
        radius=data[f"{prefix}_radius"],
        flow=data[f"{prefix}_flow"],
        active=data[f"{prefix}_active"],
    )
    key = f"{prefix}_pressure"
    if key in data:
        tree.pressure = data[key]
    return tree


def _mesh_arrays(mesh: SimplicialMesh) -> Dict[str, np.ndarray]:
    return {
        "mesh_vertices": mesh.vertices,
        "mesh_elements": mesh.elements,
        "mesh_bfaces": mesh.boundary_faces,
        "mesh_belems": mesh.boundary_elems,
        "mesh_btags": mesh.boundary_tags,
    }


def _mesh_from_arrays(data) -> SimplicialMesh:
    return SimplicialMesh(
        vertices=data["mesh_vertices"],
        elements=data["mesh_elements"],
        boundary_faces=data["mesh_bfaces"],
        boundary_elems=data["mesh_belems"],
        boundary_tags=data["mesh_btags"],
    )


def _params_arrays(ep: ElementParams) -> Dict[str, np.ndarray]:
    return {
        "k_supply": ep.k_supply, "k_drain": ep.k_drain,
        "k_micro": ep.k_micro, "beta_supply": ep.beta_supply,
        "beta_drain": ep.beta_drain, "beta_out": ep.beta_out,
        "theta_in": ep.theta_in, "p_out": ep.p_out, "outflow": ep.outflow,
        "source_nodes": ep.source.nodes, "source_flows": ep.source.flows,
        "source_meta": np.array([ep.source.sigma, float(ep.source.dim),
                                 ep.p_ref_supply, ep.p_ref_drain,
                                 ep.av_volume]),
    }


def _params_from_arrays(data) -> ElementParams:
    meta = data["source_meta"]
    source = InflowSource(nodes=data["source_nodes"],
                          flows=data["source_flows"],
                          sigma=float(meta[0]), dim=int(meta[1]))
    return ElementParams(
        k_supply=data["k_supply"], k_drain=data["k_drain"],
        k_micro=data["k_micro"], beta_supply=data["beta_supply"],
        beta_drain=data["beta_drain"], beta_out=data["beta_out"],
        theta_in=data["theta_in"], p_out=data["p_out"],
        outflow=data["outflow"], source=source,
        p_ref_supply=float(meta[2]), p_ref_drain=float(meta[3]),
        av_volume=float(meta[4]),
    )


def _load_npz(path):
    if not os.path.exists(path):
        raise ConfigError(f"cannot resume: missing artifact {path}")
    return np.load(path, allow_pickle=False)


# ----------------------------------------------------------------------
# context


@dataclass
class PipelineContext:
    """Mutable state threaded through the stages of one scenario run."""

    cfg: ScenarioConfig
    out: Path
    reproducible: bool = False

    domain: Optional[PerfusionDomain] = None
    mesh: Optional[SimplicialMesh] = None
    trees: Optional[CoupledTrees] = None
    r_thresh: Optional[float] = None
    ep: Optional[ElementParams] = None
    q_equi: Optional[np.ndarray] = None
    pressures: Optional[Dict[str, np.ndarray]] = None
    domain_post: Optional[PerfusionDomain] = None
    mesh_post: Optional[SimplicialMesh] = None
    supply_post: Optional[VesselTree] = None
    drain_post: Optional[VesselTree] = None
    resection_info: Dict = field(default_factory=dict)
    ep_post: Optional[ElementParams] = None
    times: Optional[np.ndarray] = None
    theta_series: Optional[np.ndarray] = None
    q_series: Optional[np.ndarray] = None
    gamma_series: Optional[np.ndarray] = None
    volume_series: Optional[np.ndarray] = None
    u_final: Optional[np.ndarray] = None
    manifest: Dict = field(default_factory=dict)

    def stage_dir(self, stage: str) -> Path:
        d = self.out / stage.replace("-", "_")
        d.mkdir(parents=True, exist_ok=True)
        return d

    def record(self, stage: str, paths: List[Path], params: Dict) -> None:
        arts = {}
        for p in paths:
            digest = hashlib.sha256(Path(p).read_bytes()).hexdigest()
            arts[str(Path(p).relative_to(self.out))] = digest
        self.manifest.setdefault("stages", {})[stage] = {
            "artifacts": arts, "params": params}


def auto_r_thresh(supply: VesselTree, drain: VesselTree,
                  margin: float = 1.05) -> float:
    """Hierarchy threshold just above both trees' terminal radii, so every
    root-to-terminal path crosses into the lower hierarchy exactly once and
    the connecting flows account for the full perfusion in both trees."""
    r_term = 0.0
    for t in (supply, drain):
        par = t.parent_segment()[t.terminals]
        ok = t.active[par]
        if ok.any():
            r_term = max(r_term, float(t.radius[par[ok]].max()))
    if r_term <= 0.0:
        raise ConfigError("trees have no active terminal segments")
    return margin * r_term


# ----------------------------------------------------------------------
# stages


def _stage_gen_trees(ctx: PipelineContext) -> None:
    cfg = ctx.cfg
    ctx.domain = cfg.domain()
    sup, dra = cfg.hemodynamics()
    ctx.trees = generate_coupled_trees(
        ctx.domain, np.asarray(cfg.trees_root_supply, dtype=float),
        np.asarray(cfg.trees_root_drain, dtype=float), sup, dra,
        cfg.synthesis(), n_drain=cfg.trees_n_terminals_drain)
    ctx.mesh = delaunay_mesh(ctx.domain, cfg.mesh_h)
    d = ctx.stage_dir("gen-trees")
    rpt.write_tree_csv(ctx.trees.supply, d / "supply.csv")
    rpt.write_tree_csv(ctx.trees.drain, d / "drain.csv")
    _savez(d / "state.npz", **_tree_arrays("supply", ctx.trees.supply),
           **_tree_arrays("drain", ctx.trees.drain),
           **_mesh_arrays(ctx.mesh))
    write_vtk_trees(d / "trees.vtk", [ctx.trees.supply, ctx.trees.drain])
    arts = [d / "supply.csv", d / "drain.csv", d / "state.npz",
            d / "trees.vtk"]
    if cfg.report_figures:
        rpt.figure_trees([ctx.trees.supply, ctx.trees.drain],
                         d / "trees.png")
        arts.append(d / "trees.png")
    ctx.record("gen-trees", arts, {
        "n_terminals": cfg.trees_n_terminals, "seed": cfg.run_seed,
        "mesh_elements": ctx.mesh.n_elements})


def _load_gen_trees(ctx: PipelineContext) -> None:
    cfg = ctx.cfg
    ctx.domain = cfg.domain()
    sup, dra = cfg.hemodynamics()
    data = _load_npz(ctx.stage_dir("gen-trees") / "state.npz")
    ctx.trees = CoupledTrees(
        supply=_tree_from_arrays("supply", data),
        drain=_tree_from_arrays("drain", data),
        params_supply=sup, params_drain=dra)
    ctx.mesh = _mesh_from_arrays(data)


def _stage_homogenize(ctx: PipelineContext) -> None:
    cfg = ctx.cfg
    ctx.r_thresh = cfg.homogenize_r_thresh if \
        cfg.homogenize_r_thresh is not None else \
        auto_r_thresh(ctx.trees.supply, ctx.trees.drain)
    hcfg = cfg.homogenization(ctx.r_thresh)
    ctx.ep = homogenize_all(ctx.mesh, ctx.trees.supply, ctx.trees.drain,
                            ctx.trees.params_supply, ctx.trees.params_drain,
                            hcfg)
    d = ctx.stage_dir("homogenize")
    _savez(d / "params.npz", r_thresh=np.array(ctx.r_thresh),
           **_params_arrays(ctx.ep))
    ctx.record("homogenize", [d / "params.npz"], {
        "r_thresh": ctx.r_thresh, "av_radius": cfg.homogenize_av_radius})


def _load_homogenize(ctx: PipelineContext) -> None:
    data = _load_npz(ctx.stage_dir("homogenize") / "params.npz")
    ctx.r_thresh = float(data["r_thresh"])
    ctx.ep = _params_from_arrays(data)


def _element_csv(path, mesh: SimplicialMesh, fields: Dict[str, np.ndarray]):
    cent = mesh.centroids()
    names = list(fields)
    cols = ["x_mm", "y_mm", "z_mm"][: cent.shape[1]] + names
    rows = [",".join(cols)]
    table = np.column_stack([cent] + [fields[n] for n in names])
    rows.extend(",".join(_FMT % v for v in row) for row in table)
    atomic_write_text(path, "\n".join(rows) + "\n")


def _stage_perfuse(ctx: PipelineContext) -> None:
    cfg = ctx.cfg
    sol = solve_three_compartment(ctx.mesh, ctx.ep,
                                  order=cfg.perfusion_order,
                                  tol=cfg.perfusion_tol)
    fields = recover_fields(sol, ctx.ep)
    balance = mass_audit(sol, ctx.ep)
    ctx.q_equi = fields.q_supply
    ctx.pressures = {"p_supply": sol.p_supply, "p_micro": sol.p_micro,
                     "p_drain": sol.p_drain}
    d = ctx.stage_dir("perfuse")
    _savez(d / "solution.npz", p_supply=sol.p_supply, p_micro=sol.p_micro,
           p_drain=sol.p_drain, q_supply=fields.q_supply,
           q_micro=fields.q_micro, q_drain=fields.q_drain,
           theta_out=fields.theta_out)
    cell = {"q_supply": fields.q_supply, "q_micro": fields.q_micro,
            "q_drain": fields.q_drain, "theta_out": fields.theta_out}
    _element_csv(d / "fields.csv", ctx.mesh, cell)
    write_vtk_mesh(d / "fields.vtk", ctx.mesh, point_data=ctx.pressures,
                   cell_data=cell)
    atomic_write_json(d / "balance.json", {
        "inflow_mm3_s": balance.inflow, "outflow_mm3_s": balance.outflow,
        "residual": balance.residual, "rel_residual": balance.rel_residual})
    arts = [d / "solution.npz", d / "fields.csv", d / "fields.vtk",
            d / "balance.json"]
    if cfg.report_figures:
        rpt.figure_field(ctx.mesh, fields.q_supply, d / "q_supply.png",
                         title="supply exchange (1/s)")
        arts.append(d / "q_supply.png")
    ctx.record("perfuse", arts, {"order": cfg.perfusion_order,
                                 "rel_residual": balance.rel_residual})


def _load_perfuse(ctx: PipelineContext) -> None:
    data = _load_npz(ctx.stage_dir("perfuse") / "solution.npz")
    ctx.q_equi = data["q_supply"]
    ctx.pressures = {k: data[k] for k in ("p_supply", "p_micro", "p_drain")}


def _stage_resect(ctx: PipelineContext) -> None:
    cfg = ctx.cfg
    cut = cfg.cut()
    d = ctx.stage_dir("resect")
    if cut is None:
        ctx.domain_post = ctx.domain
        ctx.mesh_post = ctx.mesh
        ctx.supply_post = ctx.trees.supply
        ctx.drain_post = ctx.trees.drain
        ctx.resection_info = {"cut": False}
    else:
        supply_post, rep_s = apply_resection(
            ctx.trees.supply, cut, ctx.trees.params_supply)
        drain_post, rep_d = apply_resection(
            ctx.trees.drain, cut, ctx.trees.params_drain)
        ctx.domain_post, ctx.mesh_post = clip_domain(ctx.domain, ctx.mesh,
                                                     cut)
        ctx.supply_post, ctx.drain_post = supply_post, drain_post
        ctx.resection_info = {
            "cut": True,
            "removed_volume_fraction": removed_volume_fraction(
                ctx.mesh, ctx.mesh_post),
            "supply": rep_s.__dict__, "drain": rep_d.__dict__,
        }
    rpt.write_tree_csv(ctx.supply_post, d / "supply.csv")
    rpt.write_tree_csv(ctx.drain_post, d / "drain.csv")
    _savez(d / "state.npz", **_tree_arrays("supply", ctx.supply_post),
           **_tree_arrays("drain", ctx.drain_post),
           **_mesh_arrays(ctx.mesh_post))
    atomic_write_json(d / "report.json", ctx.resection_info)
    write_vtk_trees(d / "trees.vtk", [ctx.supply_post, ctx.drain_post])
    ctx.record("resect", [d / "supply.csv", d / "drain.csv",
                          d / "state.npz", d / "report.json",
                          d / "trees.vtk"], {"planes": len(cfg.cut_planes)})


def _load_resect(ctx: PipelineContext) -> None:
    d = ctx.stage_dir("resect")
    data = _load_npz(d / "state.npz")
    ctx.supply_post = _tree_from_arrays("supply", data)
    ctx.drain_post = _tree_from_arrays("drain", data)
    ctx.mesh_post = _mesh_from_arrays(data)
    path = d / "report.json"
    if path.exists():
        ctx.resection_info = json.loads(path.read_text())
    cut = ctx.cfg.cut()
    ctx.domain_post = ctx.domain if cut is None else \
        ctx.domain.with_removed_region(cut.planes_array())


def _stage_rehomogenize(ctx: PipelineContext) -> None:
    cfg = ctx.cfg
    # resection rescales radii, so an automatic threshold is re-derived
    # from the resected trees to keep the connecting flows complete
    r_thresh = cfg.homogenize_r_thresh if \
        cfg.homogenize_r_thresh is not None else \
        auto_r_thresh(ctx.supply_post, ctx.drain_post)
    hcfg = cfg.homogenization(r_thresh)
    ctx.ep_post = homogenize_all(
        ctx.mesh_post, ctx.supply_post, ctx.drain_post,
        ctx.trees.params_supply, ctx.trees.params_drain, hcfg)
    d = ctx.stage_dir("rehomogenize")
    _savez(d / "params.npz", r_thresh=np.array(r_thresh),
           **_params_arrays(ctx.ep_post))
    ctx.record("rehomogenize", [d / "params.npz"], {"r_thresh": r_thresh})


def _load_rehomogenize(ctx: PipelineContext) -> None:
    data = _load_npz(ctx.stage_dir("rehomogenize") / "params.npz")
    ctx.ep_post = _params_from_arrays(data)


def _scaled_inflow(ep: ElementParams, scale: float) -> ElementParams:
    if scale == 1.0:
        return ep
    src = ep.source
    return replace(ep, theta_in=ep.theta_in * scale,
                   source=InflowSource(nodes=src.nodes,
                                       flows=src.flows * scale,
                                       sigma=src.sigma, dim=src.dim))


def _stage_grow(ctx: PipelineContext) -> None:
    cfg = ctx.cfg
    ep_run = _scaled_inflow(ctx.ep_post, cfg.growth_inflow_scale)
    q_ref = transfer_field(ctx.mesh.centroids(), ctx.q_equi,
                           ctx.mesh_post.centroids())
    states = run_growth(ctx.mesh_post, ep_run, q_ref, cfg.material(),
                        cfg.growth())
    ctx.times = np.array([st.t for st in states])
    ctx.theta_series = np.stack([st.theta for st in states])
    ctx.q_series = np.stack([st.q_spatial for st in states])
    ctx.gamma_series = np.stack([st.gamma for st in states])
    ctx.volume_series = np.array([st.volume for st in states])
    ctx.u_final = states[-1].u
    d = ctx.stage_dir("grow")
    rpt.write_timeseries_csv(
        d / "timeseries.csv", ctx.times, ctx.volume_series,
        ctx.theta_series, ctx.q_series, ctx.mesh_post.volumes())
    _savez(d / "states.npz", times=ctx.times, theta=ctx.theta_series,
           q=ctx.q_series, gamma=ctx.gamma_series,
           volume=ctx.volume_series, u_final=ctx.u_final,
           q_ref=q_ref)
    arts = [d / "timeseries.csv", d / "states.npz"]
    every = max(1, cfg.report_snapshot_every)
    for i in range(0, len(states), every):
        st = states[i]
        snap = d / f"snapshot_{i:04d}.vtk"
        write_vtk_mesh(
            snap, ctx.mesh_post, displacement=st.u,
            point_data={"u": st.u, "p_supply": st.p_supply,
                        "p_micro": st.p_micro, "p_drain": st.p_drain},
            cell_data={"theta": st.theta, "J": st.J, "q_supply": st.q_spatial,
                       "gamma": st.gamma, "porosity": st.porosity})
        arts.append(snap)
    if cfg.report_figures:
        rpt.figure_timeseries(d / "growth.png", ctx.times,
                              ctx.volume_series, ctx.theta_series.mean(axis=1))
        arts.append(d / "growth.png")
    ctx.record("grow", arts, {
        "dt_h": cfg.growth_dt, "t_end_h": cfg.growth_t_end,
        "inflow_scale": cfg.growth_inflow_scale,
        "final_volume_mm3": float(ctx.volume_series[-1])})


def _load_grow(ctx: PipelineContext) -> None:
    data = _load_npz(ctx.stage_dir("grow") / "states.npz")
    ctx.times = data["times"]
    ctx.theta_series = data["theta"]
    ctx.q_series = data["q"]
    ctx.gamma_series = data["gamma"]
    ctx.volume_series = data["volume"]
    ctx.u_final = data["u_final"]


def _stage_report(ctx: PipelineContext) -> None:
    cfg = ctx.cfg
    d = ctx.stage_dir("report")
    lo, hi = rpt.shared_range(ctx.q_equi, ctx.q_series[0], ctx.q_series[-1])
    hists = {
        "pre": rpt.flow_histogram(ctx.mesh, ctx.q_equi, cfg.report_n_bins,
                                  cfg.report_exclude_boundary, (lo, hi)),
        "post": rpt.flow_histogram(ctx.mesh_post, ctx.q_series[0],
                                   cfg.report_n_bins,
                                   cfg.report_exclude_boundary, (lo, hi)),
        "final": rpt.flow_histogram(ctx.mesh_post, ctx.q_series[-1],
                                    cfg.report_n_bins,
                                    cfg.report_exclude_boundary, (lo, hi)),
    }
    arts = []
    stats = {"bin_range": [lo, hi], "resection": ctx.resection_info}
    for label, h in hists.items():
        rpt.write_histogram_csv(h, d / f"hist_{label}.csv")
        arts.append(d / f"hist_{label}.csv")
        stats[label] = {"max": h.vmax, "mean": h.mean, "std": h.std,
                        "excluded_boundary_elements": h.excluded}
    # probe boxes over the growth series
    probe_rows = ["probe,t_h,q_min,q_mean,q_max"]
    q_ref_post = transfer_field(ctx.mesh.centroids(), ctx.q_equi,
                                ctx.mesh_post.centroids())
    for k, (plo, phi) in enumerate(cfg.probe_boxes(), start=1):
        pr = rpt.region_probe(ctx.mesh_post, list(ctx.q_series), plo, phi,
                              times=ctx.times, ref_field=q_ref_post)
        stats[f"probe_{k}"] = {
            "n_elements": pr.n_elements,
            "classification": pr.classification,
            "theta_max": float(np.max(ctx.theta_series[-1])),
        }
        for t, qn, qm, qx in zip(pr.times, pr.mins, pr.means, pr.maxs):
            probe_rows.append(
                f"{k}," + ",".join(_FMT % v for v in (t, qn, qm, qx)))
    if len(probe_rows) > 1:
        atomic_write_text(d / "probes.csv", "\n".join(probe_rows) + "\n")
        arts.append(d / "probes.csv")
    atomic_write_json(d / "stats.json", stats)
    arts.append(d / "stats.json")
    if cfg.report_figures:
        rpt.figure_histograms(hists, d / "histograms.png")
        rpt.figure_field(ctx.mesh_post, ctx.q_series[-1], d / "q_final.png",
                         title="final supply exchange (1/s)",
                         displacement=None)
        arts.extend([d / "histograms.png", d / "q_final.png"])
    ctx.record("report", arts, {"n_bins": cfg.report_n_bins})


_RUNNERS = {
    "gen-trees": (_stage_gen_trees, _load_gen_trees),
    "homogenize": (_stage_homogenize, _load_homogenize),
    "perfuse": (_stage_perfuse, _load_perfuse),
    "resect": (_stage_resect, _load_resect),
    "rehomogenize": (_stage_rehomogenize, _load_rehomogenize),
    "grow": (_stage_grow, _load_grow),
    "report": (_stage_report, lambda ctx: None),
}


def run_stage(ctx: PipelineContext, stage: str) -> None:
    """Execute one stage (assumes prerequisites are in the context)."""
    _RUNNERS[stage][0](ctx)


def run_pipeline(
    cfg: ScenarioConfig,
    out_dir,
    resume: Optional[str] = None,
    reproducible: bool = False,
    stop_after: Optional[str] = None,
) -> Dict:
    """Run the staged scenario and return the manifest.

    resume names the first stage to actually execute; everything before
    it is loaded from the output directory.  stop_after truncates the run
    after the named stage.
    """
    if resume is not None and resume not in STAGES:
        raise ConfigError(f"unknown stage '{resume}'; expected one of "
                          f"{', '.join(STAGES)}")
    if stop_after is not None and stop_after not in STAGES:
        raise ConfigError(f"unknown stage '{stop_after}'")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ctx = PipelineContext(cfg=cfg, out=out, reproducible=reproducible)
    manifest_path = out / "manifest.json"
    if resume is not None and manifest_path.exists():
        ctx.manifest = json.loads(manifest_path.read_text())
    ctx.manifest["seed"] = cfg.run_seed
    ctx.manifest["reproducible"] = bool(reproducible)
    config_text = dump_config(cfg)
    atomic_write_text(out / "config.cfg", config_text)
    ctx.manifest["config_sha256"] = hashlib.sha256(
        config_text.encode()).hexdigest()
    start = STAGES.index(resume) if resume is not None else 0
    stop = STAGES.index(stop_after) if stop_after is not None else \
        len(STAGES) - 1
    for i, stage in enumerate(STAGES):
        if i > stop:
            break
        run_fn, load_fn = _RUNNERS[stage]
        if i < start:
            logger.info("loading stage '%s' from %s", stage, out)
            load_fn(ctx)
        else:
            logger.info("running stage '%s'", stage)
            try:
                run_fn(ctx)
            except Exception as exc:
                try:
                    wrapped = type(exc)(f"[stage {stage}] {exc}")
                except Exception:
                    wrapped = RuntimeError(f"[stage {stage}] {exc}")
                raise wrapped from exc
    atomic_write_json(manifest_path, ctx.manifest)
    return ctx.manifest
