"""Post-processing: volume-weighted histograms and statistics, region
probes, growth-curve calibration, delimited exports, and figures."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import matplotlib
import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import least_squares

matplotlib.use("Agg")

from .errors import ReportError, StructureError
from .ioutil import atomic_write_text
from .mesh import SimplicialMesh
from .tree import VesselTree

__all__ = [
    "HistogramReport",
    "ProbeReport",
    "CalibrationResult",
    "variability_stats",
    "flow_histogram",
    "shared_range",
    "region_probe",
    "calibrate_growth",
    "write_tree_csv",
    "read_tree_csv",
    "write_timeseries_csv",
    "write_histogram_csv",
    "figure_histograms",
    "figure_field",
    "figure_trees",
    "figure_timeseries",
]

_FMT = "%.17g"


# ----------------------------------------------------------------------
# statistics


def variability_stats(values: np.ndarray, volumes: np.ndarray,
                      mask: Optional[np.ndarray] = None,
                      ) -> Tuple[float, float, float]:
    """Volume-weighted (max, mean, std) of a per-element field."""
    v = np.asarray(values, dtype=float)
    w = np.asarray(volumes, dtype=float)
    if mask is not None:
        v, w = v[mask], w[mask]
    if v.size == 0:
        raise ReportError("statistics requested over an empty selection")
    total = w.sum()
    mean = float(np.sum(w * v) / total)
    std = float(np.sqrt(np.sum(w * (v - mean) ** 2) / total))
    return float(v.max()), mean, std


@dataclass(frozen=True)
class HistogramReport:
    """Volume-weighted relative-frequency histogram of an element field."""

    edges: np.ndarray       # (n_bins + 1,)
    frequency: np.ndarray   # (n_bins,), sums to 1
    excluded: int           # boundary elements left out
    vmax: float
    mean: float
    std: float


def shared_range(*field_collections: np.ndarray) -> Tuple[float, float]:
    """Union min/max so several states can share identical bins."""
    lo = min(float(np.min(f)) for f in field_collections)
    hi = max(float(np.max(f)) for f in field_collections)
    if lo == hi:
        hi = lo + max(1e-12, abs(lo) * 1e-12)
    return lo, hi


def flow_histogram(
    mesh: SimplicialMesh,
    field: np.ndarray,
    n_bins: int = 150,
    exclude_boundary: bool = True,
    value_range: Optional[Tuple[float, float]] = None,
) -> HistogramReport:
    """Histogram of a per-element field, each element weighted by its
    volume; boundary-touching elements are excluded by default."""
    field = np.asarray(field, dtype=float)
    if field.shape[0] != mesh.n_elements:
        raise ReportError("field length does not match the element count")
    volumes = mesh.volumes()
    keep = ~mesh.boundary_element_mask() if exclude_boundary else \
        np.ones(mesh.n_elements, dtype=bool)
    excluded = int(mesh.n_elements - keep.sum())
    if not keep.any():
        raise ReportError("no interior elements left for the histogram")
    values, weights = field[keep], volumes[keep]
    if value_range is None:
        value_range = shared_range(values)
    counts, edges = np.histogram(values, bins=n_bins, range=value_range,
                                 weights=weights)
    total = counts.sum()
    if total <= 0:
        raise ReportError("all field values fall outside the bin range")
    vmax, mean, std = variability_stats(values, weights)
    return HistogramReport(edges=edges, frequency=counts / total,
                           excluded=excluded, vmax=vmax, mean=mean, std=std)


@dataclass(frozen=True)
class ProbeReport:
    """Time series of (min, mean, max) of a field over one box region."""

    times: np.ndarray
    mins: np.ndarray
    means: np.ndarray
    maxs: np.ndarray
    n_elements: int
    classification: str  # hyperperfused | hypoperfused | homeostatic | ""


def _classify(means: np.ndarray, ref_mean: Optional[float]) -> str:
    if ref_mean is None:
        return ""
    scale = max(abs(ref_mean), 1e-30)
    if means[0] > ref_mean and means[-1] < means[0]:
        return "hyperperfused"
    if np.all(means < ref_mean) and \
            abs(means[-1] - means[0]) < 0.1 * scale:
        return "hypoperfused"
    return "homeostatic"


def region_probe(
    mesh: SimplicialMesh,
    fields: Sequence[np.ndarray],
    lo,
    hi,
    times: Optional[np.ndarray] = None,
    ref_field: Optional[np.ndarray] = None,
) -> ProbeReport:
    """Track a field over time inside an axis-aligned box (selected by
    element centroid); optionally classify against a reference field."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    cent = mesh.centroids()[:, :lo.size]
    inside = np.all((cent >= lo) & (cent <= hi), axis=1)
    if not inside.any():
        raise ReportError("probe box selects no elements")
    fields = [np.asarray(f, dtype=float) for f in fields]
    vols = mesh.volumes()
    mins, means, maxs = [], [], []
    for f in fields:
        sel = f[inside]
        mins.append(float(sel.min()))
        maxs.append(float(sel.max()))
        means.append(float(np.sum(sel * vols[inside]) / vols[inside].sum()))
    means = np.array(means)
    ref_mean = None
    if ref_field is not None:
        _, ref_mean, _ = variability_stats(ref_field, vols, inside)
    if times is None:
        times = np.arange(len(fields), dtype=float)
    return ProbeReport(times=np.asarray(times, dtype=float),
                       mins=np.array(mins), means=means, maxs=np.array(maxs),
                       n_elements=int(inside.sum()),
                       classification=_classify(means, ref_mean))


# ----------------------------------------------------------------------
# growth-curve calibration


@dataclass(frozen=True)
class CalibrationResult:
    k_growth: float
    m_growth: float
    residual: float


def _ode_curve(t_eval: np.ndarray, k: float, m: float,
               theta_max: float) -> np.ndarray:
    def rhs(_t, th):
        frac = np.clip((theta_max - th) / (theta_max - 1.0), 0.0, None)
        return k * frac**m

    t_eval = np.asarray(t_eval, dtype=float)
    sol = solve_ivp(rhs, (0.0, float(t_eval[-1])), [1.0], t_eval=t_eval,
                    rtol=1e-10, atol=1e-12, method="RK45")
    return sol.y[0]


def calibrate_growth(t_samples: np.ndarray, mass_samples: np.ndarray,
                     theta_max: float = 2.0) -> CalibrationResult:
    """Fit the saturating growth ODE to relative-mass samples.

    For uniform growth the relative tissue mass equals the growth factor,
    so the samples are fitted directly by the fully-active trajectory
    starting from 1 at t = 0.
    """
    t = np.asarray(t_samples, dtype=float)
    th = np.asarray(mass_samples, dtype=float)
    if t.ndim != 1 or t.shape != th.shape or t.size < 3:
        raise ReportError("calibration needs matching 1D sample arrays "
                          "with at least 3 points")
    if np.any(np.diff(t) <= 0) or t[0] < 0:
        raise ReportError("sample times must be non-negative and increasing")
    if np.any(np.diff(th) < -1e-12):
        raise ReportError("mass samples must be monotone non-decreasing")
    if np.any(th < 1.0 - 1e-9) or np.any(th > theta_max + 1e-9):
        raise ReportError("mass samples must lie within [1, theta_max]")

    def resid(x):
        return _ode_curve(t, x[0], x[1], theta_max) - th

    fit = least_squares(resid, x0=np.array([0.01, 1.0]),
                        bounds=([0.0, 0.25], [10.0, 4.0]), xtol=1e-14,
                        ftol=1e-14, gtol=1e-14)
    return CalibrationResult(k_growth=float(fit.x[0]),
                             m_growth=float(fit.x[1]),
                             residual=float(np.sqrt(2.0 * fit.cost)))


# ----------------------------------------------------------------------
# delimited exports

_TREE_HEADER = ("seg_id,prox_id,dist_id,xu,yu,zu,xv,yv,zv,"
                "radius_mm,flow_mm3_s")


def write_tree_csv(tree: VesselTree, path) -> None:
    """Active segments, one per row, full double precision."""
    rows = [_TREE_HEADER]
    for s in np.flatnonzero(tree.active):
        u, v = tree.seg_prox[s], tree.seg_dist[s]
        xyz = np.concatenate([tree.nodes[u], tree.nodes[v]])
        rows.append(",".join(
            [str(s), str(u), str(v)]
            + [_FMT % c for c in xyz]
            + [_FMT % tree.radius[s], _FMT % tree.flow[s]]))
    atomic_write_text(path, "\n".join(rows) + "\n")


def read_tree_csv(path) -> VesselTree:
    """Rebuild a tree from its delimited form (active segments only)."""
    raw = np.genfromtxt(path, delimiter=",", skip_header=1, dtype=float,
                        ndmin=2)
    if raw.size == 0:
        raise StructureError(f"no segments in {path}")
    prox = raw[:, 1].astype(np.int64)
    dist = raw[:, 2].astype(np.int64)
    n_nodes = int(max(prox.max(), dist.max())) + 1
    nodes = np.zeros((n_nodes, 3))
    nodes[prox] = raw[:, 3:6]
    nodes[dist] = raw[:, 6:9]
    roots = np.setdiff1d(prox, dist)
    if roots.size != 1:
        raise StructureError("segment table does not describe a single "
                             "rooted tree")
    terminals = np.setdiff1d(dist, prox)
    return VesselTree(nodes=nodes, seg_prox=prox, seg_dist=dist,
                      root=int(roots[0]), terminals=terminals,
                      radius=raw[:, 9].copy(), flow=raw[:, 10].copy())


def write_timeseries_csv(path, times, volumes, thetas, q_fields,
                         weights) -> None:
    """One row per time level: volume, growth-factor stats, exchange stats.

    thetas/q_fields are sequences of per-element arrays; means and the
    standard deviation are volume-weighted with the given element weights.
    """
    rows = ["t_h,volume_mm3,theta_mean,theta_min,theta_max,q_mean,q_std"]
    w = np.asarray(weights, dtype=float)
    for t, vol, th, q in zip(times, volumes, thetas, q_fields):
        th = np.asarray(th, dtype=float)
        _, th_mean, _ = variability_stats(th, w)
        _, q_mean, q_std = variability_stats(q, w)
        rows.append(",".join(_FMT % x for x in (
            t, vol, th_mean, th.min(), th.max(), q_mean, q_std)))
    atomic_write_text(path, "\n".join(rows) + "\n")


def write_histogram_csv(report: HistogramReport, path) -> None:
    rows = ["bin_left,bin_right,frequency"]
    for i, f in enumerate(report.frequency):
        rows.append(",".join(_FMT % x for x in
                             (report.edges[i], report.edges[i + 1], f)))
    atomic_write_text(path, "\n".join(rows) + "\n")


# ----------------------------------------------------------------------
# figures


def figure_histograms(reports: Dict[str, HistogramReport], path,
                      xlabel: str = "flow rate density (1/s)") -> None:
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for label, rep in reports.items():
        centers = 0.5 * (rep.edges[:-1] + rep.edges[1:])
        ax.step(centers, rep.frequency, where="mid", label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("volume-weighted frequency")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def figure_field(mesh: SimplicialMesh, field: np.ndarray, path,
                 title: str = "", displacement=None) -> None:
    """Element-field plot: filled triangles in 2D, centroid scatter in 3D."""
    import matplotlib.pyplot as plt

    field = np.asarray(field, dtype=float)
    verts = mesh.vertices
    if displacement is not None:
        verts = verts + displacement
    fig, ax = plt.subplots(figsize=(5.0, 4.4))
    if mesh.dim == 2:
        tpc = ax.tripcolor(verts[:, 0], verts[:, 1], mesh.elements,
                           facecolors=field)
        ax.set_aspect("equal")
    else:
        cent = mesh.centroids()
        tpc = ax.scatter(cent[:, 0], cent[:, 1], c=field, s=4)
        ax.set_aspect("equal")
    fig.colorbar(tpc, ax=ax)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def figure_trees(trees: Sequence[VesselTree], path,
                 colors: Sequence[str] = ("crimson", "royalblue")) -> None:
    """xy-projection of the active segments, line width scaled by radius."""
    import matplotlib.pyplot as plt
    from matplotlib.collections import LineCollection

    fig, ax = plt.subplots(figsize=(5.0, 5.0))
    rmax = max(float(t.radius[t.active.astype(bool)].max()) for t in trees)
    for tree, color in zip(trees, colors):
        act = np.flatnonzero(tree.active)
        segs = np.stack([tree.nodes[tree.seg_prox[act], :2],
                         tree.nodes[tree.seg_dist[act], :2]], axis=1)
        widths = 0.3 + 2.2 * tree.radius[act] / rmax
        ax.add_collection(LineCollection(segs, linewidths=widths,
                                         colors=color))
    ax.autoscale()
    ax.set_aspect("equal")
    ax.set_xlabel("x (mm)")
    ax.set_ylabel("y (mm)")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def figure_timeseries(path, times, volumes, theta_means) -> None:
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    ax.plot(times, np.asarray(volumes) / volumes[0], label="relative volume")
    ax.plot(times, theta_means, label="mean growth factor", ls="--")
    ax.set_xlabel("t (h)")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
