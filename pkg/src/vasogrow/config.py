"""Scenario configuration: a flat ``key = value`` text format with dotted
keys, strict validation, and builders for the runtime objects.

Unknown keys are hard errors so a typo can never silently fall back to a
default.  Values are scalars, quoted-free strings, ``true``/``false``,
tuples ``(a, b, c)``, or blank (meaning "unset").  Cut planes and probe
boxes use numbered keys::

    cut.plane.1 = point=(0, 0, 0) normal=(1, 0, 0)
    report.probe.1 = box=(-10, -8.9, -2.5, 2.5)
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, fields
from typing import Dict, List, Optional, Tuple

import numpy as np

from .domain import PerfusionDomain, read_polyline_csv, read_surface_ascii
from .errors import ConfigError
from .growth import GrowthConfig
from .homogenize import HomogenizationConfig
from .mechanics import MaterialParams
from .resection import CutSpec
from .synthesis import SynthesisConfig
from .tree import HemodynamicParams

__all__ = [
    "ScenarioConfig",
    "load_config",
    "parse_config_text",
    "dump_config",
]

_NUMBERED = re.compile(r"^(cut\.plane|report\.probe)\.(\d+)$")
_PLANE = re.compile(
    r"^point\s*=\s*(\([^)]*\))\s+normal\s*=\s*(\([^)]*\))$")
_BOX = re.compile(r"^box\s*=\s*(\([^)]*\))$")


@dataclass
class ScenarioConfig:
    """Typed view of one scenario file; field names mirror the dotted keys
    with dots replaced by underscores."""

    # domain / mesh
    domain_shape: str = "disk"          # disk | box3d | polyline | surface
    domain_radius: float = 10.0
    domain_center: Tuple[float, ...] = (0.0, 0.0)
    domain_lengths: Tuple[float, ...] = (1.0, 1.0, 1.0)
    domain_origin: Tuple[float, ...] = (0.0, 0.0, 0.0)
    domain_path: Optional[str] = None
    mesh_h: float = 0.5

    # coupled-tree synthesis
    trees_n_terminals: int = 250
    trees_n_terminals_drain: Optional[int] = None
    trees_root_supply: Tuple[float, ...] = (0.0, 10.0, 0.0)
    trees_root_drain: Tuple[float, ...] = (0.0, -10.0, 0.0)
    trees_viscosity: float = 3.6e-6
    trees_metabolic_demand: float = 0.6
    trees_q_perf: float = 80.0
    trees_p_root_supply: float = 0.4
    trees_delta_p_supply: float = 0.2
    trees_p_root_drain: float = 0.0
    trees_delta_p_drain: float = -0.045
    trees_clearance_eps: float = 0.01
    trees_sa_cooling: float = 0.95
    trees_resolve_rounds: int = 12

    # homogenization
    homogenize_r_thresh: Optional[float] = None   # None -> auto from trees
    homogenize_av_radius: float = 1.0
    homogenize_sigma: Optional[float] = None      # None -> av_radius / 5
    homogenize_k_micro: float = 1.0 / 180.0

    # perfusion solve
    perfusion_order: int = 1
    perfusion_tol: float = 1e-10

    # resection (numbered cut.plane.N keys)
    cut_planes: List[Tuple[Tuple[float, ...], Tuple[float, ...]]] = field(
        default_factory=list)

    # material / growth
    material_young: float = 5.0
    material_poisson: float = 0.35
    material_porosity0: float = 0.2
    material_contact_alpha: float = 5e-3
    material_contact_u0: float = 1.0
    material_theta_max: float = 2.0
    material_k_growth: float = 0.01
    material_m_growth: float = 1.0
    growth_dt: float = 15.0
    growth_t_end: float = 300.0
    growth_pressure_offset: Optional[float] = None
    growth_inflow_scale: float = 1.0

    # reporting
    report_n_bins: int = 150
    report_exclude_boundary: bool = True
    report_figures: bool = True
    report_snapshot_every: int = 1
    report_probes: List[Tuple[float, ...]] = field(default_factory=list)

    # run control
    run_seed: int = 0

    # ------------------------------------------------------------------
    # builders for runtime objects

    def domain(self) -> PerfusionDomain:
        shape = self.domain_shape
        if shape == "disk":
            return PerfusionDomain.disk(self.domain_radius,
                                        center=self.domain_center[:2])
        if shape == "box3d":
            return PerfusionDomain.box3d(lengths=self.domain_lengths,
                                         origin=self.domain_origin)
        if shape == "polyline":
            if not self.domain_path:
                raise ConfigError("domain.path is required for domain.shape "
                                  "= polyline")
            return read_polyline_csv(self.domain_path)
        if shape == "surface":
            if not self.domain_path:
                raise ConfigError("domain.path is required for domain.shape "
                                  "= surface")
            return read_surface_ascii(self.domain_path)
        raise ConfigError(f"unknown domain.shape '{shape}'")

    def hemodynamics(self) -> Tuple[HemodynamicParams, HemodynamicParams]:
        supply = HemodynamicParams(
            viscosity=self.trees_viscosity,
            metabolic_demand=self.trees_metabolic_demand,
            q_perf=self.trees_q_perf,
            p_root=self.trees_p_root_supply,
            delta_p=self.trees_delta_p_supply,
        )
        drain = HemodynamicParams(
            viscosity=self.trees_viscosity,
            metabolic_demand=self.trees_metabolic_demand,
            q_perf=self.trees_q_perf,
            p_root=self.trees_p_root_drain,
            delta_p=self.trees_delta_p_drain,
        )
        return supply, drain

    def synthesis(self) -> SynthesisConfig:
        return SynthesisConfig(
            n_terminals=self.trees_n_terminals,
            seed=self.run_seed,
            cooling=self.trees_sa_cooling,
            clearance_eps=self.trees_clearance_eps,
            resolve_rounds=self.trees_resolve_rounds,
        )

    def homogenization(self, r_thresh: float) -> HomogenizationConfig:
        return HomogenizationConfig(
            r_thresh=r_thresh,
            av_radius=self.homogenize_av_radius,
            sigma=self.homogenize_sigma,
            k_micro=self.homogenize_k_micro,
        )

    def cut(self) -> Optional[CutSpec]:
        if not self.cut_planes:
            return None
        pts = np.array([p for p, _ in self.cut_planes], dtype=float)
        nrm = np.array([n for _, n in self.cut_planes], dtype=float)
        return CutSpec(points=pts, normals=nrm)

    def material(self) -> MaterialParams:
        return MaterialParams(
            young=self.material_young,
            poisson=self.material_poisson,
            porosity0=self.material_porosity0,
            contact_alpha=self.material_contact_alpha,
            contact_u0=self.material_contact_u0,
            theta_max=self.material_theta_max,
            k_growth=self.material_k_growth,
            m_growth=self.material_m_growth,
        )

    def growth(self) -> GrowthConfig:
        return GrowthConfig(
            dt=self.growth_dt,
            t_end=self.growth_t_end,
            order=self.perfusion_order,
            pressure_offset=self.growth_pressure_offset,
            darcy_tol=self.perfusion_tol,
        )

    def probe_boxes(self) -> List[Tuple[np.ndarray, np.ndarray]]:
        """Each probe as (lower corner, upper corner) arrays."""
        out = []
        for box in self.report_probes:
            v = np.asarray(box, dtype=float)
            if v.size not in (4, 6) or v.size % 2:
                raise ConfigError(
                    "probe box needs (xmin, xmax, ymin, ymax[, zmin, zmax])")
            lo = v[0::2].copy()
            hi = v[1::2].copy()
            if np.any(lo >= hi):
                raise ConfigError("probe box has an empty side")
            out.append((lo, hi))
        return out


def _dotted_key(attr: str) -> str:
    return attr.replace("_", ".", 1)


_FIELDS = {f.name: f for f in fields(ScenarioConfig)}
_KEYMAP: Dict[str, str] = {}
for _name in _FIELDS:
    if _name in ("cut_planes", "report_probes"):
        continue
    _KEYMAP[_dotted_key(_name)] = _name


def _parse_scalar(text: str):
    """Typed value from its textual form."""
    s = text.strip()
    if s == "":
        return None
    if s.lower() in ("true", "false"):
        return s.lower() == "true"
    if s.startswith("("):
        if not s.endswith(")"):
            raise ConfigError(f"unterminated tuple value '{s}'")
        inner = s[1:-1].strip()
        if not inner:
            raise ConfigError("empty tuple value")
        try:
            return tuple(float(x) for x in inner.split(","))
        except ValueError as exc:
            raise ConfigError(f"bad tuple value '{s}'") from exc
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        return s


def _coerce(key: str, attr: str, value):
    """Check a parsed value against the field's declared default type."""
    f = _FIELDS[attr]
    default = f.default
    if value is None:
        return None
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"key '{key}' expects true/false")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"key '{key}' expects an integer")
        if float(value) != int(value):
            raise ConfigError(f"key '{key}' expects an integer")
        return int(value)
    if isinstance(default, float) or attr in (
            "trees_n_terminals_drain", "homogenize_r_thresh",
            "homogenize_sigma", "growth_pressure_offset"):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"key '{key}' expects a number")
        out = float(value)
        if attr == "trees_n_terminals_drain":
            if out != int(out):
                raise ConfigError(f"key '{key}' expects an integer")
            return int(out)
        return out
    if isinstance(default, tuple):
        if not isinstance(value, tuple):
            raise ConfigError(f"key '{key}' expects a tuple like (1, 2, 3)")
        return value
    if isinstance(default, str) or default is None:
        return str(value)
    raise ConfigError(f"key '{key}' has unsupported type")  # pragma: no cover


def _parse_plane(key: str, text: str):
    m = _PLANE.match(text.strip())
    if not m:
        raise ConfigError(
            f"key '{key}' expects 'point=(x, y, z) normal=(nx, ny, nz)'")
    pt = _parse_scalar(m.group(1))
    nm = _parse_scalar(m.group(2))
    for v in (pt, nm):
        if not isinstance(v, tuple) or len(v) not in (2, 3):
            raise ConfigError(f"key '{key}' has a malformed plane tuple")
    return pt, nm


def _parse_probe(key: str, text: str):
    m = _BOX.match(text.strip())
    if not m:
        raise ConfigError(
            f"key '{key}' expects 'box=(xmin, xmax, ymin, ymax[, zmin, zmax])'")
    v = _parse_scalar(m.group(1))
    if not isinstance(v, tuple) or len(v) not in (4, 6):
        raise ConfigError(f"key '{key}' needs 4 or 6 box bounds")
    return v


def parse_config_text(text: str) -> ScenarioConfig:
    """Parse a configuration document and return the validated scenario."""
    cfg = ScenarioConfig()
    seen = set()
    planes: Dict[int, tuple] = {}
    probes: Dict[int, tuple] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        key = key.strip()
        value = value.strip()
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key '{key}'")
        seen.add(key)
        numbered = _NUMBERED.match(key)
        if numbered:
            idx = int(numbered.group(2))
            if numbered.group(1) == "cut.plane":
                planes[idx] = _parse_plane(key, value)
            else:
                probes[idx] = _parse_probe(key, value)
            continue
        attr = _KEYMAP.get(key)
        if attr is None:
            raise ConfigError(f"line {lineno}: unknown key '{key}'")
        setattr(cfg, attr, _coerce(key, attr, _parse_scalar(value)))
    cfg.cut_planes = [planes[i] for i in sorted(planes)]
    cfg.report_probes = [probes[i] for i in sorted(probes)]
    cfg.probe_boxes()  # validate probe bounds eagerly
    if cfg.mesh_h <= 0:
        raise ConfigError("mesh.h must be positive")
    if cfg.growth_dt <= 0 or cfg.growth_t_end < 0:
        raise ConfigError("growth.dt must be positive and growth.t_end "
                          "non-negative")
    if cfg.growth_inflow_scale <= 0:
        raise ConfigError("growth.inflow_scale must be positive")
    if cfg.report_n_bins < 1:
        raise ConfigError("report.n_bins must be at least 1")
    if cfg.report_snapshot_every < 1:
        raise ConfigError("report.snapshot_every must be at least 1")
    return cfg


def load_config(path) -> ScenarioConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def _format_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return "(" + ", ".join(repr(float(x)) for x in value) + ")"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_config(cfg: ScenarioConfig) -> str:
    """Render a scenario back to its textual form (round-trips exactly)."""
    lines = []
    for key in sorted(_KEYMAP):
        lines.append(f"{key} = {_format_value(getattr(cfg, _KEYMAP[key]))}")
    for i, (pt, nm) in enumerate(cfg.cut_planes, start=1):
        lines.append(f"cut.plane.{i} = point={_format_value(tuple(pt))} "
                     f"normal={_format_value(tuple(nm))}")
    for i, box in enumerate(cfg.report_probes, start=1):
        lines.append(f"report.probe.{i} = box={_format_value(tuple(box))}")
    return "\n".join(lines) + "\n"
