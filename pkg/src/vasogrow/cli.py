"""Command-line entry point: staged scenario runs and calibration."""

from __future__ import annotations

import argparse
import logging
import sys
from typing import List, Optional

import numpy as np

from .config import load_config
from .errors import ConfigError, VasoGrowError
from .pipeline import STAGES, run_pipeline
from .report import calibrate_growth

_STAGE_HELP = {
    "gen-trees": "synthesize the coupled vascular trees and mesh the domain",
    "homogenize": "derive per-element continuum parameters from the trees",
    "perfuse": "solve the three-compartment perfusion problem",
    "resect": "apply the configured cut to trees, mesh, and domain",
    "rehomogenize": "re-derive continuum parameters on the resected state",
    "grow": "march the coupled growth problem to its final time",
    "report": "render histograms, statistics, probes, and figures",
}


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="scenario file")
    p.add_argument("--out", required=True, help="artifact directory")
    p.add_argument("--seed", type=int, default=None,
                   help="override run.seed from the scenario file")
    p.add_argument("--reproducible", action="store_true",
                   help="record artifact digests for byte-level comparison")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vasogrow",
        description="Coupled vascular-tree synthesis, multi-compartment "
                    "perfusion, virtual resection, and tissue regrowth.")
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="log stage progress")
    sub = parser.add_subparsers(dest="command", required=True)

    for stage in STAGES:
        p = sub.add_parser(stage, help=_STAGE_HELP[stage])
        _add_run_flags(p)

    p = sub.add_parser("pipeline", help="run every stage in order")
    _add_run_flags(p)
    p.add_argument("--resume", default=None, metavar="STAGE",
                   help="first stage to execute; earlier stages are loaded "
                        "from the artifact directory")
    p.add_argument("--stop-after", default=None, metavar="STAGE",
                   help="last stage to execute")

    p = sub.add_parser("calibrate",
                       help="fit the growth law to a relative-mass curve")
    p.add_argument("--data", required=True,
                   help="CSV with columns t_h, relative_mass")
    p.add_argument("--theta-max", type=float, default=2.0)
    return parser


def _load_scenario(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.run_seed = args.seed
    return cfg


def _cmd_stage(args, stage: str) -> int:
    cfg = _load_scenario(args)
    resume = stage if stage != STAGES[0] else None
    run_pipeline(cfg, args.out, resume=resume, stop_after=stage,
                 reproducible=args.reproducible)
    print(f"{stage}: artifacts written to {args.out}")
    return 0


def _cmd_pipeline(args) -> int:
    cfg = _load_scenario(args)
    manifest = run_pipeline(cfg, args.out, resume=args.resume,
                            stop_after=args.stop_after,
                            reproducible=args.reproducible)
    n = sum(len(s["artifacts"]) for s in manifest["stages"].values())
    print(f"pipeline: {len(manifest['stages'])} stages, "
          f"{n} artifacts in {args.out}")
    return 0


def _cmd_calibrate(args) -> int:
    raw = np.genfromtxt(args.data, delimiter=",", comments="#")
    raw = np.atleast_2d(raw)
    if raw.shape[1] < 2:
        raise ConfigError("calibration data needs two columns: "
                          "t_h, relative_mass")
    if np.isnan(raw[0]).any():      # header row
        raw = raw[1:]
    if np.isnan(raw).any():
        raise ConfigError("calibration data contains non-numeric entries")
    fit = calibrate_growth(raw[:, 0], raw[:, 1], theta_max=args.theta_max)
    print(f"k_growth = {fit.k_growth:.6g} 1/h")
    print(f"m_growth = {fit.m_growth:.6g}")
    print(f"residual = {fit.residual:.6g}")
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    args = _build_parser().parse_args(argv)
    if args.verbose:
        logging.basicConfig(level=logging.INFO,
                            format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "pipeline":
            return _cmd_pipeline(args)
        if args.command == "calibrate":
            return _cmd_calibrate(args)
        return _cmd_stage(args, args.command)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except VasoGrowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
