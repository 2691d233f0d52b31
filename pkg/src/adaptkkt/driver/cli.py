"""Command line interface: ``adaptkkt run|reference|design|currents``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ..problems import circuit_currents, hole_fluxes
from .config import RunConfig, load_config
from .design import run_alternating_design, write_design_table
from .reference import compute_reference_goal
from .runners import ConvergenceRow, run


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    updates = {}
    if getattr(args, "algorithm", None):
        updates["algorithm"] = args.algorithm
    if getattr(args, "out", None):
        updates["out_dir"] = args.out
    return cfg.with_updates(**updates) if updates else cfg


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def cmd_run(args) -> int:
    cfg = _config(args)
    result = run(cfg)
    names = ConvergenceRow.fields()
    print("  ".join(f"{n:>12}" for n in names))
    for row in result.rows:
        print("  ".join(f"{_fmt(v):>12}" for v in row.__dict__.values()))
    print(f"factorizations: {result.total_factorizations}")
    print(f"final q: {list(map(float, result.final_q))}")
    return 0 if result.converged else 1


def cmd_reference(args) -> int:
    cfg = _config(args)
    print(f"{compute_reference_goal(cfg, use_cache=not args.no_cache):.12g}")
    return 0


def cmd_design(args) -> int:
    cfg = _config(args)
    rows = run_alternating_design(cfg)
    print(f"{'step':>5} {'m':>24} {'s':>24} {'J':>14}")
    for r in rows:
        m = " ".join(f"{v:.3f}" for v in r.m)
        s = " ".join(f"{v:.3f}" for v in r.s)
        print(f"{r.step:>5} {m:>24} {s:>24} {r.J:>14.6g}")
    if cfg.out_dir:
        write_design_table(rows, Path(cfg.out_dir) / "design.csv")
    return 0


def cmd_currents(args) -> int:
    cfg = _config(args)
    if cfg.problem.kind != "electrode":
        print("currents need an electrode problem", file=sys.stderr)
        return 2
    p, d = cfg.problem.params(), cfg.problem.design()
    out = {
        "currents": [float(I.val) for I in circuit_currents(p, d)],
        "fluxes": [float(J.val) for J in hole_fluxes(p, d)],
    }
    print(json.dumps(out, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adaptkkt", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="solve with global, mesh adaptive or fully adaptive refinement")
    p.add_argument("--config")
    p.add_argument("--algorithm", choices=["global", "mesh", "full", "mesh_adaptive", "fully_adaptive"])
    p.add_argument("--out")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("reference", help="compute the reference goal value")
    p.add_argument("--config")
    p.add_argument("--no-cache", action="store_true")
    p.set_defaults(func=cmd_reference)

    p = sub.add_parser("design", help="alternating position/size optimization of the electrode")
    p.add_argument("--config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_design)

    p = sub.add_parser("currents", help="circuit currents and hole fluxes of the configured design")
    p.add_argument("--config")
    p.set_defaults(func=cmd_currents)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
