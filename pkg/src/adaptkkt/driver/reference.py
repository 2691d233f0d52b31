"""Reference values of the goal functional.

The error tables need ℐ(q) of the continuous optimum.  It is approximated
by converged discrete optima, either on a sequence of global meshes or on
a fully adaptive sequence (much more accurate per dof for singular
solutions).  With ``extrapolate`` three goals whose mesh sizes differ by a
fixed factor are combined by Aitken's delta-squared process, which removes
the leading O(N^-p) term for any observed p.  Results are cached on disk,
keyed by a hash of the problem and reference settings.
"""

from __future__ import annotations

import json
import logging
import os
from pathlib import Path

import numpy as np

from ..kkt import Discretization, NewtonConfig, consistent_initial_state, initial_state, solve_kkt, transfer_state
from ..mesh import refine_global
from .config import RunConfig

log = logging.getLogger(__name__)

DEFAULT_LEVEL = {"slit": 6, "electrode": 3}


def aitken(g0: float, g1: float, g2: float) -> float:
    """Limit of a sequence converging geometrically; falls back to g2."""
    d1, d2 = g1 - g0, g2 - g1
    denom = d2 - d1
    if denom == 0.0 or d1 == 0.0:
        return g2
    ratio = d1 / d2 if d2 != 0.0 else float("inf")
    if not (ratio > 1.0):
        # not (yet) geometric, extrapolation would amplify noise
        return g2
    return g2 - d2 * d2 / denom


def reference_level(cfg: RunConfig) -> int:
    if cfg.reference.level is not None:
        return cfg.reference.level
    return DEFAULT_LEVEL[cfg.problem.kind]


def _cache_dir(cfg: RunConfig) -> Path:
    if cfg.reference.cache_dir:
        return Path(cfg.reference.cache_dir)
    root = os.environ.get("ADAPTKKT_CACHE", Path.home() / ".cache" / "adaptkkt")
    return Path(root)


def reference_goals(cfg: RunConfig, level: int | None = None) -> list[tuple[int, float]]:
    """(dofs, goal) of the converged optimum on global levels 0..level."""
    problem = cfg.build_problem()
    level = reference_level(cfg) if level is None else level
    newton = NewtonConfig(tol_kkt=cfg.tol_kkt, max_steps=cfg.max_newton_steps, ordering=cfg.ordering)
    mesh = problem.coarse_mesh()
    state = None
    out = []
    consistent = problem.consistent_start if cfg.consistent_start is None else cfg.consistent_start
    for k in range(level + 1):
        disc = Discretization(problem, mesh)
        if state is None:
            state = consistent_initial_state(problem, disc) if consistent else initial_state(problem, disc)
        else:
            state = transfer_state(state, disc)
        state, _, lin = solve_kkt(problem, state, newton)
        if lin.rho_norm >= cfg.tol_kkt:
            log.warning("reference level %d: |rho| = %.3e above TOL_KKT", k, lin.rho_norm)
        out.append((disc.n_total_dofs, float(problem.goal(state.q).val)))
        log.info("reference level %d: dofs %d goal %.12g", k, *out[-1])
        if k < level:
            mesh = refine_global(mesh)
    return out


def adaptive_reference_goals(cfg: RunConfig) -> list[tuple[int, float]]:
    """(dofs, goal) of a fully adaptive run, solved to TOL_KKT, up to ``reference.max_dofs``."""
    from .runners import run_fully_adaptive

    run_cfg = cfg.with_updates(
        algorithm="fully_adaptive", n_ref=10_000, tol=1e-300, max_dofs=cfg.reference.max_dofs,
        c_b=1e-12, out_dir=None, write_vtk=False,
    )
    res = run_fully_adaptive(run_cfg)
    return [(row.dofs, row.goal) for row in res.rows]


def _halving_triple(goals: list[tuple[int, float]]) -> list[tuple[int, float]]:
    """Finest level and the levels closest (in log dofs) to 1/2 and 1/4 of it."""
    dofs = np.array([g[0] for g in goals], dtype=float)
    picks = [int(np.argmin(np.abs(np.log(dofs) - np.log(dofs[-1] / f)))) for f in (4, 2, 1)]
    return [goals[i] for i in picks]


def compute_reference_goal(cfg: RunConfig, use_cache: bool = True) -> float:
    key = cfg.digest("problem", "reference", "tol_kkt", "ordering")
    path = _cache_dir(cfg) / f"reference-{key}.json"
    if use_cache and path.exists():
        return float(json.loads(path.read_text())["reference_goal"])
    if cfg.reference.method == "adaptive":
        goals = adaptive_reference_goals(cfg)
        triple = _halving_triple(goals)
    else:
        goals = reference_goals(cfg)
        triple = goals[-3:]
    if cfg.reference.extrapolate and len(goals) >= 3:
        value = aitken(*(g[1] for g in triple))
    else:
        value = goals[-1][1]
    if use_cache:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps({
            "reference_goal": value,
            "levels": goals,
            "config": json.loads(cfg.model_dump_json(include={"problem", "reference"})),
        }, indent=2))
    return value

