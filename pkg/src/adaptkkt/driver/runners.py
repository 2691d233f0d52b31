"""The three solution algorithms: global refinement, mesh adaptive, fully adaptive.

All runners share the per-level bookkeeping (one :class:`ConvergenceRow`
per mesh level, one trace line per Newton step) and count Hessian
factorizations so that the algorithms can be compared independently of
wall-clock time.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..estimator import DivisionNearZero, EstimatorReport, MarkStrategy, effectivity, estimate, mark
from ..kkt import (
    Discretization,
    DualState,
    KktState,
    NewtonConfig,
    consistent_initial_state,
    initial_state,
    linearize,
    newton_step,
    solve_dual,
    solve_kkt,
    transfer_state,
)
from ..linalg import FactorizationCounter
from ..mesh import refine, refine_global, write_vtk
from ..problems.base import ProblemDefinition
from .config import RunConfig

log = logging.getLogger(__name__)


@dataclass
class ConvergenceRow:
    level: int
    dofs: int
    goal: float
    goal_error: float | None
    eta_h: float
    eta_kkt: float
    eta: float
    I_eff: float | None
    rho_norm: float
    newton_steps: int
    factorizations: int
    wall_time_s: float

    @classmethod
    def fields(cls) -> list[str]:
        return [f.name for f in dataclasses.fields(cls)]


@dataclass
class TraceEntry:
    level: int
    step: int
    dofs: int
    rho_before: float
    rho_after: float
    eta_h: float | None = None
    eta_kkt: float | None = None
    q: tuple = ()

    def line(self) -> str:
        parts = [
            f"level={self.level}",
            f"step={self.step}",
            f"dofs={self.dofs}",
            f"rho_before={self.rho_before:.6e}",
            f"rho_after={self.rho_after:.6e}",
        ]
        if self.eta_h is not None:
            parts.append(f"eta_h={self.eta_h:.6e}")
            parts.append(f"eta_kkt={self.eta_kkt:.6e}")
        parts.append("q=" + ",".join(f"{v:.10g}" for v in self.q))
        return " ".join(parts)


@dataclass
class RunResult:
    rows: list[ConvergenceRow]
    trace: list[TraceEntry]
    state: KktState
    dual: DualState
    report: EstimatorReport
    counter: FactorizationCounter
    reference_goal: float | None = None
    converged: bool = True
    refined_with_guard: list[bool] = field(default_factory=list)

    @property
    def total_factorizations(self) -> int:
        return self.counter.factorizations

    @property
    def final_q(self) -> np.ndarray:
        return self.state.q


class RunOutput:
    """convergence.csv, trace.log and per-level VTK files in ``out_dir``."""

    def __init__(self, out_dir, write_vtk_files: bool = True):
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.write_vtk_files = write_vtk_files
        self._csv = self.dir / "convergence.csv"
        self._trace = self.dir / "trace.log"
        with open(self._csv, "w", newline="") as fh:
            csv.writer(fh).writerow(ConvergenceRow.fields())
        self._trace.write_text("")

    def row(self, row: ConvergenceRow) -> None:
        with open(self._csv, "a", newline="") as fh:
            csv.writer(fh).writerow(
                ["" if v is None else v for v in dataclasses.astuple(row)]
            )

    def trace(self, entry: TraceEntry) -> None:
        with open(self._trace, "a") as fh:
            fh.write(entry.line() + "\n")

    def level(self, level: int, state: KktState, report: EstimatorReport) -> None:
        if not self.write_vtk_files:
            return
        disc = state.disc
        write_vtk(
            self.dir / f"level_{level}.vtk",
            disc.mesh,
            point_data={"u": state.u_vertex, "lambda": state.lam_vertex},
            cell_data={"indicator": _cell_order(disc, report.per_cell)},
        )


def _cell_order(disc: Discretization, per_cell: np.ndarray) -> np.ndarray:
    """Reorder dof-map cell data to the order of ``mesh.active_cells()``."""
    act = disc.mesh.active_cells()
    pos = np.empty(disc.mesh.n_cells, dtype=np.int64)
    pos[disc.dm.cells] = np.arange(len(disc.dm.cells))
    return per_cell[pos[act]]


class _Runner:
    """Shared state of one run."""

    def __init__(self, cfg: RunConfig, problem: ProblemDefinition | None, reference: float | None,
                 on_level=None):
        self.cfg = cfg
        self.on_level = on_level
        self.problem = problem if problem is not None else cfg.build_problem()
        self.newton = NewtonConfig(
            alpha_N=cfg.alpha_N,
            tol_kkt=cfg.tol_kkt,
            max_steps=cfg.max_newton_steps,
            ordering=cfg.ordering,
        )
        self.counter = FactorizationCounter()
        self.reference = reference if reference is not None else resolve_reference(cfg, self.problem)
        self.output = RunOutput(cfg.out_dir, cfg.write_vtk) if cfg.out_dir else None
        self.rows: list[ConvergenceRow] = []
        self.trace: list[TraceEntry] = []
        self.converged = True
        consistent = cfg.consistent_start
        self.consistent = self.problem.consistent_start if consistent is None else consistent

    def start(self, disc: Discretization, previous: KktState | None) -> KktState:
        if previous is not None:
            return transfer_state(previous, disc)
        if self.consistent:
            return consistent_initial_state(self.problem, disc, counter=self.counter)
        return initial_state(self.problem, disc)

    def record_step(self, level, rep, state, report=None) -> None:
        entry = TraceEntry(
            level=level,
            step=rep.step,
            dofs=rep.dofs,
            rho_before=rep.rho_before,
            rho_after=rep.rho_after,
            eta_h=None if report is None else report.eta_h,
            eta_kkt=None if report is None else report.eta_kkt,
            q=tuple(float(v) for v in state.q),
        )
        self.trace.append(entry)
        if self.output:
            self.output.trace(entry)
        log.info(entry.line())

    def record_level(self, level, state, report, rho_norm, steps, fact0, t0) -> ConvergenceRow:
        goal = float(self.problem.goal(state.q).val)
        err = None if self.reference is None else self.reference - goal
        ieff = None
        if self.reference is not None:
            try:
                ieff = effectivity(report, self.reference, goal)
            except DivisionNearZero:
                ieff = None
            report.effectivity = ieff
        row = ConvergenceRow(
            level=level,
            dofs=state.disc.n_total_dofs,
            goal=goal,
            goal_error=err,
            eta_h=report.eta_h,
            eta_kkt=report.eta_kkt,
            eta=report.eta_total,
            I_eff=ieff,
            rho_norm=rho_norm,
            newton_steps=steps,
            factorizations=self.counter.factorizations - fact0,
            wall_time_s=time.perf_counter() - t0,
        )
        self.rows.append(row)
        if self.output:
            self.output.row(row)
            self.output.level(level, state, report)
        return row

    def refine_adaptive(self, mesh, report: EstimatorReport):
        marked = mark((report.cells, report.per_cell), MarkStrategy(self.cfg.theta_mark))
        if len(marked) == 0:
            return None
        return refine(mesh, marked)

    def result(self, state, dual, report, guards=()) -> RunResult:
        return RunResult(
            rows=self.rows,
            trace=self.trace,
            state=state,
            dual=dual,
            report=report,
            counter=self.counter,
            reference_goal=self.reference,
            converged=self.converged,
            refined_with_guard=list(guards),
        )

    def tolerance(self, report: EstimatorReport) -> float:
        if self.cfg.tol is not None:
            return self.cfg.tol
        return 1e-4 * abs(report.eta_total)

    def too_big(self, mesh) -> bool:
        if self.cfg.max_dofs is None:
            return False
        return 2 * len(np.unique(mesh.cells[mesh.active_cells()])) > self.cfg.max_dofs


def resolve_reference(cfg: RunConfig, problem: ProblemDefinition | None = None) -> float | None:
    if cfg.reference_goal is None:
        return None
    if cfg.reference_goal == "compute":
        from .reference import compute_reference_goal

        return compute_reference_goal(cfg)
    return float(cfg.reference_goal)


def _newton_to_tolerance(run: _Runner, level: int, state: KktState):
    """Newton until |rho| < TOL_KKT with tracing; returns (state, steps, lin)."""
    lin = linearize(run.problem, state, run.counter, run.newton.ordering)
    steps = 0
    while lin.rho_norm >= run.newton.tol_kkt:
        if steps >= run.newton.max_steps:
            log.warning("level %d: Newton stopped after %d steps, |rho| = %.3e", level, steps, lin.rho_norm)
            run.converged = False
            break
        state, rep = newton_step(run.problem, state, run.newton, lin, run.counter, step=steps)
        steps += 1
        run.record_step(level, rep, state)
        lin = linearize(run.problem, state, run.counter, run.newton.ordering)
    return state, steps, lin


def run_global(cfg: RunConfig, problem: ProblemDefinition | None = None,
               reference: float | None = None, on_level=None) -> RunResult:
    """Newton to TOL_KKT on n_ref globally refined meshes (dual solve for reporting)."""
    run = _Runner(cfg, problem, reference, on_level)
    mesh = run.problem.coarse_mesh()
    state = dual = report = None
    for level in range(cfg.n_ref):
        t0 = time.perf_counter()
        f0 = run.counter.factorizations
        disc = Discretization(run.problem, mesh)
        state = run.start(disc, state)
        state, steps, lin = _newton_to_tolerance(run, level, state)
        dual = solve_dual(run.problem, state, lin, run.counter)
        report = estimate(run.problem, state, dual)
        if run.on_level is not None:
            run.on_level(level, state, dual)
        run.record_level(level, state, report, lin.rho_norm, steps, f0, t0)
        if level + 1 < cfg.n_ref:
            mesh = refine_global(mesh)
            if run.too_big(mesh):
                break
    return run.result(state, dual, report)


def run_mesh_adaptive(cfg: RunConfig, problem: ProblemDefinition | None = None,
                      reference: float | None = None, on_level=None) -> RunResult:
    """Newton to TOL_KKT on every level, then one dual solve, marking and refinement."""
    run = _Runner(cfg, problem, reference, on_level)
    mesh = run.problem.coarse_mesh()
    state = dual = report = None
    tol = None
    for level in range(cfg.n_ref):
        t0 = time.perf_counter()
        f0 = run.counter.factorizations
        disc = Discretization(run.problem, mesh)
        state = run.start(disc, state)
        state, steps, lin = _newton_to_tolerance(run, level, state)
        dual = solve_dual(run.problem, state, lin, run.counter)
        report = estimate(run.problem, state, dual)
        if run.on_level is not None:
            run.on_level(level, state, dual)
        run.record_level(level, state, report, lin.rho_norm, steps, f0, t0)
        tol = run.tolerance(report) if tol is None else tol
        if abs(report.eta_total) < tol or level + 1 == cfg.n_ref:
            break
        new = run.refine_adaptive(mesh, report)
        if new is None or run.too_big(new):
            break
        mesh = new
    return run.result(state, dual, report)


def run_fully_adaptive(cfg: RunConfig, problem: ProblemDefinition | None = None,
                       reference: float | None = None, on_level=None) -> RunResult:
    """Newton steps with a dual solve after each, until |eta_KKT| <= c_b |eta_h|; then refine."""
    run = _Runner(cfg, problem, reference, on_level)
    mesh = run.problem.coarse_mesh()
    state = dual = report = None
    tol = None
    guards = []
    for level in range(cfg.n_ref):
        t0 = time.perf_counter()
        f0 = run.counter.factorizations
        disc = Discretization(run.problem, mesh)
        state = run.start(disc, state)
        lin = linearize(run.problem, state, run.counter, run.newton.ordering)
        steps = 0
        while True:
            state, rep = newton_step(run.problem, state, run.newton, lin, run.counter, step=steps)
            steps += 1
            lin = linearize(run.problem, state, run.counter, run.newton.ordering)
            dual = solve_dual(run.problem, state, lin, run.counter)
            report = estimate(run.problem, state, dual)
            run.record_step(level, rep, state, report)
            balanced = abs(report.eta_kkt) <= cfg.c_b * abs(report.eta_h)
            if balanced or lin.rho_norm < run.newton.tol_kkt:
                break
            if steps >= run.newton.max_steps:
                log.warning("level %d: balancing not reached after %d steps", level, steps)
                run.converged = False
                break
        guards.append(abs(report.eta_kkt) <= cfg.c_b * abs(report.eta_h) or lin.rho_norm < run.newton.tol_kkt)
        if run.on_level is not None:
            run.on_level(level, state, dual)
        run.record_level(level, state, report, lin.rho_norm, steps, f0, t0)
        tol = run.tolerance(report) if tol is None else tol
        if abs(report.eta_total) < tol or level + 1 == cfg.n_ref:
            break
        new = run.refine_adaptive(mesh, report)
        if new is None or run.too_big(new):
            break
        mesh = new
    return run.result(state, dual, report, guards)


RUNNERS = {
    "global": run_global,
    "mesh_adaptive": run_mesh_adaptive,
    "fully_adaptive": run_fully_adaptive,
}


def run(cfg: RunConfig, problem: ProblemDefinition | None = None,
        reference: float | None = None, on_level=None) -> RunResult:
    """Dispatch on ``cfg.algorithm``.

    ``on_level(level, state, dual)`` is called with the final iterate of
    every mesh level (before the level row is recorded).
    """
    return RUNNERS[cfg.algorithm](cfg, problem, reference, on_level)


# --------------------------------------------------------------------------
# iteration-error study


@dataclass
class IterateRow:
    iteration: int
    goal: float
    goal_error: float | None  # I(w) - I(w~), needs a reference
    iteration_error: float  # I(w_h) - I(w~) against the converged discrete solution
    eta_h: float
    eta_kkt: float
    rho_norm: float
    I_eff: float | None  # (eta_h + eta_KKT) / (I(w) - I(w~))
    kkt_effectivity: float | None  # eta_KKT / iteration error


def damped_newton_study(
    cfg: RunConfig,
    level: int,
    problem: ProblemDefinition | None = None,
    reference: float | None = None,
    max_iterations: int = 200,
    switch_ratio: float | None = 0.01,
) -> list[IterateRow]:
    """Damped Newton on a fixed global mesh, estimating every iterate.

    The iteration error of each iterate is measured against the fully
    converged discrete optimum on the same mesh.  Once the iteration error
    indicator has dropped below ``switch_ratio * |eta_h|`` the remaining
    steps are taken undamped (``None`` keeps damping to the end).
    """
    problem = problem if problem is not None else cfg.build_problem()
    newton = NewtonConfig(alpha_N=cfg.alpha_N, tol_kkt=cfg.tol_kkt, max_steps=cfg.max_newton_steps,
                          ordering=cfg.ordering)
    full = NewtonConfig(tol_kkt=cfg.tol_kkt, max_steps=cfg.max_newton_steps, ordering=cfg.ordering)
    mesh = problem.coarse_mesh()
    for _ in range(level):
        mesh = refine_global(mesh)
    disc = Discretization(problem, mesh)
    consistent = problem.consistent_start if cfg.consistent_start is None else cfg.consistent_start
    start = consistent_initial_state(problem, disc) if consistent else initial_state(problem, disc)
    converged, _, _ = solve_kkt(problem, start, full)
    goal_h = float(problem.goal(converged.q).val)

    rows = []
    state = start
    lin = linearize(problem, state, None, newton.ordering)
    undamped = dataclasses.replace(newton, alpha_N=1.0)
    damped = True
    for k in range(1, max_iterations + 1):
        state, _ = newton_step(problem, state, newton if damped else undamped, lin, None, step=k)
        lin = linearize(problem, state, None, newton.ordering)
        dual = solve_dual(problem, state, lin)
        rep = estimate(problem, state, dual)
        goal = float(problem.goal(state.q).val)
        it_err = goal_h - goal
        ref_err = None if reference is None else reference - goal
        ieff = None
        if ref_err is not None:
            try:
                ieff = effectivity(rep, reference, goal, include_kkt=True)
            except DivisionNearZero:
                ieff = None
        kkt_eff = rep.eta_kkt / it_err if abs(it_err) > 1e-14 * max(abs(goal_h), 1.0) else None
        rows.append(IterateRow(k, goal, ref_err, it_err, rep.eta_h, rep.eta_kkt, lin.rho_norm, ieff, kkt_eff))
        if switch_ratio is not None and abs(rep.eta_kkt) < switch_ratio * abs(rep.eta_h):
            damped = False
        if lin.rho_norm < cfg.tol_kkt:
            break
    return rows

