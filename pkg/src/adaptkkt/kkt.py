"""Coupled KKT residual and Hessian, damped Newton steps and the dual solve.

Unknowns are stacked as w = (u, q, lam) with u and lam given by their free
dofs.  The Hessian is symmetric with a zero (lam, lam) block for the
problems shipped here; the same factorization serves the Newton step and
the dual problem ``H z = -zeta``.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import fem, linalg
from .linalg import Factorization, FactorizationCounter, factorize
from .mesh import QuadMesh, transfer_vertex_field
from .problems.base import ProblemDefinition
from .problems.jet import Jet2

log = logging.getLogger(__name__)


@dataclass
class NewtonConfig:
    alpha_N: float = 1.0
    tol_kkt: float = 1e-10
    max_steps: int = 50
    ordering: str = "colamd"
    # shift the control block when the reduced Hessian is not positive definite
    inertia_correction: bool = True

    def __post_init__(self):
        if not (0.0 < self.alpha_N <= 1.0):
            raise ValueError("damping alpha_N must lie in (0, 1]")
        if self.tol_kkt <= 0:
            raise ValueError("TOL_KKT must be positive")


# --------------------------------------------------------------------------
# discretization


@dataclass
class BoundaryPart:
    marker: int
    quad: fem.FaceQuadrature


class Discretization:
    """Everything that depends on the mesh only (plus cached boundary rules)."""

    def __init__(self, problem: ProblemDefinition, mesh: QuadMesh, cell_order: int = 3):
        self.problem = problem
        self.mesh = mesh
        self.dm = fem.build_dofmap(mesh, problem.dirichlet_markers)
        self.cv = fem.cell_values(self.dm, fem.gauss_square(cell_order))
        self.cv_stiff = fem.cell_values(self.dm, fem.gauss_square(2))
        self.K = fem.stiffness(self.dm, self.cv_stiff)
        self.obs = mesh.subdomain[self.dm.cells].astype(float)[:, None]
        self.n = self.dm.n_dofs
        self.s = problem.n_control
        self._faces = {m: mesh.boundary_faces([m]) for m in problem.neumann_markers}
        self._bcache: dict = {}

    @property
    def size(self) -> int:
        return 2 * self.n + self.s

    @property
    def n_total_dofs(self) -> int:
        """Reported dof count: state and adjoint values at all vertices."""
        return 2 * self.dm.n_used_vertices

    def split(self, w: np.ndarray):
        n, s = self.n, self.s
        return w[:n], w[n : n + s], w[n + s :]

    def join(self, u, q, lam) -> np.ndarray:
        return np.concatenate([u, np.atleast_1d(q), lam])

    def boundary(self, q: np.ndarray) -> list[BoundaryPart]:
        """Quadrature on the Neumann faces, resolved for the flux at q."""
        key = np.asarray(q, dtype=float).tobytes() if self.problem.adaptive_boundary else b""
        parts = self._bcache.get(key)
        if parts is not None:
            return parts
        parts = []
        for marker, (cells, edges) in self._faces.items():
            if self.problem.adaptive_boundary:
                def g(x, marker=marker):
                    return np.abs(self.problem.flux(x, marker, q).val)

                quad = fem.boundary_quadrature(
                    self.mesh, cells, edges, g, rtol=self.problem.boundary_rtol
                )
            else:
                quad = fem.face_quadrature(self.mesh, cells, edges, 1, 3)
            parts.append(BoundaryPart(marker, quad))
        if len(self._bcache) > 8:
            self._bcache.clear()
        self._bcache[key] = parts
        return parts

    def boundary_fluxes(self, q):
        out = []
        for part in self.boundary(q):
            out.append((part, self.problem.flux(part.quad.x, part.marker, q)))
        return out

    def at_quadrature(self, v_vertex: np.ndarray):
        return fem.field_at_quadrature(self.dm, self.cv, v_vertex)


# --------------------------------------------------------------------------
# states


@dataclass
class KktState:
    disc: Discretization
    w: np.ndarray

    @property
    def u(self):
        return self.disc.split(self.w)[0]

    @property
    def q(self):
        return self.disc.split(self.w)[1]

    @property
    def lam(self):
        return self.disc.split(self.w)[2]

    @property
    def u_vertex(self):
        return self.disc.dm.expand(self.u)

    @property
    def lam_vertex(self):
        return self.disc.dm.expand(self.lam)

    def field(self, name: str = "u") -> fem.FieldFn:
        v = self.u if name == "u" else self.lam
        return fem.FieldFn(self.disc.dm, v, name)


@dataclass
class DualState:
    disc: Discretization
    z: np.ndarray

    @property
    def zu(self):
        return self.disc.split(self.z)[0]

    @property
    def zq(self):
        return self.disc.split(self.z)[1]

    @property
    def zlam(self):
        return self.disc.split(self.z)[2]


def initial_state(problem: ProblemDefinition, disc: Discretization, q0=None) -> KktState:
    q0 = problem.q0 if q0 is None else np.asarray(q0, dtype=float)
    return KktState(disc, disc.join(np.zeros(disc.n), q0, np.zeros(disc.n)))


def transfer_state(state: KktState, disc: Discretization) -> KktState:
    """Interpolate u and lam onto a refined mesh (q is carried over)."""
    old = state.disc
    u = transfer_vertex_field(old.mesh, disc.mesh, state.u_vertex)
    lam = transfer_vertex_field(old.mesh, disc.mesh, state.lam_vertex)
    free = disc.dm.free
    return KktState(disc, disc.join(u[free], state.q.copy(), lam[free]))


# --------------------------------------------------------------------------
# residual, Hessian, Lagrangian


def _control_terms(disc: Discretization, q, lam_v):
    """sum over Neumann parts of int G_q lam and int G_qq lam."""
    s = disc.s
    g1 = np.zeros(s)
    g2 = np.zeros((s, s))
    for part, G in disc.boundary_fluxes(q):
        lam_b = part.quad.values_of(lam_v)
        w = part.quad.JxW * lam_b
        g1 += np.einsum("p,pk->k", w, G.grad)
        g2 += np.einsum("p,pkl->kl", w, G.hess)
    return g1, g2


def lagrangian(problem: ProblemDefinition, state: KktState) -> float:
    disc = state.disc
    u_v, lam_v, q = state.u_vertex, state.lam_vertex, state.q
    uq, _ = disc.at_quadrature(u_v)
    lq, _ = disc.at_quadrature(lam_v)
    dens = problem.density(disc.cv.x, disc.obs, uq, lq)
    val = np.sum(disc.cv.JxW * dens.l)
    val += problem.sigma * lam_v @ (disc.K @ u_v)
    val += 0.5 * problem.alpha * q @ q
    for part, G in disc.boundary_fluxes(q):
        val -= np.sum(part.quad.JxW * G.val * part.quad.values_of(lam_v))
    return float(val)


def objective(problem: ProblemDefinition, state: KktState) -> float:
    disc = state.disc
    uq, _ = disc.at_quadrature(state.u_vertex)
    track = problem.tracking(disc.cv.x, disc.obs, uq)
    q = state.q
    return float(np.sum(disc.cv.JxW * track) + 0.5 * problem.alpha * q @ q)


def residual_vertex(problem: ProblemDefinition, state: KktState):
    """Residual blocks before condensation: (r_u (V), r_q (s), r_lam (V))."""
    disc = state.disc
    dm = disc.dm
    u_v, lam_v, q = state.u_vertex, state.lam_vertex, state.q
    uq, _ = disc.at_quadrature(u_v)
    lq, _ = disc.at_quadrature(lam_v)
    dens = problem.density(disc.cv.x, disc.obs, uq, lq)
    r_u = fem.load(dm, disc.cv, dens.l_u) + problem.sigma * (disc.K @ lam_v)
    r_l = fem.load(dm, disc.cv, dens.l_lam) + problem.sigma * (disc.K @ u_v)
    for part, G in disc.boundary_fluxes(q):
        r_l -= part.quad.load(G.val, dm.n_vertices)
    g1, _ = _control_terms(disc, q, lam_v)
    r_q = problem.alpha * q - g1
    return r_u, r_q, r_l


def residual(problem: ProblemDefinition, state: KktState):
    """Stacked residual (L'_u, L'_q, L'_lam) on free dofs and its 2-norm."""
    r_u, r_q, r_l = residual_vertex(problem, state)
    dm = state.disc.dm
    rho = np.concatenate([dm.restrict(r_u), r_q, dm.restrict(r_l)])
    return rho, float(np.linalg.norm(rho))


def _flux_derivative_matrix(disc: Discretization, q) -> sp.csr_matrix:
    """(V, s) matrix of int G_q,k phi_i over the Neumann boundary."""
    V, s = disc.dm.n_vertices, disc.s
    cols = []
    for k in range(s):
        col = np.zeros(V)
        for part, G in disc.boundary_fluxes(q):
            col += part.quad.load(G.grad[:, k], V)
        cols.append(col)
    if not cols:
        return sp.csr_matrix((V, 0))
    return sp.csr_matrix(np.column_stack(cols))


def hessian_blocks(problem: ProblemDefinition, state: KktState) -> dict:
    disc = state.disc
    dm = disc.dm
    u_v, lam_v, q = state.u_vertex, state.lam_vertex, state.q
    uq, _ = disc.at_quadrature(u_v)
    lq, _ = disc.at_quadrature(lam_v)
    dens = problem.density(disc.cv.x, disc.obs, uq, lq)
    H_uu = dm.condense(fem.mass(dm, disc.cv, dens.l_uu))
    H_ul = dm.condense(problem.sigma * disc.K + fem.mass(dm, disc.cv, dens.l_ul))
    H_ll = dm.condense(fem.mass(dm, disc.cv, dens.l_ll)) if np.any(dens.l_ll) else None
    _, g2 = _control_terms(disc, q, lam_v)
    H_qq = problem.alpha * np.eye(disc.s) - g2
    B = _flux_derivative_matrix(disc, q)
    H_lq = -(dm.P.T @ B)  # (n, s)
    return {"uu": H_uu, "ul": H_ul, "ll": H_ll, "qq": H_qq, "lq": sp.csr_matrix(H_lq)}


def hessian(problem: ProblemDefinition, state: KktState) -> sp.csr_matrix:
    b = hessian_blocks(problem, state)
    n, s = state.disc.n, state.disc.s
    qq = sp.csr_matrix(b["qq"]) if s else None
    lq = b["lq"] if s else None
    H = sp.bmat(
        [
            [b["uu"], None, b["ul"]],
            [None, qq, lq.T if s else None],
            [b["ul"].T, lq, b["ll"]],
        ],
        format="csr",
    ) if s else sp.bmat([[b["uu"], b["ul"]], [b["ul"].T, b["ll"]]], format="csr")
    if H.shape != (2 * n + s, 2 * n + s):
        raise RuntimeError("Hessian has inconsistent block sizes")
    return H


def goal_derivative(problem: ProblemDefinition, state: KktState) -> np.ndarray:
    """zeta = (I'_u, I'_q, I'_lam) on free dofs; I depends on q only."""
    disc = state.disc
    g = problem.goal(state.q)
    return disc.join(np.zeros(disc.n), np.asarray(g.grad, dtype=float), np.zeros(disc.n))


# --------------------------------------------------------------------------
# Newton and dual


@dataclass
class Linearization:
    """Residual, Hessian and its factorization at one iterate."""

    state: KktState
    rho: np.ndarray
    rho_norm: float
    H: sp.csr_matrix
    factor: Factorization


def linearize(
    problem: ProblemDefinition,
    state: KktState,
    counter: FactorizationCounter | None = None,
    ordering: str = "colamd",
) -> Linearization:
    rho, nrm = residual(problem, state)
    H = hessian(problem, state)
    F = factorize(H, ordering=ordering, counter=counter)
    return Linearization(state, rho, nrm, H, F)


@dataclass
class StepReport:
    step: int
    rho_before: float
    rho_after: float
    alpha_N: float
    wall_time_s: float
    dofs: int
    extra: dict = field(default_factory=dict)


def _inertia_corrected_step(disc: Discretization, lin: Linearization, dw, counter):
    """Newton step for H + mu E E^T (E selects q) if the reduced Hessian is indefinite.

    The reduced Hessian is the inverse of the q-block of H^{-1}, which costs
    s extra solves with the existing factorization; the shifted system is
    solved by the Woodbury identity, so no refactorization is needed.
    Returns (step, mu) with mu = 0 when no correction was applied.
    """
    n, s = disc.n, disc.s
    E = np.zeros((disc.size, s))
    E[n:n + s] = np.eye(s)
    HE = np.column_stack([lin.factor.solve(E[:, k], counter) for k in range(s)])
    Y = HE[n:n + s]
    Y = 0.5 * (Y + Y.T)
    try:
        red = np.linalg.inv(Y)
    except np.linalg.LinAlgError:
        return dw, 0.0
    ev = np.linalg.eigvalsh(0.5 * (red + red.T))
    scale = float(np.max(np.abs(ev)))
    if ev[0] > 1e-3 * scale:
        return dw, 0.0
    mu = 0.1 * scale - ev[0]
    # (H + mu E E^T)^{-1} r = H^{-1} r - H^{-1}E (I/mu + Y)^{-1} E^T H^{-1} r
    corr = np.linalg.solve(np.eye(s) / mu + Y, dw[n:n + s])
    return dw - HE @ corr, float(mu)


def control_step_bound(problem: ProblemDefinition, state: KktState, dw: np.ndarray) -> float:
    """Safeguard t in (0, 1] scaling the whole Newton update.

    Keeps the control admissible and bounds max|dq| by the problem's
    ``max_control_step``; t = 1 for problems without such limits.
    """
    disc = state.disc
    if disc.s == 0:
        return 1.0
    dq = disc.split(dw)[1]
    t = float(problem.step_bound(state.q, dq))
    cap = problem.max_control_step
    big = float(np.max(np.abs(dq)))
    if cap is not None and big > cap:
        t = min(t, cap / big)
    return t


def newton_step(
    problem: ProblemDefinition,
    state: KktState,
    cfg: NewtonConfig,
    lin: Linearization | None = None,
    counter: FactorizationCounter | None = None,
    step: int = 0,
):
    """One damped Newton step w' = w + alpha_N * dw with H dw = -rho.

    Pass ``lin`` to reuse an existing factorization at ``state``.
    Returns (new_state, report).
    """
    t0 = time.perf_counter()
    if lin is None or lin.state is not state:
        lin = linearize(problem, state, counter, cfg.ordering)
    dw = lin.factor.solve(-lin.rho, counter)
    shift = 0.0
    if cfg.inertia_correction and state.disc.s:
        dw, shift = _inertia_corrected_step(state.disc, lin, dw, counter)
    t = control_step_bound(problem, state, dw)
    new = KktState(state.disc, state.w + cfg.alpha_N * t * dw)
    _, after = residual(problem, new)
    rep = StepReport(
        step=step,
        rho_before=lin.rho_norm,
        rho_after=after,
        alpha_N=cfg.alpha_N,
        wall_time_s=time.perf_counter() - t0,
        dofs=state.disc.n_total_dofs,
        extra={"safeguard": t, "shift": shift},
    )
    log.debug("newton step %d: |rho| %.3e -> %.3e", step, lin.rho_norm, after)
    return new, rep


def solve_dual(
    problem: ProblemDefinition,
    state: KktState,
    lin: Linearization | None = None,
    counter: FactorizationCounter | None = None,
    ordering: str = "colamd",
) -> DualState:
    """Solve H(w) z = -zeta(w), reusing the factorization in ``lin``."""
    if lin is None or lin.state is not state:
        lin = linearize(problem, state, counter, ordering)
    zeta = goal_derivative(problem, state)
    z = lin.factor.solve(-zeta, counter)
    return DualState(state.disc, z)


def solve_kkt(
    problem: ProblemDefinition,
    state: KktState,
    cfg: NewtonConfig,
    counter: FactorizationCounter | None = None,
):
    """Newton until |rho| < TOL_KKT; returns (state, reports, last linearization)."""
    reports = []
    lin = linearize(problem, state, counter, cfg.ordering)
    for k in range(cfg.max_steps):
        if lin.rho_norm < cfg.tol_kkt:
            break
        state, rep = newton_step(problem, state, cfg, lin, counter, step=k)
        reports.append(rep)
        lin = linearize(problem, state, counter, cfg.ordering)
    return state, reports, lin


def solve_state(
    problem: ProblemDefinition,
    disc: Discretization,
    q,
    u0: np.ndarray | None = None,
    tol: float = 1e-12,
    max_steps: int = 30,
    counter: FactorizationCounter | None = None,
) -> KktState:
    """Solve the state equation for fixed q (Newton on the lam-residual).

    The returned state has lam = 0; it is used to evaluate the reduced
    objective J(S(q), q) and for runs without free design parameters.
    """
    q = np.asarray(q, dtype=float)
    u = np.zeros(disc.n) if u0 is None else np.array(u0, dtype=float)
    lam = np.zeros(disc.n)
    for _ in range(max_steps):
        state = KktState(disc, disc.join(u, q, lam))
        _, _, r_l = residual_vertex(problem, state)
        r = disc.dm.restrict(r_l)
        if np.linalg.norm(r) < tol:
            return state
        A = hessian_blocks(problem, state)["ul"]
        du = linalg.solve(linalg.factorize(A, counter=counter), -r, counter=counter)
        u = u + du
    state = KktState(disc, disc.join(u, q, lam))
    return state


def consistent_initial_state(
    problem: ProblemDefinition,
    disc: Discretization,
    q0=None,
    counter: FactorizationCounter | None = None,
) -> KktState:
    """u = S(q0) and lam from the adjoint equation, so only L'_q is nonzero."""
    q0 = problem.q0 if q0 is None else np.asarray(q0, dtype=float)
    state = solve_state(problem, disc, q0, counter=counter)
    r_u, _, _ = residual_vertex(problem, state)
    A = hessian_blocks(problem, state)["ul"]
    F = linalg.factorize(A.T.tocsr(), counter=counter)
    lam = linalg.solve(F, -disc.dm.restrict(r_u), counter=counter)
    return KktState(disc, disc.join(state.u, q0, lam))
