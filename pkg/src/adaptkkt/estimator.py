"""Goal-oriented error estimation for the KKT system.

The discretization part of the goal error is estimated by

    eta_h = 1/2 rho(w)(Pi_h z) + 1/2 rho*(w, z)(Pi_h w),

where ``rho(w)(phi) = L'(w)(phi)`` is the KKT residual,
``rho*(w, z)(psi) = I'(w)(psi) + L''(w)(z, psi)`` the adjoint residual and
Pi_h = I_2h^(2) - id the patchwise quadratic reconstruction.  The dual
solution z solves ``H(w) z = -I'(w)``.  Pi_h annihilates the (finite
dimensional) control, so only the u- and lambda-components contribute.

Each component is a weighted residual of the form

    sum_K int_K (R psi + sigma grad v . grad psi) - int_Gamma G psi,

which is localized by integrating by parts cell-wise: a cell term
``(R - sigma lap v, psi)_K``, half of the flux jump across interior faces
and ``(sigma d_n v - G, psi)`` on Neumann faces (psi vanishes on Dirichlet
faces).  Since Pi_h of a continuous field may jump across hanging faces,
each side of a face is weighted with its own trace of psi.

The iteration part is ``eta_KKT = rho(w)(z)``: the residual of the
current (inexact) iterate tested with the discrete dual solution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import fem
from .kkt import DualState, KktState, _control_terms, residual
from .problems.base import ProblemDefinition


class DivisionNearZero(ZeroDivisionError):
    """The true error is too small to form an effectivity index."""


@dataclass
class EstimatorReport:
    """Signed estimator parts and per-cell indicators on one mesh."""

    eta_h_primal: float  # rho(w)(Pi_h z)
    eta_h_dual: float  # rho*(w, z)(Pi_h w)
    eta_kkt: float
    cells: np.ndarray  # active cell ids, aligned with the arrays below
    signed_cell: np.ndarray  # 1/2 (primal_K + dual_K)
    effectivity: float | None = None

    @property
    def eta_h(self) -> float:
        return 0.5 * (self.eta_h_primal + self.eta_h_dual)

    @property
    def eta_total(self) -> float:
        return self.eta_h + self.eta_kkt

    @property
    def per_cell(self) -> np.ndarray:
        return np.abs(self.signed_cell)

    def per_cell_map(self) -> dict:
        return dict(zip(self.cells.tolist(), self.per_cell.tolist()))


# --------------------------------------------------------------------------
# weighted residual blocks


@dataclass
class _Block:
    """One component of a weighted residual.

    ``R`` cell data at the cell quadrature points (C,nq); ``v`` vertex field
    whose flux is tested; ``psi`` vertex field whose Pi_h is the weight;
    ``G`` list of (FaceQuadrature, values) covering all Neumann faces
    (zero values where the block carries no boundary data).
    """

    R: np.ndarray
    v: np.ndarray
    psi: np.ndarray
    G: list


def _rows(dm: fem.DofMap) -> np.ndarray:
    row = np.full(dm.mesh.n_cells, -1, dtype=np.int64)
    row[dm.cells] = np.arange(len(dm.cells))
    return row


def _face_pi_h(dm, row, cells, edges, x, psi):
    u = fem.edge_parameter(dm.mesh, cells, edges, x)
    ref = fem.edge_reference(edges, u)
    return fem.pi_h_values(dm, row[cells], ref, psi), ref


def _other_boundary_faces(disc, n_gauss: int) -> list:
    """Boundary faces that are neither Dirichlet nor Neumann (zero flux data)."""
    mesh = disc.mesh
    dm = disc.dm
    fm = mesh.face_marker[dm.cells]
    skip = set(disc.problem.dirichlet_markers) | set(disc.problem.neumann_markers)
    sel = (fm >= 0) & ~np.isin(fm, list(skip))
    ci, ej = np.nonzero(sel)
    if len(ci) == 0:
        return []
    fq = fem.face_quadrature(mesh, dm.cells[ci], ej, 1, n_gauss)
    return [(fq, np.zeros(len(fq.JxW)))]


@dataclass
class _Quadrature:
    """Cell and face rules used by the estimator on one discretization."""

    cv: fem.CellValues
    n_gauss: int


def _quadrature(disc, order: int | None) -> _Quadrature:
    if order is None:
        order = disc.problem.estimator_order
    if order is None or order == 3:
        return _Quadrature(disc.cv, 3)
    return _Quadrature(fem.cell_values(disc.dm, fem.gauss_square(order)), order)


def _localized(disc, block: _Block, quad: _Quadrature) -> np.ndarray:
    """Cell-wise integrated-by-parts form of one block, shape (C,)."""
    dm, cv, mesh = disc.dm, quad.cv, disc.mesh
    sigma = disc.problem.sigma
    C = len(dm.cells)
    row = _rows(dm)
    psi_q = fem.pi_h(dm, block.psi, cv.rule)
    lap = cv.mv.laplacian(block.v[dm.cell_dofs][:, None, :])
    out = np.sum(cv.JxW * (block.R - sigma * lap) * psi_q, axis=1)

    faces = dm.faces
    if len(faces.small):
        fq = fem.face_quadrature(mesh, faces.small, faces.small_edge, 1, quad.n_gauss)
        psi_s, _ = _face_pi_h(dm, row, fq.cell, fq.edge, fq.x, block.psi)
        dn_s = np.einsum("pk,pk->p", fq.mv.gradient(block.v[fq.dofs]), fq.normal)
        oc = faces.other[fq.face]
        oe = faces.other_edge[fq.face]
        psi_o, ref_o = _face_pi_h(dm, row, oc, oe, fq.x, block.psi)
        mv_o = fem.map_reference(mesh.vertices[mesh.cells[oc]], ref_o)
        dn_o = np.einsum("pk,pk->p", mv_o.gradient(block.v[mesh.cells[oc]]), fq.normal)
        jump = 0.5 * sigma * fq.JxW * (dn_s * psi_s - dn_o * psi_o)
        out += np.bincount(row[fq.cell], weights=jump, minlength=C)
        out += np.bincount(row[oc], weights=jump, minlength=C)

    for fq, G in block.G + _other_boundary_faces(disc, quad.n_gauss):
        psi_b, _ = _face_pi_h(dm, row, fq.cell, fq.edge, fq.x, block.psi)
        dn = np.einsum("pk,pk->p", fq.mv.gradient(block.v[fq.dofs]), fq.normal)
        out += np.bincount(row[fq.cell], weights=fq.JxW * (sigma * dn - G) * psi_b, minlength=C)
    return out


def _unlocalized(disc, block: _Block, quad: _Quadrature) -> np.ndarray:
    """Cell-wise weak form sum (R psi + sigma grad v . grad psi) - boundary data."""
    dm, cv = disc.dm, quad.cv
    sigma = disc.problem.sigma
    C = len(dm.cells)
    row = _rows(dm)
    psi_q = fem.pi_h(dm, block.psi, cv.rule)
    dpsi = fem.pi_h_grad(dm, block.psi, cv)
    gv = cv.mv.gradient(block.v[dm.cell_dofs][:, None, :])
    out = np.sum(cv.JxW * (block.R * psi_q + sigma * np.einsum("cqk,cqk->cq", gv, dpsi)), axis=1)
    for fq, G in block.G:
        psi_b, _ = _face_pi_h(dm, row, fq.cell, fq.edge, fq.x, block.psi)
        out -= np.bincount(row[fq.cell], weights=fq.JxW * G * psi_b, minlength=C)
    return out


def _blocks(problem: ProblemDefinition, state: KktState, dual: DualState, quad: _Quadrature):
    """(primal blocks weighted by Pi_h z, dual blocks weighted by Pi_h w)."""
    disc = state.disc
    dm = disc.dm
    cv = quad.cv
    u_v, lam_v, q = state.u_vertex, state.lam_vertex, state.q
    zu_v, zl_v = dm.expand(dual.zu), dm.expand(dual.zlam)
    zq = dual.zq
    uq, _ = fem.field_at_quadrature(dm, cv, u_v)
    lq, _ = fem.field_at_quadrature(dm, cv, lam_v)
    zuq, _ = fem.field_at_quadrature(dm, cv, zu_v)
    zlq, _ = fem.field_at_quadrature(dm, cv, zl_v)
    d = problem.density(cv.x, disc.obs, uq, lq)

    G_primal, G_dual, G_none = [], [], []
    for part in disc.boundary(q):
        fq = part.quad
        if quad.n_gauss != 3:
            # same faces and subdivision, more points per subinterval
            _, first = np.unique(fq.face, return_index=True)
            fq = fem.face_quadrature(disc.mesh, fq.cell[first], fq.edge[first], fq.n_sub, quad.n_gauss)
        G = problem.flux(fq.x, part.marker, q)
        G_primal.append((fq, G.val))
        G_dual.append((fq, G.grad @ zq if len(zq) else np.zeros_like(G.val)))
        G_none.append((fq, np.zeros_like(G.val)))

    primal = [
        _Block(R=d.l_u, v=lam_v, psi=zu_v, G=G_none),
        _Block(R=d.l_lam, v=u_v, psi=zl_v, G=G_primal),
    ]
    dual_blocks = [
        _Block(R=d.l_uu * zuq + d.l_ul * zlq, v=zl_v, psi=u_v, G=G_none),
        _Block(R=d.l_ul * zuq + d.l_ll * zlq, v=zu_v, psi=lam_v, G=G_dual),
    ]
    return primal, dual_blocks


# --------------------------------------------------------------------------
# public operations


def eta_h_localized(problem: ProblemDefinition, state: KktState, dual: DualState,
                    order: int | None = None):
    """(eta_h_primal, eta_h_dual, signed per-cell contributions).

    ``order`` selects n-point Gauss rules for cells and faces (default: the
    problem's ``estimator_order``, or the 3x3 cell rule and 3-point faces).  On parallelogram cells
    the default is exact; on general quadrilaterals the integrands are
    rational and a higher order tightens the agreement with the weak form.
    """
    quad = _quadrature(state.disc, order)
    primal, dual_blocks = _blocks(problem, state, dual, quad)
    p = sum(_localized(state.disc, b, quad) for b in primal)
    d = sum(_localized(state.disc, b, quad) for b in dual_blocks)
    return float(p.sum()), float(d.sum()), 0.5 * (p + d)


def eta_h_unlocalized(problem: ProblemDefinition, state: KktState, dual: DualState,
                      order: int | None = None):
    """Same quantity from the weak (not integrated-by-parts) form."""
    quad = _quadrature(state.disc, order)
    primal, dual_blocks = _blocks(problem, state, dual, quad)
    p = sum(_unlocalized(state.disc, b, quad) for b in primal)
    d = sum(_unlocalized(state.disc, b, quad) for b in dual_blocks)
    return float(p.sum()), float(d.sum()), 0.5 * (p + d)


def eta_kkt(problem: ProblemDefinition, state: KktState, dual: DualState) -> float:
    """Iteration-error indicator rho(w)(z) in the discrete duality pairing."""
    rho, _ = residual(problem, state)
    return float(rho @ dual.z)


def eta_kkt_integral(problem: ProblemDefinition, state: KktState, dual: DualState) -> float:
    """rho(w)(z) evaluated by quadrature of the weak form (independent check)."""
    disc = state.disc
    dm = disc.dm
    u_v, lam_v, q = state.u_vertex, state.lam_vertex, state.q
    zu_v, zl_v = dm.expand(dual.zu), dm.expand(dual.zlam)
    zq = dual.zq
    uq, _ = disc.at_quadrature(u_v)
    lq, _ = disc.at_quadrature(lam_v)
    zuq, _ = disc.at_quadrature(zu_v)
    zlq, _ = disc.at_quadrature(zl_v)
    d = problem.density(disc.cv.x, disc.obs, uq, lq)
    val = np.sum(disc.cv.JxW * (d.l_u * zuq + d.l_lam * zlq))
    _, gu = fem.field_at_quadrature(dm, disc.cv_stiff, u_v)
    _, gl = fem.field_at_quadrature(dm, disc.cv_stiff, lam_v)
    _, gzu = fem.field_at_quadrature(dm, disc.cv_stiff, zu_v)
    _, gzl = fem.field_at_quadrature(dm, disc.cv_stiff, zl_v)
    grads = np.einsum("cqk,cqk->cq", gl, gzu) + np.einsum("cqk,cqk->cq", gu, gzl)
    val += problem.sigma * np.sum(disc.cv_stiff.JxW * grads)
    for part, G in disc.boundary_fluxes(q):
        val -= np.sum(part.quad.JxW * G.val * part.quad.values_of(zl_v))
    if len(q):
        g1, _ = _control_terms(disc, q, lam_v)
        val += (problem.alpha * q - g1) @ zq
    return float(val)


def estimate(problem: ProblemDefinition, state: KktState, dual: DualState,
             order: int | None = None) -> EstimatorReport:
    p, d, signed = eta_h_localized(problem, state, dual, order)
    return EstimatorReport(
        eta_h_primal=p,
        eta_h_dual=d,
        eta_kkt=eta_kkt(problem, state, dual),
        cells=state.disc.dm.cells.copy(),
        signed_cell=signed,
    )


def effectivity(
    report: EstimatorReport, reference_goal: float, current_goal: float, include_kkt: bool = False
) -> float:
    """I_eff = eta / (I(w) - I(w_h)); eta = eta_h, or eta_h + eta_KKT if requested."""
    err = float(reference_goal) - float(current_goal)
    scale = max(abs(reference_goal), abs(current_goal), 1.0)
    if abs(err) <= 1e-14 * scale:
        raise DivisionNearZero(f"goal error {err:.3e} too small for an effectivity index")
    eta = report.eta_total if include_kkt else report.eta_h
    return eta / err


@dataclass(frozen=True)
class MarkStrategy:
    """Bulk marking: the largest indicators carrying ``fraction`` of the total."""

    fraction: float = 0.3

    def __post_init__(self):
        if not (0.0 < self.fraction <= 1.0):
            raise ValueError("marking fraction must lie in (0, 1]")


def mark(per_cell, strategy: MarkStrategy | float = MarkStrategy()) -> np.ndarray:
    """Smallest set of cells whose indicator mass reaches fraction * total.

    ``per_cell`` is either a mapping cell -> indicator or a pair
    (cell ids, indicators).  Ties are broken by ascending cell id.
    Returns the marked cell ids (sorted).
    """
    if not isinstance(strategy, MarkStrategy):
        strategy = MarkStrategy(float(strategy))
    if isinstance(per_cell, dict):
        ids = np.fromiter(per_cell.keys(), dtype=np.int64, count=len(per_cell))
        eta = np.fromiter(per_cell.values(), dtype=float, count=len(per_cell))
    else:
        ids, eta = (np.asarray(a) for a in per_cell)
    if len(ids) == 0:
        raise ValueError("no indicators to mark")
    eta = np.abs(eta)
    total = eta.sum()
    if total == 0.0:
        return np.zeros(0, dtype=np.int64)
    order = np.lexsort((ids, -eta))
    csum = np.cumsum(eta[order])
    k = int(np.searchsorted(csum, strategy.fraction * total * (1 - 1e-14))) + 1
    return np.sort(ids[order[: min(k, len(ids))]])


def indicator_cells(report: EstimatorReport):
    """(cell ids, per-cell indicators) pair accepted by :func:`mark`."""
    return report.cells, report.per_cell

