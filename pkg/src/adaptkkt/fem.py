"""Q1 finite elements on hierarchical quadrilateral meshes.

Everything is organised around vertex space: a field is a vector with one
value per mesh vertex.  The free (unconstrained) dofs are mapped to vertex
space by a sparse prolongation ``P``; hanging vertices get the average of
their two edge endpoints and Dirichlet vertices are zero.  Assembled vertex
matrices are condensed with ``P.T @ A @ P``.

Cell quantities are evaluated in batches of shape ``(cells, points)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .mesh import Marker, NoPatch, QuadMesh, _edge_key, write_vtk


class QuadratureTooCoarse(RuntimeError):
    pass


# --------------------------------------------------------------------------
# quadrature


@dataclass(frozen=True)
class QuadratureRule:
    """Points and weights on the reference interval [0,1] or square [0,1]^2."""

    points: np.ndarray
    weights: np.ndarray
    degree: int

    @property
    def size(self) -> int:
        return len(self.weights)


def gauss_line(n: int) -> QuadratureRule:
    x, w = np.polynomial.legendre.leggauss(n)
    return QuadratureRule(0.5 * (x + 1.0), 0.5 * w, 2 * n - 1)


def gauss_square(n: int) -> QuadratureRule:
    g = gauss_line(n)
    s, t = np.meshgrid(g.points, g.points, indexing="ij")
    w = np.outer(g.weights, g.weights)
    return QuadratureRule(np.column_stack([s.ravel(), t.ravel()]), w.ravel(), g.degree)


def composite_line(n_sub: int, n_gauss: int = 3) -> QuadratureRule:
    """Composite Gauss rule on [0,1] with ``n_sub`` equal subintervals."""
    g = gauss_line(n_gauss)
    left = np.arange(n_sub)[:, None] / n_sub
    pts = (left + g.points[None, :] / n_sub).ravel()
    wts = np.tile(g.weights / n_sub, n_sub)
    return QuadratureRule(pts, wts, g.degree)


# --------------------------------------------------------------------------
# reference Q1 element; vertex order (0,0), (1,0), (1,1), (0,1)


def q1_values(ref: np.ndarray) -> np.ndarray:
    s, t = ref[..., 0], ref[..., 1]
    return np.stack([(1 - s) * (1 - t), s * (1 - t), s * t, (1 - s) * t], axis=-1)


def q1_derivatives(ref: np.ndarray) -> np.ndarray:
    s, t = ref[..., 0], ref[..., 1]
    ds = np.stack([-(1 - t), 1 - t, t, -t], axis=-1)
    dt = np.stack([-(1 - s), -s, s, 1 - s], axis=-1)
    return np.stack([ds, dt], axis=-1)


# coefficient of s*t in the bilinear expansion
_TWIST = np.array([1.0, -1.0, 1.0, -1.0])

# reference position of parameter u along local edge j (edge j runs j -> j+1)
def edge_reference(edges: np.ndarray, u: np.ndarray) -> np.ndarray:
    edges = np.asarray(edges)
    u = np.asarray(u, dtype=float)
    s = np.choose(edges, [u, np.ones_like(u), 1 - u, np.zeros_like(u)])
    t = np.choose(edges, [np.zeros_like(u), u, np.ones_like(u), 1 - u])
    return np.stack([s, t], axis=-1)


@dataclass
class MappedValues:
    """Q1 data at reference points of a batch of cells.

    Arrays carry the batch shape ``B`` (e.g. (cells, points)):
    x (B,2), det (B,), phi (B,4), grad (B,4,2), and ``ginv01`` needed for the
    physical Laplacian of a mapped Q1 function.
    """

    x: np.ndarray
    det: np.ndarray
    phi: np.ndarray
    grad: np.ndarray
    jinv: np.ndarray
    twist: np.ndarray  # (B,2): s*t coefficient of the mapping

    def value(self, coef: np.ndarray) -> np.ndarray:
        """coef (B..,4) broadcastable -> field values."""
        return np.einsum("...i,...i->...", self.phi, coef)

    def gradient(self, coef: np.ndarray) -> np.ndarray:
        return np.einsum("...ik,...i->...k", self.grad, coef)

    def laplacian(self, coef: np.ndarray) -> np.ndarray:
        """Physical Laplacian of the mapped bilinear function with vertex coef.

        With F bilinear, the second reference derivatives of v and of the
        mapping only have the mixed s-t component; the chain rule gives
        Δv = 2 m G01 with G = (J^T J)^{-1} and m = e_v - ∇v · e_F.
        """
        ev = np.einsum("...i,i->...", coef, _TWIST)
        g = self.gradient(coef)
        m = ev - np.einsum("...k,...k->...", g, self.twist)
        G01 = np.einsum("...ak,...bk->...ab", self.jinv, self.jinv)[..., 0, 1]
        return 2.0 * m * G01


def map_reference(X: np.ndarray, ref: np.ndarray) -> MappedValues:
    """Evaluate the bilinear map of cells with corner coordinates X (..,4,2)."""
    phi = q1_values(ref)
    dphi = q1_derivatives(ref)
    x = np.einsum("...i,...ik->...k", phi, X)
    J = np.einsum("...ik,...ia->...ka", X, dphi)
    det = J[..., 0, 0] * J[..., 1, 1] - J[..., 0, 1] * J[..., 1, 0]
    jinv = np.empty_like(J)
    jinv[..., 0, 0] = J[..., 1, 1] / det
    jinv[..., 1, 1] = J[..., 0, 0] / det
    jinv[..., 0, 1] = -J[..., 0, 1] / det
    jinv[..., 1, 0] = -J[..., 1, 0] / det
    grad = np.einsum("...ia,...ak->...ik", dphi, jinv)
    twist = np.einsum("...ik,i->...k", X, _TWIST)
    phi = np.broadcast_to(phi, grad.shape[:-1])
    return MappedValues(x=x, det=det, phi=phi, grad=grad, jinv=jinv, twist=twist)


# --------------------------------------------------------------------------
# dofs


@dataclass
class DofMap:
    mesh: QuadMesh
    cells: np.ndarray  # active cell ids
    cell_dofs: np.ndarray  # (C,4) vertex ids
    free: np.ndarray  # vertex ids of free dofs
    dirichlet: np.ndarray  # vertex ids
    hanging: dict  # vertex -> (a, b)
    P: sp.csr_matrix  # (V, n_free)
    dirichlet_markers: tuple = ()
    _patches: "PatchTable | None" = field(default=None, repr=False)
    _faces: "FaceTable | None" = field(default=None, repr=False)

    @property
    def n_dofs(self) -> int:
        return len(self.free)

    @property
    def n_vertices(self) -> int:
        return len(self.mesh.vertices)

    @property
    def n_used_vertices(self) -> int:
        return len(np.unique(self.cell_dofs))

    def expand(self, x: np.ndarray) -> np.ndarray:
        """Free-dof vector -> vertex values honoring all constraints."""
        return self.P @ x

    def restrict(self, r: np.ndarray) -> np.ndarray:
        """Vertex-space load vector -> free-dof load vector."""
        return self.P.T @ r

    def condense(self, A: sp.spmatrix) -> sp.csr_matrix:
        return (self.P.T @ sp.csr_matrix(A) @ self.P).tocsr()

    def interpolate(self, f) -> np.ndarray:
        """Nodal interpolant of f(x) (vectorised over rows) as free-dof vector."""
        return np.asarray(f(self.mesh.vertices[self.free]), dtype=float)

    def constrain(self, v: np.ndarray) -> np.ndarray:
        """Project a vertex vector onto the constrained space (idempotent)."""
        return self.P @ np.asarray(v)[self.free]

    @property
    def patches(self) -> "PatchTable":
        if self._patches is None:
            self._patches = build_patch_table(self.mesh, self.cells)
        return self._patches

    @property
    def faces(self) -> "FaceTable":
        if self._faces is None:
            self._faces = build_face_table(self.mesh)
        return self._faces


def build_dofmap(mesh: QuadMesh, dirichlet_markers) -> DofMap:
    cells = mesh.active_cells()
    cell_dofs = mesh.cells[cells]
    V = len(mesh.vertices)
    used = np.zeros(V, bool)
    used[cell_dofs.ravel()] = True

    dmask = np.zeros(V, bool)
    bc, be = mesh.boundary_faces(dirichlet_markers)
    if len(bc):
        dmask[mesh.cells[bc, be]] = True
        dmask[mesh.cells[bc, (be + 1) % 4]] = True

    hanging = mesh.hanging_nodes()
    hmask = np.zeros(V, bool)
    if hanging:
        hmask[list(hanging)] = True
    free_mask = used & ~dmask & ~hmask
    free = np.flatnonzero(free_mask)

    rows = list(free)
    cols = list(free)
    vals = [1.0] * len(free)
    for m, (a, b) in hanging.items():
        rows += [m, m]
        cols += [a, b]
        vals += [0.5, 0.5]
    C = sp.csr_matrix((vals, (rows, cols)), shape=(V, V))
    # substitute masters that are themselves constrained
    hcols = np.flatnonzero(hmask)
    for _ in range(8):
        if not len(hcols) or C[:, hcols].nnz == 0:
            break
        C = (C @ C).tocsr()
    C.data[np.abs(C.data) < 1e-15] = 0.0
    C.eliminate_zeros()
    P = C[:, free].tocsr()
    return DofMap(
        mesh=mesh,
        cells=cells,
        cell_dofs=cell_dofs,
        free=free,
        dirichlet=np.flatnonzero(dmask & used),
        hanging=hanging,
        P=P,
        dirichlet_markers=tuple(int(m) for m in dirichlet_markers),
    )


# --------------------------------------------------------------------------
# assembly


@dataclass
class CellValues:
    """Mapped Q1 data on all active cells at the points of a cell rule."""

    rule: QuadratureRule
    mv: MappedValues  # batch (C, nq)
    JxW: np.ndarray  # (C, nq)

    @property
    def x(self) -> np.ndarray:
        return self.mv.x


def cell_values(dm: DofMap, rule: QuadratureRule) -> CellValues:
    X = dm.mesh.vertices[dm.cell_dofs][:, None, :, :]
    mv = map_reference(X, rule.points[None, :, :])
    return CellValues(rule=rule, mv=mv, JxW=mv.det * rule.weights[None, :])


def _scatter_matrix(dm: DofMap, local: np.ndarray) -> sp.csr_matrix:
    V = dm.n_vertices
    I = np.repeat(dm.cell_dofs, 4, axis=1).ravel()
    J = np.tile(dm.cell_dofs, (1, 4)).ravel()
    return sp.csr_matrix((local.ravel(), (I, J)), shape=(V, V))


def _scatter_vector(dm: DofMap, local: np.ndarray) -> np.ndarray:
    return np.bincount(dm.cell_dofs.ravel(), weights=local.ravel(), minlength=dm.n_vertices)


def assemble(dm: DofMap, integrand, cv: CellValues):
    """Assemble a cell integrand into vertex space.

    ``integrand(cv)`` returns per-cell local arrays, either (C,4,4) for a
    bilinear form or (C,4) for a linear form.  The result is a sparse
    (V,V) matrix or a length-V vector; condense with ``dm.condense`` /
    ``dm.restrict``.
    """
    local = integrand(cv)
    if local.ndim == 3:
        return _scatter_matrix(dm, local)
    return _scatter_vector(dm, local)


def stiffness_integrand(coef=None):
    def f(cv: CellValues):
        w = cv.JxW if coef is None else cv.JxW * coef
        return np.einsum("cq,cqik,cqjk->cij", w, cv.mv.grad, cv.mv.grad)

    return f


def mass_integrand(coef=None):
    def f(cv: CellValues):
        w = cv.JxW if coef is None else cv.JxW * coef
        return np.einsum("cq,cqi,cqj->cij", w, cv.mv.phi, cv.mv.phi)

    return f


def load_integrand(values):
    def f(cv: CellValues):
        return np.einsum("cq,cqi->ci", cv.JxW * values, cv.mv.phi)

    return f


def stiffness(dm: DofMap, cv: CellValues, coef=None) -> sp.csr_matrix:
    return assemble(dm, stiffness_integrand(coef), cv)


def mass(dm: DofMap, cv: CellValues, coef=None) -> sp.csr_matrix:
    return assemble(dm, mass_integrand(coef), cv)


def load(dm: DofMap, cv: CellValues, values: np.ndarray) -> np.ndarray:
    return assemble(dm, load_integrand(values), cv)


def field_at_quadrature(dm: DofMap, cv: CellValues, v: np.ndarray):
    """Values (C,nq) and gradients (C,nq,2) of a vertex field."""
    coef = v[dm.cell_dofs][:, None, :]
    return cv.mv.value(coef), cv.mv.gradient(coef)


# --------------------------------------------------------------------------
# boundary faces


@dataclass
class FaceQuadrature:
    """Flattened quadrature on a set of boundary faces.

    One row per quadrature point: owning cell, local edge, face index,
    physical point, weight (JxW), the cell's 4 basis values and gradients,
    the outward normal and the arc-length parameter along the face.
    """

    cell: np.ndarray
    edge: np.ndarray
    face: np.ndarray
    x: np.ndarray
    JxW: np.ndarray
    dofs: np.ndarray  # (N,4) vertex ids
    mv: MappedValues
    normal: np.ndarray
    n_sub: np.ndarray  # subintervals per face

    def load(self, values: np.ndarray, n_vertices: int) -> np.ndarray:
        w = (self.JxW * values)[:, None] * self.mv.phi
        return np.bincount(self.dofs.ravel(), weights=w.ravel(), minlength=n_vertices)

    def values_of(self, v: np.ndarray) -> np.ndarray:
        return self.mv.value(v[self.dofs])


def face_quadrature(
    mesh: QuadMesh, cells: np.ndarray, edges: np.ndarray, n_sub=1, n_gauss: int = 3
) -> FaceQuadrature:
    cells = np.asarray(cells, dtype=np.int64)
    edges = np.asarray(edges, dtype=np.int64)
    nf = len(cells)
    n_sub = np.broadcast_to(np.asarray(n_sub, dtype=np.int64), (nf,)).copy()
    fidx, us, ws = [], [], []
    for n in np.unique(n_sub):
        sel = np.flatnonzero(n_sub == n)
        r = composite_line(int(n), n_gauss)
        fidx.append(np.repeat(sel, r.size))
        us.append(np.tile(r.points, len(sel)))
        ws.append(np.tile(r.weights, len(sel)))
    if nf:
        face = np.concatenate(fidx)
        u = np.concatenate(us)
        w = np.concatenate(ws)
        order = np.lexsort((u, face))
        face, u, w = face[order], u[order], w[order]
    else:
        face = np.zeros(0, np.int64)
        u = w = np.zeros(0)
    c, e = cells[face], edges[face]
    X = mesh.vertices[mesh.cells[c]]
    mv = map_reference(X, edge_reference(e, u))
    A = mesh.vertices[mesh.cells[c, e]]
    B = mesh.vertices[mesh.cells[c, (e + 1) % 4]]
    d = B - A
    length = np.linalg.norm(d, axis=1) if len(d) else np.zeros(0)
    normal = np.column_stack([d[:, 1], -d[:, 0]]) / length[:, None] if len(d) else np.zeros((0, 2))
    return FaceQuadrature(
        cell=c,
        edge=e,
        face=face,
        x=mv.x,
        JxW=w * length,
        dofs=mesh.cells[c],
        mv=mv,
        normal=normal,
        n_sub=n_sub,
    )


def boundary_quadrature(
    mesh: QuadMesh,
    cells: np.ndarray,
    edges: np.ndarray,
    integrand,
    rtol: float = 1e-10,
    n_gauss: int = 3,
    max_sub: int = 4096,
) -> FaceQuadrature:
    """Composite Gauss rule on faces, doubled per face until resolved.

    ``integrand(x)`` is evaluated at physical points (N,2).  A face is
    resolved when its integral changes by at most ``rtol`` relative (to the
    largest face integral, so flux-free faces stop at one subinterval) under
    one further doubling.
    """
    nf = len(cells)
    n_sub = np.ones(nf, dtype=np.int64)
    todo = np.ones(nf, bool)
    scale = None
    while np.any(todo):
        idx = np.flatnonzero(todo)
        qa = face_quadrature(mesh, cells[idx], edges[idx], n_sub[idx], n_gauss)
        qb = face_quadrature(mesh, cells[idx], edges[idx], 2 * n_sub[idx], n_gauss)
        Ia = np.bincount(qa.face, weights=qa.JxW * integrand(qa.x), minlength=len(idx))
        Ib = np.bincount(qb.face, weights=qb.JxW * integrand(qb.x), minlength=len(idx))
        if scale is None:
            scale = max(np.max(np.abs(Ib)) if len(Ib) else 0.0, 1e-300)
        ok = np.abs(Ib - Ia) <= rtol * np.maximum(np.abs(Ib), scale)
        todo[idx[ok]] = False
        n_sub[idx[~ok]] *= 2
        if np.any(n_sub[todo] > max_sub):
            raise QuadratureTooCoarse(
                f"boundary integrand unresolved with {max_sub} subintervals"
            )
    return face_quadrature(mesh, cells, edges, n_sub, n_gauss)


# --------------------------------------------------------------------------
# interior faces (for jump terms)


@dataclass
class FaceTable:
    """Interfaces between active cells, one row per smallest common edge.

    ``small`` owns the integration edge ``small_edge``; ``other`` is the
    neighbour across it (same level or one coarser).
    """

    small: np.ndarray
    small_edge: np.ndarray
    other: np.ndarray
    other_edge: np.ndarray


def build_face_table(mesh: QuadMesh) -> FaceTable:
    act = mesh.active
    small, se, other, oe = [], [], [], []
    cells = mesh.cells
    for c in np.flatnonzero(act):
        vs = cells[c]
        for j in range(4):
            if mesh.face_marker[c, j] >= 0:
                continue
            a, b = int(vs[j]), int(vs[(j + 1) % 4])
            key = _edge_key(a, b)
            if key in mesh.midpoints:
                continue  # finer neighbours own these interfaces
            nbrs = [n for n in mesh.edge_cells.get(key, ()) if n != c and act[n]]
            if nbrs:
                n = nbrs[0]
                if n < c:
                    continue  # conforming face, counted once
                small.append(c)
                se.append(j)
                other.append(n)
                oe.append(_local_edge(mesh, n, a, b))
                continue
            n = mesh.coarser_neighbor(c, j)
            if n < 0:
                raise NoPatch(f"no neighbour across edge {j} of cell {c}")
            small.append(c)
            se.append(j)
            other.append(n)
            oe.append(_edge_containing(mesh, n, a, b))
    return FaceTable(
        np.asarray(small, np.int64),
        np.asarray(se, np.int64),
        np.asarray(other, np.int64),
        np.asarray(oe, np.int64),
    )


def _local_edge(mesh: QuadMesh, c: int, a: int, b: int) -> int:
    vs = list(mesh.cells[c])
    for j in range(4):
        if {vs[j], vs[(j + 1) % 4]} == {a, b}:
            return j
    raise ValueError("edge not found")


def _edge_containing(mesh: QuadMesh, c: int, a: int, b: int) -> int:
    vs = mesh.cells[c]
    for j in range(4):
        m = mesh.midpoints.get(_edge_key(int(vs[j]), int(vs[(j + 1) % 4])))
        if m is not None and m in (a, b):
            return j
    raise ValueError("half edge not found on coarse neighbour")


def edge_parameter(mesh: QuadMesh, cells, edges, x) -> np.ndarray:
    """Arc-length parameter in [0,1] of points x on the straight local edges."""
    A = mesh.vertices[mesh.cells[cells, edges]]
    B = mesh.vertices[mesh.cells[cells, (edges + 1) % 4]]
    d = B - A
    return np.einsum("nk,nk->n", x - A, d) / np.einsum("nk,nk->n", d, d)


# --------------------------------------------------------------------------
# patch-quadratic reconstruction


@dataclass
class PatchTable:
    """For every active cell: its position in the patch and the 9 patch nodes.

    ``grid[c, ix, iy]`` is the vertex at patch-reference point (ix/2, iy/2).
    """

    child_index: np.ndarray  # (C,)
    grid: np.ndarray  # (C,3,3)


_CHILD_OFF = np.array([[0, 0], [1, 0], [1, 1], [0, 1]])
_LOCAL = np.array([[0, 0], [1, 0], [1, 1], [0, 1]])


def build_patch_table(mesh: QuadMesh, cells: np.ndarray) -> PatchTable:
    par = mesh.parent[cells]
    if np.any(par < 0):
        raise NoPatch("level-0 cells have no patch; refine the coarse mesh once")
    kids = mesh.children[par]  # (C,4)
    if np.any(mesh.children[kids.ravel(), 0] >= 0):
        raise NoPatch("a patch contains refined cells")
    child_index = np.argmax(kids == cells[:, None], axis=1)
    grid = np.empty((len(cells), 3, 3), dtype=np.int64)
    for i in range(4):
        for k in range(4):
            ix, iy = _CHILD_OFF[i] + _LOCAL[k]
            grid[:, ix, iy] = mesh.cells[kids[:, i], k]
    return PatchTable(child_index=child_index, grid=grid)


def _quad_lagrange(S: np.ndarray) -> np.ndarray:
    return np.stack(
        [2 * (S - 0.5) * (S - 1.0), -4 * S * (S - 1.0), 2 * S * (S - 0.5)], axis=-1
    )


def pi_h_values(dm: DofMap, rows: np.ndarray, ref: np.ndarray, v: np.ndarray) -> np.ndarray:
    """(I_2h^(2) - id) v at reference points of active cells.

    ``rows`` index into ``dm.cells`` (broadcast with ``ref[...,0]``),
    ``v`` is a vertex-space field.
    """
    pt = dm.patches
    rows = np.asarray(rows)
    off = _CHILD_OFF[pt.child_index[rows]]
    S = 0.5 * (off[..., 0] + ref[..., 0])
    T = 0.5 * (off[..., 1] + ref[..., 1])
    LS, LT = _quad_lagrange(S), _quad_lagrange(T)
    nodal = v[pt.grid[rows]]  # (...,3,3)
    quad = np.einsum("...a,...b,...ab->...", LS, LT, nodal)
    lin = np.einsum("...i,...i->...", q1_values(ref), v[dm.cell_dofs[rows]])
    return quad - lin


def _quad_lagrange_derivative(S: np.ndarray) -> np.ndarray:
    return np.stack([4 * S - 3.0, -8 * S + 4.0, 4 * S - 1.0], axis=-1)


def pi_h_gradients(
    dm: DofMap, rows: np.ndarray, ref: np.ndarray, v: np.ndarray, jinv: np.ndarray
) -> np.ndarray:
    """Physical gradient of (I_2h^(2) - id) v at reference points of active cells.

    ``jinv`` is the inverse Jacobian of the cell maps at ``ref`` (as in
    :class:`MappedValues`).  Because child cells inherit the bilinear map
    of their parent, the patch coordinates are affine in the child's
    reference coordinates (factor 1/2).
    """
    pt = dm.patches
    rows = np.asarray(rows)
    off = _CHILD_OFF[pt.child_index[rows]]
    S = 0.5 * (off[..., 0] + ref[..., 0])
    T = 0.5 * (off[..., 1] + ref[..., 1])
    LS, LT = _quad_lagrange(S), _quad_lagrange(T)
    dLS, dLT = _quad_lagrange_derivative(S), _quad_lagrange_derivative(T)
    nodal = v[pt.grid[rows]]
    ds = 0.5 * np.einsum("...a,...b,...ab->...", dLS, LT, nodal)
    dt = 0.5 * np.einsum("...a,...b,...ab->...", LS, dLT, nodal)
    dq = np.stack([ds, dt], axis=-1)
    dlin = np.einsum("...ia,...i->...a", q1_derivatives(ref), v[dm.cell_dofs[rows]])
    return np.einsum("...a,...ak->...k", dq - dlin, jinv)


def pi_h_grad(dm: DofMap, v: np.ndarray, cv: CellValues) -> np.ndarray:
    """Gradient of Π_h v at the points of ``cv`` on every active cell, (C,nq,2)."""
    C, nq = cv.JxW.shape
    rows = np.broadcast_to(np.arange(C)[:, None], (C, nq))
    ref = np.broadcast_to(cv.rule.points[None], (C, nq, 2))
    return pi_h_gradients(dm, rows, ref, v, cv.mv.jinv)


def pi_h(dm: DofMap, v: np.ndarray, rule: QuadratureRule) -> np.ndarray:
    """Π_h v at the points of ``rule`` on every active cell, shape (C,nq)."""
    C = len(dm.cells)
    rows = np.broadcast_to(np.arange(C)[:, None], (C, rule.size))
    ref = np.broadcast_to(rule.points[None], (C, rule.size, 2))
    return pi_h_values(dm, rows, ref, v)


# --------------------------------------------------------------------------
# fields


class FieldFn:
    """Finite-element function (vertex values + dof map), evaluable at points."""

    def __init__(self, dm: DofMap, values: np.ndarray, name: str = "u"):
        values = np.asarray(values, dtype=float)
        if len(values) == dm.n_dofs:
            values = dm.expand(values)
        self.dm = dm
        self.values = values
        self.name = name
        self._tree = None

    def _locate(self, pts: np.ndarray):
        mesh = self.dm.mesh
        X = mesh.vertices[self.dm.cell_dofs]
        if self._tree is None:
            self._tree = cKDTree(X.mean(axis=1))
        k = min(12, len(X))
        _, cand = self._tree.query(pts, k=k)
        cand = np.atleast_2d(cand)
        rows = -np.ones(len(pts), np.int64)
        refs = np.zeros((len(pts), 2))
        for j in range(cand.shape[1]):
            todo = rows < 0
            if not np.any(todo):
                break
            c = cand[todo, j]
            ref = _invert_map(X[c], pts[todo])
            inside = np.all((ref >= -1e-10) & (ref <= 1 + 1e-10), axis=1)
            idx = np.flatnonzero(todo)[inside]
            rows[idx] = c[inside]
            refs[idx] = np.clip(ref[inside], 0.0, 1.0)
        return rows, refs

    def __call__(self, pts) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        rows, refs = self._locate(pts)
        if np.any(rows < 0):
            raise ValueError("point outside the mesh")
        phi = q1_values(refs)
        return np.einsum("ni,ni->n", phi, self.values[self.dm.cell_dofs[rows]])

    def write_vtk(self, path, extra: dict | None = None, cell_data: dict | None = None):
        data = {self.name: self.values}
        data.update(extra or {})
        write_vtk(path, self.dm.mesh, point_data=data, cell_data=cell_data)


def _invert_map(X: np.ndarray, pts: np.ndarray, iters: int = 30) -> np.ndarray:
    ref = np.full((len(pts), 2), 0.5)
    for _ in range(iters):
        mv = map_reference(X, ref)
        J = np.einsum("nik,nia->nka", X, q1_derivatives(ref))
        r = mv.x - pts
        step = np.linalg.solve(J, r[..., None])[..., 0]
        ref = ref - step
        if np.max(np.abs(step), initial=0.0) < 1e-14:
            break
    return ref

