"""Hierarchical quadrilateral meshes with 1-irregular local refinement.

Cells are stored for every level; a refined cell keeps its four children
(a "patch").  Vertex ordering within a cell is counterclockwise starting at
the reference corner (0, 0):

    v3 ---- v2
    |        |
    v0 ---- v1

Edge ``j`` joins ``v_j`` and ``v_{j+1}``.  Children are numbered like the
corners they contain.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np


class Marker(IntEnum):
    NONE = -1
    DIRICHLET_OUTER = 0
    PIP_TIP = 1
    PIP_WALL = 2
    SLIT_TOP = 3
    SLIT_REST = 4


class MeshError(ValueError):
    pass


class InvalidResolution(MeshError):
    pass


class GeometryError(MeshError):
    pass


class NoPatch(MeshError):
    pass


# For child i: which parent edge each of its 4 edges lies on (-1: interior).
CHILD_EDGE_ON_PARENT = np.array(
    [[0, -1, -1, 3], [0, 1, -1, -1], [-1, 1, 2, -1], [-1, -1, 2, 3]]
)
# Offsets of child i in the parent's reference square [0,1]^2.
CHILD_OFFSET = np.array([[0.0, 0.0], [0.5, 0.0], [0.5, 0.5], [0.0, 0.5]])


def _edge_key(a: int, b: int) -> tuple[int, int]:
    return (a, b) if a < b else (b, a)


@dataclass
class QuadMesh:
    vertices: np.ndarray  # (V, 2)
    cells: np.ndarray  # (C, 4)
    level: np.ndarray
    parent: np.ndarray
    children: np.ndarray  # (C, 4), -1 when unrefined
    face_marker: np.ndarray  # (C, 4)
    subdomain: np.ndarray  # (C,) bool, observation region
    vertex_parents: np.ndarray  # (V, 4), -1 padded; midpoints use 2, centres 4
    midpoints: dict = field(repr=False)
    edge_cells: dict = field(repr=False)
    name: str = "mesh"

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def active(self) -> np.ndarray:
        return self.children[:, 0] < 0

    def active_cells(self) -> np.ndarray:
        return np.flatnonzero(self.active)

    @property
    def n_active(self) -> int:
        return int(self.active.sum())

    def used_vertices(self) -> np.ndarray:
        return np.unique(self.cells[self.active_cells()])

    def cell_vertices(self, cells=None) -> np.ndarray:
        """Coordinates (n, 4, 2) of the given (default: active) cells."""
        if cells is None:
            cells = self.active_cells()
        return self.vertices[self.cells[cells]]

    def cell_areas(self, cells=None) -> np.ndarray:
        xy = self.cell_vertices(cells)
        x, y = xy[..., 0], xy[..., 1]
        return 0.5 * np.abs(
            np.sum(x * np.roll(y, -1, axis=1) - np.roll(x, -1, axis=1) * y, axis=1)
        )

    def hanging_nodes(self) -> dict[int, tuple[int, int]]:
        """Hanging vertex -> (master, master) along the coarse edge."""
        hanging: dict[int, tuple[int, int]] = {}
        cells = self.cells
        for c in self.active_cells():
            vs = cells[c]
            for j in range(4):
                a, b = int(vs[j]), int(vs[(j + 1) % 4])
                m = self.midpoints.get(_edge_key(a, b))
                if m is not None:
                    hanging[m] = (a, b)
        return hanging

    def boundary_faces(self, markers=None) -> tuple[np.ndarray, np.ndarray]:
        """(cell ids, local edge ids) of active boundary faces with given markers."""
        act = self.active_cells()
        fm = self.face_marker[act]
        if markers is None:
            mask = fm >= 0
        else:
            mask = np.isin(fm, [int(m) for m in markers])
        ci, ei = np.nonzero(mask)
        return act[ci], ei

    def face_length(self, cells, edges) -> np.ndarray:
        a = self.vertices[self.cells[cells, edges]]
        b = self.vertices[self.cells[cells, (edges + 1) % 4]]
        return np.linalg.norm(b - a, axis=1)

    def coarser_neighbor(self, c: int, j: int) -> int:
        """Active neighbour one level coarser across edge j of cell c, or -1."""
        p = self.parent[c]
        if p < 0:
            return -1
        child_idx = int(np.flatnonzero(self.children[p] == c)[0])
        pe = CHILD_EDGE_ON_PARENT[child_idx, j]
        if pe < 0:
            return -1
        vs = self.cells[c]
        key = _edge_key(int(vs[j]), int(vs[(j + 1) % 4]))
        if len(self.edge_cells.get(key, ())) > 1:
            return -1
        pv = self.cells[p]
        pkey = _edge_key(int(pv[pe]), int(pv[(pe + 1) % 4]))
        for n in self.edge_cells.get(pkey, ()):
            if n != p and self.children[n, 0] < 0:
                return int(n)
        return -1

    def copy(self) -> "QuadMesh":
        return QuadMesh(
            vertices=self.vertices.copy(),
            cells=self.cells.copy(),
            level=self.level.copy(),
            parent=self.parent.copy(),
            children=self.children.copy(),
            face_marker=self.face_marker.copy(),
            subdomain=self.subdomain.copy(),
            vertex_parents=self.vertex_parents.copy(),
            midpoints=dict(self.midpoints),
            edge_cells={k: list(v) for k, v in self.edge_cells.items()},
            name=self.name,
        )


def _build(vertices, cells, markers, subdomain, name) -> QuadMesh:
    vertices = np.asarray(vertices, dtype=float)
    cells = np.asarray(cells, dtype=np.int64).reshape(-1, 4)
    n = len(cells)
    edge_cells: dict = {}
    for c, vs in enumerate(cells.tolist()):
        for j in range(4):
            edge_cells.setdefault(_edge_key(vs[j], vs[(j + 1) % 4]), []).append(c)
    mesh = QuadMesh(
        vertices=vertices,
        cells=cells,
        level=np.zeros(n, dtype=np.int64),
        parent=-np.ones(n, dtype=np.int64),
        children=-np.ones((n, 4), dtype=np.int64),
        face_marker=np.asarray(markers, dtype=np.int64).reshape(-1, 4),
        subdomain=np.asarray(subdomain, dtype=bool),
        vertex_parents=-np.ones((len(vertices), 4), dtype=np.int64),
        midpoints={},
        edge_cells=edge_cells,
        name=name,
    )
    _check_orientation(mesh)
    return mesh


def _check_orientation(mesh: QuadMesh) -> None:
    xy = mesh.vertices[mesh.cells]
    for k in range(4):
        a, b, c = xy[:, k], xy[:, (k + 1) % 4], xy[:, (k + 2) % 4]
        cross = (b[:, 0] - a[:, 0]) * (c[:, 1] - b[:, 1]) - (b[:, 1] - a[:, 1]) * (
            c[:, 0] - b[:, 0]
        )
        if np.any(cross <= 0):
            raise GeometryError("mesh contains non-convex or clockwise cells")


# --------------------------------------------------------------------------
# refinement


def _closure(mesh: QuadMesh, marks) -> list[int]:
    """Marked cells plus everything needed for 1-irregularity and patches.

    Cells are refined together with their siblings so that every active cell
    above level 0 keeps a complete four-cell patch.
    """
    todo = [int(c) for c in marks if mesh.children[int(c), 0] < 0]
    selected = set(todo)
    while todo:
        c = todo.pop()
        extra = []
        p = mesh.parent[c]
        if p >= 0:
            extra.extend(int(s) for s in mesh.children[p] if mesh.children[s, 0] < 0)
        for j in range(4):
            extra.append(mesh.coarser_neighbor(c, j))
        for n in extra:
            if n >= 0 and n not in selected:
                selected.add(n)
                todo.append(n)
    # parents before children is automatic: all selected cells are active
    return sorted(selected, key=lambda c: (mesh.level[c], c))


def refine(mesh: QuadMesh, marks) -> QuadMesh:
    """Refine marked active cells, adding closure to keep 1-irregularity."""
    marks = list(marks)
    if not marks:
        return mesh.copy()
    selected = _closure(mesh, marks)
    out = mesh.copy()

    verts = out.vertices.tolist()
    vparents = out.vertex_parents.tolist()
    cells = out.cells.tolist()
    level = out.level.tolist()
    parent = out.parent.tolist()
    children = out.children.tolist()
    markers = out.face_marker.tolist()
    subdomain = out.subdomain.tolist()
    midpoints = out.midpoints
    edge_cells = out.edge_cells

    def new_vertex(xy, parents):
        verts.append(xy)
        vparents.append(list(parents) + [-1] * (4 - len(parents)))
        return len(verts) - 1

    for c in selected:
        v0, v1, v2, v3 = cells[c]
        vs = (v0, v1, v2, v3)
        mids = []
        for j in range(4):
            a, b = vs[j], vs[(j + 1) % 4]
            key = _edge_key(a, b)
            m = midpoints.get(key)
            if m is None:
                xa, xb = verts[a], verts[b]
                m = new_vertex([0.5 * (xa[0] + xb[0]), 0.5 * (xa[1] + xb[1])], key)
                midpoints[key] = m
            mids.append(m)
        m0, m1, m2, m3 = mids
        centre = new_vertex(
            [sum(verts[v][0] for v in vs) / 4.0, sum(verts[v][1] for v in vs) / 4.0],
            vs,
        )
        kids = [
            (v0, m0, centre, m3),
            (m0, v1, m1, centre),
            (centre, m1, v2, m2),
            (m3, centre, m2, v3),
        ]
        pm = markers[c]
        first = len(cells)
        for i, kv in enumerate(kids):
            cells.append(list(kv))
            level.append(level[c] + 1)
            parent.append(c)
            children.append([-1, -1, -1, -1])
            subdomain.append(subdomain[c])
            markers.append(
                [pm[pe] if pe >= 0 else -1 for pe in CHILD_EDGE_ON_PARENT[i]]
            )
            cid = first + i
            for j in range(4):
                key = _edge_key(kv[j], kv[(j + 1) % 4])
                edge_cells.setdefault(key, []).append(cid)
        children[c] = [first, first + 1, first + 2, first + 3]

    return QuadMesh(
        vertices=np.asarray(verts, dtype=float),
        cells=np.asarray(cells, dtype=np.int64),
        level=np.asarray(level, dtype=np.int64),
        parent=np.asarray(parent, dtype=np.int64),
        children=np.asarray(children, dtype=np.int64),
        face_marker=np.asarray(markers, dtype=np.int64),
        subdomain=np.asarray(subdomain, dtype=bool),
        vertex_parents=np.asarray(vparents, dtype=np.int64),
        midpoints=midpoints,
        edge_cells=edge_cells,
        name=mesh.name,
    )


def refine_global(mesh: QuadMesh) -> QuadMesh:
    return refine(mesh, mesh.active_cells())


def patch_parent(mesh: QuadMesh, cell: int) -> np.ndarray:
    """The four sibling cells forming the patch that contains ``cell``."""
    p = mesh.parent[cell]
    if p < 0:
        raise NoPatch(f"cell {cell} is on level 0 and has no patch")
    return mesh.children[p].copy()


def max_level_jump(mesh: QuadMesh) -> int:
    """Largest level difference across faces of active cells (exhaustive scan).

    An active cell whose edge has a midpoint sees a neighbour one level
    finer; a midpoint on one of the half edges means two levels.
    """
    worst = 0
    for c in mesh.active_cells():
        vs = mesh.cells[c]
        for j in range(4):
            a, b = int(vs[j]), int(vs[(j + 1) % 4])
            m = mesh.midpoints.get(_edge_key(a, b))
            if m is None:
                continue
            depth = 1
            if _edge_key(a, m) in mesh.midpoints or _edge_key(m, b) in mesh.midpoints:
                depth = 2
            worst = max(worst, depth)
    return worst


def transfer_vertex_field(old: QuadMesh, new: QuadMesh, values: np.ndarray) -> np.ndarray:
    """Interpolate a vertex field onto ``new = refine(old, ...)`` (nested Q1 spaces).

    Vertices created by one refinement step have only pre-existing parents,
    so midpoint and centre values are plain averages.
    """
    n_old = len(old.vertices)
    out = np.zeros(len(new.vertices))
    out[:n_old] = values
    vp = new.vertex_parents[n_old:]
    if len(vp):
        mask = vp >= 0
        vals = np.where(mask, out[np.where(mask, vp, 0)], 0.0)
        out[n_old:] = vals.sum(axis=1) / mask.sum(axis=1)
    return out


# --------------------------------------------------------------------------
# generators


def make_unit_square(n: int, marker: Marker = Marker.DIRICHLET_OUTER) -> QuadMesh:
    """Uniform n x n mesh of the unit square with one boundary marker."""
    xs = np.linspace(0.0, 1.0, n + 1)
    verts = [(x, y) for y in xs for x in xs]
    cells, marks = [], []
    for j in range(n):
        for i in range(n):
            v0 = j * (n + 1) + i
            cells.append((v0, v0 + 1, v0 + n + 2, v0 + n + 1))
            marks.append(
                (
                    marker if j == 0 else -1,
                    marker if i == n - 1 else -1,
                    marker if j == n - 1 else -1,
                    marker if i == 0 else -1,
                )
            )
    return _build(verts, cells, marks, np.ones(len(cells), bool), "square")


def make_slit_mesh(n0: int) -> QuadMesh:
    """Unit square minus the slit {x = 0.5, 0 < y < 0.5}, n0 x n0 cells.

    Vertices on the slit below its tip are duplicated so the two sides are
    topologically disconnected.  The top edge is SLIT_TOP, everything else
    (outer boundary and both slit faces) SLIT_REST.
    """
    if n0 < 2 or n0 % 2:
        raise InvalidResolution(f"n0={n0}: the slit x=0.5 must be a mesh line")
    xs = np.linspace(0.0, 1.0, n0 + 1)
    h = n0 // 2
    verts = [(x, y) for y in xs for x in xs]
    dup = {}
    for j in range(h):  # y_j < 0.5
        dup[j * (n0 + 1) + h] = len(verts)
        verts.append((0.5, xs[j]))
    top, rest = int(Marker.SLIT_TOP), int(Marker.SLIT_REST)
    cells, marks = [], []
    for j in range(n0):
        for i in range(n0):
            v0 = j * (n0 + 1) + i
            vs = [v0, v0 + 1, v0 + n0 + 2, v0 + n0 + 1]
            if i == h:
                vs[0] = dup.get(vs[0], vs[0])
                vs[3] = dup.get(vs[3], vs[3])
            slit_left = i == h and j < h
            slit_right = i == h - 1 and j < h
            cells.append(vs)
            marks.append(
                (
                    rest if j == 0 else -1,
                    rest if (i == n0 - 1 or slit_right) else -1,
                    top if j == n0 - 1 else -1,
                    rest if (i == 0 or slit_left) else -1,
                )
            )
    return _build(verts, cells, marks, np.ones(len(cells), bool), "slit")


@dataclass(frozen=True)
class PipetteGeometry:
    """Placement of the pipette in the simulation box (lengths in um)."""

    width: float = 40.0
    height: float = 60.0
    tip_x: float = 20.0
    tip_y: float = 30.0
    # observation region (x0, x1, y0, y1)
    obs: tuple[float, float, float, float] = (4.0, 36.0, 20.0, 55.0)
    resolution: int = 1


def _graded(a: float, b: float, n: int, ratio: float = 1.0) -> np.ndarray:
    """n intervals from a to b; each interval ``ratio`` times the previous."""
    if n <= 0:
        return np.array([a, b])
    w = ratio ** np.arange(n)
    t = np.concatenate([[0.0], np.cumsum(w) / w.sum()])
    return a + (b - a) * t


def pipette_outline(theta_deg: float, d: float, s0: float, geom: PipetteGeometry):
    """Return (half width at tip, function y -> outer wall half width)."""
    t = math.tan(math.radians(theta_deg))
    half_tip = 0.5 * s0 + d / math.cos(math.radians(theta_deg))

    def half_width(y):
        return half_tip + t * (np.asarray(y) - geom.tip_y)

    return half_tip, half_width


def make_pipette_mesh(params, geom: PipetteGeometry | None = None) -> QuadMesh:
    """Boundary-fitted mesh of the box minus the wedge-shaped pipette.

    ``params`` needs ``theta``, ``d`` and ``s0`` (CircuitParams).  The pipette
    tip sits at (tip_x, tip_y) and the cone opens upwards to the top of the
    box.  Faces of the tip opening are PIP_TIP, the rest of the pipette
    outline PIP_WALL, the box DIRICHLET_OUTER.
    """
    geom = geom or PipetteGeometry()
    theta, d, s0 = float(params.theta), float(params.d), float(params.s0)
    if not (0.0 < theta < 45.0):
        raise GeometryError(f"inclination {theta} deg outside (0, 45)")
    if d <= 0 or s0 <= 0:
        raise GeometryError("wall thickness and tip opening must be positive")
    x0, x1, y0, y1 = geom.obs
    half_tip, half_width = pipette_outline(theta, d, s0, geom)
    xc, yt = geom.tip_x, geom.tip_y
    wl0, wr0 = xc - half_tip, xc + half_tip
    w_top = float(half_width(geom.height))
    if not (0 < x0 < wl0 and wr0 < x1 < geom.width):
        raise GeometryError("observation box does not enclose the pipette tip")
    if xc - w_top <= x0 or xc + w_top >= x1:
        raise GeometryError("pipette wall leaves the observation columns inside the box")
    if not (0 < y0 < yt < y1 < geom.height):
        raise GeometryError("tip must lie inside the observation rows")

    r = max(1, int(geom.resolution))
    # 1D node sets (graded towards the pipette tip)
    xl = np.concatenate(
        [
            _graded(0.0, x0, 2 * r)[:-1],
            _graded(x0, wl0, 5 * r, 0.75)[:-1],
            _graded(wl0, xc - 0.5 * s0, r)[:-1],
            _graded(xc - 0.5 * s0, xc, r)[:-1],
        ]
    )
    xs = np.concatenate([xl, [xc], (2 * xc - xl)[::-1]])
    ys_low = np.concatenate(
        [_graded(0.0, y0, 3 * r, 0.8)[:-1], _graded(y0, yt, 4 * r, 0.7)]
    )
    ys_up = np.concatenate(
        [_graded(yt, y1, 6 * r, 1.3)[:-1], _graded(y1, geom.height, r)]
    )
    n_out = 2 * r  # columns in [0, x0]
    n_in = 5 * r  # columns between x0 and the wall
    t_in = (_graded(x0, wl0, n_in, 0.75) - x0) / (wl0 - x0)

    index: dict = {}
    verts: list = []

    def vid(x, y):
        key = (round(float(x), 9), round(float(y), 9))
        v = index.get(key)
        if v is None:
            v = len(verts)
            index[key] = v
            verts.append((float(x), float(y)))
        return v

    D, TIP, WALL = int(Marker.DIRICHLET_OUTER), int(Marker.PIP_TIP), int(Marker.PIP_WALL)
    cells, marks = [], []

    # lower block: tensor grid below the tip
    nx = len(xs) - 1
    for j in range(len(ys_low) - 1):
        for i in range(nx):
            vs = [
                vid(xs[i], ys_low[j]),
                vid(xs[i + 1], ys_low[j]),
                vid(xs[i + 1], ys_low[j + 1]),
                vid(xs[i], ys_low[j + 1]),
            ]
            top = -1
            if j == len(ys_low) - 2:
                xm = 0.5 * (xs[i] + xs[i + 1])
                if abs(xm - xc) < 0.5 * s0:
                    top = TIP
                elif wl0 - 1e-12 <= xm <= wr0 + 1e-12:
                    top = WALL
            cells.append(vs)
            marks.append(
                (D if j == 0 else -1, D if i == nx - 1 else -1, top, D if i == 0 else -1)
            )

    # upper blocks: left of the left wall, mirrored on the right
    def wall_columns(y, side):
        w = float(half_width(y))
        if side < 0:
            inner = x0 + t_in * (xc - w - x0)
            return np.concatenate([xs[:n_out], inner])
        inner = 2 * xc - (x0 + t_in * (xc - w - x0))
        return np.concatenate([inner[::-1], (2 * xc - xs[:n_out])[::-1]])

    for side in (-1, 1):
        for j in range(len(ys_up) - 1):
            ya, yb = ys_up[j], ys_up[j + 1]
            ca, cb = wall_columns(ya, side), wall_columns(yb, side)
            ncol = len(ca) - 1
            for i in range(ncol):
                vs = [vid(ca[i], ya), vid(ca[i + 1], ya), vid(cb[i + 1], yb), vid(cb[i], yb)]
                right = -1
                left = -1
                if side < 0:
                    left = D if i == 0 else -1
                    right = WALL if i == ncol - 1 else -1
                else:
                    left = WALL if i == 0 else -1
                    right = D if i == ncol - 1 else -1
                top = D if j == len(ys_up) - 2 else -1
                cells.append(vs)
                marks.append((-1, right, top, left))

    verts_arr = np.asarray(verts)
    centres = verts_arr[np.asarray(cells)].mean(axis=1)
    obs = (
        (centres[:, 0] > x0) & (centres[:, 0] < x1) & (centres[:, 1] > y0) & (centres[:, 1] < y1)
    )
    return _build(verts_arr, cells, marks, obs, "pipette")


def pipette_area(params, geom: PipetteGeometry | None = None) -> float:
    """Area of the pipette polygon inside the box (shoelace formula)."""
    geom = geom or PipetteGeometry()
    half_tip, half_width = pipette_outline(params.theta, params.d, params.s0, geom)
    w = float(half_width(geom.height))
    poly = np.array(
        [
            (geom.tip_x - half_tip, geom.tip_y),
            (geom.tip_x + half_tip, geom.tip_y),
            (geom.tip_x + w, geom.height),
            (geom.tip_x - w, geom.height),
        ]
    )
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


# --------------------------------------------------------------------------
# output


def write_vtk(
    path,
    mesh: QuadMesh,
    point_data: dict | None = None,
    cell_data: dict | None = None,
    title: str = "adaptkkt",
) -> None:
    """Legacy ASCII VTK unstructured grid of the active cells.

    ``point_data`` arrays are indexed by mesh vertex, ``cell_data`` arrays by
    position in ``mesh.active_cells()``.
    """
    act = mesh.active_cells()
    conn = mesh.cells[act]
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\n")
        fh.write(f"{title}\nASCII\nDATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {len(mesh.vertices)} double\n")
        for x, y in mesh.vertices:
            fh.write(f"{x:.12g} {y:.12g} 0\n")
        fh.write(f"CELLS {len(conn)} {5 * len(conn)}\n")
        for c in conn:
            fh.write(f"4 {c[0]} {c[1]} {c[2]} {c[3]}\n")
        fh.write(f"CELL_TYPES {len(conn)}\n")
        fh.write("9\n" * len(conn))
        if cell_data:
            fh.write(f"CELL_DATA {len(conn)}\n")
            for name, vals in cell_data.items():
                fh.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
                fh.write("\n".join(f"{v:.12g}" for v in np.asarray(vals)) + "\n")
        if point_data:
            fh.write(f"POINT_DATA {len(mesh.vertices)}\n")
            for name, vals in point_data.items():
                fh.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
                fh.write("\n".join(f"{v:.12g}" for v in np.asarray(vals)) + "\n")
