import numpy as np
import pytest

from adaptkkt.mesh import (
    GeometryError,
    InvalidResolution,
    Marker,
    NoPatch,
    PipetteGeometry,
    make_pipette_mesh,
    make_slit_mesh,
    make_unit_square,
    max_level_jump,
    patch_parent,
    pipette_area,
    refine,
    refine_global,
    transfer_vertex_field,
    write_vtk,
)
from adaptkkt.problems import CircuitParams


def _duplicated_pairs(mesh):
    used = mesh.used_vertices()
    pts = [tuple(np.round(mesh.vertices[v], 12)) for v in used]
    return len(pts) - len(set(pts))


def _on_segment(p, a, b):
    d = b - a
    cross = d[0] * (p[1] - a[1]) - d[1] * (p[0] - a[0])
    t = np.dot(p - a, d) / np.dot(d, d)
    return abs(cross) < 1e-12 and -1e-12 <= t <= 1 + 1e-12


def _share_face(mesh, f, c):
    """True if an edge of cell f lies on an edge of cell c (f != c)."""
    if f == c:
        return False
    F, C = mesh.vertices[mesh.cells[f]], mesh.vertices[mesh.cells[c]]
    for i in range(4):
        a, b = F[i], F[(i + 1) % 4]
        for j in range(4):
            if _on_segment(a, C[j], C[(j + 1) % 4]) and _on_segment(b, C[j], C[(j + 1) % 4]):
                return True
    return False


def test_slit_n0_2():
    mesh = make_slit_mesh(2)
    assert mesh.n_active == 4
    assert len(mesh.used_vertices()) == 10
    assert _duplicated_pairs(mesh) == 1


def test_slit_n0_4():
    mesh = make_slit_mesh(4)
    assert mesh.n_active == 16
    assert _duplicated_pairs(mesh) == 2


@pytest.mark.parametrize("n0", [3, 1, 0])
def test_slit_invalid_resolution(n0):
    with pytest.raises(InvalidResolution):
        make_slit_mesh(n0)


def test_slit_markers():
    mesh = make_slit_mesh(4)
    c, e = mesh.boundary_faces([Marker.SLIT_TOP])
    assert np.isclose(mesh.face_length(c, e).sum(), 1.0)
    c, e = mesh.boundary_faces([Marker.SLIT_REST])
    # three outer sides plus both sides of the slit
    assert np.isclose(mesh.face_length(c, e).sum(), 3.0 + 2 * 0.5)


def test_slit_is_topologically_open():
    mesh = make_slit_mesh(2)
    left, right = 0, 1  # lower-left and lower-right cells
    shared = set(mesh.cells[left].tolist()) & set(mesh.cells[right].tolist())
    # only the slit tip (0.5, 0.5) is shared; (0.5, 0) exists twice
    assert len(shared) == 1
    assert np.allclose(mesh.vertices[shared.pop()], [0.5, 0.5])


def test_refine_empty_marks():
    mesh = make_unit_square(2)
    out = refine(mesh, [])
    assert np.array_equal(out.active_cells(), mesh.active_cells())


def test_refine_all_and_global():
    mesh = make_unit_square(2)
    out = refine(mesh, mesh.active_cells())
    assert out.n_active == 16
    g = refine_global(mesh)
    assert g.n_active == 16
    assert np.all(g.level[g.active_cells()] == 1)


def test_corner_refined_twice_forces_neighbour_once():
    mesh = refine_global(make_unit_square(2))
    corner = next(c for c in mesh.active_cells() if np.allclose(mesh.vertices[mesh.cells[c, 0]], 0))
    m1 = refine(mesh, [corner])
    # level-2 cell at the edge of the refined quarter, next to level-1 cells
    outer = m1.children[m1.parent[corner], 2]
    kid = m1.children[outer, 2]
    m2 = refine(m1, [kid])
    assert max_level_jump(m2) <= 1
    levels = m2.level[m2.active_cells()]
    assert levels.max() == 3
    # siblings are refined together: one full patch of level-3 cells
    assert np.count_nonzero(levels == 3) == 16
    newly = np.flatnonzero((m2.children[: m1.n_cells, 0] >= 0) & (m1.children[:, 0] < 0))
    siblings = set(m1.children[m1.parent[kid]].tolist())
    forced = [c for c in newly if c not in siblings]
    # closure forced coarser (level-1) neighbours, each refined exactly once
    assert forced and all(m1.level[c] == 1 for c in forced)
    assert all(m2.level[m2.children[c]].tolist() == [2, 2, 2, 2] for c in forced)
    # explicit neighbourhood oracle: cells sharing a face with a level-3 cell
    # have level >= 2
    act = m2.active_cells()
    for f in act[m2.level[act] == 3]:
        for c in act:
            if _share_face(m2, f, c):
                assert m2.level[c] >= 2


def test_one_irregularity_random(rng):
    mesh = make_slit_mesh(2)
    mesh = refine_global(mesh)
    for _ in range(5):
        act = mesh.active_cells()
        mesh = refine(mesh, rng.choice(act, size=max(1, len(act) // 5), replace=False))
        assert max_level_jump(mesh) <= 1
        for c, (a, b) in mesh.hanging_nodes().items():
            assert a not in mesh.hanging_nodes() or b not in mesh.hanging_nodes()


def test_area_invariant(rng):
    mesh = refine_global(make_slit_mesh(2))
    a0 = mesh.cell_areas().sum()
    for _ in range(4):
        act = mesh.active_cells()
        mesh = refine(mesh, rng.choice(act, size=3, replace=False))
        assert abs(mesh.cell_areas().sum() - a0) <= 1e-12 * a0


def test_patch_parent():
    mesh = refine_global(make_unit_square(2))
    with pytest.raises(NoPatch):
        patch_parent(mesh, 0)
    kid = mesh.children[0, 0]
    assert set(patch_parent(mesh, kid)) == set(mesh.children[0])


def test_every_active_cell_has_patch(rng):
    mesh = refine_global(refine_global(make_slit_mesh(2)))
    for c in mesh.active_cells():
        p = patch_parent(mesh, c)
        assert c in p and len(p) == 4
    for _ in range(3):
        mesh = refine(mesh, rng.choice(mesh.active_cells(), size=4, replace=False))
        for c in mesh.active_cells():
            p = patch_parent(mesh, c)
            assert np.all(mesh.children[p, 0] < 0)


def test_slit_dof_growth():
    mesh = refine_global(make_slit_mesh(2))
    counts = []
    for _ in range(4):
        counts.append(2 * len(mesh.used_vertices()))
        mesh = refine_global(mesh)
    assert counts == [54, 170, 594, 2210]


def test_pipette_area():
    p = CircuitParams()
    geom = PipetteGeometry()
    mesh = make_pipette_mesh(p, geom)
    expected = geom.width * geom.height - pipette_area(p, geom)
    assert abs(mesh.cell_areas().sum() - expected) <= 0.01 * expected


def test_pipette_tip_length():
    p = CircuitParams()
    mesh = make_pipette_mesh(p)
    c, e = mesh.boundary_faces([Marker.PIP_TIP])
    lengths = mesh.face_length(c, e)
    assert abs(lengths.sum() - 1.5) <= lengths.max() + 1e-12


def test_pipette_subdomain():
    mesh = make_pipette_mesh(CircuitParams())
    centres = mesh.cell_vertices().mean(axis=1)
    sub = mesh.subdomain[mesh.active_cells()]
    assert np.all((centres[sub, 0] > 4) & (centres[sub, 0] < 36))
    assert np.all((centres[sub, 1] > 20) & (centres[sub, 1] < 55))


def test_pipette_degenerate_angle():
    class P:
        theta, d, s0 = 0.0, 0.5, 1.5

    with pytest.raises(GeometryError):
        make_pipette_mesh(P())


def test_transfer_reproduces_bilinear(rng):
    mesh = refine_global(make_unit_square(2))
    f = lambda x: 1 + 2 * x[:, 0] - x[:, 1] + 3 * x[:, 0] * x[:, 1]
    new = refine(mesh, rng.choice(mesh.active_cells(), size=5, replace=False))
    v = transfer_vertex_field(mesh, new, f(mesh.vertices))
    used = new.used_vertices()
    np.testing.assert_allclose(v[used], f(new.vertices[used]), atol=1e-14)


def test_write_vtk(tmp_path):
    mesh = make_unit_square(2)
    path = tmp_path / "m.vtk"
    write_vtk(path, mesh, point_data={"u": np.arange(9.0)}, cell_data={"k": np.ones(4)})
    text = path.read_text()
    assert "CELLS 4 20" in text and "SCALARS u double 1" in text and "CELL_DATA 4" in text
