import numpy as np
import pytest

from adaptkkt import fem, linalg
from adaptkkt.mesh import Marker, make_slit_mesh, make_unit_square, refine, refine_global

D = int(Marker.DIRICHLET_OUTER)


def _poisson_errors(n, sigma=1.0):
    """Q1 solution of -sigma Δu = f, u = sin(pi x) sin(pi y); (h, L2, H1) errors."""
    mesh = make_unit_square(n)
    dm = fem.build_dofmap(mesh, [D])
    cv = fem.cell_values(dm, fem.gauss_square(3))
    x = cv.x
    f = sigma * 2 * np.pi**2 * np.sin(np.pi * x[..., 0]) * np.sin(np.pi * x[..., 1])
    K = dm.condense(sigma * fem.stiffness(dm, cv))
    b = dm.restrict(fem.load(dm, cv, f))
    u = dm.expand(linalg.solve(linalg.factorize(K), b))
    uq, gq = fem.field_at_quadrature(dm, cv, u)
    ue = np.sin(np.pi * x[..., 0]) * np.sin(np.pi * x[..., 1])
    ge = np.pi * np.stack([np.cos(np.pi * x[..., 0]) * np.sin(np.pi * x[..., 1]),
                           np.sin(np.pi * x[..., 0]) * np.cos(np.pi * x[..., 1])], axis=-1)
    l2 = np.sqrt(np.sum(cv.JxW * (uq - ue) ** 2))
    h1 = np.sqrt(np.sum(cv.JxW * np.sum((gq - ge) ** 2, axis=-1)))
    return 1.0 / n, l2, h1


def test_quadrature_weights():
    assert np.isclose(fem.gauss_line(3).weights.sum(), 1.0)
    assert np.isclose(fem.gauss_square(3).weights.sum(), 1.0)
    assert np.isclose(fem.composite_line(5, 2).weights.sum(), 1.0)
    r = fem.gauss_square(3)
    assert r.degree == 5
    # exact for degree 5 in each variable
    p = r.points
    assert np.isclose(np.sum(r.weights * p[:, 0] ** 5 * p[:, 1] ** 4), 1 / 30)


def test_single_free_dof_stiffness():
    dm = fem.build_dofmap(make_unit_square(2), [D])
    assert dm.n_dofs == 1
    K = dm.condense(fem.stiffness(dm, fem.cell_values(dm, fem.gauss_square(2))))
    assert np.isclose(K[0, 0], 8.0 / 3.0)


def test_mass_row_sums_are_areas():
    mesh = refine_global(make_slit_mesh(2))
    dm = fem.build_dofmap(mesh, [])
    cv = fem.cell_values(dm, fem.gauss_square(2))
    M = fem.mass(dm, cv)
    assert np.isclose(M.sum(), mesh.cell_areas().sum())
    # row sums equal the integral of each basis function
    np.testing.assert_allclose(np.asarray(M.sum(axis=1)).ravel(), fem.load(dm, cv, np.ones(cv.JxW.shape)))


def test_partition_of_unity(rng):
    ref = rng.random((50, 2))
    np.testing.assert_allclose(fem.q1_values(ref).sum(axis=-1), 1.0, atol=1e-14)
    np.testing.assert_allclose(fem.q1_derivatives(ref).sum(axis=-2), 0.0, atol=1e-14)


def test_slit_free_dof_count():
    mesh = refine_global(make_slit_mesh(2))
    dm = fem.build_dofmap(mesh, [int(Marker.SLIT_REST)])
    # 5x5 grid + 2 slit duplicates; boundary except the open top edge is Dirichlet:
    # interior 3x3 minus the slit vertices (0.5,0.25) and the tip (0.5,0.5) = 7,
    # plus the 3 interior vertices of the top edge
    assert dm.n_dofs == 7 + 3
    assert dm.n_used_vertices == 27


def test_manufactured_rates():
    errs = [_poisson_errors(n, sigma=1.72) for n in (4, 8, 16, 32, 64)]
    h = np.array([e[0] for e in errs])
    l2 = np.array([e[1] for e in errs])
    h1 = np.array([e[2] for e in errs])
    r_l2 = np.log(l2[:-1] / l2[1:]) / np.log(h[:-1] / h[1:])
    r_h1 = np.log(h1[:-1] / h1[1:]) / np.log(h[:-1] / h[1:])
    assert abs(r_l2[-1] - 2.0) <= 0.1
    assert abs(r_h1[-1] - 1.0) <= 0.1


def _hanging_mesh():
    mesh = refine_global(make_unit_square(2))
    mesh = refine(mesh, [mesh.active_cells()[0]])
    mesh = refine(mesh, [mesh.active_cells()[-1]])
    assert mesh.hanging_nodes()
    return mesh


def test_hanging_dofs_have_two_masters():
    mesh = _hanging_mesh()
    dm = fem.build_dofmap(mesh, [D])
    for m, masters in dm.hanging.items():
        assert len(masters) == 2
        assert m not in dm.free
    assert set(dm.hanging).isdisjoint(dm.free)


def test_constraints_idempotent(rng):
    dm = fem.build_dofmap(_hanging_mesh(), [D])
    v = rng.standard_normal(dm.n_vertices)
    once = dm.constrain(v)
    np.testing.assert_array_equal(dm.constrain(once), once)


def test_hanging_node_conformity():
    mesh = _hanging_mesh()
    dm = fem.build_dofmap(mesh, [D])
    cv = fem.cell_values(dm, fem.gauss_square(2))
    K = dm.condense(fem.stiffness(dm, cv))
    b = dm.restrict(fem.load(dm, cv, np.ones(cv.JxW.shape)))
    u = dm.expand(linalg.solve(linalg.factorize(K), b))
    field = fem.FieldFn(dm, u)
    for m, (a, c) in dm.hanging.items():
        assert abs(u[m] - 0.5 * (u[a] + u[c])) <= 1e-12
        # the coarse neighbour evaluates the hanging point to the same value
        assert abs(field(mesh.vertices[m])[0] - u[m]) <= 1e-12


def _patch_dm():
    mesh = refine_global(make_unit_square(2))
    return fem.build_dofmap(mesh, [])


def test_pi_h_annihilates_constants_and_bilinears(rng):
    dm = _patch_dm()
    rule = fem.gauss_square(3)
    X = dm.mesh.vertices
    for v in (np.ones(len(X)), X[:, 0] + X[:, 1], 1 - 2 * X[:, 0] + 3 * X[:, 0] * X[:, 1]):
        assert np.max(np.abs(fem.pi_h(dm, v, rule))) <= 1e-13


def test_pi_h_reproduces_quadratic_defect():
    dm = _patch_dm()
    rule = fem.gauss_square(3)
    cv = fem.cell_values(dm, rule)
    x = dm.mesh.vertices[:, 0]
    v = x**2
    lin, _ = fem.field_at_quadrature(dm, cv, v)
    expected = cv.x[..., 0] ** 2 - lin
    np.testing.assert_allclose(fem.pi_h(dm, v, rule), expected, atol=1e-14)
    # gradients: d/dx of (x^2 - I_h x^2)
    _, glin = fem.field_at_quadrature(dm, cv, v)
    g = fem.pi_h_grad(dm, v, cv)
    np.testing.assert_allclose(g[..., 0], 2 * cv.x[..., 0] - glin[..., 0], atol=1e-13)
    np.testing.assert_allclose(g[..., 1], -glin[..., 1], atol=1e-13)


def test_pi_h_needs_patches():
    dm = fem.build_dofmap(make_unit_square(2), [])
    with pytest.raises(fem.NoPatch):
        fem.pi_h(dm, np.ones(dm.n_vertices), fem.gauss_square(2))


def _top_faces():
    mesh = refine_global(make_unit_square(2))
    c, e = mesh.boundary_faces()
    mid = 0.5 * (mesh.vertices[mesh.cells[c, e]] + mesh.vertices[mesh.cells[c, (e + 1) % 4]])
    top = mid[:, 1] > 1 - 1e-12
    return mesh, c[top], e[top]


def test_boundary_quadrature_constant():
    mesh, c, e = _top_faces()
    q = fem.boundary_quadrature(mesh, c, e, lambda x: np.ones(len(x)))
    assert np.all(q.n_sub == 1)
    assert np.isclose(q.JxW.sum(), 1.0)


def test_boundary_quadrature_zero_flux():
    mesh, c, e = _top_faces()
    q = fem.boundary_quadrature(mesh, c, e, lambda x: np.zeros(len(x)))
    assert np.all(q.n_sub == 1)


def test_boundary_quadrature_bump_self_convergent():
    mesh, c, e = _top_faces()

    def bump(x):
        return np.exp(-((x[:, 0] - 0.4) ** 4) / (4 * 0.01**2))

    q = fem.boundary_quadrature(mesh, c, e, bump)
    assert q.n_sub.max() > 1
    I = np.sum(q.JxW * bump(q.x))
    q2 = fem.face_quadrature(mesh, c, e, 2 * q.n_sub)
    I2 = np.sum(q2.JxW * bump(q2.x))
    assert abs(I - I2) <= 1e-10 * abs(I2)


def test_boundary_quadrature_too_coarse():
    mesh, c, e = _top_faces()
    with pytest.raises(fem.QuadratureTooCoarse):
        fem.boundary_quadrature(mesh, c, e, lambda x: np.sin(1e6 * x[:, 0]) + 2, max_sub=8)


def test_field_fn_evaluation():
    mesh = _hanging_mesh()
    dm = fem.build_dofmap(mesh, [])
    X = mesh.vertices
    f = fem.FieldFn(dm, dm.interpolate(lambda x: 1 + x[:, 0] - 2 * x[:, 1]))
    pts = np.array([[0.1, 0.2], [0.77, 0.31], [0.5, 0.5]])
    np.testing.assert_allclose(f(pts), 1 + pts[:, 0] - 2 * pts[:, 1], atol=1e-12)
    with pytest.raises(ValueError):
        f([[2.0, 2.0]])


def test_face_table_covers_interfaces():
    mesh = _hanging_mesh()
    ft = fem.build_face_table(mesh)
    # total interface length = total edge length of all cells minus boundary, halved
    act = mesh.active_cells()
    total = sum(mesh.face_length(np.full(4, c), np.arange(4)).sum() for c in act)
    bc, be = mesh.boundary_faces()
    boundary = mesh.face_length(bc, be).sum()
    interfaces = mesh.face_length(ft.small, ft.small_edge).sum()
    assert np.isclose(2 * interfaces, total - boundary)
