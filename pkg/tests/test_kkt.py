import numpy as np
import pytest

from adaptkkt import fem
from adaptkkt.kkt import (
    Discretization,
    KktState,
    NewtonConfig,
    consistent_initial_state,
    goal_derivative,
    hessian,
    hessian_blocks,
    initial_state,
    lagrangian,
    linearize,
    newton_step,
    residual,
    residual_vertex,
    solve_dual,
    solve_kkt,
    solve_state,
    transfer_state,
)
from adaptkkt.linalg import FactorizationCounter
from adaptkkt.mesh import refine, refine_global
from adaptkkt.problems import ElectrodeProblem, Jet2, SlitProblem


def _random_state(disc, rng, q):
    n = disc.n
    return KktState(disc, disc.join(0.3 * rng.standard_normal(n), q, 0.3 * rng.standard_normal(n)))


PROBLEMS = {
    "linear": lambda: SlitProblem("linear"),
    "nonlinear": lambda: SlitProblem("nonlinear", source_scale=0.5),
    "lq": lambda: SlitProblem("lq"),
    "electrode": lambda: ElectrodeProblem(),
}


@pytest.fixture(scope="module", params=list(PROBLEMS))
def problem_disc(request):
    p = PROBLEMS[request.param]()
    mesh = p.coarse_mesh()
    if request.param != "electrode":
        mesh = refine(mesh, mesh.active_cells()[:3])  # include hanging nodes
    return p, Discretization(p, mesh)


def test_config_validation():
    with pytest.raises(ValueError):
        NewtonConfig(alpha_N=0.0)
    with pytest.raises(ValueError):
        NewtonConfig(tol_kkt=0.0)


def test_residual_is_gradient_of_lagrangian(problem_disc, rng):
    p, disc = problem_disc
    st = _random_state(disc, rng, p.q0 * 1.05)
    rho, _ = residual(p, st)
    for v in rng.standard_normal((5, disc.size)):
        h = 1e-6
        Lp = lagrangian(p, KktState(disc, st.w + h * v))
        Lm = lagrangian(p, KktState(disc, st.w - h * v))
        fd = (Lp - Lm) / (2 * h)
        assert abs(rho @ v - fd) <= 1e-6 * max(abs(fd), np.abs(rho).max() * np.linalg.norm(v))


def test_hessian_matches_fd_of_residual(problem_disc, rng):
    p, disc = problem_disc
    st = _random_state(disc, rng, p.q0 * 1.05)
    H = hessian(p, st)
    assert abs(H - H.T).max() <= 1e-12 * abs(H).max()
    for v in rng.standard_normal((10, disc.size)):
        h = 1e-5
        rp, _ = residual(p, KktState(disc, st.w + h * v))
        rm, _ = residual(p, KktState(disc, st.w - h * v))
        fd = (rp - rm) / (2 * h)
        Hv = H @ v
        assert np.linalg.norm(Hv - fd) <= 1e-4 * np.linalg.norm(Hv)


def test_linear_slit_block_decoupling(slit_linear, slit_disc):
    p, disc = slit_linear, slit_disc
    st = solve_state(p, disc, [0.7])
    r_u, _, r_l = residual_vertex(p, st)
    assert np.linalg.norm(disc.dm.restrict(r_l)) <= 1e-12
    # with lam = 0 the u-block is the tracking term M (u - u0) on free dofs
    cv = disc.cv
    uq, _ = disc.at_quadrature(st.u_vertex)
    track = fem.load(disc.dm, cv, uq - p.target(cv.x))
    np.testing.assert_allclose(disc.dm.restrict(r_u), disc.dm.restrict(track), atol=1e-14)


def test_converged_residual_small(slit_linear, slit_disc):
    st, _, lin = solve_kkt(slit_linear, initial_state(slit_linear, slit_disc), NewtonConfig())
    assert lin.rho_norm <= 1e-10
    assert residual(slit_linear, st)[1] <= 1e-10


def test_lq_hessian_independent_of_state(rng):
    p = SlitProblem("lq")
    disc = Discretization(p, p.coarse_mesh())
    H1 = hessian(p, _random_state(disc, rng, [0.3]))
    H2 = hessian(p, _random_state(disc, rng, [2.0]))
    assert abs(H1 - H2).max() <= 1e-14 * abs(H1).max()


def test_lq_one_newton_step_from_any_start(rng):
    p = SlitProblem("lq")
    disc = Discretization(p, refine_global(p.coarse_mesh()))
    for q in (-3.0, 0.5, 10.0):
        st = _random_state(disc, rng, [q])
        new, rep = newton_step(p, st, NewtonConfig())
        assert rep.rho_after <= 1e-10


def test_damped_newton_halves_residual(rng):
    p = SlitProblem("lq")
    disc = Discretization(p, p.coarse_mesh())
    st = _random_state(disc, rng, [1.0])
    cfg = NewtonConfig(alpha_N=0.5)
    for _ in range(4):
        st, rep = newton_step(p, st, cfg)
        assert np.isclose(rep.rho_after / rep.rho_before, 0.5, rtol=1e-6)


def test_nonlinear_quadratic_convergence():
    p = SlitProblem("nonlinear", source_scale=0.5)
    disc = Discretization(p, refine_global(p.coarse_mesh()))
    st = initial_state(p, disc)
    norms = []
    lin = linearize(p, st)
    for k in range(8):
        norms.append(lin.rho_norm)
        if lin.rho_norm < 1e-12:
            break
        st, _ = newton_step(p, st, NewtonConfig(), lin)
        lin = linearize(p, st)
    # in the asymptotic regime log|rho_{k+1}| / log|rho_k| approaches 2
    big = [r for r in norms if 1e-11 < r < 1e-2]
    ratios = [np.log(b) / np.log(a) for a, b in zip(big, big[1:])]
    assert ratios and max(ratios) > 1.7


def test_electrode_qq_block(electrode, electrode_disc):
    st = consistent_initial_state(electrode, electrode_disc)
    b = hessian_blocks(electrode, st)
    from adaptkkt.kkt import _control_terms

    _, g2 = _control_terms(electrode_disc, st.q, st.lam_vertex)
    np.testing.assert_allclose(b["qq"], electrode.alpha * np.eye(2) - g2, rtol=1e-14)
    assert np.abs(g2).max() > 0


class _ZeroGoal(SlitProblem):
    def goal(self, q):
        q = np.asarray(q, dtype=float)
        return Jet2(0.0, np.zeros(len(q)), np.zeros((len(q), len(q))))


def test_dual_of_zero_goal_vanishes():
    p = _ZeroGoal("linear")
    disc = Discretization(p, p.coarse_mesh())
    st = initial_state(p, disc)
    assert np.all(solve_dual(p, st).z == 0)


def test_goal_derivative_q_block(slit_linear, slit_disc):
    st = initial_state(slit_linear, slit_disc, [1.7])
    zeta = goal_derivative(slit_linear, st)
    u, zq, lam = slit_disc.split(zeta)
    assert np.all(u == 0) and np.all(lam == 0)
    np.testing.assert_allclose(zq, [3.4])


def test_dual_sensitivity_matches_fd():
    """dI/dalpha from the dual equals a finite difference of optimise-then-evaluate."""
    def optimum(alpha):
        p = SlitProblem("linear", alpha=alpha)
        disc = Discretization(p, p.coarse_mesh())
        st, _, lin = solve_kkt(p, initial_state(p, disc), NewtonConfig(tol_kkt=1e-13))
        return p, st, lin

    alpha, h = 1e-4, 1e-8
    p, st, lin = optimum(alpha)
    z = solve_dual(p, st, lin)
    sens = float(z.zq @ st.q)
    goal = lambda a: float(optimum(a)[1].q @ optimum(a)[1].q)
    fd = (goal(alpha + h) - goal(alpha - h)) / (2 * h)
    assert abs(sens - fd) <= 1e-4 * abs(fd)


def test_dual_reuses_factorization(slit_linear, slit_disc):
    counter = FactorizationCounter()
    st = initial_state(slit_linear, slit_disc)
    lin = linearize(slit_linear, st, counter)
    st2, _ = newton_step(slit_linear, st, NewtonConfig(), lin, counter)
    solve_dual(slit_linear, st, lin, counter)
    assert counter.factorizations == 1


def test_transfer_state_is_interpolation(slit_linear, rng):
    mesh = slit_linear.coarse_mesh()
    disc = Discretization(slit_linear, mesh)
    st = solve_state(slit_linear, disc, [1.0])
    fine = Discretization(slit_linear, refine(mesh, rng.choice(mesh.active_cells(), 4, replace=False)))
    new = transfer_state(st, fine)
    pts = rng.random((30, 2))
    np.testing.assert_allclose(new.field("u")(pts), st.field("u")(pts), atol=1e-13)
    np.testing.assert_array_equal(new.q, st.q)


def test_consistent_start_has_only_control_residual(electrode, electrode_disc):
    st = consistent_initial_state(electrode, electrode_disc)
    r_u, r_q, r_l = residual_vertex(electrode, st)
    dm = electrode_disc.dm
    assert np.linalg.norm(dm.restrict(r_u)) <= 1e-9 * max(1.0, np.abs(r_q).max())
    assert np.linalg.norm(dm.restrict(r_l)) <= 1e-9
    assert np.abs(r_q).max() > 0
