import math

import numpy as np
import pytest

from adaptkkt.kkt import (
    Discretization,
    NewtonConfig,
    consistent_initial_state,
    hessian,
    initial_state,
    linearize,
    newton_step,
    objective,
    solve_kkt,
    solve_state,
)
from adaptkkt.mesh import refine_global
from adaptkkt.problems import (
    CircuitParams,
    DegenerateGeometry,
    DesignVector,
    DesignWarning,
    ElectrodeProblem,
    Jet2,
    SlitProblem,
    circuit_currents,
    currents_closed_form,
    flux_gtilde,
    hole_fluxes,
)
from adaptkkt.problems import jet
from adaptkkt.problems.circuit import T_polynomial, mollifier_mass

BASE_PARAMS = CircuitParams(sigma=1.72, theta=22.0, d=0.5, s0=1.5, I_bar=50.0)


def random_design(rng, p=BASE_PARAMS):
    """Admissible two-pair design (holes inside (y_tip, y_up), no overlap)."""
    while True:
        s = rng.uniform(0.2, 3.0, 2)
        m = np.sort(rng.uniform(0.0, p.y_up, 2))
        d = DesignVector(tuple(m), tuple(s))
        if not d.violations(p):
            return d


def ohm_kirchhoff_oracle(p, d):
    """Solve the two 2x2 circuit systems directly."""
    (m1, m2), (s1, s2) = d.m, d.s
    rho, c, t = 1 / p.sigma, p.cot, math.tan(math.radians(p.theta))
    R1 = rho * p.d / (math.pi * s1**2)
    R2 = rho * p.d / (math.pi * s2**2)
    R0 = rho / math.pi * c * (1 / p.s0 - 1 / (p.s0 + m1 * t))
    R3 = rho / math.pi * c * (1 / (p.s0 + m1 * t) - 1 / (p.s0 + m2 * t))
    R013 = R3 + 1 / (1 / R0 + 2 / R1)
    # I2 R2 = I3 R013,  Ibar = I3 + 2 I2
    I2, I3 = np.linalg.solve([[R2, -R013], [2.0, 1.0]], [0.0, p.I_bar])
    # R0 I0 = R1 I1,  I3 = 2 I1 + I0
    I0, I1 = np.linalg.solve([[R0, -R1], [1.0, 2.0]], [0.0, I3])
    return np.array([I0, I1, I2])


# --------------------------------------------------------------------------
# circuit


def test_circuit_matches_oracle_and_closed_form(rng):
    for _ in range(100):
        d = random_design(rng)
        ref = ohm_kirchhoff_oracle(BASE_PARAMS, d)
        ladder = np.array([I.val for I in circuit_currents(BASE_PARAMS, d)])
        closed = np.array([I.val for I in currents_closed_form(BASE_PARAMS, d)])
        np.testing.assert_allclose(ladder, ref, rtol=1e-12)
        np.testing.assert_allclose(closed, ref, rtol=1e-12)
        assert abs(ladder[0] + 2 * ladder[1] + 2 * ladder[2] - BASE_PARAMS.I_bar) <= 1e-13 * BASE_PARAMS.I_bar


def test_default_geometry_currents():
    d = DesignVector((10.0, 20.0), (1.0, 2.0))
    I = np.array([x.val for x in circuit_currents(BASE_PARAMS, d)])
    np.testing.assert_allclose(I, ohm_kirchhoff_oracle(BASE_PARAMS, d), rtol=1e-12)
    # frozen values of this configuration
    np.testing.assert_allclose(I, [1.1739930664747216, 2.825360994912006, 21.587642471850632], rtol=1e-12)


def test_T_polynomial_is_common_denominator():
    d = DesignVector((10.0, 20.0), (1.0, 2.0))
    T = T_polynomial(BASE_PARAMS, 10.0, 20.0, 1.0, 2.0)
    I0 = BASE_PARAMS.I_bar * (BASE_PARAMS.s0 * BASE_PARAMS.cot + 10) ** 2 * (BASE_PARAMS.s0 * BASE_PARAMS.cot + 20) * BASE_PARAMS.d**2 * BASE_PARAMS.s0 / T
    assert np.isclose(I0, circuit_currents(BASE_PARAMS, d)[0].val, rtol=1e-12)


def test_tiny_hole_carries_no_current():
    d = DesignVector((10.0, 20.0), (1e-9, 2.0))
    I0, I1, I2 = (x.val for x in circuit_currents(BASE_PARAMS, d))
    assert I1 < 1e-12 * BASE_PARAMS.I_bar
    assert np.isclose(I0 + 2 * I2, BASE_PARAMS.I_bar, rtol=1e-12)


def test_reduced_circuits():
    (I0,) = circuit_currents(BASE_PARAMS, DesignVector((), ()))
    assert I0.val == BASE_PARAMS.I_bar
    I0, I1 = circuit_currents(BASE_PARAMS, DesignVector((12.0,), (1.0,)))
    assert np.isclose(I0.val + 2 * I1.val, BASE_PARAMS.I_bar, rtol=1e-13)
    # ratio I1/I0 = R0/R1
    rho, c, t = 1 / BASE_PARAMS.sigma, BASE_PARAMS.cot, math.tan(math.radians(BASE_PARAMS.theta))
    R0 = rho / math.pi * c * (1 / BASE_PARAMS.s0 - 1 / (BASE_PARAMS.s0 + 12 * t))
    R1 = rho * BASE_PARAMS.d / math.pi
    assert np.isclose(I1.val / I0.val, R0 / R1, rtol=1e-12)


def test_tip_resistance_grows_as_opening_shrinks():
    d = DesignVector((10.0, 20.0), (1.0, 2.0))
    ratios = []
    for s0 in (2.0, 1.5, 1.0):
        p = CircuitParams(s0=s0)
        I0, I1, _ = (x.val for x in circuit_currents(p, d))
        ratios.append(I1 / I0)  # = R0 / R1
    assert ratios[0] < ratios[1] < ratios[2]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_degenerate_geometry():
    with pytest.raises(DegenerateGeometry):
        CircuitParams(theta=0.0)
    with pytest.raises(DegenerateGeometry):
        circuit_currents(BASE_PARAMS, DesignVector((10.0, 20.0), (0.0, 2.0)))


def test_design_constraints_warn():
    d = DesignVector((10.0, 11.0), (1.0, 2.0))
    with pytest.warns(DesignWarning):
        assert not d.check(BASE_PARAMS)
    assert np.any(d.margins(BASE_PARAMS) < 0)
    assert np.all(DesignVector().margins(BASE_PARAMS) > 0)


def _central(f, x, h):
    g = np.zeros(len(x))
    for k in range(len(x)):
        e = np.zeros(len(x))
        e[k] = h
        g[k] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def test_current_jets_match_finite_differences(rng):
    for _ in range(20):
        d = random_design(rng).with_free((True, True), (True, True))
        q = d.q
        jets = circuit_currents(BASE_PARAMS, d)
        for k, J in enumerate(jets):
            val = lambda x: circuit_currents(BASE_PARAMS, d, x)[k].val
            grad = lambda x: circuit_currents(BASE_PARAMS, d, x)[k].grad
            g_fd = _central(val, q, 1e-6)
            assert np.allclose(J.grad, g_fd, rtol=1e-6, atol=1e-6 * np.abs(J.grad).max())
            H_fd = np.array([_central(lambda x: grad(x)[i], q, 1e-5) for i in range(len(q))])
            scale = np.abs(J.hess).max()
            assert np.max(np.abs(J.hess - H_fd)) <= 1e-4 * scale


def test_gtilde_jets_match_finite_differences(rng):
    y = np.linspace(0.5, 29.5, 40)
    for _ in range(20):
        d = random_design(rng).with_free((True, True), (True, True))
        q = d.q
        G = flux_gtilde(y, BASE_PARAMS, d)
        for v in rng.standard_normal((1, len(q))):
            v = v / np.linalg.norm(v)
            f = lambda t: flux_gtilde(y, BASE_PARAMS, d, q + t * v).val
            h = 1e-5
            d1 = (f(h) - f(-h)) / (2 * h)
            d2 = (f(h) - 2 * f(0) + f(-h)) / h**2
            g1 = G.grad @ v
            g2 = np.einsum("pij,i,j->p", G.hess, v, v)
            s1, s2 = np.abs(g1).max(), np.abs(g2).max()
            assert np.max(np.abs(g1 - d1)) <= 1e-6 * s1
            assert np.max(np.abs(g2 - d2)) <= 1e-4 * max(s2, 1e-12)


def _jet_expr(x):
    a, b = Jet2.variables(x)
    return jet.exp(a * b) / (a + b) ** 2 + jet.log(a) * jet.sqrt(b) - 3 * a / b


def test_jet_arithmetic_identities():
    x = np.array([1.3, 0.7])
    f = _jet_expr(x)

    def F(y):
        u, v = y
        return math.exp(u * v) / (u + v) ** 2 + math.log(u) * math.sqrt(v) - 3 * u / v

    assert np.isclose(f.val, F(x), rtol=1e-15)
    np.testing.assert_allclose(f.grad, _central(F, x, 1e-6), rtol=1e-7)
    H = np.array([_central(lambda y: _jet_expr(y).grad[i], x, 1e-5) for i in range(2)])
    np.testing.assert_allclose(f.hess, H, rtol=1e-6)
    # product rule on a square
    a, _ = Jet2.variables(x)
    p = a * a
    assert np.allclose(p.grad, [2 * 1.3, 0]) and np.allclose(p.hess, [[2, 0], [0, 0]])


def test_gtilde_at_midpoint_and_far_away():
    d = DesignVector((10.0, 20.0), (1.0, 2.0))
    J = [x.val for x in hole_fluxes(BASE_PARAMS, d)]
    g = flux_gtilde(np.array([10.0]), BASE_PARAMS, d).val[0]
    assert np.isclose(g, J[1] + J[2] * math.exp(-(10.0**4) / 16), rtol=1e-14)
    d_far = DesignVector((10.0, 25.0), (0.3, 0.3))
    g_far = flux_gtilde(np.array([17.5]), BASE_PARAMS, d_far).val[0]
    assert g_far <= 1e-12 * BASE_PARAMS.I_bar


def test_gtilde_wall_mass_and_spillage():
    """Wall outflow per side is sum_k J_k * mass_k; record the spillage."""
    d = DesignVector((10.0, 20.0), (1.0, 2.0))
    y = np.linspace(-30, 60, 200001)
    g = flux_gtilde(y, BASE_PARAMS, d).val
    J = [x.val for x in hole_fluxes(BASE_PARAMS, d)]
    masses = [mollifier_mass(BASE_PARAMS, s) for s in d.s]
    np.testing.assert_allclose(np.trapezoid(g, y), J[1] * masses[0] + J[2] * masses[1], rtol=1e-8)
    # effective widths of the mollifier relative to the hole sizes s_k
    np.testing.assert_allclose(masses, [2.5637, 3.6256], rtol=1e-4)
    outflow = J[0] * BASE_PARAMS.s0 + 2 * (J[1] * masses[0] + J[2] * masses[1])
    spill = outflow / BASE_PARAMS.I_bar - 1
    assert spill > 0.02  # the mollified fluxes inject more than I_bar


# --------------------------------------------------------------------------
# slit problems


def test_slit_zero_control_gives_zero_state(slit_linear, slit_disc):
    st = solve_state(slit_linear, slit_disc, [0.0])
    assert np.max(np.abs(st.u)) == 0.0


def test_slit_variant_validation():
    with pytest.raises(ValueError):
        SlitProblem("cubic")
    with pytest.raises(ValueError):
        SlitProblem(alpha=0.0)


@pytest.mark.parametrize("variant,scale", [("linear", 1.0), ("nonlinear", 0.5), ("lq", 1.0)])
def test_slit_reduced_gradient(variant, scale):
    p = SlitProblem(variant, source_scale=scale)
    disc = Discretization(p, p.coarse_mesh())
    q = np.array([0.8])
    st = consistent_initial_state(p, disc, q)
    from adaptkkt.kkt import residual_vertex

    _, r_q, _ = residual_vertex(p, st)
    J = lambda x: objective(p, solve_state(p, disc, [x]))
    h = 1e-4
    fd = (J(q[0] + h) - J(q[0] - h)) / (2 * h)
    assert abs(r_q[0] - fd) <= 1e-5 * max(abs(fd), 1.0)


def test_nonlinear_full_source_optimum_is_zero():
    p = SlitProblem("nonlinear")
    disc = Discretization(p, refine_global(p.coarse_mesh()))
    st, _, lin = solve_kkt(p, consistent_initial_state(p, disc), NewtonConfig())
    assert lin.rho_norm < 1e-10
    assert abs(st.q[0]) < 1e-8
    # J increases away from q = 0
    J = lambda x: objective(p, solve_state(p, disc, [x]))
    assert J(0.0) < J(0.3) < J(0.6)


def test_nonlinear_reduced_source_has_interior_optimum():
    p = SlitProblem("nonlinear", source_scale=0.5)
    disc = Discretization(p, refine_global(p.coarse_mesh()))
    st, _, lin = solve_kkt(p, consistent_initial_state(p, disc), NewtonConfig())
    assert lin.rho_norm < 1e-10
    assert 0.2 < abs(st.q[0]) < 0.6


def test_density_derivatives(rng):
    for p in (SlitProblem("nonlinear", source_scale=0.5), ElectrodeProblem()):
        x = rng.random((20, 2)) * 10
        obs = (rng.random(20) > 0.3).astype(float)
        u, lam = rng.standard_normal(20), rng.standard_normal(20)
        d = p.density(x, obs, u, lam)
        h = 1e-6
        dp = p.density(x, obs, u + h, lam)
        dm = p.density(x, obs, u - h, lam)
        np.testing.assert_allclose(d.l_u, (dp.l - dm.l) / (2 * h), rtol=1e-6, atol=1e-8)
        np.testing.assert_allclose(d.l_uu, (dp.l_u - dm.l_u) / (2 * h), rtol=1e-6, atol=1e-8)
        np.testing.assert_allclose(d.l_ul, (dp.l_lam - dm.l_lam) / (2 * h), rtol=1e-6, atol=1e-8)
        lp = p.density(x, obs, u, lam + h)
        lm = p.density(x, obs, u, lam - h)
        np.testing.assert_allclose(d.l_lam, (lp.l - lm.l) / (2 * h), rtol=1e-6, atol=1e-8)
        np.testing.assert_allclose(d.l_ll, (lp.l_lam - lm.l_lam) / (2 * h), rtol=1e-6, atol=1e-8)


# --------------------------------------------------------------------------
# electrode


def test_electrode_defaults():
    p = ElectrodeProblem()
    assert p.u_hat == 5.0 and p.alpha == 1e-8 and p.sigma == 1.72
    np.testing.assert_array_equal(p.q0, [10.0, 20.0])


def test_electrode_flux_on_tip_is_constant(electrode):
    x = np.array([[19.5, 30.0], [20.3, 30.0]])
    from adaptkkt.mesh import Marker

    G = electrode.flux(x, int(Marker.PIP_TIP), electrode.q0)
    J0 = hole_fluxes(electrode.params, electrode.design)[0].val
    np.testing.assert_allclose(G.val, J0)


def test_electrode_large_alpha_drives_control_to_zero(electrode):
    p = ElectrodeProblem(alpha=1e8, max_control_step=None)
    p.boundary_fraction = 1.0
    disc = Discretization(p, p.coarse_mesh())
    st = consistent_initial_state(p, disc)
    lin = linearize(p, st)
    dw = lin.factor.solve(-lin.rho)
    dq = disc.split(dw)[1]
    # the regularisation dominates: the Newton direction points to q = 0
    np.testing.assert_allclose(dq, -st.q, rtol=1e-3)


def test_electrode_step_bound_keeps_design_admissible(electrode):
    q = electrode.q0
    t = electrode.step_bound(q, np.array([-20.0, 0.0]))
    assert 0 < t < 1
    d = electrode.design.with_q(q + t * np.array([-20.0, 0.0]))
    assert np.all(d.margins(electrode.params) > 0)
    assert electrode.step_bound(q, np.array([0.1, 0.1])) == 1.0
