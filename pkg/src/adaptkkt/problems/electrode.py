"""Optimal placement of the side openings of a micro-pipette.

The state is the electric potential in the box around the pipette,
``sigma (grad u, grad phi) = (g(q), phi)_{Gamma_pip}`` with the potential
fixed to zero on the outer box.  The tip opening carries the constant flux
J_0(q); the outer wall carries the mollified hole fluxes g~(y, q) with y the
height above the tip.  The objective tracks the target potential u_hat on
the observation region Omega^s.
"""

from __future__ import annotations

import numpy as np

from ..mesh import Marker, PipetteGeometry, make_pipette_mesh, refine_global
from .base import Density, ProblemDefinition
from .circuit import CircuitParams, DesignVector, design_jets, flux_gtilde, hole_fluxes
from .jet import Jet2


class ElectrodeProblem(ProblemDefinition):
    dirichlet_markers = (int(Marker.DIRICHLET_OUTER),)
    neumann_markers = (int(Marker.PIP_TIP), int(Marker.PIP_WALL))
    adaptive_boundary = True
    estimator_order = 6
    consistent_start = True
    # fraction of the distance to the admissibility boundary a step may use
    boundary_fraction = 0.5

    def __init__(
        self,
        params: CircuitParams | None = None,
        design: DesignVector | None = None,
        u_hat: float = 5.0,
        alpha: float = 1e-8,
        geom: PipetteGeometry | None = None,
        max_control_step: float | None = 2.0,
    ):
        self.params = params or CircuitParams()
        self.design = design or DesignVector()
        self.u_hat = float(u_hat)
        self.alpha = float(alpha)
        self.sigma = float(self.params.sigma)
        self.geom = geom or PipetteGeometry()
        self.name = f"electrode-{self.design.n_pairs}"
        self.max_control_step = max_control_step

    @property
    def q0(self) -> np.ndarray:
        return self.design.q

    def coarse_mesh(self):
        return refine_global(make_pipette_mesh(self.params, self.geom))

    def tracking(self, x, obs, u):
        return 0.5 * obs * (u - self.u_hat) ** 2

    def density(self, x, obs, u, lam) -> Density:
        d = u - self.u_hat
        obs = np.broadcast_to(obs, d.shape).astype(float)
        z = np.zeros_like(d)
        return Density(l=0.5 * obs * d**2, l_u=obs * d, l_lam=z, l_uu=obs, l_ul=z, l_ll=z)

    def flux(self, x, marker, q) -> Jet2:
        n = self.design.n_free
        y = x[..., 1] - self.geom.tip_y
        if self.design.n_pairs == 0:
            J0 = self.params.I_bar / self.params.s0
            if int(marker) == int(Marker.PIP_TIP):
                return Jet2.constant(np.full(y.shape, J0), n)
            return Jet2.constant(np.zeros(y.shape), n)
        fluxes = hole_fluxes(self.params, self.design, q)
        if int(marker) == int(Marker.PIP_TIP):
            J0 = fluxes[0]
            ones = np.ones(y.shape)
            return Jet2(J0.val * ones, J0.grad * ones[..., None], J0.hess * ones[..., None, None])
        if int(marker) == int(Marker.PIP_WALL):
            return flux_gtilde(y, self.params, self.design, q, fluxes=fluxes)
        return Jet2.constant(np.zeros(y.shape), n)

    def step_bound(self, q, dq) -> float:
        """Fraction-to-boundary rule for the (linear) design constraints."""
        if self.design.n_free == 0:
            return 1.0
        d = self.design
        g0 = d.margins(self.params, d.with_q(q).full)
        g1 = d.margins(self.params, d.with_q(np.asarray(q) + np.asarray(dq)).full)
        t = 1.0
        for a, b in zip(g0, g1):
            if b < 0 <= a:
                t = min(t, self.boundary_fraction * a / (a - b))
        return t

    def with_design(self, design: DesignVector) -> "ElectrodeProblem":
        return ElectrodeProblem(self.params, design, self.u_hat, self.alpha, self.geom,
                                self.max_control_step)

    def describe(self) -> dict:
        return {
            **super().describe(),
            "u_hat": self.u_hat,
            "m": list(self.design.m),
            "s": list(self.design.s),
        }


def electrode_problem(params=None, q0: DesignVector | None = None, u_hat=5.0, alpha=1e-8,
                      geom=None) -> ElectrodeProblem:
    return ElectrodeProblem(params, q0, u_hat, alpha, geom)
