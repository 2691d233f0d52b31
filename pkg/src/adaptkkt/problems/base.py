"""Interface between optimisation problems and the KKT machinery.

A problem is described by a pointwise Lagrangian density and a boundary
flux.  With state u, adjoint lam and control q the Lagrangian reads

    L(u, q, lam) = int_Omega l(x, u, lam) dx + sigma (grad u, grad lam)
                   + alpha/2 |q|^2 - int_{Gamma_N} G(x, q) lam ds

where ``l`` collects the tracking term and any zero-order terms of the
state equation (e.g. ``u^2 lam - f lam``).  All residual and Hessian blocks
follow from the derivatives of ``l`` in (u, lam) and of ``G`` in q.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..mesh import QuadMesh
from .jet import Jet2


@dataclass
class Density:
    """l and its first and second derivatives in (u, lam) at points."""

    l: np.ndarray
    l_u: np.ndarray
    l_lam: np.ndarray
    l_uu: np.ndarray
    l_ul: np.ndarray
    l_ll: np.ndarray


class ProblemDefinition:
    """Base class; subclasses fill in the geometry and the callbacks."""

    name: str = "problem"
    sigma: float = 1.0
    alpha: float = 1.0
    dirichlet_markers: tuple = ()
    neumann_markers: tuple = ()
    # resolve boundary integrals adaptively (needed for the steep mollifier)
    adaptive_boundary: bool = False
    boundary_rtol: float = 1e-10
    # Gauss points per direction for the estimator (None: 3, exact on
    # parallelogram cells; general quadrilaterals need more)
    estimator_order: int | None = None
    # start Newton from u = S(q0) and the matching adjoint instead of zeros
    consistent_start: bool = False
    # optional cap on max|dq| of a single Newton step (None: no cap)
    max_control_step: float | None = None

    @property
    def n_control(self) -> int:
        return len(self.q0)

    @property
    def q0(self) -> np.ndarray:
        raise NotImplementedError

    def coarse_mesh(self) -> QuadMesh:
        """Initial mesh; every active cell must belong to a complete patch."""
        raise NotImplementedError

    def density(self, x: np.ndarray, obs: np.ndarray, u: np.ndarray, lam: np.ndarray) -> Density:
        raise NotImplementedError

    def tracking(self, x: np.ndarray, obs: np.ndarray, u: np.ndarray) -> np.ndarray:
        """Integrand of the state part of the objective J."""
        raise NotImplementedError

    def flux(self, x: np.ndarray, marker: int, q: np.ndarray) -> Jet2:
        """Neumann data G(x, q) on faces with ``marker`` as a jet in q."""
        raise NotImplementedError

    def step_bound(self, q: np.ndarray, dq: np.ndarray) -> float:
        """Largest t in (0, 1] such that q + t dq is an admissible control."""
        return 1.0

    def goal(self, q: np.ndarray) -> Jet2:
        """Quantity of interest |q|^2 (depends on the control only)."""
        q = np.asarray(q, dtype=float)
        return Jet2(q @ q, 2.0 * q, 2.0 * np.eye(len(q)))

    def describe(self) -> dict:
        return {"name": self.name, "sigma": self.sigma, "alpha": self.alpha}
