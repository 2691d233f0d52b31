"""Benchmark problems on the slit domain (0,1)^2 minus {0.5} x (0, 0.5).

The control q acts through the Neumann datum on the top edge,
``d_n u = q^2 pi sin(pi x)``; all other boundary parts (including both
sides of the slit) carry homogeneous Dirichlet data.  The state equation
is ``-sigma Δu = 0`` (``linear``) or ``-sigma Δu + u^2 = f`` with
``f = 2 pi^2 sin(pi x) sin(pi y)`` (``nonlinear``).  The ``lq`` variant
uses the flux ``q pi sin(pi x)`` instead, which makes the whole KKT system
linear (a linear-quadratic problem).

With the full source (``source_scale=1``) the uncontrolled nonlinear state
already exceeds the target near the top edge, so the optimal control is
q = 0 and the goal q^2 vanishes identically.  ``source_scale`` scales f;
``source_scale=0`` keeps the u^2 nonlinearity with a non-trivial optimum.

In weak form the Neumann datum is multiplied by sigma:
sigma (grad u, grad phi) = sigma (d_n u, phi)_top.
"""

from __future__ import annotations

import numpy as np

from ..mesh import Marker, make_slit_mesh, refine_global
from .base import Density, ProblemDefinition
from .jet import Jet2

VARIANTS = ("linear", "nonlinear", "lq")


class SlitProblem(ProblemDefinition):
    dirichlet_markers = (int(Marker.SLIT_REST),)
    neumann_markers = (int(Marker.SLIT_TOP),)

    def __init__(self, variant: str = "linear", alpha: float = 1e-4, sigma: float = 1.72,
                 q0: float = 1.0, n0: int = 2, source_scale: float = 1.0):
        if variant not in VARIANTS:
            raise ValueError(f"unknown slit variant {variant!r}; choose from {VARIANTS}")
        if alpha <= 0:
            raise ValueError("alpha must be positive")
        self.variant = variant
        self.name = f"slit-{variant}"
        self.alpha = float(alpha)
        self.sigma = float(sigma)
        self._q0 = np.array([float(q0)])
        self.n0 = int(n0)
        self.reaction = 1.0 if variant == "nonlinear" else 0.0
        self.source_scale = float(source_scale)

    @property
    def q0(self) -> np.ndarray:
        return self._q0.copy()

    def coarse_mesh(self):
        return refine_global(make_slit_mesh(self.n0))

    def target(self, x):
        return np.sin(np.pi * x[..., 0]) * np.sin(np.pi * x[..., 1]) / self.sigma

    def source(self, x):
        if self.variant != "nonlinear":
            return np.zeros(x.shape[:-1])
        return self.source_scale * 2 * np.pi**2 * np.sin(np.pi * x[..., 0]) * np.sin(np.pi * x[..., 1])

    def tracking(self, x, obs, u):
        return 0.5 * obs * (u - self.target(x)) ** 2

    def density(self, x, obs, u, lam) -> Density:
        c = self.reaction
        d = u - self.target(x)
        f = self.source(x)
        obs = np.broadcast_to(obs, d.shape).astype(float)
        return Density(
            l=0.5 * obs * d**2 + c * u**2 * lam - f * lam,
            l_u=obs * d + 2 * c * u * lam,
            l_lam=c * u**2 - f,
            l_uu=obs + 2 * c * lam,
            l_ul=2 * c * u,
            l_ll=np.zeros_like(d),
        )

    def flux(self, x, marker, q) -> Jet2:
        q = Jet2.variables(np.asarray(q, dtype=float))[0]
        shape = np.sin(np.pi * x[..., 0]) * np.pi * self.sigma
        if int(marker) not in self.neumann_markers:
            return Jet2.constant(np.zeros(x.shape[:-1]), 1)
        amp = q if self.variant == "lq" else q * q
        return amp * shape

    def describe(self) -> dict:
        return {**super().describe(), "variant": self.variant, "q0": float(self._q0[0]),
                "source_scale": self.source_scale}


def slit_problem(variant: str = "linear", alpha: float = 1e-4, **kw) -> SlitProblem:
    return SlitProblem(variant, alpha=alpha, **kw)
