from .base import Density, ProblemDefinition
from .circuit import (
    CircuitParams,
    DegenerateGeometry,
    DesignVector,
    DesignWarning,
    circuit_currents,
    currents_closed_form,
    flux_gtilde,
    hole_fluxes,
)
from .electrode import ElectrodeProblem, electrode_problem
from .jet import Jet2
from .slit import SlitProblem, slit_problem

__all__ = [
    "CircuitParams",
    "DegenerateGeometry",
    "Density",
    "DesignVector",
    "DesignWarning",
    "ElectrodeProblem",
    "Jet2",
    "ProblemDefinition",
    "SlitProblem",
    "circuit_currents",
    "currents_closed_form",
    "electrode_problem",
    "flux_gtilde",
    "hole_fluxes",
    "slit_problem",
]
