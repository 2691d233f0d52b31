"""Goal-oriented adaptive finite elements for PDE-constrained optimization.

Balances discretization and Newton iteration errors with a dual-weighted
residual estimator; includes the slit-domain model problems and the
micro-pipette electrode design problem.
"""

__version__ = "0.1.0"
