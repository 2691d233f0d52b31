"""Configuration, solution algorithms, reference values and the CLI."""

from .config import ElectrodeConfig, ReferenceConfig, RunConfig, SlitConfig, load_config
from .design import DesignRow, run_alternating_design
from .reference import compute_reference_goal
from .runners import (
    ConvergenceRow,
    RunResult,
    damped_newton_study,
    run,
    run_fully_adaptive,
    run_global,
    run_mesh_adaptive,
)

__all__ = [
    "ConvergenceRow",
    "DesignRow",
    "ElectrodeConfig",
    "ReferenceConfig",
    "RunConfig",
    "RunResult",
    "SlitConfig",
    "compute_reference_goal",
    "damped_newton_study",
    "load_config",
    "run",
    "run_alternating_design",
    "run_fully_adaptive",
    "run_global",
    "run_mesh_adaptive",
]
