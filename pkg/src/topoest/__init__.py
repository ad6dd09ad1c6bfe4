"""Joint switch-topology detection and state estimation for distribution feeders."""

from .errors import (
    BigMError,
    DivergenceError,
    EstimationError,
    InfeasibleIslandError,
    NotPSDError,
    ParseError,
    QPInfeasibleError,
    QPUnboundedError,
    SolverError,
    TopoestError,
    ValidationError,
)
from .estimator_ppv import EstimateResult, EstimatorConfig, estimate_ppv
from .estimator_riv import estimate_riv
from .grid import NetworkModel, SwitchPlan, fig3_plan, ieee33, load_grid, load_plan

__version__ = "0.1.0"

__all__ = [
    "BigMError",
    "DivergenceError",
    "EstimateResult",
    "EstimationError",
    "EstimatorConfig",
    "InfeasibleIslandError",
    "NetworkModel",
    "NotPSDError",
    "ParseError",
    "QPInfeasibleError",
    "QPUnboundedError",
    "SolverError",
    "SwitchPlan",
    "TopoestError",
    "ValidationError",
    "estimate_ppv",
    "estimate_riv",
    "fig3_plan",
    "ieee33",
    "load_grid",
    "load_plan",
]
