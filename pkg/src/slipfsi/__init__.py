"""slipfsi: 2D fluid-rigid-body interaction with Navier slip boundary
conditions, Carleman weight machinery, and penalized-HUM null control."""

__version__ = "0.1.0"

from .carleman import CarlemanParams, EtaField, WeightSet, build_eta, calibrate
from .control import ControlProblem, ControlVector, DualData, \
    closed_loop_experiment, compute_control, observability_ratio, solve_adjoint
from .fsi_core import DiscreteOperator, FsiField, NonlinearProblem, \
    SourceTerms, Trajectory, assemble, solve_linear, solve_nonlinear
from .geometry import Domain, PhysicalParams, benchmark_domain

__all__ = [
    "CarlemanParams", "EtaField", "WeightSet", "build_eta", "calibrate",
    "ControlProblem", "ControlVector", "DualData", "closed_loop_experiment",
    "compute_control", "observability_ratio", "solve_adjoint",
    "DiscreteOperator", "FsiField", "NonlinearProblem", "SourceTerms",
    "Trajectory", "assemble", "solve_linear", "solve_nonlinear",
    "Domain", "PhysicalParams", "benchmark_domain",
]
