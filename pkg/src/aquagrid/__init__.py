"""Co-scheduling toolkit for coupled water and electric distribution networks."""

from .network import (
    NexusCase,
    ValidationReport,
    load_case,
    pipe_resistance,
    validate_case,
)
from .hulls import (
    HullSpec,
    LinearCut,
    PolygonRelaxation,
    hull_cut,
    hull_constraints,
    parabola_secant,
    pipe_polygon,
    pump_power_hull,
    verify_hull,
)
from .formulation import (
    ConstraintSystem,
    big_m_value,
    build_dsm,
    build_independent,
    build_micp,
    build_minlp,
)
from .socp import ConeOptions, ConeProgram, ConeResult, solve_cone, to_cone
from .bnb import BnbOptions, Solution, branch_and_bound, enumerate_binaries
from .physics import (
    ExactnessReport,
    distflow_solve,
    exactness,
    hydraulic_solve,
    recover_state,
)

__version__ = "0.1.0"

__all__ = [
    "BnbOptions", "ConeOptions", "ConeProgram", "ConeResult", "ConstraintSystem",
    "ExactnessReport", "HullSpec", "LinearCut", "NexusCase", "PolygonRelaxation",
    "Solution", "ValidationReport", "big_m_value", "branch_and_bound", "build_dsm",
    "build_independent", "build_micp", "build_minlp", "distflow_solve",
    "enumerate_binaries", "exactness", "hull_constraints", "hull_cut",
    "hydraulic_solve", "load_case", "parabola_secant", "pipe_polygon",
    "pipe_resistance", "pump_power_hull", "recover_state", "solve_cone",
    "to_cone", "validate_case", "verify_hull",
]
