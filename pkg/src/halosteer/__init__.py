"""Impulsive covariance steering for halo-orbit stationkeeping.

The package discretizes a corrected CR3BP halo orbit into maneuver nodes,
builds first- and second-order state transition tensors per segment, bounds
accumulated linearization error via tensor norms, and solves convex programs
that trade maneuver placement against either nonlinearity growth or terminal
covariance size.  A Monte Carlo harness validates the resulting closed-loop
dispersions against the chance-constraint bounds.
"""

from halosteer.cr3bp import (
    EARTH_MOON_LENGTH_KM,
    EARTH_MOON_MU,
    EARTH_MOON_TIME_S,
    CorrectionError,
    ReferenceOrbit,
    SingularPositionError,
    SystemConstants,
    correct_periodic,
    time_constant,
)
from halosteer.mon import GCoefficients, MonBound, build_g_coefficients
from halosteer.montecarlo import (
    MonteCarloReport,
    compare_quantiles,
    simulate_closed_loop,
)
from halosteer.pipeline import emit_report, run_pipeline
from halosteer.scenario import Scenario, ScenarioError, load_scenario
from halosteer.steering import (
    SolverError,
    SteeringSolution,
    assemble_blocks,
    build_program,
    kalman_schedule,
    solve,
)
from halosteer.stt import DiscretizedPlan, discretize_reference
from halosteer.tensors import tensor_two_norm

__all__ = [
    "EARTH_MOON_LENGTH_KM",
    "EARTH_MOON_MU",
    "EARTH_MOON_TIME_S",
    "CorrectionError",
    "DiscretizedPlan",
    "GCoefficients",
    "MonBound",
    "MonteCarloReport",
    "ReferenceOrbit",
    "Scenario",
    "ScenarioError",
    "SingularPositionError",
    "SolverError",
    "SteeringSolution",
    "SystemConstants",
    "assemble_blocks",
    "build_g_coefficients",
    "build_program",
    "compare_quantiles",
    "correct_periodic",
    "discretize_reference",
    "emit_report",
    "kalman_schedule",
    "load_scenario",
    "run_pipeline",
    "simulate_closed_loop",
    "solve",
    "tensor_two_norm",
    "time_constant",
]
