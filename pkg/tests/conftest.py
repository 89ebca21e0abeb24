"""Shared fixtures.

The paper-scale artifacts (corrected orbit, 18-segment plan, g-coefficients,
solved policies, Monte Carlo reports) are expensive, so they are built once
per session and shared between the unit tests and the acceptance criteria.
A reduced 5-segment single-revolution set backs the cheaper unit tests.
"""

from __future__ import annotations

import time

import pytest

from halosteer.mon import build_g_coefficients
from halosteer.montecarlo import simulate_closed_loop
from halosteer.scenario import Scenario
from halosteer.steering import (
    SolverConfig,
    assemble_blocks,
    build_program,
    kalman_schedule,
    solve,
)
from halosteer.cr3bp import SystemConstants, correct_periodic
from halosteer.stt import discretize_reference


@pytest.fixture(scope="session")
def timings() -> dict[str, float]:
    """Wall-clock seconds of the expensive shared fixtures, by name."""
    return {}


@pytest.fixture(scope="session")
def constants() -> SystemConstants:
    return SystemConstants()


@pytest.fixture(scope="session")
def scenario() -> Scenario:
    return Scenario()


@pytest.fixture(scope="session")
def orbit(scenario):
    return correct_periodic(
        scenario.initial_mean_array,
        scenario.period_guess,
        scenario.constants,
        tol=scenario.correction_tol,
    )


@pytest.fixture(scope="session")
def plan(orbit, scenario):
    return discretize_reference(
        orbit, scenario.segments_per_rev, scenario.revs, scenario.constants
    )


@pytest.fixture(scope="session")
def gcoefs(plan, scenario):
    return build_g_coefficients(plan, m_star=scenario.m_star)


@pytest.fixture(scope="session")
def filt(plan, scenario):
    return kalman_schedule(
        plan, scenario.C_matrix, scenario.D_matrix, scenario.P_tilde0
    )


@pytest.fixture(scope="session")
def blocks(plan, filt, scenario):
    return assemble_blocks(plan, filt, scenario.P_hat0_minus)


@pytest.fixture(scope="session")
def solutions(blocks, gcoefs, scenario, timings):
    out = {}
    start = time.perf_counter()
    for kind in scenario.objective_kinds:
        problem = build_program(
            kind,
            blocks,
            gcoefs,
            scenario.lam,
            scenario.eps_x,
            scenario.u_max_nd,
            norm_mode=scenario.norm_mode,
        )
        out[kind] = solve(problem, SolverConfig())
    timings["solve"] = time.perf_counter() - start
    return out


@pytest.fixture(scope="session")
def mc_reports(solutions, plan, filt, scenario, timings):
    start = time.perf_counter()
    out = {
        kind: simulate_closed_loop(sol, plan, filt, scenario)
        for kind, sol in solutions.items()
    }
    timings["montecarlo"] = time.perf_counter() - start
    return out


@pytest.fixture(scope="session")
def small_scenario() -> Scenario:
    return Scenario(segments_per_rev=5, revs=1, n_samples=200, seed=11)


@pytest.fixture(scope="session")
def small_plan(orbit, small_scenario):
    return discretize_reference(
        orbit,
        small_scenario.segments_per_rev,
        small_scenario.revs,
        small_scenario.constants,
    )


@pytest.fixture(scope="session")
def small_gcoefs(small_plan, small_scenario):
    return build_g_coefficients(small_plan, m_star=small_scenario.m_star)


@pytest.fixture(scope="session")
def small_filt(small_plan, small_scenario):
    return kalman_schedule(
        small_plan,
        small_scenario.C_matrix,
        small_scenario.D_matrix,
        small_scenario.P_tilde0,
    )


@pytest.fixture(scope="session")
def small_blocks(small_plan, small_filt, small_scenario):
    return assemble_blocks(small_plan, small_filt, small_scenario.P_hat0_minus)


@pytest.fixture(scope="session")
def small_solutions(small_blocks, small_gcoefs, small_scenario):
    out = {}
    for kind in small_scenario.objective_kinds:
        problem = build_program(
            kind,
            small_blocks,
            small_gcoefs,
            small_scenario.lam,
            small_scenario.eps_x,
            small_scenario.u_max_nd,
            norm_mode=small_scenario.norm_mode,
        )
        out[kind] = solve(problem, SolverConfig())
    return out
