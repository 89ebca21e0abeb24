"""Pipeline orchestration: staged runs, artifact caching, and report files.

Stages run in a fixed dependency chain (correct -> discretize -> gcoefs ->
solve -> montecarlo -> report); requesting a stage runs everything up to it.
The expensive propagation artifacts (discretized plan, g-coefficients) are
cached on disk keyed by a content hash of the dynamics-relevant scenario
fields, so repeated solves skip straight to the conic program.  Result files
carry no timestamps and print floats at full round-trip precision, which
makes repeated runs with one seed byte-identical.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from filelock import FileLock
from numpy.typing import NDArray

from halosteer.cr3bp import (
    CorrectionError,
    ReferenceOrbit,
    SingularPositionError,
    SystemConstants,
    correct_periodic,
    dominant_eigenvalue,
    jacobi_constant,
)
from halosteer.mon import GCoefficients, MonBound, build_g_coefficients
from halosteer.montecarlo import (
    MonteCarloReport,
    compare_quantiles,
    simulate_closed_loop,
)
from halosteer.scenario import Scenario
from halosteer.steering import (
    FilterSchedule,
    SolverConfig,
    SolverError,
    SteeringSolution,
    assemble_blocks,
    build_program,
    kalman_schedule,
    solve,
)
from halosteer.stt import DiscretizedPlan, SegmentLinearization, discretize_reference

logger = logging.getLogger(__name__)

STAGES = ("correct", "discretize", "gcoefs", "solve", "montecarlo", "report")
OBJECTIVE_TOKENS = {"min_nonlinearity": "min-nl", "min_covariance": "min-cov"}

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_SOLVER = 3
EXIT_SIMULATION = 4

_STAGE_EXIT = {
    "correct": EXIT_SOLVER,
    "discretize": EXIT_SOLVER,
    "gcoefs": EXIT_SOLVER,
    "solve": EXIT_SOLVER,
    "montecarlo": EXIT_SIMULATION,
    "report": EXIT_SIMULATION,
}


class PipelineError(RuntimeError):
    """Stage failure carrying an exit code and a machine-readable record."""

    def __init__(self, stage: str, exit_code: int, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.exit_code = exit_code
        self.record = {
            "stage": stage,
            "error": type(cause).__name__,
            "message": str(cause),
            "exit_code": exit_code,
        }


@dataclass
class PipelineArtifacts:
    """In-memory products of the stages executed by one pipeline run."""

    orbit: ReferenceOrbit | None = None
    plan: DiscretizedPlan | None = None
    g: GCoefficients | None = None
    filt: FilterSchedule | None = None
    solutions: dict[str, SteeringSolution] = field(default_factory=dict)
    reports: dict[str, MonteCarloReport] = field(default_factory=dict)
    files: list[Path] = field(default_factory=list)


def _fmt(x: float) -> str:
    """Full round-trip float formatting for delimited text output."""
    return format(float(x), ".17g")


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _write_csv(path: Path, header: list[str], rows: list[list[float]]) -> None:
    with path.open("w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def dynamics_cache_key(scenario: Scenario) -> str:
    """Content hash of every field that alters the plan or g-coefficients."""
    c = scenario.constants
    fields_repr = repr(
        (
            ("mu", c.mu),
            ("length_unit_km", c.length_unit_km),
            ("time_unit_s", c.time_unit_s),
            ("initial_mean", scenario.initial_mean),
            ("period_guess", scenario.period_guess),
            ("correction_tol", scenario.correction_tol),
            ("segments_per_rev", scenario.segments_per_rev),
            ("revs", scenario.revs),
            ("m_star", scenario.m_star),
        )
    )
    return hashlib.sha256(fields_repr.encode()).hexdigest()[:16]


def save_plan(path: Path, plan: DiscretizedPlan, key: str) -> None:
    orbit = plan.orbit
    c = orbit.constants
    np.savez(
        path,
        key=np.array(key),
        mu=c.mu,
        length_unit_km=c.length_unit_km,
        time_unit_s=c.time_unit_s,
        initial_state=orbit.initial_state,
        period=orbit.period,
        orbit_node_times=orbit.node_times,
        orbit_node_states=orbit.node_states,
        monodromy=orbit.monodromy,
        tau=orbit.tau,
        t_nodes=plan.node_times,
        x_nodes=plan.node_states,
        A=np.stack([s.A for s in plan.segments]),
        Phi2=np.stack([s.Phi2 for s in plan.segments]),
    )


def load_plan(path: Path, key: str) -> DiscretizedPlan:
    with np.load(path) as data:
        if str(data["key"]) != key:
            raise ValueError("cache key mismatch")
        constants = SystemConstants(
            mu=float(data["mu"]),
            length_unit_km=float(data["length_unit_km"]),
            time_unit_s=float(data["time_unit_s"]),
        )
        orbit = ReferenceOrbit(
            initial_state=data["initial_state"],
            period=float(data["period"]),
            node_times=data["orbit_node_times"],
            node_states=data["orbit_node_states"],
            monodromy=data["monodromy"],
            tau=float(data["tau"]),
            constants=constants,
        )
        t = data["t_nodes"]
        x = data["x_nodes"]
        A = data["A"]
        Phi2 = data["Phi2"]
    segments = tuple(
        SegmentLinearization(
            k=k,
            t_start=float(t[k]),
            t_end=float(t[k + 1]),
            A=A[k],
            Phi2=Phi2[k],
            x_ref_start=x[k],
            x_ref_end=x[k + 1],
        )
        for k in range(len(t) - 1)
    )
    return DiscretizedPlan(orbit=orbit, segments=segments, N=len(t))


def save_gcoefs(path: Path, g: GCoefficients, key: str) -> None:
    nc = g.non_converged
    np.savez(
        path,
        key=np.array(key),
        m_star=g.m_star,
        orders=np.array(sorted(g.G_r)),
        **{f"G_r_{m}": g.G_r[m] for m in g.G_r},
        **{f"G_v_{m}": g.G_v[m] for m in g.G_v},
        **{f"G_x_{m}": g.G_x[m] for m in g.G_x},
        nc_flavor=np.array([e[0] for e in nc], dtype="U8"),
        nc_m=np.array([e[1] for e in nc], dtype=int),
        nc_j=np.array([e[2] for e in nc], dtype=int),
        nc_k=np.array([e[3] for e in nc], dtype=int),
    )


def load_gcoefs(path: Path, key: str) -> GCoefficients:
    with np.load(path) as data:
        if str(data["key"]) != key:
            raise ValueError("cache key mismatch")
        orders = [int(m) for m in data["orders"]]
        G_r = {m: data[f"G_r_{m}"] for m in orders}
        G_v = {m: data[f"G_v_{m}"] for m in orders}
        G_x = {m: data[f"G_x_{m}"] for m in orders}
        nc = tuple(
            (str(f), int(m), int(j), int(k))
            for f, m, j, k in zip(
                data["nc_flavor"], data["nc_m"], data["nc_j"], data["nc_k"]
            )
        )
        return GCoefficients(
            m_star=int(data["m_star"]), G_r=G_r, G_v=G_v, G_x=G_x, non_converged=nc
        )


def _load_cached(path: Path, key: str, loader):
    """Load one cache artifact; any failure invalidates it for recompute."""
    if not path.exists():
        return None
    try:
        return loader(path, key)
    except Exception as exc:  # noqa: BLE001 - corrupt cache must not be fatal
        logger.warning("cache file %s unusable (%s); recomputing", path, exc)
        return None


def solution_to_dict(solution: SteeringSolution) -> dict:
    """JSON-ready view of a solution; omits wall-clock solve statistics."""
    return {
        "kind": solution.kind,
        "status": solution.status,
        "norm_mode": solution.norm_mode,
        "objective_value": solution.objective_value,
        "eps_x": solution.eps_x,
        "u_max_nd": solution.u_max_nd,
        "u_bar": solution.u_bar.tolist(),
        "gains": solution.gains.tolist(),
        "X_bar": solution.X_bar.tolist(),
        "X_bar_plus": solution.X_bar_plus.tolist(),
        "P_hat_half": solution.P_hat_half.tolist(),
        "P_hat_plus_half": solution.P_hat_plus_half.tolist(),
        "r_tilde": solution.r_tilde.tolist(),
        "v_tilde": solution.v_tilde.tolist(),
        "r_tilde_surrogate": solution.r_tilde_surrogate.tolist(),
        "v_tilde_surrogate": solution.v_tilde_surrogate.tolist(),
        "mon": {
            "eps_r": solution.mon.eps_r.tolist(),
            "eps_v": solution.mon.eps_v.tolist(),
            "lam": solution.mon.lam,
            "objective": solution.mon.objective,
        },
        "mon_surrogate": {
            "eps_r": solution.mon_surrogate.eps_r.tolist(),
            "eps_v": solution.mon_surrogate.eps_v.tolist(),
            "lam": solution.mon_surrogate.lam,
            "objective": solution.mon_surrogate.objective,
        },
        "u_quantiles": solution.u_quantiles.tolist(),
        "pos_traces": solution.pos_traces.tolist(),
        "max_pos_trace": solution.max_pos_trace,
        "terminal_residual": solution.terminal_residual,
    }


def solution_from_dict(payload: dict) -> SteeringSolution:
    def arr(name: str) -> NDArray[np.float64]:
        return np.asarray(payload[name], dtype=float)

    def mon(name: str) -> MonBound:
        m = payload[name]
        return MonBound(
            eps_r=np.asarray(m["eps_r"], dtype=float),
            eps_v=np.asarray(m["eps_v"], dtype=float),
            lam=float(m["lam"]),
            objective=float(m["objective"]),
        )

    return SteeringSolution(
        kind=payload["kind"],
        status=payload["status"],
        objective_value=float(payload["objective_value"]),
        u_bar=arr("u_bar"),
        gains=arr("gains"),
        X_bar=arr("X_bar"),
        X_bar_plus=arr("X_bar_plus"),
        P_hat_half=arr("P_hat_half"),
        P_hat_plus_half=arr("P_hat_plus_half"),
        r_tilde=arr("r_tilde"),
        v_tilde=arr("v_tilde"),
        r_tilde_surrogate=arr("r_tilde_surrogate"),
        v_tilde_surrogate=arr("v_tilde_surrogate"),
        mon=mon("mon"),
        mon_surrogate=mon("mon_surrogate"),
        u_quantiles=arr("u_quantiles"),
        pos_traces=arr("pos_traces"),
        max_pos_trace=float(payload["max_pos_trace"]),
        terminal_residual=float(payload["terminal_residual"]),
        norm_mode=payload["norm_mode"],
        eps_x=float(payload["eps_x"]),
        u_max_nd=float(payload["u_max_nd"]),
        solve_stats={},
    )


def report_to_dict(report: MonteCarloReport) -> dict:
    """JSON-ready view of a Monte Carlo report; raw samples stay in memory."""
    return {
        "node_times": report.node_times.tolist(),
        "n_samples": report.n_samples,
        "seed": report.seed,
        "excluded": report.excluded,
        "quantile_p": report.quantile_p,
        "mean_true": report.mean_true.tolist(),
        "cov_true": report.cov_true.tolist(),
        "quantile_r": report.quantile_r.tolist(),
        "quantile_v": report.quantile_v.tolist(),
        "mardia_skewness": report.mardia_skewness.tolist(),
        "mardia_kurtosis": report.mardia_kurtosis.tolist(),
        "mardia_skewness_state": report.mardia_skewness_state.tolist(),
        "mardia_kurtosis_state": report.mardia_kurtosis_state.tolist(),
        "dv_mean": report.dv_mean.tolist(),
        "dv_max": report.dv_max.tolist(),
        "total_dv_mean": report.total_dv_mean,
        "total_dv_max": report.total_dv_max,
        "predicted_r_tilde": report.predicted_r_tilde.tolist(),
        "predicted_v_tilde": report.predicted_v_tilde.tolist(),
    }


def emit_report(
    solution: SteeringSolution,
    mc_report: MonteCarloReport | None,
    out_dir: str | Path,
    *,
    node_times: NDArray | None = None,
    period: float | None = None,
    p_tilde_terminal: NDArray | None = None,
) -> list[Path]:
    """Write plot-ready quantile/MoN tables and a structured summary.

    Without a Monte Carlo report the empirical columns are omitted and the
    summary carries predicted values only.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    token = OBJECTIVE_TOKENS[solution.kind]
    if mc_report is not None:
        node_times = mc_report.node_times
    if node_times is None:
        raise ValueError("node_times required when no Monte Carlo report is given")
    times = np.asarray(node_times, dtype=float)
    revs = times / float(period) if period else times
    written: list[Path] = []

    quantile_path = out / f"quantiles.{token}.csv"
    if mc_report is not None:
        cmp_r = compare_quantiles(mc_report, solution)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio_v = np.where(
                solution.v_tilde > 0.0,
                mc_report.quantile_v / solution.v_tilde,
                np.inf,
            )
        header = [
            "time_revs",
            "predicted_r",
            "empirical_r",
            "ratio_r",
            "predicted_v",
            "empirical_v",
            "ratio_v",
        ]
        rows = [
            [
                revs[k],
                solution.r_tilde[k],
                mc_report.quantile_r[k],
                cmp_r.ratios[k],
                solution.v_tilde[k],
                mc_report.quantile_v[k],
                ratio_v[k],
            ]
            for k in range(len(times))
        ]
    else:
        header = ["time_revs", "predicted_r", "predicted_v"]
        rows = [
            [revs[k], solution.r_tilde[k], solution.v_tilde[k]]
            for k in range(len(times))
        ]
    _write_csv(quantile_path, header, rows)
    written.append(quantile_path)

    mon_path = out / f"mon.{token}.csv"
    _write_csv(
        mon_path,
        ["time_revs", "eps_r", "eps_v", "eps_r_surrogate", "eps_v_surrogate"],
        [
            [
                revs[k],
                solution.mon.eps_r[k],
                solution.mon.eps_v[k],
                solution.mon_surrogate.eps_r[k],
                solution.mon_surrogate.eps_v[k],
            ]
            for k in range(len(times))
        ],
    )
    written.append(mon_path)

    terminal_factor = solution.P_hat_half[-6:]
    predicted_cov = terminal_factor @ terminal_factor.T
    if p_tilde_terminal is not None:
        predicted_cov = predicted_cov + np.asarray(p_tilde_terminal, dtype=float)
    summary: dict = {
        "objective": token,
        "kind": solution.kind,
        "status": solution.status,
        "norm_mode": solution.norm_mode,
        "objective_value": solution.objective_value,
        "mon_objective": solution.mon.objective,
        "mon_objective_surrogate": solution.mon_surrogate.objective,
        "max_pos_trace": solution.max_pos_trace,
        "terminal_residual": solution.terminal_residual,
        "terminal": {
            "predicted_mean": solution.X_bar[-1].tolist(),
            "predicted_cov": predicted_cov.tolist(),
        },
    }
    if mc_report is not None:
        cmp_r = compare_quantiles(mc_report, solution)
        summary["n_samples"] = mc_report.n_samples
        summary["seed"] = mc_report.seed
        summary["excluded"] = mc_report.excluded
        summary["terminal"]["empirical_mean"] = mc_report.mean_true[-1].tolist()
        summary["terminal"]["empirical_cov"] = mc_report.cov_true[-1].tolist()
        summary["terminal"]["mardia_skewness"] = float(mc_report.mardia_skewness[-1])
        summary["terminal"]["mardia_kurtosis"] = float(mc_report.mardia_kurtosis[-1])
        summary["dv"] = {
            "per_node_mean": mc_report.dv_mean.tolist(),
            "per_node_max": mc_report.dv_max.tolist(),
            "total_mean": mc_report.total_dv_mean,
            "total_max": mc_report.total_dv_max,
        }
        summary["quantile_ratio_max"] = float(np.max(cmp_r.ratios))
    summary_path = out / f"summary.{token}.json"
    _write_json(summary_path, summary)
    written.append(summary_path)
    return written


def _stage_correct(
    scenario: Scenario, artifacts: PipelineArtifacts, out: Path, cache: Path, key: str
) -> None:
    # A warm plan cache already contains the corrected orbit.
    plan = _load_cached(cache / f"plan.{key}.npz", key, load_plan)
    if plan is not None:
        artifacts.plan = plan
        orbit = plan.orbit
    else:
        orbit = correct_periodic(
            scenario.initial_mean_array,
            scenario.period_guess,
            scenario.constants,
            tol=scenario.correction_tol,
        )
    artifacts.orbit = orbit
    lam_dom = dominant_eigenvalue(orbit.monodromy)
    payload = {
        "initial_state": orbit.initial_state.tolist(),
        "period": orbit.period,
        "period_days": orbit.period * scenario.constants.time_unit_s / 86400.0,
        "tau_revs": orbit.tau,
        "dominant_eigenvalue_abs": float(abs(lam_dom)),
        "jacobi_constant": float(
            jacobi_constant(orbit.initial_state, scenario.constants)
        ),
    }
    path = out / "orbit.json"
    _write_json(path, payload)
    artifacts.files.append(path)
    logger.info(
        "corrected orbit: period=%.9f tau=%.6f revs", orbit.period, orbit.tau
    )


def _stage_discretize(
    scenario: Scenario, artifacts: PipelineArtifacts, cache: Path, key: str
) -> None:
    if artifacts.plan is not None:
        return
    path = cache / f"plan.{key}.npz"
    plan = _load_cached(path, key, load_plan)
    if plan is None:
        plan = discretize_reference(
            artifacts.orbit, scenario.segments_per_rev, scenario.revs, scenario.constants
        )
        save_plan(path, plan, key)
        logger.info("discretized plan cached at %s", path)
    else:
        logger.info("plan loaded from cache %s", path)
    artifacts.plan = plan
    artifacts.orbit = plan.orbit


def _stage_gcoefs(
    scenario: Scenario, artifacts: PipelineArtifacts, cache: Path, key: str
) -> None:
    path = cache / f"gcoefs.{key}.npz"
    g = _load_cached(path, key, load_gcoefs)
    if g is None:
        g = build_g_coefficients(artifacts.plan, m_star=scenario.m_star)
        save_gcoefs(path, g, key)
        logger.info("g-coefficients cached at %s", path)
    else:
        logger.info("g-coefficients loaded from cache %s", path)
    artifacts.g = g


def _stage_solve(scenario: Scenario, artifacts: PipelineArtifacts, out: Path) -> None:
    plan, g = artifacts.plan, artifacts.g
    artifacts.filt = kalman_schedule(
        plan, scenario.C_matrix, scenario.D_matrix, scenario.P_tilde0
    )
    blocks = assemble_blocks(plan, artifacts.filt, scenario.P_hat0_minus)
    for kind in scenario.objective_kinds:
        problem = build_program(
            kind,
            blocks,
            g,
            scenario.lam,
            scenario.eps_x,
            scenario.u_max_nd,
            norm_mode=scenario.norm_mode,
        )
        solution = solve(problem, SolverConfig())
        artifacts.solutions[kind] = solution
        token = OBJECTIVE_TOKENS[kind]
        path = out / f"solution.{token}.json"
        _write_json(path, solution_to_dict(solution))
        artifacts.files.append(path)
        logger.info(
            "%s solved: status=%s objective=%.6e",
            token,
            solution.status,
            solution.objective_value,
        )


def _stage_montecarlo(
    scenario: Scenario, artifacts: PipelineArtifacts, out: Path
) -> None:
    if scenario.n_samples == 0:
        logger.info("n_samples = 0; skipping Monte Carlo stage")
        return
    for kind, solution in artifacts.solutions.items():
        report = simulate_closed_loop(
            solution, artifacts.plan, artifacts.filt, scenario
        )
        artifacts.reports[kind] = report
        token = OBJECTIVE_TOKENS[kind]
        path = out / f"mc_report.{token}.json"
        _write_json(path, report_to_dict(report))
        artifacts.files.append(path)
        logger.info(
            "%s Monte Carlo: %d samples, %d excluded, total dv mean %.3e",
            token,
            report.n_samples,
            report.excluded,
            report.total_dv_mean,
        )


def _stage_report(scenario: Scenario, artifacts: PipelineArtifacts, out: Path) -> None:
    period = artifacts.plan.orbit.period
    p_tilde_terminal = artifacts.filt.P_tilde[-1] if artifacts.filt is not None else None
    for kind, solution in artifacts.solutions.items():
        report = artifacts.reports.get(kind)
        written = emit_report(
            solution,
            report,
            out,
            node_times=artifacts.plan.node_times,
            period=period,
            p_tilde_terminal=p_tilde_terminal,
        )
        artifacts.files.extend(written)


def run_pipeline(
    scenario: Scenario,
    stages: tuple[str, ...] | list[str] = STAGES,
    cache_dir: str | Path = "cache",
    out_dir: str | Path = "out",
) -> int:
    """Execute the requested stages plus their prerequisites.

    Returns a process exit status: 0 on success, 2 for validation problems,
    3 for correction/solver failures, 4 for simulation/report failures.  On
    failure a machine-readable record is written to ``error.json`` in the
    output directory.
    """
    unknown = set(stages) - set(STAGES)
    if unknown:
        logger.error("unknown stages: %s", sorted(unknown))
        return EXIT_VALIDATION
    if not stages:
        logger.error("no stages requested")
        return EXIT_VALIDATION
    limit = max(STAGES.index(s) for s in stages)
    to_run = STAGES[: limit + 1]

    cache = Path(cache_dir)
    out = Path(out_dir)
    cache.mkdir(parents=True, exist_ok=True)
    out.mkdir(parents=True, exist_ok=True)
    key = dynamics_cache_key(scenario)
    artifacts = PipelineArtifacts()

    lock = FileLock(str(cache / ".lock"))
    stage = to_run[0]
    try:
        with lock.acquire(timeout=600):
            for stage in to_run:
                logger.info("stage %s", stage)
                if stage == "correct":
                    _stage_correct(scenario, artifacts, out, cache, key)
                elif stage == "discretize":
                    _stage_discretize(scenario, artifacts, cache, key)
                elif stage == "gcoefs":
                    _stage_gcoefs(scenario, artifacts, cache, key)
                elif stage == "solve":
                    _stage_solve(scenario, artifacts, out)
                elif stage == "montecarlo":
                    _stage_montecarlo(scenario, artifacts, out)
                elif stage == "report":
                    _stage_report(scenario, artifacts, out)
    except Exception as exc:  # noqa: BLE001 - stage boundary becomes exit code
        if isinstance(exc, (CorrectionError, SolverError)):
            code = EXIT_SOLVER
        elif isinstance(exc, SingularPositionError):
            code = _STAGE_EXIT.get(stage, EXIT_SIMULATION)
        elif isinstance(exc, ValueError):
            code = EXIT_VALIDATION
        else:
            code = _STAGE_EXIT.get(stage, EXIT_SIMULATION)
        err = PipelineError(stage, code, exc)
        logger.error("%s", json.dumps(err.record, sort_keys=True))
        _write_json(out / "error.json", err.record)
        return code
    return EXIT_OK
