"""Tests for caching, serialization, report emission, and stage control."""

from __future__ import annotations

import dataclasses
import json

import numpy as np
import pytest

import halosteer.pipeline as pl
from halosteer.montecarlo import compare_quantiles, simulate_closed_loop
from halosteer.scenario import Scenario
from halosteer.steering import SolverError


@pytest.fixture(scope="module")
def tiny_scenario() -> Scenario:
    return Scenario(segments_per_rev=3, revs=1, n_samples=25, seed=5)


def test_cache_key_tracks_dynamics_fields(scenario):
    key = pl.dynamics_cache_key(scenario)
    assert key == pl.dynamics_cache_key(Scenario())
    assert len(key) == 16
    changed = [
        dataclasses.replace(scenario, segments_per_rev=7),
        dataclasses.replace(scenario, revs=3),
        dataclasses.replace(scenario, period_guess=3.3),
        dataclasses.replace(scenario, correction_tol=1e-10),
        dataclasses.replace(scenario, initial_mean=(1.13, 0.0, -0.18, 0.0, -0.22, 0.0)),
    ]
    for other in changed:
        assert pl.dynamics_cache_key(other) != key
    # Fields that do not alter the plan must not invalidate it.
    same = [
        dataclasses.replace(scenario, seed=1),
        dataclasses.replace(scenario, n_samples=7),
        dataclasses.replace(scenario, u_max_mps=5.0),
        dataclasses.replace(scenario, lam=0.1),
    ]
    for other in same:
        assert pl.dynamics_cache_key(other) == key


def test_plan_cache_roundtrip(tmp_path, small_plan, small_scenario):
    key = pl.dynamics_cache_key(small_scenario)
    path = tmp_path / "plan.npz"
    pl.save_plan(path, small_plan, key)
    loaded = pl.load_plan(path, key)
    assert np.array_equal(loaded.node_times, small_plan.node_times)
    assert np.array_equal(loaded.node_states, small_plan.node_states)
    assert loaded.N == small_plan.N
    for a, b in zip(loaded.segments, small_plan.segments):
        assert np.array_equal(a.A, b.A)
        assert np.array_equal(a.Phi2, b.Phi2)
        assert a.t_start == b.t_start and a.t_end == b.t_end
    assert loaded.orbit.period == small_plan.orbit.period
    assert loaded.orbit.tau == small_plan.orbit.tau
    assert np.array_equal(loaded.orbit.monodromy, small_plan.orbit.monodromy)
    with pytest.raises(ValueError, match="key"):
        pl.load_plan(path, "0" * 16)


def test_gcoefs_cache_roundtrip(tmp_path, small_gcoefs, small_scenario):
    key = pl.dynamics_cache_key(small_scenario)
    path = tmp_path / "gcoefs.npz"
    pl.save_gcoefs(path, small_gcoefs, key)
    loaded = pl.load_gcoefs(path, key)
    assert loaded.m_star == small_gcoefs.m_star
    assert sorted(loaded.G_r) == sorted(small_gcoefs.G_r)
    for m in small_gcoefs.G_r:
        assert np.array_equal(loaded.G_r[m], small_gcoefs.G_r[m])
        assert np.array_equal(loaded.G_v[m], small_gcoefs.G_v[m])
        assert np.array_equal(loaded.G_x[m], small_gcoefs.G_x[m])
    assert loaded.non_converged == small_gcoefs.non_converged
    with pytest.raises(ValueError, match="key"):
        pl.load_gcoefs(path, "f" * 16)


def test_corrupt_cache_falls_back(tmp_path, caplog):
    path = tmp_path / "plan.bad.npz"
    path.write_bytes(b"not an archive")
    with caplog.at_level("WARNING"):
        assert pl._load_cached(path, "whatever", pl.load_plan) is None
    assert "recomputing" in caplog.text
    assert pl._load_cached(tmp_path / "absent.npz", "k", pl.load_plan) is None


def test_solution_dict_roundtrip(small_solutions):
    for sol in small_solutions.values():
        payload = json.loads(json.dumps(pl.solution_to_dict(sol)))
        back = pl.solution_from_dict(payload)
        assert back.kind == sol.kind and back.status == sol.status
        assert back.objective_value == sol.objective_value
        assert np.array_equal(back.u_bar, sol.u_bar)
        assert np.array_equal(back.gains, sol.gains)
        assert np.array_equal(back.X_bar, sol.X_bar)
        assert np.array_equal(back.P_hat_half, sol.P_hat_half)
        assert np.array_equal(back.P_hat_plus_half, sol.P_hat_plus_half)
        assert np.array_equal(back.r_tilde, sol.r_tilde)
        assert np.array_equal(back.v_tilde_surrogate, sol.v_tilde_surrogate)
        assert np.array_equal(back.mon.eps_r, sol.mon.eps_r)
        assert back.mon.objective == sol.mon.objective
        assert np.array_equal(back.u_quantiles, sol.u_quantiles)
        assert back.max_pos_trace == sol.max_pos_trace
        assert back.terminal_residual == sol.terminal_residual


def test_emit_report_prediction_only(tmp_path, small_solutions, small_plan, small_filt):
    sol = small_solutions["min_nonlinearity"]
    written = pl.emit_report(
        sol,
        None,
        tmp_path,
        node_times=small_plan.node_times,
        period=small_plan.orbit.period,
        p_tilde_terminal=small_filt.P_tilde[-1],
    )
    names = {p.name for p in written}
    assert names == {"quantiles.min-nl.csv", "mon.min-nl.csv", "summary.min-nl.json"}
    header = (tmp_path / "quantiles.min-nl.csv").read_text().splitlines()[0]
    assert header == "time_revs,predicted_r,predicted_v"
    summary = json.loads((tmp_path / "summary.min-nl.json").read_text())
    assert "dv" not in summary and "n_samples" not in summary
    assert summary["objective"] == "min-nl"
    cov = np.array(summary["terminal"]["predicted_cov"])
    assert cov.shape == (6, 6)
    assert np.allclose(cov, cov.T)
    # Terminal covariance carries both the dispersion and estimation parts.
    Ph = sol.P_hat_half[-6:]
    assert np.allclose(cov, Ph @ Ph.T + small_filt.P_tilde[-1])


def test_emit_report_csv_full_precision(
    tmp_path, small_solutions, small_plan, small_filt, small_scenario
):
    sol = small_solutions["min_covariance"]
    report = simulate_closed_loop(
        sol, small_plan, small_filt, small_scenario, n_samples=40, seed=9,
        linear_stub=True,
    )
    pl.emit_report(sol, report, tmp_path, period=small_plan.orbit.period)
    rows = (tmp_path / "quantiles.min-cov.csv").read_text().splitlines()
    assert rows[0].split(",") == [
        "time_revs", "predicted_r", "empirical_r", "ratio_r",
        "predicted_v", "empirical_v", "ratio_v",
    ]
    table = np.array([[float(c) for c in r.split(",")] for r in rows[1:]])
    assert table.shape == (small_plan.N, 7)
    assert np.array_equal(table[:, 1], sol.r_tilde)
    assert np.array_equal(table[:, 2], report.quantile_r)
    comp = compare_quantiles(report, sol)
    assert np.array_equal(table[:, 3], comp.ratios)
    assert np.array_equal(
        table[:, 0], small_plan.node_times / small_plan.orbit.period
    )
    summary = json.loads((tmp_path / "summary.min-cov.json").read_text())
    assert summary["quantile_ratio_max"] == pytest.approx(comp.ratios.max())
    assert summary["dv"]["total_mean"] == report.total_dv_mean
    mon_rows = (tmp_path / "mon.min-cov.csv").read_text().splitlines()
    assert len(mon_rows) == small_plan.N + 1


def test_run_pipeline_cold_then_warm_identical(tmp_path, tiny_scenario):
    cache = tmp_path / "cache"
    out1 = tmp_path / "run1"
    out2 = tmp_path / "run2"
    assert pl.run_pipeline(tiny_scenario, pl.STAGES, cache, out1) == pl.EXIT_OK
    assert pl.run_pipeline(tiny_scenario, pl.STAGES, cache, out2) == pl.EXIT_OK
    names1 = sorted(p.name for p in out1.iterdir())
    assert "orbit.json" in names1
    assert "solution.min-nl.json" in names1 and "solution.min-cov.json" in names1
    assert "mc_report.min-nl.json" in names1
    assert "summary.min-cov.json" in names1
    assert names1 == sorted(p.name for p in out2.iterdir())
    for name in names1:
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes(), name
    assert (cache / f"plan.{pl.dynamics_cache_key(tiny_scenario)}.npz").exists()


def test_run_pipeline_rejects_bad_stages(tmp_path, tiny_scenario):
    assert pl.run_pipeline(tiny_scenario, ("fly",), tmp_path / "c", tmp_path / "o") == 2
    assert pl.run_pipeline(tiny_scenario, (), tmp_path / "c", tmp_path / "o") == 2


def test_run_pipeline_solver_failure_exit(tmp_path, tiny_scenario, monkeypatch):
    def boom(scenario, artifacts, out):
        raise SolverError("infeasible", "no policy satisfies the constraints")

    monkeypatch.setattr(pl, "_stage_solve", boom)
    out = tmp_path / "out"
    code = pl.run_pipeline(tiny_scenario, ("solve",), tmp_path / "cache", out)
    assert code == pl.EXIT_SOLVER
    record = json.loads((out / "error.json").read_text())
    assert record["stage"] == "solve"
    assert record["exit_code"] == pl.EXIT_SOLVER
    assert record["error"] == "SolverError"


def test_run_pipeline_simulation_failure_exit(tmp_path, tiny_scenario, monkeypatch):
    def boom(scenario, artifacts, out):
        raise RuntimeError("sample cloud diverged")

    monkeypatch.setattr(pl, "_stage_montecarlo", boom)
    out = tmp_path / "out"
    code = pl.run_pipeline(tiny_scenario, ("montecarlo",), tmp_path / "cache", out)
    assert code == pl.EXIT_SIMULATION
    record = json.loads((out / "error.json").read_text())
    assert record["stage"] == "montecarlo"
    assert record["message"] == "sample cloud diverged"
