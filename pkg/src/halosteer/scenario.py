"""Scenario configuration: a flat YAML schema mirroring the study tables.

All dimensional inputs (km, m/s, m, cm/s) convert to nondimensional units on
load; the 3-sigma dispersion values describe diagonal covariances.  The
estimate-dispersion sigmas parameterize the pre-update covariance of the
estimated state, the estimation sigmas the initial filter error covariance;
the true initial covariance is their sum.
"""

from __future__ import annotations

import importlib.resources
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import yaml
from numpy.typing import NDArray

from halosteer.cr3bp import SystemConstants

OBJECTIVE_KINDS = ("min-nl", "min-cov", "both")
NORM_MODES = ("surrogate", "exact")


class ScenarioError(ValueError):
    """Scenario file failed to parse or validate; names the offending field."""


@dataclass(frozen=True)
class Scenario:
    """Validated run configuration with nondimensional accessors."""

    constants: SystemConstants = field(default_factory=SystemConstants)
    initial_mean: tuple[float, ...] = (1.1300, 0.0, -0.1767, 0.0, -0.2255, 0.0)
    period_guess: float = 3.26895
    correction_tol: float = 1e-12
    dispersion_pos_3sigma_km: float = 30.0
    dispersion_vel_3sigma_mps: float = 3.0
    estimation_pos_3sigma_km: float = 3.0
    estimation_vel_3sigma_mps: float = 3.0
    segments_per_rev: int = 9
    revs: int = 2
    u_max_mps: float = 20.0
    eps_x: float = 0.001
    sigma_msr_pos_m: float = 1.0
    sigma_msr_vel_cmps: float = 10.0
    lam: float = 0.52
    m_star: int = 2
    objective: str = "both"
    norm_mode: str = "surrogate"
    seed: int = 482025
    n_samples: int = 1000

    def __post_init__(self) -> None:
        mean = np.asarray(self.initial_mean, dtype=float)
        if mean.shape != (6,) or not np.all(np.isfinite(mean)):
            raise ScenarioError("initial.mean must be a finite 6-vector")
        object.__setattr__(self, "initial_mean", tuple(float(v) for v in mean))
        for name in (
            "dispersion_pos_3sigma_km",
            "dispersion_vel_3sigma_mps",
            "estimation_pos_3sigma_km",
            "estimation_vel_3sigma_mps",
            "sigma_msr_pos_m",
            "sigma_msr_vel_cmps",
            "period_guess",
            "correction_tol",
        ):
            if getattr(self, name) <= 0.0:
                raise ScenarioError(f"{name} must be positive")
        if self.u_max_mps < 0.0:
            raise ScenarioError("u_max_mps must be nonnegative")
        if not 0.0 < self.eps_x < 1.0:
            raise ScenarioError(f"eps_x must lie in (0, 1), got {self.eps_x}")
        if not 0.0 <= self.lam <= 1.0:
            raise ScenarioError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.m_star != 2:
            raise ScenarioError(f"m_star must be 2, got {self.m_star}")
        if self.segments_per_rev < 1 or self.revs < 1:
            raise ScenarioError("segments_per_rev and revs must be at least 1")
        if self.objective not in OBJECTIVE_KINDS:
            raise ScenarioError(f"objective must be one of {OBJECTIVE_KINDS}, got {self.objective!r}")
        if self.norm_mode not in NORM_MODES:
            raise ScenarioError(f"norm_mode must be one of {NORM_MODES}, got {self.norm_mode!r}")
        if self.n_samples < 0:
            raise ScenarioError("n_samples must be nonnegative")
        if self.seed < 0:
            raise ScenarioError("seed must be nonnegative")

    @property
    def initial_mean_array(self) -> NDArray[np.float64]:
        return np.array(self.initial_mean)

    @property
    def P_hat0_minus(self) -> NDArray[np.float64]:
        sp = self.constants.position_km_to_nd(self.dispersion_pos_3sigma_km / 3.0)
        sv = self.constants.velocity_mps_to_nd(self.dispersion_vel_3sigma_mps / 3.0)
        return np.diag([sp**2] * 3 + [sv**2] * 3)

    @property
    def P_tilde0(self) -> NDArray[np.float64]:
        sp = self.constants.position_km_to_nd(self.estimation_pos_3sigma_km / 3.0)
        sv = self.constants.velocity_mps_to_nd(self.estimation_vel_3sigma_mps / 3.0)
        return np.diag([sp**2] * 3 + [sv**2] * 3)

    @property
    def C_matrix(self) -> NDArray[np.float64]:
        return np.eye(6)

    @property
    def D_matrix(self) -> NDArray[np.float64]:
        sp = self.constants.position_km_to_nd(self.sigma_msr_pos_m * 1e-3)
        sv = self.constants.velocity_mps_to_nd(self.sigma_msr_vel_cmps * 1e-2)
        return np.diag([sp] * 3 + [sv] * 3)

    @property
    def u_max_nd(self) -> float:
        return self.constants.velocity_mps_to_nd(self.u_max_mps)

    @property
    def quantile_p(self) -> float:
        return 1.0 - self.eps_x

    @property
    def objective_kinds(self) -> tuple[str, ...]:
        if self.objective == "both":
            return ("min_nonlinearity", "min_covariance")
        return ("min_nonlinearity",) if self.objective == "min-nl" else ("min_covariance",)

    def with_overrides(self, **kwargs) -> "Scenario":
        return replace(self, **kwargs)


_SCHEMA = {
    "system": {
        "mu": ("constants", "mu"),
        "length_unit_km": ("constants", "length_unit_km"),
        "time_unit_s": ("constants", "time_unit_s"),
    },
    "initial": {
        "mean": ("initial_mean", None),
        "period_guess": ("period_guess", None),
        "correction_tol": ("correction_tol", None),
        "dispersion_3sigma_pos_km": ("dispersion_pos_3sigma_km", None),
        "dispersion_3sigma_vel_mps": ("dispersion_vel_3sigma_mps", None),
        "estimation_3sigma_pos_km": ("estimation_pos_3sigma_km", None),
        "estimation_3sigma_vel_mps": ("estimation_vel_3sigma_mps", None),
    },
    "discretization": {
        "segments_per_rev": ("segments_per_rev", None),
        "revs": ("revs", None),
    },
    "control": {
        "u_max_mps": ("u_max_mps", None),
        "eps_x": ("eps_x", None),
    },
    "filter": {
        "sigma_msr_pos_m": ("sigma_msr_pos_m", None),
        "sigma_msr_vel_cmps": ("sigma_msr_vel_cmps", None),
    },
    "objective": {
        "kind": ("objective", None),
        "lambda": ("lam", None),
        "m_star": ("m_star", None),
        "norm_mode": ("norm_mode", None),
    },
    "run": {
        "seed": ("seed", None),
        "n_samples": ("n_samples", None),
    },
}


def load_scenario(path: str | Path) -> Scenario:
    """Load and validate a scenario YAML file.

    Unknown sections or keys are rejected by name; omitted keys fall back to
    the study defaults.
    """
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ScenarioError(f"cannot parse {path}: {exc}") from exc
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ScenarioError(f"{path}: top level must be a mapping of sections")

    kwargs: dict = {}
    constants_kwargs: dict = {}
    for section, entries in raw.items():
        if section not in _SCHEMA:
            raise ScenarioError(f"{path}: unknown section {section!r}")
        if entries is None:
            continue
        if not isinstance(entries, dict):
            raise ScenarioError(f"{path}: section {section!r} must be a mapping")
        for key, value in entries.items():
            if key not in _SCHEMA[section]:
                raise ScenarioError(f"{path}: unknown key {section}.{key}")
            target, sub = _SCHEMA[section][key]
            if target == "constants":
                constants_kwargs[sub] = value
            else:
                kwargs[target] = value

    try:
        if constants_kwargs:
            kwargs["constants"] = SystemConstants(**constants_kwargs)
        scenario = Scenario(**kwargs)
    except (ScenarioError, ValueError, TypeError) as exc:
        raise ScenarioError(f"{path}: {exc}") from exc
    return scenario


def default_scenario_path() -> Path:
    """Path of the shipped default scenario (study table values)."""
    return Path(importlib.resources.files("halosteer") / "data" / "scenario_default.yaml")


def scenario_field_names() -> tuple[str, ...]:
    return tuple(f.name for f in fields(Scenario))
