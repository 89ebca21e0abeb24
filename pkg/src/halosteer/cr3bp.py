"""Circular restricted three-body problem dynamics in the rotating synodic frame.

States are nondimensional 6-vectors ``[x, y, z, vx, vy, vz]`` with the two
primaries fixed on the x-axis at ``(-mu, 0, 0)`` and ``(1 - mu, 0, 0)``.
Alongside the equations of motion this module provides their first and second
analytic state derivatives (needed by the variational equations), single
shooting differential correction for periodic halo orbits, and the
monodromy-based instability time constant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray
from scipy.integrate import solve_ivp

# Earth-Moon system values; the length/time units fix the km and seconds scale
# of one nondimensional distance/time unit.
EARTH_MOON_MU = 0.012150585609624
EARTH_MOON_LENGTH_KM = 384400.0
EARTH_MOON_TIME_S = 375190.26

# Below this synodic distance to either primary the potential is treated as
# singular rather than evaluated.
MIN_PRIMARY_DISTANCE = 1e-12

# Default integrator settings: the STT fidelity checks need integration error
# far below the truncation effects under study.
INTEGRATOR_METHOD = "DOP853"
INTEGRATOR_RTOL = 1e-12
INTEGRATOR_ATOL = 1e-12

State6 = NDArray[np.float64]


class SingularPositionError(ValueError):
    """Raised when a state falls onto (or numerically into) a primary."""


class CorrectionError(RuntimeError):
    """Raised when differential correction fails to converge."""


@dataclass(frozen=True)
class SystemConstants:
    """Mass parameter and dimensional scale of a CR3BP system.

    Attributes
    ----------
    mu : float
        Nondimensional mass parameter, ``0 < mu < 0.5``.
    length_unit_km : float
        Kilometers per nondimensional distance unit.
    time_unit_s : float
        Seconds per nondimensional time unit.
    """

    mu: float = EARTH_MOON_MU
    length_unit_km: float = EARTH_MOON_LENGTH_KM
    time_unit_s: float = EARTH_MOON_TIME_S

    def __post_init__(self) -> None:
        if not 0.0 < self.mu < 0.5:
            raise ValueError(f"mass parameter must lie in (0, 0.5), got {self.mu}")
        if self.length_unit_km <= 0.0 or self.time_unit_s <= 0.0:
            raise ValueError("length and time units must be positive")

    @property
    def velocity_unit_mps(self) -> float:
        """Meters per second in one nondimensional velocity unit."""
        return self.length_unit_km * 1e3 / self.time_unit_s

    def position_km_to_nd(self, km: float) -> float:
        return km / self.length_unit_km

    def velocity_mps_to_nd(self, mps: float) -> float:
        return mps / self.velocity_unit_mps

    def velocity_nd_to_mps(self, nd: float) -> float:
        return nd * self.velocity_unit_mps

    def position_nd_to_km(self, nd: float) -> float:
        return nd * self.length_unit_km


@dataclass(frozen=True)
class ReferenceOrbit:
    """Corrected periodic orbit with its monodromy and instability metric.

    ``node_times``/``node_states`` record the correction's natural sample
    points (initial state, half-period crossing, closure).  ``tau`` is the
    e-folding time constant in revolutions; ``inf`` for (nearly) stable
    orbits.
    """

    initial_state: State6
    period: float
    node_times: NDArray[np.float64]
    node_states: NDArray[np.float64]
    monodromy: NDArray[np.float64]
    tau: float
    constants: SystemConstants


def _primary_offsets(x: State6, mu: float) -> tuple[NDArray, NDArray, float, float]:
    """Offsets from both primaries and their magnitudes, with singularity guard."""
    rho1 = np.array([x[0] + mu, x[1], x[2]])
    rho2 = np.array([x[0] - 1.0 + mu, x[1], x[2]])
    d = float(np.linalg.norm(rho1))
    r = float(np.linalg.norm(rho2))
    if d < MIN_PRIMARY_DISTANCE or r < MIN_PRIMARY_DISTANCE:
        raise SingularPositionError(
            f"state within {MIN_PRIMARY_DISTANCE} of a primary (d={d:.3e}, r={r:.3e})"
        )
    return rho1, rho2, d, r


def pseudo_potential(x: State6, constants: SystemConstants) -> float:
    """Rotating-frame pseudo-potential U at a state (position part only used)."""
    mu = constants.mu
    _, _, d, r = _primary_offsets(x, mu)
    return 0.5 * (x[0] ** 2 + x[1] ** 2) + (1.0 - mu) / d + mu / r


def jacobi_constant(x: State6, constants: SystemConstants) -> float:
    """Jacobi integral C = 2U - v^2, conserved along ballistic arcs."""
    v2 = float(x[3] ** 2 + x[4] ** 2 + x[5] ** 2)
    return 2.0 * pseudo_potential(x, constants) - v2


def eom(t: float, x: State6, constants: SystemConstants) -> State6:
    """Equations of motion ``dx/dt = f(t, x)`` in the synodic frame.

    Returns ``[vx, vy, vz, ax, ay, az]`` where the accelerations satisfy
    ``ax - 2 vy = dU/dx``, ``ay + 2 vx = dU/dy``, ``az = dU/dz``.
    The CR3BP is autonomous; ``t`` is accepted for integrator compatibility.
    """
    mu = constants.mu
    rho1, rho2, d, r = _primary_offsets(x, mu)
    c1 = (1.0 - mu) / d**3
    c2 = mu / r**3
    ax = 2.0 * x[4] + x[0] - c1 * rho1[0] - c2 * rho2[0]
    ay = -2.0 * x[3] + x[1] - c1 * rho1[1] - c2 * rho2[1]
    az = -c1 * rho1[2] - c2 * rho2[2]
    return np.array([x[3], x[4], x[5], ax, ay, az])


def _potential_hessian(x: State6, mu: float) -> NDArray[np.float64]:
    """3x3 Hessian of the pseudo-potential U with respect to position."""
    rho1, rho2, d, r = _primary_offsets(x, mu)
    eye = np.eye(3)
    h = np.diag([1.0, 1.0, 0.0]).astype(float)
    h += (1.0 - mu) * (3.0 * np.outer(rho1, rho1) / d**5 - eye / d**3)
    h += mu * (3.0 * np.outer(rho2, rho2) / r**5 - eye / r**3)
    return h


def jacobian(x: State6, constants: SystemConstants) -> NDArray[np.float64]:
    """First partials ``df/dx`` of the equations of motion, 6x6."""
    jac = np.zeros((6, 6))
    jac[0:3, 3:6] = np.eye(3)
    jac[3:6, 0:3] = _potential_hessian(x, constants.mu)
    jac[3, 4] = 2.0
    jac[4, 3] = -2.0
    return jac


def _potential_third_partials(x: State6, mu: float) -> NDArray[np.float64]:
    """Fully symmetric 3x3x3 tensor of third partials of U."""
    rho1, rho2, d, r = _primary_offsets(x, mu)
    eye = np.eye(3)

    def point_mass(rho: NDArray, dist: float) -> NDArray:
        # d^3(1/|rho|) = 3 (delta_ab rho_c + perms)/|rho|^5 - 15 rho_a rho_b rho_c /|rho|^7
        sym = (
            np.einsum("ab,c->abc", eye, rho)
            + np.einsum("ac,b->abc", eye, rho)
            + np.einsum("bc,a->abc", eye, rho)
        )
        return 3.0 * sym / dist**5 - 15.0 * np.einsum("a,b,c->abc", rho, rho, rho) / dist**7

    return (1.0 - mu) * point_mass(rho1, d) + mu * point_mass(rho2, r)


def dynamics_hessian(x: State6, constants: SystemConstants) -> NDArray[np.float64]:
    """Second partials ``d2f/dx2`` of the equations of motion, 6x6x6.

    Symmetric in the trailing two indices; nonzero only in the acceleration
    rows against position-position index pairs (third partials of U).
    """
    hess = np.zeros((6, 6, 6))
    hess[3:6, 0:3, 0:3] = _potential_third_partials(x, constants.mu)
    return hess


def propagate(
    x0: State6,
    t0: float,
    t1: float,
    constants: SystemConstants,
    rtol: float = INTEGRATOR_RTOL,
    atol: float = INTEGRATOR_ATOL,
    t_eval: NDArray | None = None,
):
    """Integrate the nonlinear equations of motion from t0 to t1.

    Returns the final state, or the (times, states) arrays when ``t_eval``
    is given.
    """
    sol = solve_ivp(
        eom,
        (t0, t1),
        np.asarray(x0, dtype=float),
        method=INTEGRATOR_METHOD,
        rtol=rtol,
        atol=atol,
        t_eval=t_eval,
        args=(constants,),
        dense_output=False,
    )
    if not sol.success:
        raise RuntimeError(f"integration failed: {sol.message}")
    if t_eval is not None:
        return sol.t, sol.y.T
    return sol.y[:, -1]


def _eom_with_stm(t: float, y: NDArray, constants: SystemConstants) -> NDArray:
    """Joint state + STM variational system (42 states)."""
    x = y[:6]
    phi = y[6:].reshape(6, 6)
    jac = jacobian(x, constants)
    return np.concatenate([eom(t, x, constants), (jac @ phi).ravel()])


def propagate_with_stm(
    x0: State6,
    t0: float,
    t1: float,
    constants: SystemConstants,
    rtol: float = INTEGRATOR_RTOL,
    atol: float = INTEGRATOR_ATOL,
) -> tuple[State6, NDArray[np.float64]]:
    """Propagate a state together with the STM ``Phi(t1, t0)``."""
    y0 = np.concatenate([np.asarray(x0, dtype=float), np.eye(6).ravel()])
    sol = solve_ivp(
        _eom_with_stm,
        (t0, t1),
        y0,
        method=INTEGRATOR_METHOD,
        rtol=rtol,
        atol=atol,
        args=(constants,),
    )
    if not sol.success:
        raise RuntimeError(f"STM integration failed: {sol.message}")
    yf = sol.y[:, -1]
    return yf[:6], yf[6:].reshape(6, 6)


def dominant_eigenvalue(matrix: NDArray[np.float64]) -> complex:
    """Largest-magnitude eigenvalue; magnitude ties broken by larger real part."""
    eigvals = np.linalg.eigvals(matrix)
    order = sorted(range(len(eigvals)), key=lambda i: (abs(eigvals[i]), eigvals[i].real))
    return complex(eigvals[order[-1]])


def time_constant_from_monodromy(monodromy: NDArray[np.float64], period: float) -> float:
    """Instability time constant tau = 1 / (Re[Ln(lambda_max)] * T), in revolutions.

    Stable or nearly stable orbits (|lambda_max| <= 1) map to infinity.
    """
    lam = dominant_eigenvalue(monodromy)
    log_real = float(np.log(complex(lam)).real)
    if abs(lam) <= 1.0 or log_real <= 0.0:
        return float("inf")
    return 1.0 / (log_real * period)


def time_constant(orbit: ReferenceOrbit) -> float:
    """Time constant of a corrected orbit, in revolutions."""
    return time_constant_from_monodromy(orbit.monodromy, orbit.period)


def correct_periodic(
    guess: State6,
    period_guess: float,
    constants: SystemConstants,
    tol: float = 1e-12,
    max_iter: int = 50,
) -> ReferenceOrbit:
    """Differentially correct a halo-orbit guess to a periodic reference.

    Single shooting to the half-period xz-plane crossing, exploiting halo
    symmetry: ``z0`` is held fixed while ``x0``, ``vy0`` and the half-period
    are adjusted until the crossing residuals ``(y, vx, vz)`` fall below
    ``tol``.  The guess must be an xz-plane crossing with perpendicular
    velocity, i.e. ``y0 = vx0 = vz0 = 0``.

    Raises
    ------
    CorrectionError
        If the residuals do not converge within ``max_iter`` iterations or
        the shooting matrix becomes singular.
    """
    if tol <= 0.0:
        raise ValueError("tolerance must be positive")
    guess = np.asarray(guess, dtype=float)
    if guess.shape != (6,):
        raise ValueError("guess must be a 6-vector")
    if not np.all(np.isfinite(guess)):
        raise ValueError("guess must be finite")
    if max(abs(guess[1]), abs(guess[3]), abs(guess[5])) > 1e-9:
        raise ValueError("guess must satisfy y0 = vx0 = vz0 = 0 (perpendicular crossing)")

    x0 = guess.copy()
    t_half = 0.5 * float(period_guess)
    if t_half <= 0.0:
        raise ValueError("period guess must be positive")

    converged = False
    for _ in range(max_iter):
        xf, phi = propagate_with_stm(x0, 0.0, t_half, constants)
        residual = np.array([xf[1], xf[3], xf[5]])
        if np.max(np.abs(residual)) < tol:
            converged = True
            break
        f = eom(t_half, xf, constants)
        # Rows: y, vx, vz residuals; columns: dx0, dvy0, dT_half.
        shoot = np.array(
            [
                [phi[1, 0], phi[1, 4], f[1]],
                [phi[3, 0], phi[3, 4], f[3]],
                [phi[5, 0], phi[5, 4], f[5]],
            ]
        )
        try:
            delta = np.linalg.solve(shoot, residual)
        except np.linalg.LinAlgError as exc:
            raise CorrectionError("singular shooting matrix") from exc
        x0[0] -= delta[0]
        x0[4] -= delta[1]
        t_half -= delta[2]
        if t_half <= 0.0:
            raise CorrectionError("half-period driven nonpositive during correction")
    if not converged:
        raise CorrectionError(f"no convergence after {max_iter} iterations")

    period = 2.0 * t_half
    x_half, _ = propagate_with_stm(x0, 0.0, t_half, constants)
    x_full, monodromy = propagate_with_stm(x0, 0.0, period, constants)
    tau = time_constant_from_monodromy(monodromy, period)
    return ReferenceOrbit(
        initial_state=x0,
        period=period,
        node_times=np.array([0.0, t_half, period]),
        node_states=np.vstack([x0, x_half, x_full]),
        monodromy=monodromy,
        tau=tau,
        constants=constants,
    )
