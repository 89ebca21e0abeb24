"""Dynamics-layer tests.

Derivative code is checked against central finite differences of the level
below it (Jacobian against the equations of motion, Hessian against the
Jacobian, STM against the flow), equilibria against an independent root
find, and the corrected orbit against its own defining properties.
"""

from __future__ import annotations

import numpy as np
import pytest
from scipy.optimize import brentq

from halosteer.cr3bp import (
    EARTH_MOON_MU,
    CorrectionError,
    SingularPositionError,
    SystemConstants,
    correct_periodic,
    dominant_eigenvalue,
    dynamics_hessian,
    eom,
    jacobi_constant,
    jacobian,
    propagate,
    propagate_with_stm,
    pseudo_potential,
    time_constant,
    time_constant_from_monodromy,
)

C = SystemConstants()

# A point on the nominal halo, away from symmetry planes after propagation.
HALO_GUESS = np.array([1.1300, 0.0, -0.1767, 0.0, -0.2255, 0.0])


def _random_states(n: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    states = np.empty((n, 6))
    for i in range(n):
        while True:
            pos = rng.uniform(-1.5, 1.5, 3)
            d1 = np.linalg.norm(pos - [-C.mu, 0, 0])
            d2 = np.linalg.norm(pos - [1 - C.mu, 0, 0])
            if d1 > 0.05 and d2 > 0.05:
                break
        states[i] = np.concatenate([pos, rng.uniform(-0.5, 0.5, 3)])
    return states


def test_constants_defaults():
    assert C.mu == EARTH_MOON_MU
    assert C.length_unit_km == 384400.0
    # one nondimensional velocity unit in m/s
    assert C.velocity_unit_mps == pytest.approx(384400.0e3 / 375190.26)


def test_acceleration_vanishes_at_collinear_equilibrium():
    # Independent root find of the on-axis pseudo-potential gradient near L2.
    def gx(x):
        return eom(0.0, np.array([x, 0, 0, 0, 0, 0]), C)[3]

    x_l2 = brentq(gx, 1.05, 1.3, xtol=1e-14)
    state = np.array([x_l2, 0, 0, 0, 0, 0])
    assert np.linalg.norm(eom(0.0, state, C)[3:]) < 1e-12
    # the equilibrium sits just beyond the smaller primary
    assert 1.0 - C.mu < x_l2 < 1.3


def test_pseudo_potential_mirror_symmetries():
    rng = np.random.default_rng(3)
    for _ in range(25):
        s = _random_states(1, rng.integers(1 << 31))[0]
        flip_y = s * np.array([1, -1, 1, 1, 1, 1])
        flip_z = s * np.array([1, 1, -1, 1, 1, 1])
        assert pseudo_potential(flip_y, C) == pytest.approx(
            pseudo_potential(s, C), rel=1e-14
        )
        assert pseudo_potential(flip_z, C) == pytest.approx(
            pseudo_potential(s, C), rel=1e-14
        )


def test_jacobian_matches_finite_differences():
    h = 1e-6
    for s in _random_states(10, 7):
        jac = jacobian(s, C)
        fd = np.empty((6, 6))
        for j in range(6):
            dp = s.copy()
            dm = s.copy()
            dp[j] += h
            dm[j] -= h
            fd[:, j] = (eom(0.0, dp, C) - eom(0.0, dm, C)) / (2 * h)
        assert np.allclose(jac, fd, rtol=2e-6, atol=2e-6)


def test_jacobian_structure():
    s = _random_states(1, 5)[0]
    jac = jacobian(s, C)
    assert np.array_equal(jac[:3, :3], np.zeros((3, 3)))
    assert np.array_equal(jac[:3, 3:], np.eye(3))
    # Coriolis block
    assert jac[3, 4] == pytest.approx(2.0)
    assert jac[4, 3] == pytest.approx(-2.0)
    assert jac[5, 3:] == pytest.approx(np.zeros(3))


def test_dynamics_hessian_matches_finite_differences():
    h = 1e-5
    for s in _random_states(6, 11):
        hess = dynamics_hessian(s, C)
        for b in range(6):
            dp = s.copy()
            dm = s.copy()
            dp[b] += h
            dm[b] -= h
            fd = (jacobian(dp, C) - jacobian(dm, C)) / (2 * h)
            assert np.allclose(hess[:, :, b], fd, rtol=5e-5, atol=5e-5)


def test_dynamics_hessian_sparsity_and_symmetry():
    s = _random_states(1, 13)[0]
    hess = dynamics_hessian(s, C)
    assert not hess[:3].any()
    assert not hess[3:, 3:, :].any()
    assert not hess[3:, :3, 3:].any()
    assert np.allclose(hess[3:6, :3, :3], hess[3:6, :3, :3].transpose(0, 2, 1))


def test_singular_position_raises():
    at_moon = np.array([1 - C.mu, 0, 0, 0, 0, 0])
    with pytest.raises(SingularPositionError):
        eom(0.0, at_moon, C)
    with pytest.raises(SingularPositionError):
        jacobian(at_moon, C)


def test_jacobi_constant_conserved_along_flow():
    orbit = correct_periodic(HALO_GUESS, 3.26895, C)
    t, states = propagate(
        orbit.initial_state,
        0.0,
        orbit.period,
        C,
        t_eval=np.linspace(0.0, orbit.period, 40),
    )
    c0 = jacobi_constant(states[0], C)
    drift = max(abs(jacobi_constant(s, C) - c0) for s in states)
    assert drift < 1e-10


def test_flow_mirror_symmetry():
    # x(t) -> (x, -y, z, -vx, vy, -vz)(-t) maps trajectories to trajectories
    s0 = np.array([1.05, 0.0, -0.18, 0.0, -0.22, 0.0])
    mirror = np.array([1, -1, 1, -1, 1, -1], dtype=float)
    fwd = propagate(s0, 0.0, 0.7, C)
    back = propagate(mirror * s0, 0.0, -0.7, C)
    assert np.allclose(fwd, mirror * back, atol=1e-10)


def test_stm_matches_finite_differences():
    s0 = HALO_GUESS.copy()
    dt = 0.3
    _, phi = propagate_with_stm(s0, 0.0, dt, C)
    h = 1e-6
    fd = np.empty((6, 6))
    for j in range(6):
        dp = s0.copy()
        dm = s0.copy()
        dp[j] += h
        dm[j] -= h
        fd[:, j] = (propagate(dp, 0.0, dt, C) - propagate(dm, 0.0, dt, C)) / (2 * h)
    assert np.allclose(phi, fd, rtol=5e-5, atol=5e-6)


def test_stm_composition():
    s0 = HALO_GUESS.copy()
    x1, phi_10 = propagate_with_stm(s0, 0.0, 0.4, C)
    _, phi_21 = propagate_with_stm(x1, 0.4, 0.9, C)
    _, phi_20 = propagate_with_stm(s0, 0.0, 0.9, C)
    assert np.allclose(phi_21 @ phi_10, phi_20, rtol=1e-8, atol=1e-10)


def test_correct_periodic_produces_closed_orbit():
    orbit = correct_periodic(HALO_GUESS, 3.26895, C)
    final = propagate(orbit.initial_state, 0.0, orbit.period, C)
    assert np.linalg.norm(final - orbit.initial_state) < 1e-9
    # symmetric-orbit structure is preserved by the corrector
    assert orbit.initial_state[1] == 0.0
    assert orbit.initial_state[3] == 0.0
    assert orbit.initial_state[5] == 0.0
    assert orbit.node_times[0] == 0.0
    assert orbit.node_times[-1] == pytest.approx(orbit.period)
    assert np.allclose(orbit.node_states[0], orbit.initial_state)


def test_corrected_period_and_stability():
    orbit = correct_periodic(HALO_GUESS, 3.26895, C)
    # 13.07-day period in nondimensional time
    assert orbit.period == pytest.approx(3.00984854, abs=1e-6)
    # monodromy of a Hamiltonian flow is symplectic
    assert abs(np.linalg.det(orbit.monodromy) - 1.0) < 1e-6
    lam = dominant_eigenvalue(orbit.monodromy)
    assert abs(lam) == pytest.approx(74.858, rel=1e-3)
    assert orbit.tau == pytest.approx(time_constant(orbit))


def test_correct_periodic_rejects_asymmetric_guess():
    bad = HALO_GUESS.copy()
    bad[1] = 0.01
    with pytest.raises(ValueError):
        correct_periodic(bad, 3.26895, C)


def test_correct_periodic_divergence_raises():
    with pytest.raises(CorrectionError):
        correct_periodic(HALO_GUESS, 3.26895, C, max_iter=1)


def test_dominant_eigenvalue_tiebreak():
    assert dominant_eigenvalue(np.diag([2.0, -2.0, 0.5])) == pytest.approx(2.0)
    assert dominant_eigenvalue(np.diag([3.0, 1.0])) == pytest.approx(3.0)


def test_time_constant_synthetic_monodromy():
    period = 2.5
    lam_max = 40.0
    mono = np.diag([lam_max, 1 / lam_max, 1.0, 1.0, 0.3, 0.2])
    tau = time_constant_from_monodromy(mono, period)
    assert tau == pytest.approx(1.0 / (np.log(lam_max) * period))


def test_time_constant_stable_orbit_is_infinite():
    mono = np.diag([0.9, 0.5, 1.0, 1.0, 0.2, 0.1])
    assert time_constant_from_monodromy(mono, 3.0) == np.inf
