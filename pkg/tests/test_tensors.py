"""Tensor-norm tests.

The shifted power method is anchored to three independent oracles: exact
spectral norms in the matrix case, closed-form rank-one tensors, and
brute-force sphere sampling for small dimensions.
"""

from __future__ import annotations

import numpy as np
import pytest

from halosteer.tensors import (
    NormConfig,
    contract_left,
    dominant_z_eigenpair,
    gram_tensor,
    split_position_velocity,
    symmetrize,
    tensor_two_norm,
    tensor_two_norm_eigenpair,
    tensor_vector_power,
)


def _random_trailing_symmetric(n: int, rng) -> np.ndarray:
    B = rng.standard_normal((n, n, n))
    return 0.5 * (B + B.transpose(0, 2, 1))


def _sphere_max(B: np.ndarray, n_points: int, seed: int) -> float:
    rng = np.random.default_rng(seed)
    V = rng.standard_normal((n_points, B.shape[1]))
    V /= np.linalg.norm(V, axis=1, keepdims=True)
    vals = np.einsum("ijk,nj,nk->ni", B, V, V)
    return float(np.linalg.norm(vals, axis=1).max())


def test_tensor_vector_power_matches_einsum():
    rng = np.random.default_rng(0)
    T = rng.standard_normal((4, 4, 4))
    v = rng.standard_normal(4)
    expected = np.einsum("ijk,j,k->i", T, v, v)
    assert np.allclose(tensor_vector_power(T, v, 2), expected)
    M = rng.standard_normal((4, 4))
    assert np.allclose(tensor_vector_power(M, v, 1), M @ v)
    with pytest.raises(ValueError):
        tensor_vector_power(T, v, 3)


def test_contract_left_matches_einsum():
    rng = np.random.default_rng(1)
    A = rng.standard_normal((6, 6))
    T = rng.standard_normal((6, 6, 6))
    assert np.allclose(contract_left(A, T), np.einsum("ij,jab->iab", A, T))


def test_split_position_velocity_blocks():
    T = np.arange(216, dtype=float).reshape(6, 6, 6)
    pos, vel = split_position_velocity(T)
    assert np.array_equal(pos, T[:3, :3, :3])
    assert np.array_equal(vel, T[3:, 3:, 3:])


def test_symmetrize_properties():
    rng = np.random.default_rng(2)
    for _ in range(10):
        T = rng.standard_normal((3, 3, 3))
        S = symmetrize(T)
        assert np.allclose(S, symmetrize(S))
        assert np.allclose(S, S.transpose(1, 0, 2))
        assert np.allclose(S, S.transpose(2, 1, 0))
        assert np.allclose(S, S.transpose(0, 2, 1))


def test_matrix_norm_equals_spectral_norm():
    rng = np.random.default_rng(3)
    for _ in range(20):
        B = rng.standard_normal((5, 5))
        assert tensor_two_norm(B) == pytest.approx(np.linalg.norm(B, 2), rel=1e-8)


def test_dominant_eigenpair_matrix_case():
    rng = np.random.default_rng(4)
    A = rng.standard_normal((6, 6))
    Cg = A @ A.T
    value, pair = np.linalg.eigvalsh(Cg)[-1], dominant_z_eigenpair(Cg)
    assert pair.value == pytest.approx(value, rel=1e-9)
    assert pair.converged
    residual = Cg @ pair.vector - pair.value * pair.vector
    assert np.linalg.norm(residual) < 1e-7


def test_rank_one_tensor_closed_form():
    # B = u (x) u (x) u has norm |u|^3, attained at v = u / |u|
    for scale in (1.0, 2.0, 0.3):
        u = scale * np.array([1.0, 0.0, 0.0])
        B = np.einsum("i,j,k->ijk", u, u, u)
        assert tensor_two_norm(B) == pytest.approx(scale**3, rel=1e-9)


def test_norm_upper_bounds_sampled_values():
    rng = np.random.default_rng(5)
    for trial in range(10):
        B = _random_trailing_symmetric(3, rng)
        norm = tensor_two_norm(B)
        sampled = _sphere_max(B, 200_000, seed=trial)
        assert sampled <= norm * (1 + 1e-9)
        assert norm <= sampled * 1.01


def test_norm_bounds_random_unit_vectors_dimension_six():
    rng = np.random.default_rng(6)
    for _ in range(5):
        B = _random_trailing_symmetric(6, rng)
        norm = tensor_two_norm(B)
        V = rng.standard_normal((1000, 6))
        V /= np.linalg.norm(V, axis=1, keepdims=True)
        vals = np.linalg.norm(np.einsum("ijk,nj,nk->ni", B, V, V), axis=1)
        assert vals.max() <= norm * (1 + 1e-9)


def test_norm_scaling_homogeneity():
    rng = np.random.default_rng(7)
    B = _random_trailing_symmetric(4, rng)
    base = tensor_two_norm(B)
    assert tensor_two_norm(3.0 * B) == pytest.approx(3.0 * base, rel=1e-8)


def test_gram_tensor_is_fully_symmetric_and_psd_diagonal():
    rng = np.random.default_rng(8)
    B = _random_trailing_symmetric(5, rng)
    Cg = gram_tensor(B)
    assert Cg.shape == (5, 5, 5, 5)
    assert np.allclose(Cg, Cg.transpose(1, 0, 2, 3))
    assert np.allclose(Cg, Cg.transpose(0, 1, 3, 2))
    assert np.allclose(Cg, Cg.transpose(2, 3, 0, 1))
    # C . v^4 = |B . v^2|^2 >= 0
    for _ in range(10):
        v = rng.standard_normal(5)
        quartic = np.einsum("ijkl,i,j,k,l->", Cg, v, v, v, v)
        direct = np.einsum("ijk,j,k->i", B, v, v)
        assert quartic == pytest.approx(float(direct @ direct), rel=1e-9)


def test_zero_tensor():
    assert tensor_two_norm(np.zeros((6, 6, 6))) == 0.0
    pair = dominant_z_eigenpair(np.zeros((4, 4, 4, 4)))
    assert pair.value == 0.0
    assert pair.converged


def test_norm_deterministic_for_fixed_seed():
    rng = np.random.default_rng(9)
    B = _random_trailing_symmetric(6, rng)
    cfg = NormConfig(seed=123)
    n1, p1 = tensor_two_norm_eigenpair(B, cfg)
    n2, p2 = tensor_two_norm_eigenpair(B, cfg)
    assert n1 == n2
    assert np.array_equal(p1.vector, p2.vector)


def test_unsupported_order_raises():
    with pytest.raises(ValueError):
        tensor_two_norm(np.zeros((3, 3, 3, 3)))
    with pytest.raises(ValueError):
        tensor_two_norm(np.zeros(3))
