"""Dense symmetric-tensor algebra and induced tensor 2-norms.

Tensors are plain ``numpy`` arrays with one axis per index; an order-(m+1)
tensor ``B`` maps a vector ``v`` to the vector ``B . v^m`` obtained by
contracting the trailing ``m`` axes against ``v``.  The induced 2-norm
``max_{|v|=1} |B . v^m|_2`` is estimated through the Z-eigenvalues of the
order-2m Gram tensor ``C = sum_j B[j,:] (x) B[j,:]`` via shifted symmetric
higher-order power iteration with multiple restarts.  Restarts make the
estimate robust, not certified, so results carry a convergence flag.

Dimensions stay at or below 6 and orders at or below 4 (after squaring), so
everything is dense.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

DEFAULT_RESTARTS = 20
DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITERS = 500
DEFAULT_SEED = 0


@dataclass(frozen=True)
class ZEigenpair:
    """Z-eigenpair of a symmetric even-order tensor with iteration metadata."""

    value: float
    vector: NDArray[np.float64]
    converged: bool
    iterations: int


@dataclass(frozen=True)
class NormConfig:
    """Settings for the power-iteration norm estimator."""

    restarts: int = DEFAULT_RESTARTS
    tol: float = DEFAULT_TOL
    max_iters: int = DEFAULT_MAX_ITERS
    seed: int = DEFAULT_SEED


def tensor_vector_power(T: NDArray, v: NDArray, m: int) -> NDArray[np.float64]:
    """Contract the trailing ``m`` axes of ``T`` against ``v``.

    For an order-(m+1) tensor this returns the vector with components
    ``sum T[j, i1..im] v[i1] ... v[im]``; with ``m = 1`` it is the ordinary
    matrix-vector product.
    """
    T = np.asarray(T, dtype=float)
    v = np.asarray(v, dtype=float)
    if T.ndim != m + 1:
        raise ValueError(f"tensor order {T.ndim} does not match m + 1 = {m + 1}")
    if any(dim != v.shape[0] for dim in T.shape[1:]):
        raise ValueError("vector dimension does not match tensor trailing axes")
    out = T
    for _ in range(m):
        out = out @ v
    return out


def contract_left(A: NDArray, T: NDArray) -> NDArray[np.float64]:
    """Contract a matrix into the leading axis: ``B[j, ...] = A[j, k] T[k, ...]``.

    Trailing symmetry of ``T`` is preserved since only the lead axis changes.
    """
    A = np.asarray(A, dtype=float)
    T = np.asarray(T, dtype=float)
    if A.ndim != 2 or A.shape[1] != T.shape[0]:
        raise ValueError(f"cannot contract {A.shape} into leading axis of {T.shape}")
    return np.tensordot(A, T, axes=(1, 0))


def split_position_velocity(B: NDArray) -> tuple[NDArray, NDArray]:
    """Position and velocity sub-tensors of a dimension-6 tensor.

    The position part takes indices 0..2 in every mode and the velocity part
    indices 3..5 in every mode; cross blocks are discarded by construction.
    """
    B = np.asarray(B, dtype=float)
    if any(dim != 6 for dim in B.shape):
        raise ValueError(f"expected all axes of dimension 6, got shape {B.shape}")
    pos = B[(slice(0, 3),) * B.ndim]
    vel = B[(slice(3, 6),) * B.ndim]
    return pos, vel


def symmetrize(T: NDArray) -> NDArray[np.float64]:
    """Average over all index permutations, projecting onto symmetric tensors."""
    T = np.asarray(T, dtype=float)
    perms = list(itertools.permutations(range(T.ndim)))
    return sum(np.transpose(T, p) for p in perms) / len(perms)


def gram_tensor(B: NDArray) -> NDArray[np.float64]:
    """Order-2m tensor ``C`` with ``C . v^{2m} = |B . v^m|^2``, fully symmetrized."""
    B = np.asarray(B, dtype=float)
    return symmetrize(np.tensordot(B, B, axes=(0, 0)))


def _power_iterate(
    C: NDArray, x0: NDArray, shift: float, tol: float, max_iters: int
) -> tuple[float, NDArray, bool, int]:
    """Shifted symmetric higher-order power iteration from one start."""
    p = C.ndim
    x = x0 / np.linalg.norm(x0)
    lam = float(tensor_vector_power(C, x, p - 1) @ x)
    for it in range(1, max_iters + 1):
        y = tensor_vector_power(C, x, p - 1) + shift * x
        ny = np.linalg.norm(y)
        if ny == 0.0:
            return lam, x, True, it
        x = y / ny
        lam_new = float(tensor_vector_power(C, x, p - 1) @ x)
        if abs(lam_new - lam) < tol:
            return lam_new, x, True, it
        lam = lam_new
    return lam, x, False, max_iters


def _canonical_sign(x: NDArray) -> NDArray:
    """Flip sign so the first nonzero component is positive (even-order symmetry)."""
    for val in x:
        if val != 0.0:
            return x if val > 0.0 else -x
    return x


def dominant_z_eigenpair(C: NDArray, config: NormConfig = NormConfig()) -> ZEigenpair:
    """Largest Z-eigenpair of a symmetric even-order tensor via restarts.

    Starts from ``config.restarts`` seeded random unit vectors plus the
    leading left singular vectors of the mode-1 unfolding.  The best value
    over all starts is returned; ties prefer converged runs, then the
    lexicographically smallest sign-canonical vector, so the result is
    deterministic for a fixed seed.
    """
    C = np.asarray(C, dtype=float)
    n = C.shape[0]
    if any(dim != n for dim in C.shape):
        raise ValueError("tensor axes must share one dimension")
    scale = float(np.max(np.abs(C)))
    if scale == 0.0:
        unit = np.zeros(n)
        unit[0] = 1.0
        return ZEigenpair(value=0.0, vector=unit, converged=True, iterations=0)
    shift = 1.0 + scale

    rng = np.random.default_rng(config.seed)
    starts = [rng.standard_normal(n) for _ in range(config.restarts)]
    unfold = C.reshape(n, -1)
    u_mat = np.linalg.svd(unfold, full_matrices=False)[0]
    starts.extend(u_mat[:, i] for i in range(min(3, u_mat.shape[1])))

    best: tuple | None = None
    for x0 in starts:
        if np.linalg.norm(x0) == 0.0:
            continue
        lam, x, ok, its = _power_iterate(C, x0, shift, config.tol, config.max_iters)
        x = _canonical_sign(x)
        key = (lam, ok, tuple(-x))
        if best is None or key > best[0]:
            best = (key, ZEigenpair(value=lam, vector=x, converged=ok, iterations=its))
    assert best is not None
    return best[1]


def tensor_two_norm(
    B: NDArray,
    restarts: int = DEFAULT_RESTARTS,
    tol: float = DEFAULT_TOL,
    max_iters: int = DEFAULT_MAX_ITERS,
    seed: int = DEFAULT_SEED,
) -> float:
    """Estimate ``max_{|v|=1} |B . v^m|_2`` for a trailing-symmetric tensor.

    Square root of the best Z-eigenvalue of the Gram tensor of ``B``; see
    ``tensor_two_norm_eigenpair`` for the convergence flag.
    """
    return tensor_two_norm_eigenpair(
        B, NormConfig(restarts=restarts, tol=tol, max_iters=max_iters, seed=seed)
    )[0]


def tensor_two_norm_eigenpair(
    B: NDArray, config: NormConfig = NormConfig()
) -> tuple[float, ZEigenpair]:
    """Tensor 2-norm estimate together with the Gram-tensor eigenpair behind it."""
    B = np.asarray(B, dtype=float)
    m = B.ndim - 1
    if m not in (1, 2):
        raise ValueError(f"unsupported tensor order {B.ndim}; expected 2 or 3")
    pair = dominant_z_eigenpair(gram_tensor(B), config)
    return float(np.sqrt(max(pair.value, 0.0))), pair
