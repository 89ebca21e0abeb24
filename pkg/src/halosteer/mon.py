"""Measure-of-nonlinearity machinery.

Accumulated linearization error at node ``j`` is a sum of segment remainders
pushed downstream through STM products.  Taking norms turns that sum into

    eps_tilde[j] = sum_k sum_m (1/m!) g(A[j-1]...A[k+1], m) |dx_k|^m

where ``g(P, m)`` is the tensor 2-norm of the segment STT contracted with the
cumulative STM product ``P``.  The coefficients form strictly lower
triangular matrices ``G[m]``, assembled here in three flavors: position-only
and velocity-only splits (cross blocks discarded, which under-counts
coupling and is flagged in reports) and the full-state version used for the
rigorous joint-deviation inequality audit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from halosteer.stt import DiscretizedPlan, accumulate_errors
from halosteer.tensors import (
    NormConfig,
    contract_left,
    split_position_velocity,
    tensor_two_norm_eigenpair,
)

# Safety inflation applied to tensor-norm entries whose power iteration did
# not converge, preserving the upper-bound direction.
NONCONVERGED_INFLATION = 1.05


@dataclass(frozen=True)
class GCoefficients:
    """Lower-triangular nonlinearity coefficient matrices per tensor order.

    ``G_r[m][j, k]`` (strictly lower triangular, ``j > k``) is the tensor
    2-norm of the position split of ``A[j-1]...A[k+1] . Phi2_k``; ``G_v``
    holds the velocity splits and ``G_x`` the unsplit dimension-6 norms.
    ``non_converged`` lists (flavor, m, j, k) entries that were inflated by
    the safety margin because the eigenpair search did not converge.
    """

    m_star: int
    G_r: dict[int, NDArray[np.float64]]
    G_v: dict[int, NDArray[np.float64]]
    G_x: dict[int, NDArray[np.float64]]
    non_converged: tuple[tuple[str, int, int, int], ...]

    @property
    def N(self) -> int:
        return self.G_r[2].shape[0]


@dataclass(frozen=True)
class MonBound:
    """Evaluated nonlinearity bound vectors and their blended objective."""

    eps_r: NDArray[np.float64]
    eps_v: NDArray[np.float64]
    lam: float
    objective: float


@dataclass(frozen=True)
class TriangleReport:
    """Per-node audit of the accumulated-error inequality."""

    error_norms: NDArray[np.float64]
    bounds: NDArray[np.float64]
    margins: NDArray[np.float64]
    passed: bool


def build_g_coefficients(
    plan: DiscretizedPlan,
    m_star: int = 2,
    norm_cfg: NormConfig = NormConfig(),
) -> GCoefficients:
    """Assemble g-coefficient matrices for every (node, segment) pair.

    For each segment ``k`` the cumulative STM product grows by forward
    recursion while walking downstream nodes ``j``; the product contracts
    into the segment STT, which is split and normed.  Entry ``(k+1, k)``
    uses the identity product.
    """
    if m_star != 2:
        raise ValueError(f"unsupported m_star {m_star}; only 2 is implemented")
    if not plan.segments:
        raise ValueError("plan has no segments")
    n_nodes = plan.N
    g_r = np.zeros((n_nodes, n_nodes))
    g_v = np.zeros((n_nodes, n_nodes))
    g_x = np.zeros((n_nodes, n_nodes))
    flagged: list[tuple[str, int, int, int]] = []

    def normed(tensor: NDArray, flavor: str, j: int, k: int) -> float:
        value, pair = tensor_two_norm_eigenpair(tensor, norm_cfg)
        if not pair.converged:
            flagged.append((flavor, 2, j, k))
            value *= NONCONVERGED_INFLATION
        return value

    for k, seg in enumerate(plan.segments):
        product = np.eye(6)
        for j in range(k + 1, n_nodes):
            contracted = contract_left(product, seg.Phi2)
            pos, vel = split_position_velocity(contracted)
            g_r[j, k] = normed(pos, "r", j, k)
            g_v[j, k] = normed(vel, "v", j, k)
            g_x[j, k] = normed(contracted, "x", j, k)
            if j < n_nodes - 1:
                product = plan.segments[j].A @ product
    return GCoefficients(
        m_star=m_star,
        G_r={2: g_r},
        G_v={2: g_v},
        G_x={2: g_x},
        non_converged=tuple(flagged),
    )


def evaluate_bound(
    g: GCoefficients,
    r_tilde: NDArray,
    v_tilde: NDArray,
    lam: float,
) -> MonBound:
    """Evaluate the nonlinearity bound for given per-node deviation quantiles.

    ``eps_r = sum_m (1/m!) G_r[m] . r_tilde^m`` and likewise for ``eps_v``;
    the objective is the largest lambda-blend over nodes.
    """
    r_tilde = np.asarray(r_tilde, dtype=float)
    v_tilde = np.asarray(v_tilde, dtype=float)
    if r_tilde.shape != (g.N,) or v_tilde.shape != (g.N,):
        raise ValueError(f"expected quantile vectors of length {g.N}")
    if np.any(r_tilde < 0.0) or np.any(v_tilde < 0.0):
        raise ValueError("quantile inputs must be nonnegative")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    eps_r = np.zeros(g.N)
    eps_v = np.zeros(g.N)
    for m in range(2, g.m_star + 1):
        eps_r += g.G_r[m] @ r_tilde**m / math.factorial(m)
        eps_v += g.G_v[m] @ v_tilde**m / math.factorial(m)
    objective = float(np.max((1.0 - lam) * eps_r + lam * eps_v))
    return MonBound(eps_r=eps_r, eps_v=eps_v, lam=lam, objective=objective)


def evaluate_joint_bound(g: GCoefficients, x_norms: NDArray) -> NDArray[np.float64]:
    """Full-state bound ``sum_m (1/m!) G_x[m] . x_norms^m`` per node.

    ``x_norms`` holds post-maneuver deviation norms per node (terminal entry
    unused).  Unlike the position/velocity split, this chain keeps cross
    coupling and rigorously dominates the accumulated error norm.
    """
    x_norms = np.asarray(x_norms, dtype=float)
    if x_norms.shape != (g.N,):
        raise ValueError(f"expected {g.N} deviation norms")
    if np.any(x_norms < 0.0):
        raise ValueError("deviation norms must be nonnegative")
    out = np.zeros(g.N)
    for m in range(2, g.m_star + 1):
        out += g.G_x[m] @ x_norms**m / math.factorial(m)
    return out


def triangle_bound_check(
    plan: DiscretizedPlan,
    deviations: NDArray,
    g: GCoefficients | None = None,
    norm_cfg: NormConfig = NormConfig(),
) -> TriangleReport:
    """Audit ``|eps_k|_2 <= eps_tilde_k`` for a deterministic deviation set.

    The left side comes from the exact remainder recursion, the right side
    from the full-state g-coefficient chain with the deviations' norms.
    Coefficients are reused when passed in (they are deviation independent).
    """
    deviations = np.atleast_2d(np.asarray(deviations, dtype=float))
    if g is None:
        g = build_g_coefficients(plan, m_star=2, norm_cfg=norm_cfg)
    eps = accumulate_errors(plan, deviations, m_star=g.m_star)
    error_norms = np.linalg.norm(eps, axis=1)
    x_norms = np.zeros(plan.N)
    x_norms[: plan.N - 1] = np.linalg.norm(deviations, axis=1)
    bounds = evaluate_joint_bound(g, x_norms)
    margins = bounds - error_norms
    return TriangleReport(
        error_norms=error_norms,
        bounds=bounds,
        margins=margins,
        passed=bool(np.all(margins >= 0.0)),
    )
