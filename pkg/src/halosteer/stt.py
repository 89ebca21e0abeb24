"""First- and second-order state transition tensors over reference segments.

Each segment of the discretized reference carries the STM ``A = Phi(t1, t0)``
and the second-order tensor ``Phi2`` obtained from the variational equations

    dPhi/dt          = J Phi,                         Phi(t0, t0)  = I
    dPhi2[i,a,b]/dt  = J[i,j] Phi2[j,a,b]
                       + H[i,j,k] Phi[j,a] Phi[k,b],  Phi2(t0, t0) = 0

with J the dynamics Jacobian and H the dynamics Hessian along the arc.  The
deviation of a perturbed state after one segment is then approximated by the
series ``A dx + (1/2) Phi2 : dx dx``; the quadratic part is the remainder the
error-accumulation recursion feeds on.

Deviations are always relative to the segment's reference states, so the
affine terms of the block model vanish identically.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray
from scipy.integrate import solve_ivp

from halosteer.cr3bp import (
    INTEGRATOR_ATOL,
    INTEGRATOR_METHOD,
    INTEGRATOR_RTOL,
    ReferenceOrbit,
    State6,
    SystemConstants,
    dynamics_hessian,
    eom,
    jacobian,
)

SUPPORTED_ORDERS = (1, 2)


@dataclass(frozen=True)
class SegmentLinearization:
    """STM and second-order STT of one reference segment.

    ``A`` maps initial deviations to final deviations to first order;
    ``Phi2`` is symmetric in its trailing two indices and supplies the
    quadratic series term.
    """

    k: int
    t_start: float
    t_end: float
    A: NDArray[np.float64]
    Phi2: NDArray[np.float64]
    x_ref_start: State6
    x_ref_end: State6


@dataclass(frozen=True)
class DiscretizedPlan:
    """Reference orbit discretized into contiguous linearized segments."""

    orbit: ReferenceOrbit
    segments: tuple[SegmentLinearization, ...]
    N: int

    @property
    def node_times(self) -> NDArray[np.float64]:
        times = [seg.t_start for seg in self.segments]
        times.append(self.segments[-1].t_end)
        return np.array(times)

    @property
    def node_states(self) -> NDArray[np.float64]:
        states = [seg.x_ref_start for seg in self.segments]
        states.append(self.segments[-1].x_ref_end)
        return np.vstack(states)

    def stms(self) -> list[NDArray[np.float64]]:
        return [seg.A for seg in self.segments]


def _augmented_rhs(t: float, y: NDArray, constants: SystemConstants) -> NDArray:
    """RHS of the joint state + STM + STT system (6 + 36 + 216 states)."""
    x = y[:6]
    phi = y[6:42].reshape(6, 6)
    phi2 = y[42:].reshape(6, 6, 6)
    jac = jacobian(x, constants)
    hess = dynamics_hessian(x, constants)
    dphi = jac @ phi
    dphi2 = np.einsum("ij,jab->iab", jac, phi2) + np.einsum(
        "ijk,ja,kb->iab", hess, phi, phi
    )
    return np.concatenate([eom(t, x, constants), dphi.ravel(), dphi2.ravel()])


def propagate_linearization(
    x0: State6,
    t0: float,
    t1: float,
    constants: SystemConstants,
    k: int = 0,
    rtol: float = INTEGRATOR_RTOL,
    atol: float = INTEGRATOR_ATOL,
) -> SegmentLinearization:
    """Propagate state, STM and second-order STT across one segment.

    Parameters
    ----------
    x0 : ndarray
        Reference state at ``t0``.
    t0, t1 : float
        Segment bounds, ``t1 >= t0``.
    constants : SystemConstants
        System the arc is integrated in.
    k : int
        Node index recorded on the result.

    Returns
    -------
    SegmentLinearization
        With ``Phi2`` trailing-index symmetrized (integration noise breaks
        the symmetry at round-off level).
    """
    x0 = np.asarray(x0, dtype=float)
    if t1 < t0:
        raise ValueError("segment must run forward in time")
    if t1 == t0:
        return SegmentLinearization(
            k=k,
            t_start=t0,
            t_end=t1,
            A=np.eye(6),
            Phi2=np.zeros((6, 6, 6)),
            x_ref_start=x0,
            x_ref_end=x0.copy(),
        )
    y0 = np.concatenate([x0, np.eye(6).ravel(), np.zeros(216)])
    sol = solve_ivp(
        _augmented_rhs,
        (t0, t1),
        y0,
        method=INTEGRATOR_METHOD,
        rtol=rtol,
        atol=atol,
        args=(constants,),
    )
    if not sol.success:
        raise RuntimeError(f"variational integration failed: {sol.message}")
    yf = sol.y[:, -1]
    phi2 = yf[42:].reshape(6, 6, 6)
    phi2 = 0.5 * (phi2 + phi2.transpose(0, 2, 1))
    return SegmentLinearization(
        k=k,
        t_start=t0,
        t_end=t1,
        A=yf[6:42].reshape(6, 6),
        Phi2=phi2,
        x_ref_start=x0,
        x_ref_end=yf[:6],
    )


def discretize_reference(
    orbit: ReferenceOrbit,
    segments_per_rev: int,
    revs: int,
    constants: SystemConstants,
) -> DiscretizedPlan:
    """Discretize ``revs`` revolutions into uniform-in-time linearized segments.

    Node count is ``segments_per_rev * revs + 1``; each segment carries its
    own STM/STT pair computed from the reference state chained across
    segment boundaries.
    """
    if segments_per_rev < 1 or revs < 1:
        raise ValueError("segments_per_rev and revs must be at least 1")
    n_seg = segments_per_rev * revs
    times = np.linspace(0.0, revs * orbit.period, n_seg + 1)
    segments = []
    x_start = np.asarray(orbit.initial_state, dtype=float)
    for k in range(n_seg):
        seg = propagate_linearization(x_start, times[k], times[k + 1], constants, k=k)
        segments.append(seg)
        x_start = seg.x_ref_end
    return DiscretizedPlan(orbit=orbit, segments=tuple(segments), N=n_seg + 1)


def series_predict(
    seg: SegmentLinearization, dx: NDArray, m_star: int
) -> NDArray[np.float64]:
    """Series prediction of the final deviation from an initial deviation.

    Returns ``A dx`` for ``m_star = 1`` and ``A dx + (1/2) Phi2 : dx dx``
    for ``m_star = 2``.
    """
    if m_star not in SUPPORTED_ORDERS:
        raise ValueError(f"unsupported series order {m_star}; expected one of {SUPPORTED_ORDERS}")
    dx = np.asarray(dx, dtype=float)
    out = seg.A @ dx
    if m_star >= 2:
        out = out + 0.5 * np.einsum("iab,a,b->i", seg.Phi2, dx, dx)
    return out


def remainder(seg: SegmentLinearization, dx: NDArray, m_star: int) -> NDArray[np.float64]:
    """Quadratic series remainder ``(1/2) Phi2 : dx dx`` beyond the STM term."""
    if m_star != 2:
        raise ValueError(f"unsupported remainder order {m_star}; only 2 is implemented")
    dx = np.asarray(dx, dtype=float)
    return 0.5 * np.einsum("iab,a,b->i", seg.Phi2, dx, dx)


def accumulate_errors(
    plan: DiscretizedPlan,
    post_maneuver_deviations: list[NDArray] | NDArray,
    m_star: int = 2,
) -> NDArray[np.float64]:
    """Accumulated linearization error at every node under given deviations.

    Runs the recursion ``eps_{k+1} = A_k eps_k + R(dx_k)`` with ``eps_0 = 0``,
    where ``dx_k`` is the post-maneuver deviation entering segment ``k``.
    Returns an ``N x 6`` array of errors, one row per node.
    """
    deviations = np.atleast_2d(np.asarray(post_maneuver_deviations, dtype=float))
    n_seg = len(plan.segments)
    if deviations.shape != (n_seg, 6):
        raise ValueError(
            f"expected {n_seg} post-maneuver deviations of dimension 6, got {deviations.shape}"
        )
    eps = np.zeros((plan.N, 6))
    for k, seg in enumerate(plan.segments):
        eps[k + 1] = seg.A @ eps[k] + remainder(seg, deviations[k], m_star)
    return eps
