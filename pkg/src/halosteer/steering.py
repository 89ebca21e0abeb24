"""Impulsive linear covariance steering over a discretized reference.

The maneuver policy is ``u_k = ubar_k + K_k z_k`` where ``z`` is the
control-independent innovation recursion ``z_0 = xhat_0 - xbar_0``,
``z_{k+1} = A_k z_k + L_{k+1} ytilde_{k+1}``.  Stacked over nodes,
``Z = A_blk xtilde_0 + L_blk Ytilde`` has covariance ``S`` fixed by the
filter alone, so with block-diagonal feedback ``K`` the estimate-dispersion
factors ``(I + B K) S_half`` (pre-maneuver) and ``(I + B+ K) S_half``
(post-maneuver) are affine in the decision variables and the whole steering
problem is conic.

Two objectives are built over one feasible set (mean dynamics, terminal mean
equality, per-maneuver chance constraints): minimum nonlinearity (epigraph
of the g-coefficient bound on blended position/velocity quantiles) and
minimum covariance (largest positional covariance trace over nodes).

Norms of covariance factors appear in two modes: "surrogate" uses Frobenius
norms (second-order cones only, always an upper bound on the spectral norm)
and "exact" uses spectral norms (semidefinite cones).  Reported quantile
curves are always recomputed with exact spectral norms after the solve.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import cvxpy as cp
import numpy as np
from numpy.typing import NDArray
from scipy.stats import chi2

from halosteer.mon import GCoefficients, MonBound, evaluate_bound
from halosteer.stt import DiscretizedPlan

logger = logging.getLogger(__name__)

NORM_MODES = ("surrogate", "exact")

# Impulses act on velocity only.
B_SEL = np.vstack([np.zeros((3, 3)), np.eye(3)])

# Diagonal jitter escalation for Cholesky factorizations of node-scale
# covariance blocks.
JITTER_SCHEDULE = (0.0, 1e-14, 1e-13, 1e-12, 1e-11, 1e-10)


class SolverError(RuntimeError):
    """Raised when the conic solver ends without an acceptable solution."""

    def __init__(self, status: str, message: str = ""):
        super().__init__(message or f"solver finished with status {status!r}")
        self.status = status


@dataclass(frozen=True)
class FilterSchedule:
    """Precomputed Kalman gains and estimation-error covariances per node.

    Independent of any control input: the Riccati recursion only involves
    the segment STMs and the measurement model.
    """

    L: NDArray[np.float64]
    P_tilde_minus: NDArray[np.float64]
    P_tilde: NDArray[np.float64]
    P_Y: NDArray[np.float64]

    @property
    def N(self) -> int:
        return self.L.shape[0]


@dataclass(frozen=True)
class BlockOperators:
    """Stacked-over-nodes operators of the linear covariance model.

    ``A_blk`` maps the initial estimate deviation to all nodes; ``B_blk``
    maps impulses to later nodes (strictly block lower triangular);
    ``B_plus_blk`` additionally applies each impulse at its own node;
    ``L_blk`` maps innovations to nodes.  ``S_half`` is a lower-triangular
    factor with ``S_half S_half' = S = A_blk P_hat0_minus A_blk' + L_blk P_Y
    L_blk'``, built from the generators of ``S`` so that strongly contracted
    row combinations stay accurate.
    ``P_tilde_half`` stacks per-node factors of the estimation-error
    covariance for assembling true-state factors.
    """

    A_blk: NDArray[np.float64]
    B_blk: NDArray[np.float64]
    B_plus_blk: NDArray[np.float64]
    L_blk: NDArray[np.float64]
    S: NDArray[np.float64]
    S_half: NDArray[np.float64]
    P_tilde_half: NDArray[np.float64]
    N: int


@dataclass(frozen=True)
class SteeringProblem:
    """Assembled conic program plus handles needed to extract a solution.

    ``gamma`` is the epigraph objective variable; ``t_r``/``t_v`` are the
    per-node quantile epigraph variables of the nonlinearity objective and
    are ``None`` for the covariance objective.
    """

    kind: str
    problem: cp.Problem
    u_bar: cp.Variable
    gains: tuple[cp.Variable, ...]
    gamma: cp.Variable
    t_r: cp.Variable | None
    t_v: cp.Variable | None
    blocks: BlockOperators
    g: GCoefficients
    lam: float
    eps_x: float
    u_max_nd: float
    norm_mode: str
    x_bar0: NDArray[np.float64]


@dataclass(frozen=True)
class SteeringSolution:
    """Optimal policy with predicted statistics and recomputed bound curves.

    ``r_tilde``/``v_tilde`` and ``mon`` use exact spectral norms (the
    quantile definition); the ``*_surrogate`` twins use the Frobenius norms
    the default program actually optimizes, which is the right convention
    for cross-comparing two solved policies.
    """

    kind: str
    status: str
    objective_value: float
    u_bar: NDArray[np.float64]
    gains: NDArray[np.float64]
    X_bar: NDArray[np.float64]
    X_bar_plus: NDArray[np.float64]
    P_hat_half: NDArray[np.float64]
    P_hat_plus_half: NDArray[np.float64]
    r_tilde: NDArray[np.float64]
    v_tilde: NDArray[np.float64]
    r_tilde_surrogate: NDArray[np.float64]
    v_tilde_surrogate: NDArray[np.float64]
    mon: MonBound
    mon_surrogate: MonBound
    u_quantiles: NDArray[np.float64]
    pos_traces: NDArray[np.float64]
    max_pos_trace: float
    terminal_residual: float
    norm_mode: str
    eps_x: float
    u_max_nd: float
    solve_stats: dict = field(default_factory=dict)


@dataclass(frozen=True)
class SolverConfig:
    """Conic solver selection and termination tolerances."""

    solver: str = "CLARABEL"
    verbose: bool = False
    feas_tol: float = 1e-9
    gap_rel_tol: float = 1e-8


def kalman_schedule(
    plan: DiscretizedPlan,
    C: NDArray,
    D: NDArray,
    P_tilde0: NDArray,
    G: NDArray | None = None,
) -> FilterSchedule:
    """Run the Riccati recursion with a measurement update at every node.

    ``P_tilde0`` is the pre-update estimation-error covariance at node 0.
    The time update is ``P-_{k} = A_{k-1} P_{k-1} A_{k-1}' + G G'`` and the
    measurement update is in Joseph form with gain
    ``L_k = P-_k C' (C P-_k C' + D D')^{-1}``.
    """
    C = np.asarray(C, dtype=float)
    D = np.asarray(D, dtype=float)
    P_minus = 0.5 * (np.asarray(P_tilde0, dtype=float) + np.asarray(P_tilde0, dtype=float).T)
    DDt = D @ D.T
    if np.any(np.linalg.eigvalsh(DDt) <= 0.0):
        raise ValueError("measurement noise covariance D D' must be positive definite")
    GGt = np.zeros((6, 6)) if G is None else np.asarray(G, dtype=float) @ np.asarray(G, dtype=float).T

    n_nodes = plan.N
    gains = np.zeros((n_nodes, 6, 6))
    p_minus_all = np.zeros((n_nodes, 6, 6))
    p_all = np.zeros((n_nodes, 6, 6))
    p_y_all = np.zeros((n_nodes, 6, 6))
    eye = np.eye(6)
    for k in range(n_nodes):
        p_minus_all[k] = P_minus
        P_Y = C @ P_minus @ C.T + DDt
        try:
            gain = np.linalg.solve(P_Y.T, (P_minus @ C.T).T).T
        except np.linalg.LinAlgError as exc:
            raise ValueError(f"singular innovation covariance at node {k}") from exc
        joseph = eye - gain @ C
        P_post = joseph @ P_minus @ joseph.T + gain @ DDt @ gain.T
        P_post = 0.5 * (P_post + P_post.T)
        gains[k] = gain
        p_all[k] = P_post
        p_y_all[k] = P_Y
        if k < n_nodes - 1:
            A = plan.segments[k].A
            P_minus = A @ P_post @ A.T + GGt
            P_minus = 0.5 * (P_minus + P_minus.T)
    return FilterSchedule(L=gains, P_tilde_minus=p_minus_all, P_tilde=p_all, P_Y=p_y_all)


def _psd_factor(P: NDArray) -> NDArray[np.float64]:
    """Lower-triangular factor of a (numerically) PSD matrix."""
    P = 0.5 * (P + P.T)
    base = max(float(np.max(np.diag(P))), 1.0)
    for jitter in JITTER_SCHEDULE:
        try:
            return np.linalg.cholesky(P + jitter * base * np.eye(P.shape[0]))
        except np.linalg.LinAlgError:
            continue
    raise np.linalg.LinAlgError("factorization failed after jitter escalation")


def assemble_blocks(
    plan: DiscretizedPlan,
    filt: FilterSchedule,
    P_hat0_minus: NDArray,
) -> BlockOperators:
    """Build the stacked operators and a triangular factor of ``Cov(Z)``.

    STM products accumulate by forward recursion per column; their norms are
    logged for conditioning visibility on strongly unstable references.
    """
    n_nodes = plan.N
    if filt.N != n_nodes:
        raise ValueError("filter schedule node count does not match plan")
    P_hat0_minus = np.asarray(P_hat0_minus, dtype=float)

    # phi[k][j] = Phi(t_k, t_j) for j <= k.
    phi = [[np.eye(6)] * 0 for _ in range(n_nodes)]
    for j in range(n_nodes):
        col = {j: np.eye(6)}
        for k in range(j + 1, n_nodes):
            col[k] = plan.segments[k - 1].A @ col[k - 1]
        phi[j] = col
    max_norm = max(np.linalg.norm(phi[0][k]) for k in range(n_nodes))
    logger.debug("largest cumulative STM product norm: %.3e", max_norm)

    n_man = n_nodes - 1
    A_blk = np.zeros((6 * n_nodes, 6))
    B_blk = np.zeros((6 * n_nodes, 3 * n_man))
    B_plus_blk = np.zeros((6 * n_nodes, 3 * n_man))
    L_blk = np.zeros((6 * n_nodes, 6 * n_nodes))
    for k in range(n_nodes):
        A_blk[6 * k : 6 * k + 6, :] = phi[0][k]
        for j in range(min(k + 1, n_man)):
            mapped = phi[j][k] @ B_SEL if j < k else B_SEL
            if j < k:
                B_blk[6 * k : 6 * k + 6, 3 * j : 3 * j + 3] = mapped
            B_plus_blk[6 * k : 6 * k + 6, 3 * j : 3 * j + 3] = mapped
        for j in range(k + 1):
            L_blk[6 * k : 6 * k + 6, 6 * j : 6 * j + 6] = phi[j][k] @ filt.L[j]

    # Factor S from its generators instead of the assembled matrix.  Feedback
    # rows of I + B_blk K contract Z through near-cancelling combinations with
    # squared norms around 1e6, so any diagonal regularization of S large
    # enough to admit a Cholesky factor would swamp the contracted covariance.
    # F F' = S exactly, and the triangular factor from the thin QR of F'
    # preserves row combinations of F to machine precision.
    P_Y_half = np.zeros((6 * n_nodes, 6 * n_nodes))
    for k in range(n_nodes):
        P_Y_half[6 * k : 6 * k + 6, 6 * k : 6 * k + 6] = _psd_factor(filt.P_Y[k])
    F = np.hstack([A_blk @ _psd_factor(P_hat0_minus), L_blk @ P_Y_half])
    S = F @ F.T
    S = 0.5 * (S + S.T)
    r_fac = np.linalg.qr(F.T, mode="r")
    S_half = r_fac.T * np.where(np.diag(r_fac) < 0.0, -1.0, 1.0)

    P_tilde_half = np.stack([_psd_factor(filt.P_tilde[k]) for k in range(n_nodes)])
    return BlockOperators(
        A_blk=A_blk,
        B_blk=B_blk,
        B_plus_blk=B_plus_blk,
        L_blk=L_blk,
        S=S,
        S_half=S_half,
        P_tilde_half=P_tilde_half,
        N=n_nodes,
    )


def chi2_quantile(eps: float, n: int) -> float:
    """Chi-square quantile at probability ``1 - eps`` with ``n`` dof."""
    if not 0.0 < eps < 1.0:
        raise ValueError(f"eps must lie in (0, 1), got {eps}")
    if n < 1:
        raise ValueError(f"dof must be at least 1, got {n}")
    return float(chi2.ppf(1.0 - eps, df=n))


def quantile_upper_bound(
    mean_offset: NDArray,
    cov_factor: NDArray,
    eps: float,
    n: int | None = None,
    mode: str = "exact",
) -> float:
    """Norm-ball radius containing probability ``1 - eps`` of a Gaussian.

    ``|mean| + sqrt(chi2(eps, n)) * |factor|`` with the factor norm spectral
    in exact mode or Frobenius in surrogate mode (never smaller).
    """
    mean_offset = np.asarray(mean_offset, dtype=float)
    cov_factor = np.asarray(cov_factor, dtype=float)
    if n is None:
        n = mean_offset.shape[0]
    if mode not in NORM_MODES:
        raise ValueError(f"unknown norm mode {mode!r}")
    factor_norm = (
        float(np.linalg.norm(cov_factor, 2))
        if mode == "exact"
        else float(np.linalg.norm(cov_factor, "fro"))
    )
    return float(np.linalg.norm(mean_offset)) + np.sqrt(chi2_quantile(eps, n)) * factor_norm


def _factor_norm_expr(expr, mode: str):
    return cp.sigma_max(expr) if mode == "exact" else cp.norm(expr, "fro")


def build_program(
    kind: str,
    blocks: BlockOperators,
    g: GCoefficients,
    lam: float,
    eps_x: float,
    u_max_nd: float,
    norm_mode: str = "surrogate",
    x_bar0: NDArray | None = None,
) -> SteeringProblem:
    """Assemble the conic steering program for one objective.

    Decision variables are the feedforward stack and one 3x6 gain per
    maneuver node.  Both objectives share mean dynamics, terminal mean
    equality, and the per-maneuver chance constraint
    ``|ubar_k| + sqrt(chi2(eps_x, 3)) |K_k S_half_rows_k| <= u_max``.
    """
    if kind not in ("min_nonlinearity", "min_covariance"):
        raise ValueError(f"unknown objective kind {kind!r}")
    if norm_mode not in NORM_MODES:
        raise ValueError(f"unknown norm mode {norm_mode!r}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    if u_max_nd < 0.0:
        raise ValueError("u_max must be nonnegative")
    n_nodes = blocks.N
    n_man = n_nodes - 1
    if g.N != n_nodes:
        raise ValueError("g-coefficient node count does not match blocks")
    x_bar0 = np.zeros(6) if x_bar0 is None else np.asarray(x_bar0, dtype=float)
    sq_x = np.sqrt(chi2_quantile(eps_x, 3))

    u_bar = cp.Variable(3 * n_man, name="u_bar")
    gains = tuple(cp.Variable((3, 6), name=f"K_{k}") for k in range(n_man))
    S_half = blocks.S_half

    KS = cp.vstack([gains[k] @ S_half[6 * k : 6 * k + 6, :] for k in range(n_man)])
    drift = blocks.A_blk @ x_bar0
    X_bar = drift + blocks.B_blk @ u_bar
    X_bar_plus = drift + blocks.B_plus_blk @ u_bar
    P_hat_half = S_half + blocks.B_blk @ KS
    P_hat_plus_half = S_half + blocks.B_plus_blk @ KS

    constraints = [X_bar[6 * (n_nodes - 1) :] == np.zeros(6)]
    for k in range(n_man):
        constraints.append(
            cp.norm(u_bar[3 * k : 3 * k + 3], 2)
            + sq_x * _factor_norm_expr(KS[3 * k : 3 * k + 3, :], norm_mode)
            <= u_max_nd
        )

    gamma = cp.Variable(nonneg=True, name="gamma")
    t_r: cp.Variable | None = None
    t_v: cp.Variable | None = None
    if kind == "min_covariance":
        # Minimizing the max Frobenius norm instead of its square keeps the
        # optimum identical while avoiding the ~1e-9 objective scale that
        # breaks the solver; the squared value is restored on extraction.
        for k in range(n_nodes):
            pos_factor = cp.hstack(
                [P_hat_half[6 * k : 6 * k + 3, :], blocks.P_tilde_half[k][:3, :]]
            )
            constraints.append(cp.norm(pos_factor, "fro") <= gamma)
    else:
        t_r = cp.Variable(n_nodes, nonneg=True, name="t_r")
        t_v = cp.Variable(n_nodes, nonneg=True, name="t_v")
        for k in range(n_nodes):
            pos_factor = cp.hstack(
                [P_hat_plus_half[6 * k : 6 * k + 3, :], blocks.P_tilde_half[k][:3, :]]
            )
            vel_factor = cp.hstack(
                [P_hat_plus_half[6 * k + 3 : 6 * k + 6, :], blocks.P_tilde_half[k][3:, :]]
            )
            constraints.append(
                cp.norm(X_bar_plus[6 * k : 6 * k + 3], 2)
                + sq_x * _factor_norm_expr(pos_factor, norm_mode)
                <= t_r[k]
            )
            constraints.append(
                cp.norm(X_bar_plus[6 * k + 3 : 6 * k + 6], 2)
                + sq_x * _factor_norm_expr(vel_factor, norm_mode)
                <= t_v[k]
            )
        # With the series truncated at the quadratic term the lambda-blend at
        # node k is a weighted sum of squares, so each node bound collapses
        # into one second-order cone on the square root of the blend.  Keeping
        # the g-weights inside the cone stops solver feasibility slack on
        # separate square variables from buying objective (the weights reach
        # 1e5 and would amplify per-cone slack into percent-level error).
        w_r = 0.5 * (1.0 - lam) * g.G_r[2]
        w_v = 0.5 * lam * g.G_v[2]
        for k in range(n_nodes):
            if not (w_r[k].any() or w_v[k].any()):
                continue
            weighted = cp.hstack(
                [
                    cp.multiply(np.sqrt(w_r[k]), t_r),
                    cp.multiply(np.sqrt(w_v[k]), t_v),
                ]
            )
            constraints.append(cp.norm(weighted, 2) <= gamma)

    problem = cp.Problem(cp.Minimize(gamma), constraints)
    return SteeringProblem(
        kind=kind,
        problem=problem,
        u_bar=u_bar,
        gains=gains,
        gamma=gamma,
        t_r=t_r,
        t_v=t_v,
        blocks=blocks,
        g=g,
        lam=lam,
        eps_x=eps_x,
        u_max_nd=u_max_nd,
        norm_mode=norm_mode,
        x_bar0=x_bar0,
    )


def _quantile_curves(
    X_bar_plus: NDArray,
    P_hat_plus_half: NDArray,
    P_tilde_half: NDArray,
    eps_x: float,
    mode: str,
) -> tuple[NDArray, NDArray]:
    n_nodes = X_bar_plus.shape[0]
    r_tilde = np.zeros(n_nodes)
    v_tilde = np.zeros(n_nodes)
    for k in range(n_nodes):
        pos_factor = np.hstack([P_hat_plus_half[6 * k : 6 * k + 3, :], P_tilde_half[k][:3, :]])
        vel_factor = np.hstack([P_hat_plus_half[6 * k + 3 : 6 * k + 6, :], P_tilde_half[k][3:, :]])
        r_tilde[k] = quantile_upper_bound(X_bar_plus[k, :3], pos_factor, eps_x, 3, mode)
        v_tilde[k] = quantile_upper_bound(X_bar_plus[k, 3:], vel_factor, eps_x, 3, mode)
    return r_tilde, v_tilde


def _run_solver(cvx_prob: cp.Problem, config: SolverConfig) -> cp.Problem:
    """Solve a cvxpy problem, retrying without equilibration on failure.

    Ruiz equilibration misscales the wide dynamic range of the exact
    covariance factor; the unscaled data stays within solver reach.  The
    retry builds a fresh wrapper because a cached solver cannot change that
    setting in place.  Returns the wrapper that produced the final status.
    """
    solver_kwargs: dict = {"verbose": config.verbose}
    if config.solver.upper() == "CLARABEL":
        solver_kwargs.update(
            tol_feas=config.feas_tol,
            tol_gap_rel=config.gap_rel_tol,
        )
    try:
        cvx_prob.solve(solver=config.solver, **solver_kwargs)
    except cp.error.SolverError:
        if config.solver.upper() != "CLARABEL":
            raise
        logger.warning("solver failed with equilibration; retrying without")
        cvx_prob = cp.Problem(cvx_prob.objective, cvx_prob.constraints)
        cvx_prob.solve(solver=config.solver, equilibrate_enable=False, **solver_kwargs)
    return cvx_prob


def solve(problem: SteeringProblem, config: SolverConfig = SolverConfig()) -> SteeringSolution:
    """Solve an assembled program and package the policy with its statistics.

    Surfaces infeasible/unbounded/error statuses verbatim as ``SolverError``.
    A second pass minimizes the closed-loop map norm over the optimal set so
    the returned gains respond to deviations instead of leaving them to the
    open-loop dynamics, and all reported statistics are recomputed from the
    numeric optimum, with quantile curves in both exact-spectral and
    Frobenius-surrogate modes.
    """
    cvx_prob = _run_solver(problem.problem, config)
    status = cvx_prob.status
    if status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
        raise SolverError(status)
    if status == cp.OPTIMAL_INACCURATE:
        logger.warning("solver returned an inaccurate optimum for %s", problem.kind)

    blocks = problem.blocks
    n_nodes = blocks.N
    n_man = n_nodes - 1

    def policy_stats(u_bar: NDArray, gains: NDArray) -> dict:
        K_blk = np.zeros((3 * n_man, 6 * n_nodes))
        for k in range(n_man):
            K_blk[3 * k : 3 * k + 3, 6 * k : 6 * k + 6] = gains[k]
        KS = K_blk @ blocks.S_half
        P_hat_half = blocks.S_half + blocks.B_blk @ KS
        P_hat_plus_half = blocks.S_half + blocks.B_plus_blk @ KS
        drift = blocks.A_blk @ problem.x_bar0
        X_bar = (drift + blocks.B_blk @ u_bar.ravel()).reshape(n_nodes, 6)
        X_bar_plus = (drift + blocks.B_plus_blk @ u_bar.ravel()).reshape(n_nodes, 6)

        r_exact, v_exact = _quantile_curves(
            X_bar_plus, P_hat_plus_half, blocks.P_tilde_half, problem.eps_x, "exact"
        )
        r_surr, v_surr = _quantile_curves(
            X_bar_plus, P_hat_plus_half, blocks.P_tilde_half, problem.eps_x, "surrogate"
        )
        mon = evaluate_bound(problem.g, r_exact, v_exact, problem.lam)
        mon_surr = evaluate_bound(problem.g, r_surr, v_surr, problem.lam)

        sq_x = np.sqrt(chi2_quantile(problem.eps_x, 3))
        u_quant = np.array(
            [
                np.linalg.norm(u_bar[k]) + sq_x * np.linalg.norm(KS[3 * k : 3 * k + 3, :], 2)
                for k in range(n_man)
            ]
        )
        pos_traces = np.array(
            [
                np.linalg.norm(
                    np.hstack(
                        [P_hat_half[6 * k : 6 * k + 3, :], blocks.P_tilde_half[k][:3, :]]
                    ),
                    "fro",
                )
                ** 2
                for k in range(n_nodes)
            ]
        )
        # The objective achieved by this policy, recomputed from the numeric
        # factors rather than read off epigraph variables, in the solved
        # gamma units (root of the max trace or of the max blend).
        if problem.kind == "min_covariance":
            objective_value = float(np.max(pos_traces))
            gamma_equiv = float(np.sqrt(objective_value))
        else:
            achieved = mon if problem.norm_mode == "exact" else mon_surr
            objective_value = float(achieved.objective)
            gamma_equiv = float(np.sqrt(objective_value))
        return {
            "u_bar": u_bar,
            "gains": gains,
            "P_hat_half": P_hat_half,
            "P_hat_plus_half": P_hat_plus_half,
            "X_bar": X_bar,
            "X_bar_plus": X_bar_plus,
            "r_exact": r_exact,
            "v_exact": v_exact,
            "r_surr": r_surr,
            "v_surr": v_surr,
            "mon": mon,
            "mon_surr": mon_surr,
            "u_quant": u_quant,
            "pos_traces": pos_traces,
            "objective_value": objective_value,
            "gamma_equiv": gamma_equiv,
        }

    def variable_values() -> tuple[NDArray, NDArray]:
        u_bar = np.asarray(problem.u_bar.value, dtype=float).reshape(n_man, 3)
        gains = np.stack([np.asarray(K.value, dtype=float) for K in problem.gains])
        return u_bar, gains

    stats = policy_stats(*variable_values())

    # The optimum is typically non-unique: gain components acting on the
    # near-null directions of S change neither the objective nor the chance
    # constraints, yet they set how the loop responds to deviations the
    # covariance model carries no mass for (linearization remainders live
    # exactly there, and unattended they restretch along the unstable
    # manifold).  Among policies whose predicted quantile envelope matches
    # the optimum, pick the one whose closed-loop map damps an injected
    # deviation the most.  Pinning the epigraph variables keeps the first
    # solve feasible and avoids capping the objective expression, which
    # conditions poorly; the candidate is still re-checked numerically
    # before adoption.
    pins = [problem.gamma == float(problem.gamma.value)]
    if problem.t_r is not None:
        pins.append(problem.t_r == np.asarray(problem.t_r.value, dtype=float))
    if problem.t_v is not None:
        pins.append(problem.t_v == np.asarray(problem.t_v.value, dtype=float))
    closed_loop_cols = cp.hstack(
        [blocks.B_blk[:, 3 * j : 3 * j + 3] @ problem.gains[j] for j in range(n_man)]
    )
    damping = cp.norm(
        cp.hstack(
            [
                cp.vec(
                    np.eye(6 * n_nodes)[:, : 6 * n_man] + closed_loop_cols, order="F"
                ),
                cp.vec(problem.u_bar, order="F"),
            ]
        ),
        2,
    )
    selector = cp.Problem(
        cp.Minimize(damping),
        list(problem.problem.constraints) + pins,
    )
    try:
        solved_sel = _run_solver(selector, config)
    except cp.error.SolverError:
        logger.warning("closed-loop damping selection failed; keeping first solve")
        solved_sel = None
    if solved_sel is not None:
        if solved_sel.status in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
            candidate = policy_stats(*variable_values())
            if candidate["gamma_equiv"] <= stats["gamma_equiv"] * (1 + 1e-4) + 1e-12:
                stats = candidate
            else:
                logger.warning(
                    "damping-selected policy misses the optimum (%.6e vs %.6e); "
                    "keeping first solve",
                    candidate["gamma_equiv"],
                    stats["gamma_equiv"],
                )
        else:
            logger.warning(
                "closed-loop damping selection returned %s; keeping first solve",
                solved_sel.status,
            )

    u_bar = stats["u_bar"]
    gains = stats["gains"]
    terminal_residual = float(np.linalg.norm(stats["X_bar"][n_nodes - 1]))

    return SteeringSolution(
        kind=problem.kind,
        status=status,
        objective_value=stats["objective_value"],
        u_bar=u_bar,
        gains=gains,
        X_bar=stats["X_bar"],
        X_bar_plus=stats["X_bar_plus"],
        P_hat_half=stats["P_hat_half"],
        P_hat_plus_half=stats["P_hat_plus_half"],
        r_tilde=stats["r_exact"],
        v_tilde=stats["v_exact"],
        r_tilde_surrogate=stats["r_surr"],
        v_tilde_surrogate=stats["v_surr"],
        mon=stats["mon"],
        mon_surrogate=stats["mon_surr"],
        u_quantiles=stats["u_quant"],
        pos_traces=stats["pos_traces"],
        max_pos_trace=float(np.max(stats["pos_traces"])),
        terminal_residual=terminal_residual,
        norm_mode=problem.norm_mode,
        eps_x=problem.eps_x,
        u_max_nd=problem.u_max_nd,
        solve_stats={
            "solve_time": getattr(cvx_prob.solver_stats, "solve_time", None),
            "num_iters": getattr(cvx_prob.solver_stats, "num_iters", None),
        },
    )
