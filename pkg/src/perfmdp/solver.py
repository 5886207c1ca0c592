"""Regularized occupancy optimization and its dual.

The primal problem for parameters (theta, mu) and regularization lam > 0 is

    maximize    d^T Phi theta - (lam/2) ||Phi^T d||^2
    subject to  B d = rho + gamma mu Phi^T d,   d >= 0.

It is solved by a two-block splitting method: the flow equalities stay inside
an equality-constrained quadratic subproblem whose KKT matrix is constant and
factored once, while nonnegativity is handled on a second copy of d. Each
iteration is then a single precomputed matrix-vector product plus a clamp,
which is what the compiled kernel runs.

The dual function over multipliers (h for the flow equalities, g >= 0 for
nonnegativity) is

    F(h, g) = (1/(2 lam)) ||theta + M h + pinv(Phi) g||^2 - h^T rho,

with M = pinv(Phi) B^T - gamma mu^T, and the optimal feature occupancy is
recovered from any dual pair as nu = (1/lam)(theta + M h + pinv(Phi) g).

A slow, algorithmically independent reference solver (projected gradient
ascent with Dykstra feasibility projections) is included for cross-checking
on tiny instances.
"""

import time
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from . import _kernels
from .errors import OracleNonConvergence, SingularSystemError, SizeLimitError
from .mdp import LinearMdpSpec, MdpParams, constraint_matrix, validate_params

DEFAULT_TOL = 1e-8
DEFAULT_GAP_TOL = 1e-6
DEFAULT_MAX_ITERATIONS = 200_000
PINV_CUTOFF = 1e-10


@dataclass(frozen=True)
class SpectralConstants:
    """Feature-geometry constants used throughout the contraction theory.

    kappa      smallest eigenvalue of Phi Phi^T (zero when D < S*A)
    big_m      largest eigenvalue of Phi Phi^T
    alpha      sqrt(big_m) / (sqrt(A) (1 - gamma))
    m_pinv_norm  spectral norm of pinv(M) for M = pinv(Phi) B^T - gamma mu^T
    """

    kappa: float
    big_m: float
    alpha: float
    m_pinv_norm: float


@dataclass(frozen=True)
class KktReport:
    stationarity: float
    feasibility: float
    complementarity: float
    duality_gap: float


@dataclass(frozen=True)
class Solution:
    d: np.ndarray
    nu: np.ndarray
    h: np.ndarray
    g: np.ndarray
    primal_objective: float
    dual_objective: float
    kkt: KktReport
    iterations: int
    status: str  # "converged" | "max_iterations"
    sigma: float
    wall_clock_ms: float


def _pinv(phi: np.ndarray) -> np.ndarray:
    return np.linalg.pinv(phi, rcond=PINV_CUTOFF)


def spectral_constants(spec: LinearMdpSpec, params: MdpParams) -> SpectralConstants:
    phi = spec.features
    n, D = phi.shape
    sv = np.linalg.svd(phi, compute_uv=False)
    big_m = float(sv[0] ** 2)
    kappa = float(sv[-1] ** 2) if D >= n else 0.0
    alpha = np.sqrt(big_m) / (np.sqrt(spec.num_actions) * (1.0 - spec.discount))
    M = _pinv(phi) @ constraint_matrix(spec).T - spec.discount * params.mu.T
    msv = np.linalg.svd(M, compute_uv=False)
    positive = msv[msv > PINV_CUTOFF * msv[0]]
    m_pinv_norm = float(1.0 / positive[-1]) if positive.size else np.inf
    return SpectralConstants(kappa, big_m, float(alpha), m_pinv_norm)


def flow_matrix(spec: LinearMdpSpec, params: MdpParams) -> np.ndarray:
    """E = B - gamma mu Phi^T, so the flow constraint reads E d = rho."""
    return constraint_matrix(spec) - spec.discount * (params.mu @ spec.features.T)


# ---------------------------------------------------------------------------
# splitting solver


def _kkt_blocks(Q, E, c, rho, lam, sigma):
    n = Q.shape[0]
    S = E.shape[0]
    K = np.zeros((n + S, n + S))
    K[:n, :n] = lam * Q + sigma * np.eye(n)
    K[:n, n:] = E.T
    K[n:, :n] = E
    try:
        Kinv = np.linalg.inv(K)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(f"flow KKT matrix is singular: {exc}") from exc
    Tdd = Kinv[:n, :n]
    Tds = Kinv[:n, n:]
    Yd = Kinv[n:, :n]
    Ys = Kinv[n:, n:]
    W = np.ascontiguousarray(sigma * Tdd)
    f0 = Tdd @ c + Tds @ rho
    return W, f0, Tdd, Yd, Ys


def solve_flow_program(
    phi,
    theta,
    mu,
    rho,
    gamma,
    lam,
    tol=DEFAULT_TOL,
    gap_tol=DEFAULT_GAP_TOL,
    max_iterations=DEFAULT_MAX_ITERATIONS,
    warm_start=None,
    num_states=None,
    num_actions=None,
):
    """Solve the flow-constrained quadratic program for raw matrices.

    This entry point skips parameter validation so that surrogate problems
    (plug-in estimates that are close to, but not exactly, a linear MDP) can
    reuse the same optimizer. solve_regularized is the validated front door.
    """
    t_start = time.perf_counter()
    phi = np.asarray(phi, dtype=float)
    theta = np.asarray(theta, dtype=float).ravel()
    mu = np.asarray(mu, dtype=float)
    rho = np.asarray(rho, dtype=float).ravel()
    n, D = phi.shape
    S = rho.shape[0]
    if num_states is None:
        num_states = S
    if num_actions is None:
        num_actions = n // S
    if lam <= 0:
        raise ValueError(f"lam must be positive, got {lam:g}")
    if max_iterations < 1:
        raise ValueError("max_iterations must be at least 1")

    c = phi @ theta
    Q = phi @ phi.T
    B = np.kron(np.eye(num_states), np.ones((1, num_actions)))
    E = B - gamma * (mu @ phi.T)
    phi_pinv = _pinv(phi)
    M = phi_pinv @ B.T - gamma * mu.T

    sigma = max(1e-3, lam * float(np.linalg.norm(Q, 2)))
    W, f0, Tdd, Yd, Ys = _kkt_blocks(Q, E, c, rho, lam, sigma)

    if warm_start is not None:
        z = np.array(warm_start, dtype=float).ravel().copy()
        z = np.clip(z, 0.0, None)
    else:
        z = np.zeros(n)
    u = np.zeros(n)

    chunk = 50
    balance_every = 10  # chunks between sigma rebalances
    done = 0
    status = "max_iterations"
    d = z.copy()
    chunk_index = 0
    st = feas = comp = gap_val = np.inf
    primal = dual = 0.0
    h = np.zeros(S)
    g = np.zeros(n)

    def _extract(dv, zv, uv):
        y = Yd @ (c + sigma * (zv - uv)) + Ys @ rho
        hh = -y
        gg = np.clip(-sigma * uv, 0.0, None)
        return hh, gg

    def _residuals(dv, hh, gg):
        station = float(np.abs(c - lam * (Q @ dv) + E.T @ hh + gg).max(initial=0.0))
        fe = max(
            float(np.abs(E @ dv - rho).max(initial=0.0)),
            float(max(0.0, -dv.min(initial=0.0))),
        )
        co = abs(float(dv @ gg))
        return station, fe, co

    while done < max_iterations:
        steps = min(chunk, max_iterations - done)
        d, split_inf, dz_inf = _kernels.admm_chunk(W, f0, z, u, steps)
        done += steps
        chunk_index += 1

        if split_inf <= 10.0 * tol and sigma * dz_inf <= 10.0 * tol:
            h, g = _extract(d, z, u)
            d_out = np.clip(d, 0.0, None)
            st, feas, comp = _residuals(d_out, h, g)
            primal = float(c @ d_out - 0.5 * lam * d_out @ (Q @ d_out))
            dual = dual_objective_raw(h, g, phi_pinv, M, theta, rho, lam)
            gap_val = abs(primal - dual)
            if st <= tol and feas <= tol and comp <= max(tol, gap_tol) and gap_val <= gap_tol:
                status = "converged"
                d = d_out
                break
            d = d_out
        elif chunk_index % balance_every == 0:
            # residual balancing keeps the two convergence rates comparable
            primal_res = split_inf
            dual_res = sigma * dz_inf
            new_sigma = sigma
            if primal_res > 10.0 * dual_res and sigma < 1e8:
                new_sigma = sigma * 2.0
            elif dual_res > 10.0 * primal_res and sigma > 1e-8:
                new_sigma = sigma * 0.5
            if new_sigma != sigma:
                u *= sigma / new_sigma
                sigma = new_sigma
                W, f0, Tdd, Yd, Ys = _kkt_blocks(Q, E, c, rho, lam, sigma)
    else:
        h, g = _extract(d, z, u)
        d = np.clip(d, 0.0, None)
        st, feas, comp = _residuals(d, h, g)
        primal = float(c @ d - 0.5 * lam * d @ (Q @ d))
        dual = dual_objective_raw(h, g, phi_pinv, M, theta, rho, lam)
        gap_val = abs(primal - dual)

    wall = (time.perf_counter() - t_start) * 1e3
    return Solution(
        d=d,
        nu=phi.T @ d,
        h=h,
        g=g,
        primal_objective=primal,
        dual_objective=dual,
        kkt=KktReport(st, feas, comp, gap_val),
        iterations=done,
        status=status,
        sigma=sigma,
        wall_clock_ms=wall,
    )


def solve_regularized(
    params: MdpParams,
    spec: LinearMdpSpec,
    lam: float,
    tol=DEFAULT_TOL,
    gap_tol=DEFAULT_GAP_TOL,
    max_iterations=DEFAULT_MAX_ITERATIONS,
    warm_start=None,
) -> Solution:
    """Solve the regularized occupancy problem for validated parameters."""
    bad = validate_params(params, spec)
    if bad:
        raise ValueError("invalid params: " + "; ".join(bad))
    return solve_flow_program(
        spec.features,
        params.theta,
        params.mu,
        spec.start_dist,
        spec.discount,
        lam,
        tol=tol,
        gap_tol=gap_tol,
        max_iterations=max_iterations,
        warm_start=warm_start,
        num_states=spec.num_states,
        num_actions=spec.num_actions,
    )


# ---------------------------------------------------------------------------
# dual side


def dual_objective_raw(h, g, phi_pinv, M, theta, rho, lam) -> float:
    inner = theta + M @ h + phi_pinv @ g
    return float(inner @ inner / (2.0 * lam) - h @ rho)


def _dual_pieces(params: MdpParams, spec: LinearMdpSpec):
    phi_pinv = _pinv(spec.features)
    M = phi_pinv @ constraint_matrix(spec).T - spec.discount * params.mu.T
    return phi_pinv, M


def dual_objective(h, g, params: MdpParams, spec: LinearMdpSpec, lam: float) -> float:
    """F(h, g) for the regularized problem at parameters (theta, mu)."""
    phi_pinv, M = _dual_pieces(params, spec)
    return dual_objective_raw(
        np.asarray(h, float).ravel(),
        np.asarray(g, float).ravel(),
        phi_pinv,
        M,
        params.theta,
        spec.start_dist,
        lam,
    )


def recover_nu_from_duals(h, g, params: MdpParams, spec: LinearMdpSpec, lam: float) -> np.ndarray:
    """Optimal feature occupancy nu = (1/lam)(theta + M h + pinv(Phi) g)."""
    phi_pinv, M = _dual_pieces(params, spec)
    return (params.theta + M @ np.asarray(h, float).ravel() + phi_pinv @ np.asarray(g, float).ravel()) / lam


def min_norm_dual_pair(params: MdpParams, spec: LinearMdpSpec, lam: float):
    """Minimum-norm optimal duals: g* = 0 and the least-squares h*."""
    _, M = _dual_pieces(params, spec)
    M_pinv = np.linalg.pinv(M, rcond=PINV_CUTOFF)
    h = M_pinv @ (lam * (M_pinv.T @ spec.start_dist) - params.theta)
    return h, np.zeros(spec.num_pairs)


def dual_norm_bound(params: MdpParams, spec: LinearMdpSpec, lam: float) -> float:
    """Norm bound alpha (lam alpha + sqrt(D)) for the min-norm dual h*."""
    consts = spectral_constants(spec, params)
    return consts.alpha * (lam * consts.alpha + np.sqrt(spec.feature_dim))


# ---------------------------------------------------------------------------
# slow reference solver


def _dykstra(x0, E, rho, chol, max_cycles=5000, tol=1e-12):
    """Alternating projections (with Dykstra corrections) onto
    {x : E x = rho} intersect {x >= 0}."""
    x = x0.copy()
    p = np.zeros_like(x)
    q = np.zeros_like(x)
    for _ in range(max_cycles):
        v = x + p
        y = v - E.T @ cho_solve(chol, E @ v - rho)
        p = v - y
        v2 = y + q
        x_new = np.clip(v2, 0.0, None)
        q = v2 - x_new
        feas = float(np.abs(E @ x_new - rho).max(initial=0.0))
        move = float(np.abs(x_new - x).max(initial=0.0))
        x = x_new
        if feas <= tol and move <= tol:
            return x
    raise OracleNonConvergence(
        f"feasibility projection did not reach {tol:g} in {max_cycles} cycles"
    )


def oracle_solve_small(
    params: MdpParams,
    spec: LinearMdpSpec,
    lam: float,
    iterations: int = 1_000_000,
    tol: float = 1e-12,
) -> np.ndarray:
    """Reference solution by projected gradient ascent, tiny instances only.

    Shares no code with the splitting solver: feasibility is enforced by
    Dykstra alternating projections after every gradient step. The step size
    starts at 1/L for the smooth part and decays slowly, so on strongly
    concave instances the iteration is effectively a constant-step method
    that reaches machine precision long before the iteration budget; the
    loop exits early once the iterate stops moving.
    """
    n = spec.num_pairs
    if n > 8:
        raise SizeLimitError(f"oracle limited to S*A <= 8, got {n}")
    if lam <= 0:
        raise ValueError(f"lam must be positive, got {lam:g}")
    phi = spec.features
    c = phi @ params.theta
    Q = phi @ phi.T
    E = flow_matrix(spec, params)
    try:
        chol = cho_factor(E @ E.T)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(f"flow rows are degenerate: {exc}") from exc

    x = _dykstra(np.full(n, 1.0 / ((1.0 - spec.discount) * n)), E, rho=spec.start_dist, chol=chol)
    L = lam * float(np.linalg.norm(Q, 2)) + 1e-12
    base_step = 1.0 / L
    half_life = iterations / 2.0
    stall = 0
    for k in range(1, iterations + 1):
        grad = c - lam * (Q @ x)
        step = base_step / np.sqrt(1.0 + k / half_life)
        x_new = _dykstra(x + step * grad, E, spec.start_dist, chol)
        move = float(np.abs(x_new - x).max(initial=0.0))
        x = x_new
        if move <= 1e-15:
            stall += 1
            if stall >= 20:
                break
        else:
            stall = 0
    return x
