"""Finite-sample machinery: datasets, Lagrangians, coverage, Algorithm-2 loop.

Data generation per round: a tuple (s0, s, a, r, s_next) draws s0 from the
start distribution, (s, a) from the normalized occupancy (1-gamma) d, s_next
from the current kernel, and the deterministic reward r = phi(s,a)^T theta
(optional uniform noise for robustness studies). The saddle objective over a
dataset is the empirical Lagrangian; with exact enumeration weights it equals
the population Lagrangian identically, which is the main correctness lever
used by the tests.

The finite-sample retraining loop supports two inner solvers:

exact-saddle   the max-min of the empirical Lagrangian collapses in closed
               form to a flow-constrained quadratic program in d with
               plug-in least-squares estimates; it is solved by the same
               splitting core as the exact loop, on surrogate matrices.
primal-dual    the stochastic primal-dual iteration from primal_dual.
"""

import time
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import rng
from .errors import DatasetError, RetrainRoundError
from .mdp import (
    LinearMdpSpec,
    MdpParams,
    constraint_matrix,
    occupancy_from_policy,
    performative_value,
    policy_from_occupancy,
    reconstruct_dynamics,
    uniform_policy,
)
from .responses import ResponseMap
from .retraining import RetrainTrace, TraceRound, self_consistent_occupancy, stability_gap
from .solver import Solution, solve_flow_program, solve_regularized

RIDGE_DEFAULT = 1e-6
EIG_FLOOR = 1e-10


@dataclass(frozen=True)
class Dataset:
    """Columnar storage of sampled tuples (s0, s, a, r, s_next).

    weights is None for uniformly weighted samples; enumeration datasets
    carry explicit outcome probabilities instead. seed is None for
    enumerated data.
    """

    s0: np.ndarray
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    round_index: int = 0
    seed: Optional[int] = None
    weights: Optional[np.ndarray] = None

    @property
    def m(self) -> int:
        return self.s0.shape[0]

    def sa_indices(self, spec: LinearMdpSpec) -> np.ndarray:
        return self.s * spec.num_actions + self.a

    def weight_vector(self) -> np.ndarray:
        if self.weights is None:
            return np.full(self.m, 1.0 / self.m)
        return self.weights

    def tuples(self):
        return list(zip(self.s0, self.s, self.a, self.r, self.s_next))


def sample_dataset(
    d,
    params: MdpParams,
    spec: LinearMdpSpec,
    m: int,
    seed: int,
    round_index: int = 0,
    noise_half_width: float = 0.0,
) -> Dataset:
    """Draw m tuples from the deployment distribution of occupancy d."""
    if m < 1:
        raise ValueError("need at least one sample")
    d = np.asarray(d, dtype=float).ravel()
    d_til = (1.0 - spec.discount) * d
    total = float(d_til.sum())
    if abs(total - 1.0) > 1e-6 or float(d_til.min(initial=0.0)) < -1e-9:
        raise DatasetError(
            f"(1-gamma) d is not a distribution: mass {total:g}, min {d_til.min():g}"
        )
    d_til = np.clip(d_til, 0.0, None)
    d_til /= d_til.sum()
    rho = spec.start_dist / spec.start_dist.sum()
    _, P = reconstruct_dynamics(params, spec)

    s0 = rng.substream(seed, "dataset-s0", round_index).choice(spec.num_states, size=m, p=rho)
    sa = rng.substream(seed, "dataset-sa", round_index).choice(spec.num_pairs, size=m, p=d_til)
    # inverse-CDF along each sampled column keeps this fully vectorized
    cdf = np.cumsum(P.T[sa, :], axis=1)
    u = rng.substream(seed, "dataset-snext", round_index).random(m)
    s_next = (cdf < u[:, None]).sum(axis=1)
    s_next = np.minimum(s_next, spec.num_states - 1)
    r = (spec.features @ params.theta)[sa]
    if noise_half_width > 0:
        noise = rng.substream(seed, "dataset-noise", round_index).uniform(
            -noise_half_width, noise_half_width, size=m
        )
        r = r + noise
    return Dataset(
        s0=s0,
        s=sa // spec.num_actions,
        a=sa % spec.num_actions,
        r=r,
        s_next=s_next,
        round_index=round_index,
        seed=seed,
    )


def enumerate_dataset(d, params: MdpParams, spec: LinearMdpSpec, round_index: int = 0) -> Dataset:
    """All possible tuples, weighted by their exact probabilities.

    The weighted empirical Lagrangian over this dataset equals the population
    one, so it serves as the infinite-sample surrogate. Zero-probability
    tuples are dropped.
    """
    d = np.asarray(d, dtype=float).ravel()
    d_til = (1.0 - spec.discount) * np.clip(d, 0.0, None)
    total = float(d_til.sum())
    if abs(total - 1.0) > 1e-6:
        raise DatasetError(f"(1-gamma) d has mass {total:g}")
    d_til /= total
    rho = spec.start_dist
    _, P = reconstruct_dynamics(params, spec)
    reward = spec.features @ params.theta
    S, A = spec.num_states, spec.num_actions
    rows = []
    for s0 in range(S):
        if rho[s0] <= 0:
            continue
        for idx in range(S * A):
            if d_til[idx] <= 0:
                continue
            for sn in range(S):
                w = rho[s0] * d_til[idx] * P[sn, idx]
                if w <= 0:
                    continue
                rows.append((s0, idx // A, idx % A, reward[idx], sn, w))
    arr = np.array(rows, dtype=float)
    return Dataset(
        s0=arr[:, 0].astype(int),
        s=arr[:, 1].astype(int),
        a=arr[:, 2].astype(int),
        r=arr[:, 3],
        s_next=arr[:, 4].astype(int),
        round_index=round_index,
        seed=None,
        weights=arr[:, 5],
    )


# ---------------------------------------------------------------------------
# covariance


@dataclass(frozen=True)
class CovarianceEstimate:
    sigma: np.ndarray
    source: str  # "exact" | "estimated"
    ridge: float
    min_eig_raw: float

    def inverse(self) -> np.ndarray:
        return np.linalg.inv(self.sigma)


def expected_covariance(d, spec: LinearMdpSpec, ridge: float = RIDGE_DEFAULT) -> CovarianceEstimate:
    """Sigma = sum (1-gamma) d(s,a) phi phi^T, ridged only if near-singular."""
    d = np.asarray(d, dtype=float).ravel()
    w = (1.0 - spec.discount) * np.clip(d, 0.0, None)
    phi = spec.features
    sigma = phi.T @ (w[:, None] * phi)
    sigma = 0.5 * (sigma + sigma.T)
    min_eig = float(np.linalg.eigvalsh(sigma)[0])
    applied = 0.0
    if min_eig < EIG_FLOOR:
        sigma = sigma + ridge * np.eye(spec.feature_dim)
        applied = ridge
    return CovarianceEstimate(sigma=sigma, source="exact", ridge=applied, min_eig_raw=min_eig)


def estimate_covariance(dataset: Dataset, spec: LinearMdpSpec, ridge: float = RIDGE_DEFAULT) -> CovarianceEstimate:
    """Sample covariance of the visited features, always ridged."""
    phi_rows = spec.features[dataset.sa_indices(spec)]
    w = dataset.weight_vector()
    sigma = phi_rows.T @ (w[:, None] * phi_rows)
    sigma = 0.5 * (sigma + sigma.T)
    min_eig = float(np.linalg.eigvalsh(sigma)[0])
    sigma = sigma + ridge * np.eye(spec.feature_dim)
    return CovarianceEstimate(sigma=sigma, source="estimated", ridge=ridge, min_eig_raw=min_eig)


# ---------------------------------------------------------------------------
# Lagrangians


def true_lagrangian(d, nu, g, omega, params: MdpParams, spec: LinearMdpSpec, lam: float) -> float:
    """Population saddle objective
    nu^T (theta + gamma mu^T g - omega) - (lam/2)||nu||^2 + <g, rho>
    + <d, Phi omega - B^T g>."""
    d = np.asarray(d, dtype=float).ravel()
    nu = np.asarray(nu, dtype=float).ravel()
    g = np.asarray(g, dtype=float).ravel()
    omega = np.asarray(omega, dtype=float).ravel()
    B = constraint_matrix(spec)
    val = nu @ (params.theta + spec.discount * (params.mu.T @ g) - omega)
    val -= 0.5 * lam * nu @ nu
    val += g @ spec.start_dist
    val += d @ (spec.features @ omega - B.T @ g)
    return float(val)


def empirical_lagrangian(
    dataset: Dataset,
    sigma: CovarianceEstimate,
    d,
    nu,
    g,
    omega,
    spec: LinearMdpSpec,
    lam: float,
) -> float:
    """Dataset version of the saddle objective; weights default to 1/m."""
    d = np.asarray(d, dtype=float).ravel()
    nu = np.asarray(nu, dtype=float).ravel()
    g = np.asarray(g, dtype=float).ravel()
    omega = np.asarray(omega, dtype=float).ravel()
    w = dataset.weight_vector()
    phi_rows = spec.features[dataset.sa_indices(spec)]
    inner = phi_rows.T @ (w * (dataset.r + spec.discount * g[dataset.s_next] - phi_rows @ omega))
    try:
        sig_inv_inner = np.linalg.solve(sigma.sigma, inner)
    except np.linalg.LinAlgError as exc:
        raise DatasetError(f"covariance is singular: {exc}") from exc
    B = constraint_matrix(spec)
    val = nu @ sig_inv_inner
    val -= 0.5 * lam * nu @ nu
    val += float(w @ g[dataset.s0])
    val += d @ (spec.features @ omega - B.T @ g)
    return float(val)


def coverage_bound(policy, response: ResponseMap, spec: LinearMdpSpec) -> float:
    """Coverage ratio of the policy's deployment distribution.

    Finds the self-consistent occupancy d_pi of the policy under the
    response, its exact feature covariance Sigma_pi, and the (effectively
    unregularized) optimal occupancy d_star in the same responded model,
    then returns E_{d_star}[phi]^T Sigma_pi^{-2} E_{d_star}[phi] with the
    expectation over the normalized optimal occupancy.
    """
    d_pi = self_consistent_occupancy(policy, response, spec)
    if d_pi is None:
        raise RetrainRoundError(0, "no self-consistent occupancy for the coverage policy")
    params = response.apply(d_pi, spec)
    cov = expected_covariance(d_pi, spec)
    star = solve_regularized(params, spec, lam=1e-9, tol=1e-9, gap_tol=1e-9)
    feat = (1.0 - spec.discount) * (spec.features.T @ star.d)
    x = np.linalg.solve(cov.sigma, feat)
    return float(x @ x)


def theorem4_reference_m(
    spec: LinearMdpSpec,
    params: MdpParams,
    b_cov: float,
    lam: float,
    delta: float,
    p: float,
    round_index: int = 1,
) -> float:
    """Order-level sample-size reference for the finite-sample guarantee.

    D^5 B^2 lam^4 / ((1-gamma)^2 c1^4 delta^4 kappa) * log(D B lam t /
    (c1 delta kappa p)) with c1 = min(1, gamma^2 sigma*_min(mu mu^T)),
    evaluated with unit leading constant. Logged for context only; the
    constants inside the O(.) are not sharp, so nothing enforces it.
    """
    D = spec.feature_dim
    gamma = spec.discount
    sv = np.linalg.svd(spec.features, compute_uv=False)
    kappa = float(sv[-1] ** 2) if D >= spec.num_pairs else 0.0
    if kappa <= 0:
        return float("inf")
    mm = params.mu @ params.mu.T
    eigs = np.linalg.eigvalsh(mm)
    pos = eigs[eigs > EIG_FLOOR]
    c1 = min(1.0, gamma**2 * float(pos[0])) if pos.size else 1.0
    lead = D**5 * b_cov**2 * lam**4 / ((1.0 - gamma) ** 2 * c1**4 * delta**4 * kappa)
    log_arg = D * b_cov * lam * max(round_index, 1) / (c1 * delta * kappa * p)
    return float(lead * np.log(max(log_arg, np.e)))


# ---------------------------------------------------------------------------
# plug-in saddle solve


@dataclass(frozen=True)
class PluginMoments:
    """Least-squares moments of a dataset: C = mean phi phi^T,
    a = mean phi r, G = mean phi e_{s'}^T, rho_hat empirical."""

    c_mat: np.ndarray
    a_vec: np.ndarray
    g_mat: np.ndarray
    rho_hat: np.ndarray
    c_ridge: float


def plugin_moments(dataset: Dataset, spec: LinearMdpSpec, ridge: float = RIDGE_DEFAULT) -> PluginMoments:
    w = dataset.weight_vector()
    phi_rows = spec.features[dataset.sa_indices(spec)]
    C = phi_rows.T @ (w[:, None] * phi_rows)
    C = 0.5 * (C + C.T)
    a = phi_rows.T @ (w * dataset.r)
    G = np.zeros((spec.feature_dim, spec.num_states))
    np.add.at(G.T, dataset.s_next, (w[:, None] * phi_rows))
    rho_hat = np.bincount(dataset.s0, weights=w, minlength=spec.num_states)
    applied = 0.0
    if float(np.linalg.eigvalsh(C)[0]) < EIG_FLOOR:
        C = C + ridge * np.eye(spec.feature_dim)
        applied = ridge
    return PluginMoments(c_mat=C, a_vec=a, g_mat=G, rho_hat=rho_hat, c_ridge=applied)


def exact_saddle_solve(
    dataset: Dataset,
    sigma: CovarianceEstimate,
    spec: LinearMdpSpec,
    lam: float,
    tol: float = 1e-9,
    warm_start=None,
) -> Solution:
    """Solve the empirical saddle problem in closed reduction.

    Minimizing the empirical Lagrangian over unconstrained (g, omega) forces
    nu = Sigma C^{-1} Phi^T d and the plug-in flow constraint
    B d = rho_hat + gamma G^T C^{-1} Phi^T d; what remains is the quadratic
    program max_d d^T Phi theta_hat - (lam/2)||Phi_tilde^T d||^2 over that
    flow set, with Phi_tilde = Phi C^{-1} Sigma. With exact enumeration
    weights and exact Sigma this is identically the population program.
    """
    mom = plugin_moments(dataset, spec)
    X = np.linalg.solve(mom.c_mat, sigma.sigma)  # C^{-1} Sigma
    phi_t = spec.features @ X
    theta_t = np.linalg.solve(sigma.sigma, mom.a_vec)
    mu_t = np.linalg.solve(sigma.sigma, mom.g_mat).T  # G^T Sigma^{-1}
    return solve_flow_program(
        phi_t,
        theta_t,
        mu_t,
        mom.rho_hat,
        spec.discount,
        lam,
        tol=tol,
        gap_tol=max(tol * 10, 1e-9),
        warm_start=warm_start,
        num_states=spec.num_states,
        num_actions=spec.num_actions,
    )


# ---------------------------------------------------------------------------
# Algorithm-2 loop


def _normalize_schedule(m_schedule, max_rounds: int):
    if m_schedule is None or (isinstance(m_schedule, str) and m_schedule == "exact"):
        return [None] * max_rounds
    if isinstance(m_schedule, (int, np.integer)):
        return [int(m_schedule)] * max_rounds
    out = []
    for entry in m_schedule:
        if entry is None or (isinstance(entry, str) and entry == "exact"):
            out.append(None)
        else:
            out.append(int(entry))
    if len(out) < max_rounds:
        out = out + [out[-1]] * (max_rounds - len(out))
    return out[:max_rounds]


def run_finite_sample_retraining(
    response: ResponseMap,
    spec: LinearMdpSpec,
    lam: float,
    m_schedule,
    max_rounds: int,
    seed: int,
    solver: str = "exact-saddle",
    sigma_mode: str = "exact",
    ridge: float = RIDGE_DEFAULT,
    pd_config=None,
    stop_delta: float = 0.0,
    solver_tol: float = 1e-9,
    d0=None,
    d_ref=None,
    compute_gap: bool = False,
    noise_half_width: float = 0.0,
    on_round=None,
) -> RetrainTrace:
    """Repeated optimization from sampled data.

    Per round: apply the response to the previous occupancy, deploy the
    induced policy, sample m_t tuples from its occupancy in the responded
    model, build Sigma_t, solve the empirical saddle problem, and take the
    new occupancy from its solution. m_schedule entries may be None, which
    substitutes exact enumeration weights (the infinite-sample surrogate).
    """
    if solver not in ("exact-saddle", "primal-dual"):
        raise ValueError(f"unknown solver {solver!r}")
    if sigma_mode not in ("exact", "estimated"):
        raise ValueError(f"unknown sigma mode {sigma_mode!r}")
    if solver == "primal-dual":
        from . import primal_dual  # local import keeps module load cheap

        if pd_config is None:
            raise ValueError("primal-dual solver needs a PdConfig")
    schedule = _normalize_schedule(m_schedule, max_rounds)
    if d0 is None:
        d_prev = occupancy_from_policy(uniform_policy(spec), response.base_params, spec)
    else:
        d_prev = np.asarray(d0, dtype=float).ravel().copy()
    rounds = []
    converged = False
    for t in range(1, max_rounds + 1):
        t0 = time.perf_counter()
        try:
            params_t = response.apply(d_prev, spec)
            pi_t = policy_from_occupancy(d_prev, spec)
            d_deploy = occupancy_from_policy(pi_t, params_t, spec)
            m_t = schedule[t - 1]
            if m_t is None:
                dataset = enumerate_dataset(d_deploy, params_t, spec, round_index=t)
            else:
                dataset = sample_dataset(
                    d_deploy, params_t, spec, m_t, seed, round_index=t,
                    noise_half_width=noise_half_width,
                )
            if sigma_mode == "exact":
                cov = expected_covariance(d_deploy, spec, ridge)
            else:
                cov = estimate_covariance(dataset, spec, ridge)
            if solver == "exact-saddle":
                sol = exact_saddle_solve(dataset, cov, spec, lam, tol=solver_tol, warm_start=d_prev)
                d_t = sol.d
            else:
                pd_res = primal_dual.run_offline_primal_dual(
                    dataset, cov, spec, replace(pd_config, lam=lam), seed, round_index=t
                )
                d_t = occupancy_from_policy(pd_res.selected_policy, params_t, spec)
        except Exception as exc:
            if isinstance(exc, RetrainRoundError):
                raise
            raise RetrainRoundError(t, f"round {t} failed: {exc}") from exc
        step = float(np.linalg.norm(d_t - d_prev))
        nu_t = spec.features.T @ d_t
        reg_obj = float(d_t @ (spec.features @ params_t.theta) - 0.5 * lam * nu_t @ nu_t)
        gap_val = None
        if compute_gap:
            gap_val = stability_gap(d_t, response, spec, lam).regularized
        record = TraceRound(
            round=t,
            d=d_t,
            step_norm=step,
            dist_to_ref=float(np.linalg.norm(d_t - d_ref)) if d_ref is not None else None,
            reg_objective=reg_obj,
            perf_value=performative_value(d_t, response, spec),
            stability_gap=gap_val,
            wall_clock_ms=(time.perf_counter() - t0) * 1e3,
            rng_digest=rng.stream_digest(seed, "retrain-finite", t),
        )
        rounds.append(record)
        if on_round is not None:
            on_round(record)
        d_prev = d_t
        if stop_delta > 0 and step <= stop_delta:
            converged = True
            break
    return RetrainTrace(rounds=rounds, converged=converged)
