"""Repeated regularized retraining and its convergence certificates.

The retraining loop alternates "deploy d, let the environment respond, solve
the regularized problem in the responded model". When the response is
(eps_theta, eps_mu)-sensitive and the regularization is strong enough, the
loop is a contraction in d and converges linearly to the unique
performatively stable occupancy. certify() evaluates that condition:

    alpha       = sqrt(big_m) / (sqrt(A) (1 - gamma))
    lambda_min  = 25 (eps_theta + alpha gamma sqrt(D) eps_mu) / (8 sqrt(kappa))
    eps_mu_max  = 2 sqrt(kappa) / (25 gamma alpha^2)
    beta        = (eps_theta + alpha gamma sqrt(D) eps_mu) / (lam sqrt(kappa))
                  + 4 gamma eps_mu alpha^2 / sqrt(kappa)
    rate        = (5/4) sqrt(beta)

Contraction is certified only when lam > lambda_min and eps_mu < eps_mu_max;
the rate formula can fall below 1 outside that region, but the guarantee
behind it does not apply there, so no certificate is issued.

Also here: the stability gap of an occupancy (how suboptimal it is against
the model it provokes), closed-form suboptimality bounds for the stable
point, and a small brute-force search for the performative optimum used to
validate those bounds at desk scale.
"""

import itertools
import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import rng
from .errors import KappaZeroError, SizeLimitError
from .mdp import (
    LinearMdpSpec,
    MdpParams,
    occupancy_from_policy,
    performative_value,
    policy_from_occupancy,
    uniform_policy,
)
from .responses import ResponseMap
from .solver import Solution, solve_regularized, spectral_constants


@dataclass(frozen=True)
class Certificate:
    """Contraction certificate for retraining at a given (response, lam)."""

    kappa: float
    big_m: float
    alpha: float
    eps_theta: float
    eps_mu: float
    lam: float
    lambda_min: float
    eps_mu_max: float
    beta: float
    rate: float
    contraction: bool
    one_minus_gamma: float

    def iterations_to(self, delta: float) -> int:
        """Rounds guaranteed to bring ||d_t - d_S|| below delta.

        ceil(ln(2 / (delta (1 - gamma))) / ln(1 / rate)); the numerator uses
        the worst-case starting distance 2/(1-gamma) between occupancies.
        Only meaningful under a certified contraction.
        """
        if not self.contraction:
            raise ValueError("no contraction certified, iteration count undefined")
        if delta <= 0:
            raise ValueError("delta must be positive")
        if self.rate == 0.0:
            return 1  # one exact resolve lands on the stable point
        need = np.log(2.0 / (delta * self.one_minus_gamma)) / np.log(1.0 / self.rate)
        return max(0, int(np.ceil(need)))


def certify(
    spec: LinearMdpSpec,
    params: MdpParams,
    eps_theta: float,
    eps_mu: float,
    lam: float,
) -> Certificate:
    """Evaluate the contraction condition for retraining at level lam."""
    consts = spectral_constants(spec, params)
    if consts.kappa <= 0.0:
        raise KappaZeroError(
            "kappa = 0: features do not span R^{SA}, contraction constants undefined"
        )
    gamma = spec.discount
    root_k = np.sqrt(consts.kappa)
    root_d = np.sqrt(spec.feature_dim)
    alpha = consts.alpha
    drift = eps_theta + alpha * gamma * root_d * eps_mu
    lambda_min = 25.0 * drift / (8.0 * root_k)
    if gamma > 0:
        eps_mu_max = 2.0 * root_k / (25.0 * gamma * alpha**2)
    else:
        eps_mu_max = np.inf
    beta = drift / (lam * root_k) + 4.0 * gamma * eps_mu * alpha**2 / root_k
    rate = 1.25 * np.sqrt(beta)
    contraction = (lam > lambda_min) and (eps_mu < eps_mu_max)
    return Certificate(
        kappa=consts.kappa,
        big_m=consts.big_m,
        alpha=alpha,
        eps_theta=float(eps_theta),
        eps_mu=float(eps_mu),
        lam=float(lam),
        lambda_min=float(lambda_min),
        eps_mu_max=float(eps_mu_max),
        beta=float(beta),
        rate=float(rate),
        contraction=bool(contraction),
        one_minus_gamma=1.0 - gamma,
    )


def auto_lambda(spec: LinearMdpSpec, params: MdpParams, eps_theta: float, eps_mu: float) -> float:
    """Default regularization level: 25% above the contraction threshold."""
    probe = certify(spec, params, eps_theta, eps_mu, lam=1.0)
    return 1.25 * probe.lambda_min


# ---------------------------------------------------------------------------
# retraining loop


@dataclass
class TraceRound:
    round: int
    d: np.ndarray
    step_norm: float
    dist_to_ref: Optional[float]
    reg_objective: float
    perf_value: float
    stability_gap: Optional[float]
    wall_clock_ms: float
    rng_digest: str


@dataclass
class RetrainTrace:
    rounds: list
    converged: bool

    @property
    def final_d(self) -> np.ndarray:
        return self.rounds[-1].d

    @property
    def step_norms(self) -> np.ndarray:
        return np.array([r.step_norm for r in self.rounds])


def run_repeated_optimization(
    response: ResponseMap,
    spec: LinearMdpSpec,
    lam: float,
    max_rounds: int,
    stop_delta: float = 0.0,
    d0: Optional[np.ndarray] = None,
    seed: int = 0,
    solver_tol: float = 1e-10,
    d_ref: Optional[np.ndarray] = None,
    compute_gap: bool = False,
    on_round: Optional[Callable[[TraceRound], None]] = None,
    stream_label: str = "retrain-exact",
) -> RetrainTrace:
    """Deploy / respond / re-solve until the iterates settle.

    Each round t applies the response to the previous occupancy, solves the
    regularized problem exactly in the responded model (warm-started from the
    previous occupancy) and records the step. Stops early once
    ||d_t - d_{t-1}||_2 <= stop_delta when stop_delta > 0. The loop itself
    draws no randomness; the per-round rng digest identifies the stream a
    sampling variant would use, so exact and finite-sample traces line up.
    """
    if max_rounds < 1:
        raise ValueError("max_rounds must be at least 1")
    if d0 is None:
        d_prev = occupancy_from_policy(uniform_policy(spec), response.base_params, spec)
    else:
        d_prev = np.asarray(d0, dtype=float).ravel().copy()
    rounds = []
    converged = False
    for t in range(1, max_rounds + 1):
        t0 = time.perf_counter()
        params_t = response.apply(d_prev, spec)
        sol = solve_regularized(
            params_t, spec, lam, tol=solver_tol, gap_tol=max(solver_tol * 10, 1e-10),
            warm_start=d_prev,
        )
        d_t = sol.d
        step = float(np.linalg.norm(d_t - d_prev))
        gap_val = None
        if compute_gap:
            gap_val = stability_gap(d_t, response, spec, lam, solver_tol=solver_tol).regularized
        record = TraceRound(
            round=t,
            d=d_t,
            step_norm=step,
            dist_to_ref=float(np.linalg.norm(d_t - d_ref)) if d_ref is not None else None,
            reg_objective=sol.primal_objective,
            perf_value=performative_value(d_t, response, spec),
            stability_gap=gap_val,
            wall_clock_ms=(time.perf_counter() - t0) * 1e3,
            rng_digest=rng.stream_digest(seed, stream_label, t),
        )
        rounds.append(record)
        if on_round is not None:
            on_round(record)
        d_prev = d_t
        if stop_delta > 0 and step <= stop_delta:
            converged = True
            break
    return RetrainTrace(rounds=rounds, converged=converged)


# ---------------------------------------------------------------------------
# stability gap and suboptimality bounds


@dataclass(frozen=True)
class StabilityGapReport:
    """Suboptimality of d against the model it provokes.

    regularized   gap in the retraining objective (zero at the stable point)
    unregularized gap in plain expected return (what the stable-point
                  suboptimality bound controls)
    """

    regularized: float
    unregularized: float


LP_LAMBDA = 1e-9  # effectively unregularized solve used for the linear gap


def stability_gap(
    d,
    response: ResponseMap,
    spec: LinearMdpSpec,
    lam: float,
    solver_tol: float = 1e-10,
) -> StabilityGapReport:
    d = np.asarray(d, dtype=float).ravel()
    params = response.apply(d, spec)
    phi = spec.features
    c = phi @ params.theta

    def reg_value(x):
        nu = phi.T @ x
        return float(c @ x - 0.5 * lam * nu @ nu)

    best_reg = solve_regularized(
        params, spec, lam, tol=solver_tol, gap_tol=max(solver_tol * 10, 1e-10), warm_start=d
    )
    gap_reg = best_reg.primal_objective - reg_value(d)

    best_lp = solve_regularized(
        params, spec, LP_LAMBDA, tol=min(solver_tol, 1e-9), gap_tol=1e-9, warm_start=d
    )
    gap_lin = float(c @ best_lp.d) - float(c @ d)
    return StabilityGapReport(regularized=float(gap_reg), unregularized=float(gap_lin))


def theorem2_bound(spec: LinearMdpSpec, eps_theta: float, eps_mu: float) -> float:
    """Suboptimality of the stable point at the threshold regularization:
    25 M (eps_theta + alpha gamma sqrt(D) eps_mu) / (16 sqrt(kappa) (1-gamma)^2).
    """
    sv = np.linalg.svd(spec.features, compute_uv=False)
    n = spec.features.shape[0]
    big_m = float(sv[0] ** 2)
    kappa = float(sv[-1] ** 2) if spec.feature_dim >= n else 0.0
    if kappa <= 0:
        raise KappaZeroError("kappa = 0: suboptimality bound undefined")
    gamma = spec.discount
    alpha = np.sqrt(big_m) / (np.sqrt(spec.num_actions) * (1.0 - gamma))
    drift = eps_theta + alpha * gamma * np.sqrt(spec.feature_dim) * eps_mu
    return float(25.0 * big_m * drift / (16.0 * np.sqrt(kappa) * (1.0 - gamma) ** 2))


@dataclass(frozen=True)
class PerformativeOptimalityBound:
    """Pieces of the stable-vs-optimal comparison.

    delta       sensitivity aggregate
                3 gamma eps_mu M sqrt(D) / (1-gamma)^2 + eps_theta sqrt(M)
    lambda0     contraction threshold for the same sensitivities
    lam_choice  regularization level the bound is proved at
    bound       guaranteed cap on V(d_PO) - V(d_S)
    """

    delta: float
    lambda0: float
    lam_choice: float
    bound: float


def theorem3_bound(spec: LinearMdpSpec, eps_theta: float, eps_mu: float) -> PerformativeOptimalityBound:
    sv = np.linalg.svd(spec.features, compute_uv=False)
    n = spec.features.shape[0]
    big_m = float(sv[0] ** 2)
    kappa = float(sv[-1] ** 2) if spec.feature_dim >= n else 0.0
    if kappa <= 0:
        raise KappaZeroError("kappa = 0: optimality bound undefined")
    gamma = spec.discount
    horizon_sq = 1.0 / (1.0 - gamma) ** 2
    alpha = np.sqrt(big_m) / (np.sqrt(spec.num_actions) * (1.0 - gamma))
    root_d = np.sqrt(spec.feature_dim)
    delta = 3.0 * gamma * eps_mu * big_m * root_d * horizon_sq + eps_theta * np.sqrt(big_m)
    lambda0 = 25.0 * (eps_theta + alpha * gamma * root_d * eps_mu) / (8.0 * np.sqrt(kappa))
    s1 = 4.0 * delta * (1.0 + delta) / kappa
    s2 = big_m * horizon_sq
    lam_choice = max(np.sqrt(s1 / s2) if s2 > 0 else 0.0, lambda0)
    bound = 4.0 * np.sqrt((1.0 + delta) * delta / kappa * big_m * horizon_sq) + lambda0 * big_m * horizon_sq
    return PerformativeOptimalityBound(
        delta=float(delta),
        lambda0=float(lambda0),
        lam_choice=float(lam_choice),
        bound=float(bound),
    )


# ---------------------------------------------------------------------------
# brute-force performative optimum


def self_consistent_occupancy(
    policy,
    response: ResponseMap,
    spec: LinearMdpSpec,
    max_iters: int = 500,
    tol: float = 1e-12,
):
    """Fixed point of d = occupancy(policy, response(d)), or None.

    Starts from the policy's occupancy under the response's base parameters
    and iterates; switches to averaged (damped) updates permanently the
    first time a step fails to shrink. Returns None when no fixed point is
    reached within max_iters.
    """
    d = occupancy_from_policy(policy, response.base_params, spec)
    damped = False
    last_step = np.inf
    for _ in range(max_iters):
        params = response.apply(d, spec)
        d_new = occupancy_from_policy(policy, params, spec)
        if damped:
            d_new = 0.5 * (d_new + d)
        step = float(np.abs(d_new - d).max(initial=0.0))
        if step > last_step and not damped:
            damped = True
        last_step = step
        d = d_new
        if step <= tol:
            return d
    return None


@dataclass(frozen=True)
class BruteForceResult:
    d: np.ndarray
    value: float
    num_policies: int
    num_diverged: int


def _simplex_grid(num_actions: int, resolution: float):
    n = int(round(1.0 / resolution))
    for comp in itertools.combinations(range(n + num_actions - 1), num_actions - 1):
        prev = -1
        parts = []
        for c in comp:
            parts.append(c - prev - 1)
            prev = c
        parts.append(n + num_actions - 2 - prev)
        yield np.array(parts, dtype=float) / n


def brute_force_performative_optimum(
    response: ResponseMap,
    spec: LinearMdpSpec,
    grid_resolution: float = 0.05,
    max_fp_iters: int = 500,
    fp_tol: float = 1e-12,
) -> BruteForceResult:
    """Grid search over deterministic-ish policies for the best fixed point.

    Enumerates every product of per-state simplex grid points (spacing
    grid_resolution), finds each policy's self-consistent occupancy, and
    keeps the best performative value. The search provably underestimates
    the true optimum by at most the grid granularity effects, so it is used
    as the d_PO surrogate on desk-scale instances. Refuses instances with
    S*A > 6 and grids finer than 0.05; both blow up combinatorially.
    """
    if spec.num_pairs > 6:
        raise SizeLimitError(f"brute force limited to S*A <= 6, got {spec.num_pairs}")
    if grid_resolution < 0.05 - 1e-12:
        raise SizeLimitError(f"grid resolution {grid_resolution:g} finer than 0.05 refused")
    rows = list(_simplex_grid(spec.num_actions, grid_resolution))
    best_d = None
    best_val = -np.inf
    n_div = 0
    count = 0
    for combo in itertools.product(rows, repeat=spec.num_states):
        count += 1
        policy = np.vstack(combo)
        d_fp = self_consistent_occupancy(policy, response, spec, max_fp_iters, fp_tol)
        if d_fp is None:
            n_div += 1
            continue
        params = response.apply(d_fp, spec)
        val = float(d_fp @ (spec.features @ params.theta))
        if val > best_val:
            best_val = val
            best_d = d_fp
    if best_d is None:
        raise SizeLimitError("no grid policy produced a convergent fixed point")
    return BruteForceResult(d=best_d, value=best_val, num_policies=count, num_diverged=n_div)
