"""Environment response maps: how deployment moves the model.

A response map sends an occupancy measure d to new parameters (theta_d, mu_d)
and declares sensitivity levels eps_theta, eps_mu that bound how fast the
parameters move:

    ||theta_d - theta_d'||_2  <=  eps_theta * ||d - d'||_2
    ||mu_d    - mu_d'   ||_F  <=  eps_mu    * ||d - d'||_2

Four kinds are supported.

constant         parameters never move; declared sensitivities are zero.
affine           theta(d) = theta0 + eps_theta * A_theta d, and mu(d) is
                 mu0 plus eps_mu times (A_mu d) reshaped to (S, D). Payload
                 operators have norm at most 1, so the declared levels are
                 exact Lipschitz bounds; outputs are pushed back into the
                 valid parameter set by project_params.
policy-factored  d is first reduced to its policy and re-expanded to the
                 canonical occupancy of that policy under the base params,
                 then the affine rule is applied. Two occupancies inducing
                 the same policy therefore produce identical parameters.
stackelberg      parameters come from a follower best-response computation;
                 built in perfmdp.stackelberg, carried here as a callable.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import formats
from .errors import ProjectionInfeasibleError
from .mdp import (
    KERNEL_TOL,
    LinearMdpSpec,
    MdpParams,
    occupancy_from_policy,
    policy_from_occupancy,
    validate_params,
)

KINDS = ("constant", "affine", "policy-factored", "stackelberg")
REFIT_TOL = 1e-6


@dataclass(frozen=True)
class ResponseMap:
    """Deterministic map d -> MdpParams with declared sensitivity levels.

    a_theta is (D, SA) and a_mu is (S * D, SA), both None for the constant
    kind. meta carries informational flags (e.g. whether declared levels are
    exact or a certified over-estimate) and never affects apply().
    """

    kind: str
    base_params: MdpParams
    eps_theta: float
    eps_mu: float
    a_theta: Optional[np.ndarray] = None
    a_mu: Optional[np.ndarray] = None
    custom_apply: Optional[Callable] = field(default=None, compare=False, repr=False)
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown response kind {self.kind!r}, expected one of {KINDS}")
        if self.eps_theta < 0 or self.eps_mu < 0:
            raise ValueError("sensitivity levels must be nonnegative")
        for name in ("a_theta", "a_mu"):
            arr = getattr(self, name)
            if arr is not None:
                arr = np.array(arr, dtype=float, copy=True)
                norm = float(np.linalg.norm(arr, 2))
                if norm > 1.0 + 1e-12:
                    raise ValueError(f"{name} has operator norm {norm:g}, must be <= 1")
                arr.setflags(write=False)
                object.__setattr__(self, name, arr)
        if self.kind == "stackelberg" and self.custom_apply is None:
            raise ValueError("stackelberg response needs its apply callable")

    def apply(self, d, spec: LinearMdpSpec) -> MdpParams:
        return apply_response(self, d, spec)


def apply_response(rmap: ResponseMap, d, spec: LinearMdpSpec) -> MdpParams:
    """Evaluate the response at occupancy d. Pure function of (map, d)."""
    d = np.asarray(d, dtype=float).ravel()
    if d.shape != (spec.num_pairs,):
        raise ValueError(f"occupancy has shape {d.shape}, expected ({spec.num_pairs},)")
    if rmap.kind == "constant":
        return rmap.base_params
    if rmap.kind == "stackelberg":
        return rmap.custom_apply(d)
    if rmap.kind == "policy-factored":
        pi = policy_from_occupancy(d, spec)
        d = occupancy_from_policy(pi, rmap.base_params, spec)
    base = rmap.base_params
    theta_raw = base.theta.copy()
    if rmap.a_theta is not None and rmap.eps_theta > 0:
        theta_raw = theta_raw + rmap.eps_theta * (rmap.a_theta @ d)
    mu_raw = base.mu.copy()
    if rmap.a_mu is not None and rmap.eps_mu > 0:
        mu_raw = mu_raw + rmap.eps_mu * (rmap.a_mu @ d).reshape(base.mu.shape)
    return project_params(theta_raw, mu_raw, spec)


@dataclass(frozen=True)
class MeasuredSensitivity:
    theta_ratio_max: float
    mu_ratio_max: float
    num_pairs: int


def measure_sensitivity(rmap: ResponseMap, probes, spec: LinearMdpSpec) -> MeasuredSensitivity:
    """Empirical Lipschitz ratios of the response over probe pairs.

    probes is an iterable of (d, d') occupancy pairs. Pairs with zero
    distance are skipped; if all pairs are degenerate this raises ValueError.
    """
    t_best = 0.0
    m_best = 0.0
    used = 0
    for d, d2 in probes:
        d = np.asarray(d, dtype=float).ravel()
        d2 = np.asarray(d2, dtype=float).ravel()
        dist = float(np.linalg.norm(d - d2))
        if dist == 0.0:
            continue
        p1 = apply_response(rmap, d, spec)
        p2 = apply_response(rmap, d2, spec)
        t_best = max(t_best, float(np.linalg.norm(p1.theta - p2.theta)) / dist)
        m_best = max(m_best, float(np.linalg.norm(p1.mu - p2.mu)) / dist)
        used += 1
    if used == 0:
        raise ValueError("no probe pair with nonzero distance")
    return MeasuredSensitivity(t_best, m_best, used)


def project_to_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection of a vector onto the probability simplex.

    Sort-based algorithm; deterministic including ties.
    """
    v = np.asarray(v, dtype=float).ravel()
    u = np.sort(v)[::-1]
    css = np.cumsum(u)
    idx = np.arange(1, v.size + 1)
    k = np.nonzero(u * idx > (css - 1.0))[0][-1]
    tau = (css[k] - 1.0) / (k + 1.0)
    return np.maximum(v - tau, 0.0)


def project_params(raw_theta, raw_mu, spec: LinearMdpSpec) -> MdpParams:
    """Push raw (theta, mu) into the valid parameter set.

    theta is radially rescaled onto the sqrt(D) ball when too long. The
    kernel mu Phi^T has each column projected onto the simplex, after which
    mu is refit by least squares in the feature span. Already-valid inputs
    are returned unchanged, which makes the projection idempotent. If the
    projected kernel cannot be represented in the span (refit residual above
    REFIT_TOL) or the refit mu breaks its Frobenius bound, the projection is
    infeasible and raises.
    """
    theta = np.asarray(raw_theta, dtype=float).ravel()
    mu = np.asarray(raw_mu, dtype=float)
    root_d = np.sqrt(spec.feature_dim)
    tn = float(np.linalg.norm(theta))
    if tn > root_d:
        theta = theta * (root_d / tn)
    P = mu @ spec.features.T
    sums = P.sum(axis=0)
    kernel_ok = (
        float(P.min(initial=0.0)) >= -KERNEL_TOL
        and float(np.abs(sums - 1.0).max(initial=0.0)) <= KERNEL_TOL
        and float(np.linalg.norm(mu)) <= root_d + KERNEL_TOL
    )
    if kernel_ok:
        return MdpParams(theta, mu)
    P_proj = np.column_stack([project_to_simplex(P[:, j]) for j in range(P.shape[1])])
    pinv_t = np.linalg.pinv(spec.features, rcond=1e-12).T
    mu_new = P_proj @ pinv_t
    resid = float(np.abs(mu_new @ spec.features.T - P_proj).max(initial=0.0))
    if resid > REFIT_TOL:
        raise ProjectionInfeasibleError(
            f"projected kernel leaves the feature span, refit residual {resid:g}"
        )
    mn = float(np.linalg.norm(mu_new))
    if mn > root_d + KERNEL_TOL:
        raise ProjectionInfeasibleError(
            f"refit mu has Frobenius norm {mn:g}, above sqrt(feature_dim) = {root_d:g}"
        )
    return MdpParams(theta, mu_new)


# ---------------------------------------------------------------------------
# builders


def constant_map(base_params: MdpParams) -> ResponseMap:
    return ResponseMap("constant", base_params, 0.0, 0.0)


def affine_map(
    base_params: MdpParams,
    eps_theta: float,
    eps_mu: float,
    a_theta=None,
    a_mu=None,
    policy_factored: bool = False,
) -> ResponseMap:
    kind = "policy-factored" if policy_factored else "affine"
    return ResponseMap(kind, base_params, float(eps_theta), float(eps_mu), a_theta, a_mu)


def feasible_affine_map(
    spec: LinearMdpSpec,
    base_params: MdpParams,
    eps_theta: float,
    eps_mu: float,
    seed: int,
    policy_factored: bool = False,
) -> ResponseMap:
    """Random rank-one affine response that never needs projection.

    The payload directions are drawn from the given seed and scaled so that
    for every occupancy d (whose Euclidean norm is at most 1/(1-gamma)) the
    raw outputs already satisfy the parameter constraints: theta0 is pulled
    inside the sqrt(D) ball by the worst-case excursion, and the kernel
    perturbation has zero column sums and is dominated by the smallest base
    kernel entry. Because projection is then a no-op on the occupancy set,
    the declared sensitivities are attained exactly.

    Requires square full-rank features (the regime where the contraction
    certificate has kappa > 0).
    """
    from .rng import substream

    n, D = spec.features.shape
    if n != D:
        raise ValueError("feasible_affine_map needs square full-rank features")
    gen = substream(seed, "response-payload")
    reach = 1.0 / (1.0 - spec.discount)
    root_d = np.sqrt(D)

    a_theta = None
    theta0 = base_params.theta.copy()
    if eps_theta > 0:
        u = gen.standard_normal(D)
        u /= np.linalg.norm(u)
        v = gen.standard_normal(n)
        v /= np.linalg.norm(v)
        a_theta = np.outer(u, v)
        budget = root_d - eps_theta * reach
        if budget <= 0:
            raise ValueError(
                f"eps_theta {eps_theta:g} too large: excursion {eps_theta * reach:g} "
                f"exceeds the sqrt(D) = {root_d:g} ball"
            )
        tn = float(np.linalg.norm(theta0))
        if tn > budget:
            theta0 = theta0 * (budget / tn)

    a_mu = None
    mu0 = base_params.mu
    if eps_mu > 0:
        S = spec.num_states
        if S < 2:
            raise ValueError("kernel perturbation needs at least two states")
        w = gen.standard_normal(S)
        w -= w.mean()  # zero column sums keep kernel mass exact
        z = gen.standard_normal(n)
        Z = np.outer(w, z)
        G = Z @ np.linalg.inv(spec.features.T)
        G /= np.linalg.norm(G)
        Z = G @ spec.features.T
        P0 = mu0 @ spec.features.T
        p_min = float(P0.min())
        excursion = eps_mu * reach * float(np.abs(Z).max())
        if excursion > p_min:
            raise ValueError(
                f"eps_mu {eps_mu:g} too large: kernel excursion {excursion:g} "
                f"exceeds the smallest base kernel entry {p_min:g}"
            )
        v_mu = gen.standard_normal(n)
        v_mu /= np.linalg.norm(v_mu)
        a_mu = np.outer(G.ravel(), v_mu)

    rmap = affine_map(
        MdpParams(theta0, mu0), eps_theta, eps_mu, a_theta, a_mu, policy_factored
    )
    object.__setattr__(rmap, "meta", {"sensitivity_exact": True})
    return rmap


# ---------------------------------------------------------------------------
# serialization


def save_response_map(rmap: ResponseMap, dirpath, spec: LinearMdpSpec) -> None:
    """Write response.toml plus payload CSVs into dirpath."""
    import os

    if rmap.kind == "stackelberg":
        raise ValueError("stackelberg responses are saved through their game file")
    table = {
        "kind": rmap.kind,
        "eps_theta": float(rmap.eps_theta),
        "eps_mu": float(rmap.eps_mu),
        "theta0_file": "theta0.csv",
        "mu0_file": "mu0.csv",
    }
    formats.save_matrix_csv(os.path.join(dirpath, "theta0.csv"), rmap.base_params.theta, "theta0")
    formats.save_matrix_csv(os.path.join(dirpath, "mu0.csv"), rmap.base_params.mu, "mu0")
    if rmap.a_theta is not None:
        table["a_theta_file"] = "a_theta.csv"
        formats.save_matrix_csv(os.path.join(dirpath, "a_theta.csv"), rmap.a_theta, "a_theta")
    if rmap.a_mu is not None:
        table["a_mu_file"] = "a_mu.csv"
        formats.save_matrix_csv(os.path.join(dirpath, "a_mu.csv"), rmap.a_mu, "a_mu")
    formats.save_toml(os.path.join(dirpath, "response.toml"), {"response": table})


def load_response_map(path, spec: LinearMdpSpec) -> ResponseMap:
    """Read a response map saved by save_response_map (or a game reference).

    path is the response.toml file; payload files are resolved relative to
    its directory.
    """
    import os

    base_dir = os.path.dirname(os.path.abspath(path))
    data = formats.load_toml(path)
    if "response" not in data:
        raise ValueError(f"{path}: missing [response] table")
    table = data["response"]
    kind = table.get("kind")
    if kind == "stackelberg":
        from . import stackelberg

        game = stackelberg.load_game(os.path.join(base_dir, table["game_file"]))
        return stackelberg.stackelberg_response_map(game, spec)
    if kind not in ("constant", "affine", "policy-factored"):
        raise ValueError(f"{path}: unknown response kind {kind!r}")
    theta0, _ = formats.load_vector_csv(os.path.join(base_dir, table["theta0_file"]))
    mu0, _ = formats.load_matrix_csv(os.path.join(base_dir, table["mu0_file"]))
    base = MdpParams(theta0, mu0)
    bad = validate_params(base, spec)
    if bad:
        raise ValueError(f"{path}: invalid base params: " + "; ".join(bad))
    if kind == "constant":
        return constant_map(base)
    a_theta = a_mu = None
    if "a_theta_file" in table:
        a_theta, _ = formats.load_matrix_csv(os.path.join(base_dir, table["a_theta_file"]))
    if "a_mu_file" in table:
        a_mu, _ = formats.load_matrix_csv(os.path.join(base_dir, table["a_mu_file"]))
    return affine_map(
        base,
        float(table.get("eps_theta", 0.0)),
        float(table.get("eps_mu", 0.0)),
        a_theta,
        a_mu,
        policy_factored=(kind == "policy-factored"),
    )
