"""Linear MDP model: feature map, parameter factorization, occupancy algebra.

A model is split into a fixed design (state/action counts, discount, start
distribution, feature matrix) and movable parameters (theta, mu) with

    r(s, a)      = phi(s, a)^T theta
    P(s' | s, a) = mu(s')^T phi(s, a)

State-action pairs are flattened s-major: row s * A + a of the feature matrix
is phi(s, a). Occupancy measures d live in R^{SA}, satisfy d >= 0 and the flow
constraint B d = rho + gamma * mu Phi^T d, and sum to 1 / (1 - gamma).

Validation is two-tier. Constructors reject only structural garbage (shape
mismatches, discount >= 1, feature rows longer than 1). Soft conditions such
as start-distribution mass or feature rank are reported by validate_spec /
validate_params as message lists so that a partially bad instance can still be
inspected.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidKernelError, SingularSystemError

# Tolerances used across the occupancy algebra. Kernel columns may deviate
# from the simplex by KERNEL_TOL before reconstruction refuses to renormalize;
# occupancy rows with mass below POLICY_MASS_FLOOR get the uniform policy.
KERNEL_TOL = 1e-9
POLICY_MASS_FLOOR = 1e-12
FLOW_TOL = 1e-10
RANK_CUTOFF = 1e-10


def _readonly(arr) -> np.ndarray:
    out = np.array(arr, dtype=float, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class LinearMdpSpec:
    """Fixed part of a linear MDP.

    features has shape (num_states * num_actions, feature_dim); every row must
    have Euclidean norm at most 1. start_dist is not forced onto the simplex
    here; validate_spec reports violations instead.
    """

    num_states: int
    num_actions: int
    discount: float
    start_dist: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        S, A = int(self.num_states), int(self.num_actions)
        if S < 1 or A < 1:
            raise ValueError(f"need at least one state and one action, got S={S} A={A}")
        g = float(self.discount)
        if not (0.0 <= g < 1.0):
            raise ValueError(f"discount must lie in [0, 1), got {g!r}")
        rho = _readonly(self.start_dist).ravel()
        phi = _readonly(self.features)
        if rho.shape != (S,):
            raise ValueError(f"start_dist has shape {rho.shape}, expected ({S},)")
        if phi.ndim != 2 or phi.shape[0] != S * A:
            raise ValueError(
                f"features has shape {phi.shape}, expected ({S * A}, feature_dim)"
            )
        norms = np.linalg.norm(phi, axis=1)
        worst = float(norms.max(initial=0.0))
        if worst > 1.0 + 1e-12:
            raise ValueError(f"feature rows must have norm <= 1, max is {worst:g}")
        object.__setattr__(self, "num_states", S)
        object.__setattr__(self, "num_actions", A)
        object.__setattr__(self, "discount", g)
        object.__setattr__(self, "start_dist", rho)
        object.__setattr__(self, "features", phi)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def num_pairs(self) -> int:
        return self.num_states * self.num_actions

    def pair_index(self, s: int, a: int) -> int:
        return s * self.num_actions + a


@dataclass(frozen=True)
class MdpParams:
    """Movable parameters (theta, mu) of a linear MDP.

    theta has shape (feature_dim,), mu has shape (num_states, feature_dim).
    Norm and kernel conditions are checked by validate_params, not here.
    """

    theta: np.ndarray
    mu: np.ndarray

    def __post_init__(self):
        theta = _readonly(self.theta).ravel()
        mu = _readonly(self.mu)
        if mu.ndim != 2:
            raise ValueError(f"mu must be 2-D (num_states, feature_dim), got ndim={mu.ndim}")
        if mu.shape[1] != theta.shape[0]:
            raise ValueError(
                f"theta dim {theta.shape[0]} does not match mu columns {mu.shape[1]}"
            )
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "mu", mu)


def validate_spec(spec: LinearMdpSpec) -> list[str]:
    """Report soft violations of the design conditions as messages.

    An empty list means the spec is clean. Feature rank is checked via
    singular values above RANK_CUTOFF relative to the largest.
    """
    msgs = []
    rho = spec.start_dist
    if np.any(rho < 0):
        bad = int(np.argmin(rho))
        msgs.append(f"start_dist has negative entry {rho[bad]:g} at state {bad}")
    total = float(rho.sum())
    if abs(total - 1.0) > 1e-12:
        msgs.append(f"start_dist sums to {total:g}")
    sv = np.linalg.svd(spec.features, compute_uv=False)
    cutoff = RANK_CUTOFF * (sv[0] if sv.size else 1.0)
    rank = int(np.count_nonzero(sv > cutoff))
    if rank < spec.feature_dim:
        msgs.append(
            f"features have rank {rank}, below feature_dim {spec.feature_dim}"
        )
    return msgs


def validate_params(params: MdpParams, spec: LinearMdpSpec) -> list[str]:
    """Report norm-bound and kernel violations of (theta, mu) under spec."""
    msgs = []
    D = spec.feature_dim
    if params.theta.shape != (D,):
        msgs.append(f"theta has shape {params.theta.shape}, expected ({D},)")
        return msgs
    if params.mu.shape != (spec.num_states, D):
        msgs.append(f"mu has shape {params.mu.shape}, expected ({spec.num_states}, {D})")
        return msgs
    root_d = np.sqrt(D)
    tn = float(np.linalg.norm(params.theta))
    if tn > root_d + KERNEL_TOL:
        msgs.append(f"theta norm {tn:g} exceeds sqrt(feature_dim) = {root_d:g}")
    mn = float(np.linalg.norm(params.mu))
    if mn > root_d + KERNEL_TOL:
        msgs.append(f"mu Frobenius norm {mn:g} exceeds sqrt(feature_dim) = {root_d:g}")
    kernel = params.mu @ spec.features.T
    low = float(kernel.min(initial=0.0))
    if low < -KERNEL_TOL:
        msgs.append(f"kernel mu Phi^T has negative entry {low:g}")
    sums = kernel.sum(axis=0)
    worst = float(np.abs(sums - 1.0).max(initial=0.0))
    if worst > KERNEL_TOL:
        msgs.append(f"kernel columns deviate from mass 1 by up to {worst:g}")
    return msgs


def constraint_matrix(spec: LinearMdpSpec) -> np.ndarray:
    """B in R^{S x SA} with (B d)(s) = sum_a d(s, a)."""
    return np.kron(np.eye(spec.num_states), np.ones((1, spec.num_actions)))


def reconstruct_dynamics(params: MdpParams, spec: LinearMdpSpec):
    """Materialize (r, P) from (theta, mu).

    Returns r of shape (SA,) and P of shape (S, SA) whose column (s, a) is the
    next-state distribution. Columns off the simplex by at most KERNEL_TOL are
    renormalized (clip negatives, rescale mass); larger deviations raise
    InvalidKernelError.
    """
    r = spec.features @ params.theta
    P = params.mu @ spec.features.T
    low = float(P.min(initial=0.0))
    if low < -KERNEL_TOL:
        raise InvalidKernelError(f"kernel entry {low:g} below -{KERNEL_TOL:g}")
    sums = P.sum(axis=0)
    dev = float(np.abs(sums - 1.0).max(initial=0.0))
    if dev > KERNEL_TOL:
        raise InvalidKernelError(f"kernel column mass off by {dev:g}, tolerance {KERNEL_TOL:g}")
    P = np.clip(P, 0.0, None)
    P = P / P.sum(axis=0, keepdims=True)
    return r, P


def policy_from_occupancy(d, spec: LinearMdpSpec) -> np.ndarray:
    """Conditional policy pi(a | s) = d(s, a) / sum_b d(s, b).

    States with occupancy mass at or below POLICY_MASS_FLOOR get the uniform
    row; there the occupancy carries no information. Entries of d in
    [-KERNEL_TOL, 0) are treated as zero, anything more negative is an error.
    """
    d = np.asarray(d, dtype=float).ravel()
    S, A = spec.num_states, spec.num_actions
    if d.shape != (S * A,):
        raise ValueError(f"occupancy has shape {d.shape}, expected ({S * A},)")
    low = float(d.min(initial=0.0))
    if low < -KERNEL_TOL:
        raise ValueError(f"occupancy entry {low:g} below -{KERNEL_TOL:g}")
    table = np.clip(d, 0.0, None).reshape(S, A)
    mass = table.sum(axis=1)
    pi = np.full((S, A), 1.0 / A)
    live = mass > POLICY_MASS_FLOOR
    pi[live] = table[live] / mass[live, None]
    return pi


def policy_matrix(policy, spec: LinearMdpSpec) -> np.ndarray:
    """Pi in R^{SA x S} with Pi[s * A + a, s] = pi(a | s), zero elsewhere."""
    pi = np.asarray(policy, dtype=float)
    S, A = spec.num_states, spec.num_actions
    if pi.shape != (S, A):
        raise ValueError(f"policy has shape {pi.shape}, expected ({S}, {A})")
    out = np.zeros((S * A, S))
    for s in range(S):
        out[s * A : (s + 1) * A, s] = pi[s]
    return out


def uniform_policy(spec: LinearMdpSpec) -> np.ndarray:
    return np.full((spec.num_states, spec.num_actions), 1.0 / spec.num_actions)


def occupancy_from_policy(policy, params: MdpParams, spec: LinearMdpSpec) -> np.ndarray:
    """Discounted occupancy induced by a policy in the model (theta, mu).

    Solves (I - gamma Pi mu Phi^T) d = Pi rho. For gamma < 1 and a valid
    kernel the system is regular and the solution is nonnegative; failure of
    either signals broken params and raises SingularSystemError.
    """
    _, P = reconstruct_dynamics(params, spec)
    Pi = policy_matrix(policy, spec)
    n = spec.num_pairs
    M = np.eye(n) - spec.discount * (Pi @ P)
    rhs = Pi @ spec.start_dist
    try:
        d = np.linalg.solve(M, rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(f"occupancy system is singular: {exc}") from exc
    resid = float(np.abs(M @ d - rhs).max(initial=0.0))
    if resid > FLOW_TOL:
        raise SingularSystemError(f"occupancy solve residual {resid:g} above {FLOW_TOL:g}")
    low = float(d.min(initial=0.0))
    if low < -KERNEL_TOL:
        raise SingularSystemError(f"occupancy solve produced entry {low:g}")
    return np.clip(d, 0.0, None)


def bellman_flow_residual(d, params: MdpParams, spec: LinearMdpSpec) -> np.ndarray:
    """B d - rho - gamma mu Phi^T d, one entry per state. Pure diagnostic."""
    d = np.asarray(d, dtype=float).ravel()
    B = constraint_matrix(spec)
    flow_in = (params.mu @ spec.features.T) @ d
    return B @ d - spec.start_dist - spec.discount * flow_in


def value_of_policy(policy, params: MdpParams, spec: LinearMdpSpec) -> float:
    """Discounted return rho^T V^pi, computed as d_pi^T Phi theta."""
    d = occupancy_from_policy(policy, params, spec)
    return float(d @ (spec.features @ params.theta))


def performative_value(d, response, spec: LinearMdpSpec) -> float:
    """Value of the policy extracted from d, in the environment d provokes.

    This is the quantity whose maximizer is the performatively optimal
    occupancy: deploying d moves the model to response(d), and the deployed
    policy is then evaluated inside that moved model.
    """
    pi = policy_from_occupancy(d, spec)
    params = response.apply(d, spec)
    return value_of_policy(pi, params, spec)
