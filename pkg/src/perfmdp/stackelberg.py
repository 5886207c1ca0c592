"""Two-agent Stackelberg environment as a response map.

A leader (the learner) and a follower share a stochastic game with reward
tensors r1, r2 of shape (S, A1, A2) and kernel P of shape (S, A1, A2, S).
When the leader commits to pi1, the follower faces a single-agent MDP built
by marginalizing the leader's actions, computes its optimal Q function and
plays the softmax (quantal) response with temperature beta. That follower
policy, marginalized back, induces the MDP the leader actually experiences,
so deployments move the leader's environment: a response map.

Sensitivity of the induced MDP to the leader policy is controlled by the
temperature: per-entry reward deviations are bounded by
delta * 2 sqrt(2) beta A1 A2^{3/2} R^2 / (1-gamma)^2 and transition entries
by the same expression with R in place of R^2, where delta is the largest
per-state L1 policy change. Those values (at delta = 1) are what the map
declares as its sensitivity levels; exact for tabular features, marked
heuristic otherwise.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import formats
from .errors import FitResidualError
from .mdp import LinearMdpSpec, MdpParams, occupancy_from_policy, policy_from_occupancy, uniform_policy
from .responses import ResponseMap

VI_TOL = 1e-10
FIT_TOL = 1e-8
SOFTMAX_BETA_MAX = 1e4


def _readonly(arr):
    out = np.array(arr, dtype=float, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class StackelbergGame:
    num_states: int
    num_leader_actions: int
    num_follower_actions: int
    discount: float
    start_dist: np.ndarray
    r1: np.ndarray  # (S, A1, A2)
    r2: np.ndarray  # (S, A1, A2)
    kernel: np.ndarray  # (S, A1, A2, S)
    softmax_beta: float

    def __post_init__(self):
        S, A1, A2 = self.num_states, self.num_leader_actions, self.num_follower_actions
        if not (0.0 <= self.discount < 1.0):
            raise ValueError(f"discount must lie in [0, 1), got {self.discount!r}")
        if not (0.0 <= self.softmax_beta <= SOFTMAX_BETA_MAX):
            raise ValueError(f"softmax_beta must lie in [0, {SOFTMAX_BETA_MAX:g}]")
        rho = _readonly(self.start_dist).ravel()
        r1 = _readonly(self.r1)
        r2 = _readonly(self.r2)
        P = _readonly(self.kernel)
        if rho.shape != (S,):
            raise ValueError(f"start_dist has shape {rho.shape}, expected ({S},)")
        if r1.shape != (S, A1, A2) or r2.shape != (S, A1, A2):
            raise ValueError(f"reward tensors must have shape ({S}, {A1}, {A2})")
        if P.shape != (S, A1, A2, S):
            raise ValueError(f"kernel must have shape ({S}, {A1}, {A2}, {S})")
        if float(P.min()) < -1e-12 or float(np.abs(P.sum(axis=3) - 1.0).max()) > 1e-9:
            raise ValueError("kernel slices must be probability vectors")
        if abs(float(rho.sum()) - 1.0) > 1e-9 or float(rho.min()) < -1e-12:
            raise ValueError("start_dist must be a probability vector")
        object.__setattr__(self, "start_dist", rho)
        object.__setattr__(self, "r1", r1)
        object.__setattr__(self, "r2", r2)
        object.__setattr__(self, "kernel", P)

    @property
    def reward_scale(self) -> float:
        """R = max |r_i| over both agents."""
        return float(max(np.abs(self.r1).max(), np.abs(self.r2).max()))


def build_follower_mdp(game: StackelbergGame, pi1):
    """Marginalize the leader policy out of the follower's view.

    Returns (reward (S, A2), transition (S, A2, S)).
    """
    pi1 = np.asarray(pi1, dtype=float)
    if pi1.shape != (game.num_states, game.num_leader_actions):
        raise ValueError(
            f"leader policy has shape {pi1.shape}, expected "
            f"({game.num_states}, {game.num_leader_actions})"
        )
    r_bar = np.einsum("sa,sab->sb", pi1, game.r2)
    p_bar = np.einsum("sa,sabt->sbt", pi1, game.kernel)
    return r_bar, p_bar


def optimal_q_function(reward, transition, gamma, tol=VI_TOL, max_iters=2_000_000):
    """Optimal Q of a tabular MDP by value iteration to sup-norm tol."""
    reward = np.asarray(reward, dtype=float)
    transition = np.asarray(transition, dtype=float)
    S = reward.shape[0]
    v = np.zeros(S)
    for _ in range(max_iters):
        q = reward + gamma * transition @ v
        v_new = q.max(axis=1)
        err = float(np.abs(v_new - v).max(initial=0.0))
        v = v_new
        if err <= tol:
            return reward + gamma * transition @ v
    raise RuntimeError(f"value iteration did not reach {tol:g} in {max_iters} sweeps")


def softmax_rows(scores, beta: float) -> np.ndarray:
    z = beta * np.asarray(scores, dtype=float)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def follower_softmax_response(reward, transition, beta: float, gamma: float, tol=VI_TOL) -> np.ndarray:
    """Quantal response: softmax with temperature beta of the optimal Q."""
    if beta == 0.0:
        S, A2 = np.asarray(reward).shape
        return np.full((S, A2), 1.0 / A2)
    q = optimal_q_function(reward, transition, gamma, tol)
    return softmax_rows(q, beta)


def induced_leader_mdp(game: StackelbergGame, pi2):
    """MDP the leader faces once the follower plays pi2.

    Returns (reward (S, A1), transition (S, A1, S)).
    """
    pi2 = np.asarray(pi2, dtype=float)
    r_ind = np.einsum("sb,sab->sa", pi2, game.r1)
    p_ind = np.einsum("sb,sabt->sat", pi2, game.kernel)
    return r_ind, p_ind


def lemma1_unit_bounds(game: StackelbergGame):
    """Per-unit-delta sensitivity caps of the induced MDP:
    rewards 2 sqrt(2) beta A1 A2^{3/2} R^2/(1-gamma)^2, transitions the same
    with a single power of R."""
    A1 = game.num_leader_actions
    A2 = game.num_follower_actions
    R = game.reward_scale
    denom = (1.0 - game.discount) ** 2
    lead = 2.0 * np.sqrt(2.0) * game.softmax_beta * A1 * A2**1.5
    return lead * R**2 / denom, lead * R / denom


def _fit_linear_params(r_vec, p_mat, spec: LinearMdpSpec) -> MdpParams:
    """Least-squares (theta, mu) for a materialized (r, P); exact-fit only."""
    phi_pinv = np.linalg.pinv(spec.features, rcond=1e-10)
    theta = phi_pinv @ r_vec
    mu = p_mat @ phi_pinv.T
    r_res = float(np.abs(spec.features @ theta - r_vec).max(initial=0.0))
    p_res = float(np.abs(mu @ spec.features.T - p_mat).max(initial=0.0))
    if r_res > FIT_TOL or p_res > FIT_TOL:
        raise FitResidualError(
            f"features cannot represent the induced MDP: reward residual {r_res:g}, "
            f"kernel residual {p_res:g} (tolerance {FIT_TOL:g})"
        )
    return MdpParams(theta, mu)


def induced_params(game: StackelbergGame, pi1, spec: LinearMdpSpec) -> MdpParams:
    """Fit (theta, mu) of the leader MDP induced by committing to pi1."""
    r_bar, p_bar = build_follower_mdp(game, pi1)
    pi2 = follower_softmax_response(r_bar, p_bar, game.softmax_beta, game.discount)
    r_ind, p_ind = induced_leader_mdp(game, pi2)
    r_vec = r_ind.ravel()  # s-major, a1-minor, matching the feature rows
    p_mat = p_ind.reshape(game.num_states * game.num_leader_actions, game.num_states).T
    return _fit_linear_params(r_vec, p_mat, spec)


def tabular_leader_spec(game: StackelbergGame) -> LinearMdpSpec:
    """Identity-feature MDP shell for the leader side of a game."""
    n = game.num_states * game.num_leader_actions
    return LinearMdpSpec(
        num_states=game.num_states,
        num_actions=game.num_leader_actions,
        discount=game.discount,
        start_dist=np.asarray(game.start_dist, dtype=float),
        features=np.eye(n),
    )


def stackelberg_response_map(game: StackelbergGame, spec: LinearMdpSpec) -> ResponseMap:
    """Wrap the game as a response map over leader occupancies.

    apply(d) extracts the leader policy from d, so the map factors through
    policies by construction. beta = 0 degenerates to a constant map (the
    follower ignores the leader entirely). Declared sensitivities are the
    per-unit-delta caps above; they are exact statements about policy
    perturbations on tabular features and flagged heuristic otherwise.
    """
    if spec.num_actions != game.num_leader_actions or spec.num_states != game.num_states:
        raise ValueError("feature spec and game disagree on sizes")
    base = induced_params(game, uniform_policy(spec), spec)
    if game.softmax_beta == 0.0:
        rmap = ResponseMap("constant", base, 0.0, 0.0)
        object.__setattr__(rmap, "meta", {"sensitivity_basis": "constant-follower"})
        return rmap
    eps_theta, eps_mu = lemma1_unit_bounds(game)
    n, D = spec.features.shape
    tabular = n == D and np.allclose(spec.features, np.eye(n), atol=1e-12)

    def _apply(d):
        pi1 = policy_from_occupancy(d, spec)
        return induced_params(game, pi1, spec)

    rmap = ResponseMap(
        "stackelberg",
        base,
        float(eps_theta),
        float(eps_mu),
        custom_apply=_apply,
    )
    object.__setattr__(
        rmap,
        "meta",
        {"sensitivity_basis": "policy-deviation-bound", "heuristic": not tabular, "game": game},
    )
    return rmap


# ---------------------------------------------------------------------------
# lemma verification


@dataclass(frozen=True)
class SensitivityReport:
    delta: float
    max_reward_dev: float
    max_transition_dev: float
    reward_bound: float
    transition_bound: float
    reward_pass: bool
    transition_pass: bool


def lemma1_sensitivity_check(game: StackelbergGame, pi1, pi1_tilde) -> SensitivityReport:
    """Compare induced-MDP deviations against the policy-deviation bounds.

    delta is the largest per-state L1 distance between the two leader
    policies; deviations are measured entrywise on the induced rewards and
    transitions, which is the granularity the bounds are stated at.
    """
    pi1 = np.asarray(pi1, dtype=float)
    pi1_tilde = np.asarray(pi1_tilde, dtype=float)
    delta = float(np.abs(pi1 - pi1_tilde).sum(axis=1).max(initial=0.0))
    out = []
    for p in (pi1, pi1_tilde):
        r_bar, p_bar = build_follower_mdp(game, p)
        pi2 = follower_softmax_response(r_bar, p_bar, game.softmax_beta, game.discount)
        out.append(induced_leader_mdp(game, pi2))
    (r_a, p_a), (r_b, p_b) = out
    r_dev = float(np.abs(r_a - r_b).max(initial=0.0))
    p_dev = float(np.abs(p_a - p_b).max(initial=0.0))
    unit_r, unit_p = lemma1_unit_bounds(game)
    r_bound = delta * unit_r
    p_bound = delta * unit_p
    slack = 1e-12
    return SensitivityReport(
        delta=delta,
        max_reward_dev=r_dev,
        max_transition_dev=p_dev,
        reward_bound=r_bound,
        transition_bound=p_bound,
        reward_pass=r_dev <= r_bound + slack,
        transition_pass=p_dev <= p_bound + slack,
    )


@dataclass(frozen=True)
class OccupancyPerturbationReport:
    beta_dev: float
    l1_distance: float
    bound: float
    passed: bool


def occupancy_l1_perturbation_check(P, P_tilde, policy, rho, gamma) -> OccupancyPerturbationReport:
    """L1 stability of occupancies under kernel perturbation.

    For tabular kernels of shape (S, A, S): with
    beta_dev = max_{s,a} ||P(.|s,a) - P_tilde(.|s,a)||_1, any policy's
    occupancies satisfy ||d - d_tilde||_1 <= beta_dev gamma / (1-gamma)^2.
    """
    P = np.asarray(P, dtype=float)
    P_tilde = np.asarray(P_tilde, dtype=float)
    policy = np.asarray(policy, dtype=float)
    rho = np.asarray(rho, dtype=float).ravel()
    S, A, _ = P.shape
    spec = LinearMdpSpec(S, A, float(gamma), rho, np.eye(S * A))
    ds = []
    for kern in (P, P_tilde):
        mu = kern.reshape(S * A, S).T  # (S', SA) with column (s,a)
        ds.append(occupancy_from_policy(policy, MdpParams(np.zeros(S * A), mu), spec))
    beta_dev = float(np.abs(P - P_tilde).sum(axis=2).max(initial=0.0))
    l1 = float(np.abs(ds[0] - ds[1]).sum())
    bound = beta_dev * gamma / (1.0 - gamma) ** 2
    return OccupancyPerturbationReport(
        beta_dev=beta_dev, l1_distance=l1, bound=bound, passed=l1 <= bound + 1e-12
    )


def lemma2_multi_follower_bounds(num_followers: int, num_actions: int, r_max: float, softmax_beta: float, gamma: float):
    """Documented calculator for the m-follower generalization.

    Returns (reward bound, transition bound) per unit policy deviation:
    3 sqrt(2) beta m A^{3m/2 + 1} R^2 / (1-gamma)^2 and the same with R.
    No environment implements this regime; the A^{3m/2+1} growth makes it
    purely a reference quantity.
    """
    lead = 3.0 * np.sqrt(2.0) * softmax_beta * num_followers * num_actions ** (1.5 * num_followers + 1)
    denom = (1.0 - gamma) ** 2
    return lead * r_max**2 / denom, lead * r_max / denom


# ---------------------------------------------------------------------------
# game files


def save_game(game: StackelbergGame, dirpath) -> None:
    """game.toml plus flattened tensor CSVs (s-major, a1-middle, a2-minor)."""
    import os

    S, A1, A2 = game.num_states, game.num_leader_actions, game.num_follower_actions
    header = {
        "game": {
            "num_states": S,
            "num_leader_actions": A1,
            "num_follower_actions": A2,
            "discount": game.discount,
            "softmax_beta": game.softmax_beta,
            "rho_file": "rho.csv",
            "r1_file": "r1.csv",
            "r2_file": "r2.csv",
            "p_file": "p.csv",
        }
    }
    formats.save_toml(os.path.join(dirpath, "game.toml"), header)
    formats.save_matrix_csv(os.path.join(dirpath, "rho.csv"), game.start_dist, "rho")
    # rows indexed s-major then a1; columns a2 (rewards) or next state (kernel)
    formats.save_matrix_csv(os.path.join(dirpath, "r1.csv"), game.r1.reshape(S * A1, A2), "r1")
    formats.save_matrix_csv(os.path.join(dirpath, "r2.csv"), game.r2.reshape(S * A1, A2), "r2")
    formats.save_matrix_csv(os.path.join(dirpath, "p.csv"), game.kernel.reshape(S * A1 * A2, S), "p")


def load_game(path) -> StackelbergGame:
    import os

    base_dir = os.path.dirname(os.path.abspath(path))
    data = formats.load_toml(path)
    if "game" not in data:
        raise ValueError(f"{path}: missing [game] table")
    g = data["game"]
    S = int(g["num_states"])
    A1 = int(g["num_leader_actions"])
    A2 = int(g["num_follower_actions"])
    rho, _ = formats.load_vector_csv(os.path.join(base_dir, g["rho_file"]))
    r1, _ = formats.load_matrix_csv(os.path.join(base_dir, g["r1_file"]))
    r2, _ = formats.load_matrix_csv(os.path.join(base_dir, g["r2_file"]))
    P, _ = formats.load_matrix_csv(os.path.join(base_dir, g["p_file"]))
    return StackelbergGame(
        num_states=S,
        num_leader_actions=A1,
        num_follower_actions=A2,
        discount=float(g["discount"]),
        start_dist=rho,
        r1=r1.reshape(S, A1, A2),
        r2=r2.reshape(S, A1, A2),
        kernel=P.reshape(S, A1, A2, S),
        softmax_beta=float(g["softmax_beta"]),
    )


def random_game(
    num_states: int,
    num_leader_actions: int,
    num_follower_actions: int,
    discount: float,
    softmax_beta: float,
    seed: int,
    reward_scale: float = 1.0,
) -> StackelbergGame:
    """Dense random game with rewards in [-reward_scale, reward_scale]."""
    from .rng import substream

    gen = substream(seed, "stackelberg-game")
    S, A1, A2 = num_states, num_leader_actions, num_follower_actions
    r1 = gen.uniform(-reward_scale, reward_scale, size=(S, A1, A2))
    r2 = gen.uniform(-reward_scale, reward_scale, size=(S, A1, A2))
    kernel = gen.dirichlet(np.ones(S), size=(S, A1, A2))
    rho = gen.dirichlet(np.ones(S))
    return StackelbergGame(
        num_states=S,
        num_leader_actions=A1,
        num_follower_actions=A2,
        discount=discount,
        start_dist=rho,
        r1=r1,
        r2=r2,
        kernel=kernel,
        softmax_beta=softmax_beta,
    )
