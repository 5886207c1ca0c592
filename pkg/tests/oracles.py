"""Independent oracles used to cross-check the package's numerics.

Every routine here deliberately avoids the code paths it verifies: policy
values come from an S-dimensional linear solve instead of the SA-dimensional
occupancy system, quadratic programs are solved by brute-force active-set
enumeration instead of operator splitting, and Q-functions by a Gauss-Seidel
sweep instead of the packaged Jacobi iteration.
"""

import itertools

import numpy as np


def policy_value(policy, params, spec):
    """V^pi by solving (I - gamma P_pi) V = r_pi; returns (V, rho . V)."""
    S, A = spec.num_states, spec.num_actions
    r = spec.features @ params.theta
    P = params.mu @ spec.features.T  # (S', SA)
    r_pi = np.zeros(S)
    P_pi = np.zeros((S, S))
    for s in range(S):
        for a in range(A):
            idx = s * A + a
            r_pi[s] += policy[s, a] * r[idx]
            P_pi[s, :] += policy[s, a] * P[:, idx]
    V = np.linalg.solve(np.eye(S) - spec.discount * P_pi, r_pi)
    return V, float(spec.start_dist @ V)


def policy_q_value(policy, params, spec):
    """Q^pi(s,a) = r + gamma P V^pi."""
    V, _ = policy_value(policy, params, spec)
    r = spec.features @ params.theta
    P = params.mu @ spec.features.T
    return r + spec.discount * P.T @ V


def occupancy_direct(policy, params, spec):
    """State-action occupancy from the state-only linear system."""
    S, A = spec.num_states, spec.num_actions
    P = params.mu @ spec.features.T
    P_pi = np.zeros((S, S))
    for s in range(S):
        for a in range(A):
            P_pi[:, s] += policy[s, a] * P[:, s * A + a]
    # state occupancy nu solves nu = rho + gamma P_pi nu
    nu = np.linalg.solve(np.eye(S) - spec.discount * P_pi, spec.start_dist)
    d = np.zeros(S * A)
    for s in range(S):
        for a in range(A):
            d[s * A + a] = nu[s] * policy[s, a]
    return d


def active_set_qp(c, Q, E, rho, lam, tol=1e-9):
    """Exact solution of max c.d - (lam/2) d.Q.d, E d = rho, d >= 0.

    Enumerates active sets of the nonnegativity constraints and solves each
    equality-constrained KKT system by least squares; returns the feasible
    KKT point with the largest objective as (d, h, g). Only viable for a
    handful of variables.
    """
    n = len(c)
    m = len(rho)
    best = None
    best_obj = -np.inf
    for active in itertools.product((False, True), repeat=n):
        free = [i for i in range(n) if not active[i]]
        if not free:
            continue
        F = np.array(free)
        Qff = lam * Q[np.ix_(F, F)]
        Ef = E[:, F]
        kkt = np.block([[Qff, -Ef.T], [Ef, np.zeros((m, m))]])
        rhs = np.concatenate([c[F], rho])
        sol, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
        if np.linalg.norm(kkt @ sol - rhs) > 1e-8:
            continue
        d = np.zeros(n)
        d[F] = sol[: len(F)]
        h = sol[len(F):]
        g = lam * Q @ d - c - E.T @ h
        g[F] = 0.0
        if np.min(d) < -tol or np.min(g) < -tol:
            continue
        obj = float(c @ d - 0.5 * lam * d @ Q @ d)
        if obj > best_obj + 1e-12:
            best_obj = obj
            best = (d.copy(), h.copy(), np.clip(g, 0.0, None))
    if best is None:
        raise RuntimeError("no feasible KKT point found")
    return best


def flow_pieces(params, spec, lam):
    """(c, Q, E, rho) of the regularized occupancy program."""
    phi = spec.features
    c = phi @ params.theta
    Q = phi @ phi.T
    S, A = spec.num_states, spec.num_actions
    B = np.kron(np.eye(S), np.ones((1, A)))
    E = B - spec.discount * params.mu @ phi.T
    return c, Q, E, spec.start_dist.copy()


def q_iteration_gauss_seidel(reward, transition, gamma, tol=1e-12, max_sweeps=2_000_000):
    """Optimal Q by in-place (Gauss-Seidel) backups; reward (S,A), transition (S,A,S)."""
    S, A = reward.shape
    q = np.zeros((S, A))
    for _ in range(max_sweeps):
        delta = 0.0
        for s in range(S):
            for a in range(A):
                new = reward[s, a] + gamma * float(transition[s, a] @ q.max(axis=1))
                delta = max(delta, abs(new - q[s, a]))
                q[s, a] = new
        if delta <= tol:
            return q
    raise RuntimeError("Q iteration did not converge")


def finite_difference_gradient(f, x, h=1e-6):
    """Central differences, one column per coordinate."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def hoeffding_radius(value_range, m, delta):
    """Two-sided Hoeffding deviation bound for a mean of m bounded samples."""
    return value_range * np.sqrt(np.log(2.0 / delta) / (2.0 * m))
