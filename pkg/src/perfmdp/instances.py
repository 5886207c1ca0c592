"""Ready-made instances: the small reference chain and certified random draws.

The reference instance is a 2-state, 2-action tabular chain with discount
0.9. Its feature matrix is the identity, so kappa = M = 1 and every
contraction constant has a closed form the tests pin down numerically
(alpha = 7.0711..., lambda_min = 0.03125 at eps_theta = 0.01, and so on).

Random certified instances use a square orthogonal feature matrix (kappa =
M = 1 again, but non-trivial coordinates), interior kernels obtained by
mixing a Dirichlet draw with the uniform kernel, and rank-one response
payloads built to stay feasible without projection. Sensitivities are chosen
against the certificate formulas so that contraction holds with margin.
"""

import numpy as np

from .mdp import LinearMdpSpec, MdpParams
from .responses import ResponseMap, feasible_affine_map
from .retraining import Certificate, certify
from .rng import substream


def reference_spec() -> LinearMdpSpec:
    return LinearMdpSpec(
        num_states=2,
        num_actions=2,
        discount=0.9,
        start_dist=np.array([0.6, 0.4]),
        features=np.eye(4),
    )


def reference_params() -> MdpParams:
    # columns of the kernel are indexed (s, a) s-major
    P = np.array(
        [
            [0.9, 0.2, 0.7, 0.05],
            [0.1, 0.8, 0.3, 0.95],
        ]
    )
    theta = np.array([0.9, 0.1, 0.5, 0.4])
    return MdpParams(theta, P)


def reference_instance():
    return reference_spec(), reference_params()


def reference_response(eps_theta: float = 0.01, eps_mu: float = 0.0, seed: int = 7) -> ResponseMap:
    spec = reference_spec()
    return feasible_affine_map(spec, reference_params(), eps_theta, eps_mu, seed)


def random_tabular_instance(
    seed: int,
    num_states: int = 2,
    num_actions: int = 2,
    discount: float = 0.9,
    rotate_features: bool = False,
    uniform_mix: float = 0.5,
):
    """Random (spec, params) with square features and an interior kernel.

    uniform_mix blends the Dirichlet kernel with the uniform one, which
    lower-bounds every kernel entry by uniform_mix / S; response builders
    rely on that margin to avoid projections.
    """
    gen = substream(seed, "instance")
    S, A = num_states, num_actions
    n = S * A
    if rotate_features:
        q, _ = np.linalg.qr(gen.standard_normal((n, n)))
        phi = q
    else:
        phi = np.eye(n)
    P = gen.dirichlet(np.ones(S), size=n).T  # (S, SA) columns
    P = (1.0 - uniform_mix) * P + uniform_mix / S
    rho = gen.dirichlet(np.ones(S) * 2.0)
    theta_raw = gen.standard_normal(n)
    theta_raw *= 0.8 * np.sqrt(n) / np.linalg.norm(theta_raw)
    spec = LinearMdpSpec(S, A, discount, rho, phi)
    # mu solves mu Phi^T = P; for orthogonal phi that is P phi
    mu = P @ phi
    return spec, MdpParams(theta_raw, mu)


def balanced_kernel_instance(
    seed: int,
    num_states: int = 2,
    num_actions: int = 2,
    discount: float = 0.9,
    rotate_features: bool = False,
):
    """Random instance whose kernel routes mass A into every state.

    Columns live on the simplex and every row of the kernel sums to A, so
    the all-ones direction is a singular vector of B - gamma P with singular
    value sqrt(A)(1 - gamma). On this family the dual-geometry norm bound
    ||pinv(M)|| <= alpha is tight; generic kernels sit strictly above it.
    Kernels are produced by Sinkhorn scaling of a positive random matrix,
    which converges for strictly positive entries.
    """
    gen = substream(seed, "balanced-instance")
    S, A = num_states, num_actions
    n = S * A
    raw = gen.uniform(0.2, 1.0, size=(S, n))
    for _ in range(200):
        raw *= (1.0 / raw.sum(axis=0))[None, :]
        raw *= (A / raw.sum(axis=1))[:, None]
    P = raw * (1.0 / raw.sum(axis=0))[None, :]
    if rotate_features:
        q, _ = np.linalg.qr(gen.standard_normal((n, n)))
        phi = q
    else:
        phi = np.eye(n)
    rho = gen.dirichlet(np.ones(S) * 2.0)
    theta_raw = gen.standard_normal(n)
    theta_raw *= 0.8 * np.sqrt(n) / np.linalg.norm(theta_raw)
    spec = LinearMdpSpec(S, A, discount, rho, phi)
    return spec, MdpParams(theta_raw, P @ phi)


def random_certified_instance(
    seed: int,
    num_states: int = 2,
    num_actions: int = 2,
    discount: float = 0.9,
    rotate_features: bool = False,
    lam_scale: float = 3.0,
    eps_theta: float | None = None,
    eps_mu: float | None = None,
):
    """(spec, params, response, certificate) with contraction guaranteed.

    Default sensitivities are drawn relative to the certificate caps:
    eps_mu at 25% of its admissible maximum and eps_theta scaled with
    (1 - gamma), then lam at lam_scale times the threshold. With those
    choices the contraction factor is at most about 0.85 regardless of the
    draw, so certification carries real margin.
    """
    spec, params = random_tabular_instance(
        seed, num_states, num_actions, discount, rotate_features
    )
    gen = substream(seed, "instance-eps")
    gamma = discount
    A = num_actions
    # square orthogonal features: kappa = M = 1, alpha = 1/(sqrt(A)(1-gamma))
    alpha_sq = 1.0 / (A * (1.0 - gamma) ** 2)
    if eps_mu is None:
        cap = 2.0 / (25.0 * gamma * alpha_sq) if gamma > 0 else np.inf
        eps_mu = float(gen.uniform(0.05, 0.25) * cap) if np.isfinite(cap) else 0.0
    if eps_theta is None:
        eps_theta = float(gen.uniform(0.002, 0.02) * (1.0 - gamma))
    response = feasible_affine_map(spec, params, eps_theta, eps_mu, seed)
    probe = certify(spec, response.base_params, eps_theta, eps_mu, lam=1.0)
    lam = lam_scale * probe.lambda_min
    cert = certify(spec, response.base_params, eps_theta, eps_mu, lam)
    if not cert.contraction:
        raise RuntimeError(f"instance draw {seed} failed certification")
    return spec, params, response, cert
