"""NumPy reference implementations of the hot inner loops.

These are the fallback backend and the semantic definition the compiled
extension must match bit-for-bit up to floating-point associativity. Both
loops are deliberately free of allocations in the hot path.
"""

import numpy as np


def admm_chunk(W, f0, z, u, steps):
    """Run `steps` splitting iterations in place.

    One iteration: d = W (z - u) + f0, then z <- max(d + u, 0) and
    u <- (d + u) - z. W and f0 fold the constant KKT solve of the equality-
    constrained quadratic subproblem, so the equality constraints hold for
    every d produced here. z and u are modified in place.

    Returns (d, split_inf, dz_inf): the last subproblem solution, the final
    max|d - z|, and the final max|z - z_prev| (scaled by the caller into a
    dual residual).
    """
    d = np.empty_like(z)
    t = np.empty_like(z)
    z_prev = np.empty_like(z)
    for k in range(steps):
        np.subtract(z, u, out=t)
        np.dot(W, t, out=d)
        d += f0
        np.add(d, u, out=t)
        z_prev[:] = z
        np.maximum(t, 0.0, out=z)
        np.subtract(t, z, out=u)
    split_inf = float(np.abs(d - z).max())
    dz_inf = float(np.abs(z - z_prev).max())
    return d, split_inf, dz_inf


def projected_scan(omega0, G, eta, radius):
    """Projected-gradient descent scan over precomputed gradient rows.

    omega_k = Proj_{||.|| <= radius}(omega_{k-1} - eta * G[k]) for
    k = 1..K with omega_0 = omega0. The gradients do not depend on omega,
    so the whole inner loop reduces to this sequential scan.

    Returns (average of omega_1..omega_K, omega_K).
    """
    omega = np.array(omega0, dtype=float, copy=True)
    avg = np.zeros_like(omega)
    K = G.shape[0]
    for k in range(K):
        omega -= eta * G[k]
        nrm = float(np.sqrt(omega @ omega))
        if nrm > radius:
            omega *= radius / nrm
        avg += omega
    avg /= K
    return avg, omega
