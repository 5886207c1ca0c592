"""Offline stochastic primal-dual saddle solver: steps, projections, runs."""

import math

import numpy as np
import pytest

import oracles
from perfmdp import (
    DatasetError,
    LinearMdpSpec,
    MdpParams,
    enumerate_dataset,
    expected_covariance,
    occupancy_from_policy,
    reference_instance,
    sample_dataset,
    solve_regularized,
    uniform_policy,
)
from perfmdp.rng import substream
from perfmdp.sampling import CovarianceEstimate, Dataset
from perfmdp.primal_dual import (
    PdConfig,
    g_function,
    mixture_average_feature,
    nu_closed_form,
    omega_gradient_sample,
    policy_update,
    project_nu,
    run_offline_primal_dual,
    state_action_mean_features,
    theorem5_counts,
)


def _tiny_instance():
    """One state, two actions, identity features; action 0 pays 1."""
    spec = LinearMdpSpec(1, 2, 0.5, [1.0], np.eye(2))
    params = MdpParams([1.0, 0.0], [[1.0, 1.0]])
    return spec, params


def _deployment(spec, params):
    d = occupancy_from_policy(uniform_policy(spec), params, spec)
    return d, enumerate_dataset(d, params, spec), expected_covariance(d, spec)


# ---------------------------------------------------------------------------
# configuration


def test_config_finalize_default_formulas():
    spec, _ = reference_instance()  # D = 4, gamma = 0.9, A = 2
    cfg = PdConfig(t_inner=50, k_inner=100, lam=0.1, b_cov=10.0).finalize(spec)
    assert cfg.w_radius == pytest.approx(80.0, rel=1e-12)
    assert cfg.v_radius == pytest.approx(4.0 * math.sqrt(10.0), rel=1e-12)
    assert cfg.eta_omega == pytest.approx(0.4 / math.sqrt(11.0), rel=1e-12)
    assert cfg.eta_pi == pytest.approx(
        math.sqrt(math.log(2.0) / 50.0) * 0.1 / 4.0, rel=1e-12
    )


def test_config_overrides_and_validation():
    spec, _ = reference_instance()
    cfg = PdConfig(10, 5, 0.1, eta_omega=0.3, eta_pi=0.01, w_radius=7.0, v_radius=2.0)
    out = cfg.finalize(spec)
    assert (out.eta_omega, out.eta_pi, out.w_radius, out.v_radius) == (0.3, 0.01, 7.0, 2.0)
    with pytest.raises(ValueError, match="at least 1"):
        PdConfig(0, 5, 0.1).finalize(spec)
    with pytest.raises(ValueError, match="lam"):
        PdConfig(10, 5, 0.0).finalize(spec)
    with pytest.raises(ValueError, match="b_cov"):
        PdConfig(10, 5, 0.1, b_cov=-1.0).finalize(spec)
    with pytest.raises(ValueError, match="positive"):
        PdConfig(10, 5, 0.1, w_radius=-2.0).finalize(spec)


def test_iteration_count_formulas():
    # 144 * 1 * 1 * (1 + 4) = 720 and ceil(2304 ln 2) = 1598
    assert theorem5_counts(1.0, 1, 1.0, 2, 0.5) == (720, 1598)
    k_fine, t_fine = theorem5_counts(0.05, 4, 10.0, 2, 0.9)
    k_coarse, t_coarse = theorem5_counts(0.1, 4, 10.0, 2, 0.9)
    assert abs(k_fine - 4 * k_coarse) <= 4 and abs(t_fine - 4 * t_coarse) <= 4
    with pytest.raises(ValueError, match="eps"):
        theorem5_counts(0.0, 1, 1.0, 2, 0.5)


# ---------------------------------------------------------------------------
# per-step pieces


def test_policy_update_softmax_arithmetic():
    uniform = policy_update(np.zeros((3, 4)), 0.7)
    np.testing.assert_allclose(uniform, np.full((3, 4), 0.25), atol=1e-15)
    two = policy_update(np.array([[1.0, 0.0]]), 1.0)
    np.testing.assert_allclose(two, [[0.73106, 0.26894]], atol=1e-5)
    e = math.e
    np.testing.assert_allclose(two, [[e / (e + 1.0), 1.0 / (e + 1.0)]], atol=1e-12)


def test_policy_update_shift_invariance_and_rows():
    gen = substream(0, "softmax")
    scores = gen.standard_normal((4, 3)) * 2.0
    base = policy_update(scores, 0.8)
    shifted = policy_update(scores + gen.standard_normal((4, 1)), 0.8)
    np.testing.assert_allclose(base, shifted, atol=1e-12)
    np.testing.assert_allclose(base.sum(axis=1), np.ones(4), atol=1e-12)
    assert base.min() > 0


def test_state_action_mean_features():
    spec, _ = _tiny_instance()
    pi = np.array([[0.8, 0.2]])
    psi = state_action_mean_features(pi, spec)
    np.testing.assert_allclose(psi, [[0.8, 0.2]], atol=1e-15)
    omega = np.array([2.0, -1.0])
    np.testing.assert_allclose(g_function(pi, omega, spec), [1.4], atol=1e-15)


def test_g_identity_for_bellman_consistent_omega():
    spec, params = reference_instance()
    gen = substream(1, "g-identity")
    policies = [uniform_policy(spec)]
    for _ in range(4):
        raw = gen.uniform(0.05, 1.0, size=(spec.num_states, spec.num_actions))
        policies.append(raw / raw.sum(axis=1, keepdims=True))
    for pi in policies:
        v_pi, _ = oracles.policy_value(pi, params, spec)
        omega_star = params.theta + spec.discount * params.mu.T @ v_pi
        np.testing.assert_allclose(g_function(pi, omega_star, spec), v_pi, atol=1e-8)


def test_omega_gradient_zero_nu_reads_initial_state_features():
    spec, params = reference_instance()
    _, _, cov = _deployment(spec, params)
    pi = uniform_policy(spec)
    psi = state_action_mean_features(pi, spec)
    grad = omega_gradient_sample((1, 0, 1, 0.2, 0), pi, np.zeros(4), cov, spec)
    np.testing.assert_allclose(grad, psi[1], atol=1e-15)


def test_omega_gradient_unbiased_under_enumeration():
    spec, params = reference_instance()
    d, enum, cov = _deployment(spec, params)
    gen = substream(2, "grad-args")
    raw = gen.uniform(0.05, 1.0, size=(spec.num_states, spec.num_actions))
    pi = raw / raw.sum(axis=1, keepdims=True)
    nu = gen.standard_normal(spec.feature_dim)
    w = enum.weight_vector()
    mean_grad = np.zeros(spec.feature_dim)
    for weight, tup in zip(w, enum.tuples()):
        mean_grad += weight * omega_gradient_sample(tup, pi, nu, cov, spec)
    # exact gradient: Phi^T d^{pi,nu} - (mean phi phi^T) Sigma^{-1} nu
    d_pi_nu = np.zeros(spec.num_pairs)
    for s in range(spec.num_states):
        scale = spec.start_dist[s] + spec.discount * float(params.mu[s] @ nu)
        for a in range(spec.num_actions):
            d_pi_nu[s * spec.num_actions + a] = pi[s, a] * scale
    phi_rows = spec.features[enum.sa_indices(spec)]
    c_mat = phi_rows.T @ (w[:, None] * phi_rows)
    exact = spec.features.T @ d_pi_nu - c_mat @ np.linalg.solve(cov.sigma, nu)
    np.testing.assert_allclose(mean_grad, exact, atol=1e-10)


def test_d_estimator_unbiased_under_enumeration():
    spec, params = reference_instance()
    d, enum, cov = _deployment(spec, params)
    gen = substream(3, "d-hat")
    raw = gen.uniform(0.05, 1.0, size=(spec.num_states, spec.num_actions))
    pi = raw / raw.sum(axis=1, keepdims=True)
    nu = gen.standard_normal(spec.feature_dim) * 0.5
    sig_inv_nu = np.linalg.solve(cov.sigma, nu)
    w = enum.weight_vector()
    mean_d_hat = np.zeros(spec.num_pairs)
    for weight, (s0, s, a, _, s_next) in zip(w, enum.tuples()):
        c1 = float(spec.features[s * spec.num_actions + a] @ sig_inv_nu)
        for st in (s0,):
            for act in range(spec.num_actions):
                mean_d_hat[st * spec.num_actions + act] += weight * pi[st, act]
        for act in range(spec.num_actions):
            mean_d_hat[s_next * spec.num_actions + act] += (
                weight * spec.discount * c1 * pi[s_next, act]
            )
    expect = np.zeros(spec.num_pairs)
    for s in range(spec.num_states):
        scale = spec.start_dist[s] + spec.discount * float(params.mu[s] @ nu)
        for a in range(spec.num_actions):
            expect[s * spec.num_actions + a] = pi[s, a] * scale
    np.testing.assert_allclose(mean_d_hat, expect, atol=1e-12)


def test_omega_gradient_norm_bound_on_projected_nu():
    spec, params = reference_instance()
    d, enum, cov = _deployment(spec, params)
    b_cov = 10.0
    cap = 1.0 / (1.0 - spec.discount) + math.sqrt(b_cov)
    gen = substream(4, "grad-norm")
    pi = uniform_policy(spec)
    for _ in range(5):
        nu = project_nu(gen.standard_normal(spec.feature_dim) * 20.0, cov, None, b_cov)
        for tup in enum.tuples():
            grad = omega_gradient_sample(tup, pi, nu, cov, spec)
            assert np.linalg.norm(grad) <= cap + 1e-9


def test_nu_closed_form_plugin_and_scaling():
    spec, params = reference_instance()
    d, enum, cov = _deployment(spec, params)
    pi = uniform_policy(spec)
    w = enum.weight_vector()
    phi_rows = spec.features[enum.sa_indices(spec)]
    plug = np.linalg.solve(cov.sigma, phi_rows.T @ (w * enum.r)) / 0.2
    nu = nu_closed_form(enum, cov, pi, np.zeros(spec.feature_dim), 0.2, spec)
    np.testing.assert_allclose(nu, plug, atol=1e-12)
    half = nu_closed_form(enum, cov, pi, np.zeros(spec.feature_dim), 0.4, spec)
    np.testing.assert_allclose(half, nu / 2.0, atol=1e-12)


def test_nu_closed_form_is_stationary_point():
    from perfmdp import empirical_lagrangian

    spec, params = reference_instance()
    d, enum, cov = _deployment(spec, params)
    gen = substream(5, "nu-stationary")
    raw = gen.uniform(0.05, 1.0, size=(spec.num_states, spec.num_actions))
    pi = raw / raw.sum(axis=1, keepdims=True)
    omega = gen.standard_normal(spec.feature_dim)
    lam = 0.3
    nu_hat = nu_closed_form(enum, cov, pi, omega, lam, spec)
    g = g_function(pi, omega, spec)

    def lag_in_nu(nu):
        return empirical_lagrangian(enum, cov, d, nu, g, omega, spec, lam)

    grad = oracles.finite_difference_gradient(lag_in_nu, nu_hat, h=1e-6)
    assert np.linalg.norm(grad) <= 1e-6


def test_nu_projection_caps():
    spec, params = reference_instance()
    _, _, cov = _deployment(spec, params)
    small = np.full(4, 1e-3)
    np.testing.assert_allclose(project_nu(small, cov, 1.0, 50.0), small, atol=0)
    big = np.full(4, 5.0)
    capped = project_nu(big, cov, 0.7, None)
    assert np.linalg.norm(capped) == pytest.approx(0.7, rel=1e-12)
    np.testing.assert_allclose(capped / np.linalg.norm(capped), big / np.linalg.norm(big))
    ell = project_nu(big, cov, None, 2.0)
    y = np.linalg.solve(cov.sigma, ell)
    assert np.linalg.norm(y) <= math.sqrt(2.0) + 1e-12
    pi = uniform_policy(spec)
    enum = enumerate_dataset(
        occupancy_from_policy(pi, params, spec), params, spec
    )
    nu_proj = nu_closed_form(enum, cov, pi, np.zeros(4), 0.01, spec, v_radius=0.1)
    assert np.linalg.norm(nu_proj) == pytest.approx(0.1, rel=1e-9)


# ---------------------------------------------------------------------------
# full runs


def test_run_matches_literal_transcription():
    spec, params = _tiny_instance()
    d, ds, cov = _deployment(spec, params)
    cfg = PdConfig(t_inner=7, k_inner=9, lam=0.5, b_cov=16.0).finalize(spec)
    res = run_offline_primal_dual(ds, cov, spec, cfg, seed=5)

    S, A, D = spec.num_states, spec.num_actions, spec.feature_dim
    sig_inv = np.linalg.inv(cov.sigma)
    w = ds.weight_vector()
    sa = ds.sa_indices(spec)
    phi = spec.features
    phi_table = phi.reshape(S, A, D)
    omega = np.zeros(D)
    nu = np.zeros(D)
    pi = np.full((S, A), 1.0 / A)
    scores = np.zeros((S, A))
    for ell in range(1, cfg.t_inner + 1):
        pi_prev, omega_prev, nu_prev = pi, omega, nu
        psi = np.einsum("sa,sad->sd", pi_prev, phi_table)
        idx = substream(5, "pd-tuples", 0, ell).choice(ds.m, size=cfg.k_inner, p=w)
        w_k = omega_prev.copy()
        acc = np.zeros(D)
        for k in range(cfg.k_inner):
            j = idx[k]
            c1 = float(phi[sa[j]] @ sig_inv @ nu_prev)
            grad = psi[ds.s0[j]] + spec.discount * c1 * psi[ds.s_next[j]] - c1 * phi[sa[j]]
            w_k = w_k - cfg.eta_omega * grad
            norm = np.linalg.norm(w_k)
            if norm > cfg.w_radius:
                w_k = w_k * (cfg.w_radius / norm)
            acc += w_k
        omega = acc / cfg.k_inner
        nu = nu_closed_form(
            ds, cov, pi_prev, omega_prev, cfg.lam, spec,
            v_radius=cfg.v_radius, b_cov=cfg.b_cov,
        )
        scores += (phi @ omega_prev).reshape(S, A)
        pi = policy_update(scores, cfg.eta_pi)
        np.testing.assert_allclose(res.omegas[ell - 1], omega, atol=1e-12)
        np.testing.assert_allclose(res.nus[ell - 1], nu, atol=1e-12)
        np.testing.assert_allclose(res.policies[ell - 1], pi, atol=1e-12)


def test_run_deterministic_per_seed():
    spec, params = reference_instance()
    _, ds, cov = _deployment(spec, params)
    cfg = PdConfig(t_inner=50, k_inner=10, lam=0.1)
    a = run_offline_primal_dual(ds, cov, spec, cfg, seed=0)
    b = run_offline_primal_dual(ds, cov, spec, cfg, seed=0)
    np.testing.assert_array_equal(a.policies, b.policies)
    np.testing.assert_array_equal(a.omegas, b.omegas)
    np.testing.assert_array_equal(a.nus, b.nus)
    assert a.selected_index == b.selected_index
    c = run_offline_primal_dual(ds, cov, spec, cfg, seed=1)
    assert a.selected_index != c.selected_index
    assert 1 <= a.selected_index <= 50
    np.testing.assert_array_equal(a.selected_policy, a.policies[a.selected_index - 1])


def test_run_iterates_respect_balls():
    spec, params = reference_instance()
    _, ds, cov = _deployment(spec, params)
    cfg = PdConfig(t_inner=40, k_inner=20, lam=0.1, b_cov=10.0).finalize(spec)
    res = run_offline_primal_dual(ds, cov, spec, cfg, seed=3)
    np.testing.assert_allclose(res.policies.sum(axis=2), 1.0, atol=1e-12)
    assert res.policies.min() > 0
    assert np.linalg.norm(res.omegas, axis=1).max() <= cfg.w_radius + 1e-9
    assert np.linalg.norm(res.nus, axis=1).max() <= cfg.v_radius + 1e-9


def test_heavy_regularization_shrinks_nu_toward_zero():
    spec, params = reference_instance()
    _, ds, cov = _deployment(spec, params)
    res3 = run_offline_primal_dual(ds, cov, spec, PdConfig(60, 30, 1.0e3), seed=1)
    res5 = run_offline_primal_dual(ds, cov, spec, PdConfig(60, 30, 1.0e5), seed=1)
    assert np.abs(res3.nus).max() < 0.05
    assert np.abs(res5.nus).max() < np.abs(res3.nus).max() / 10.0
    assert res3.objective_history.min() > -0.5
    assert float(np.mean(res3.objective_history[-10:])) < 0.0
    assert np.abs(res5.objective_history).max() < np.abs(res3.objective_history).max() / 10.0


def test_run_error_paths():
    spec, params = reference_instance()
    _, ds, cov = _deployment(spec, params)
    empty = Dataset(
        s0=np.zeros(0, dtype=np.int64), s=np.zeros(0, dtype=np.int64),
        a=np.zeros(0, dtype=np.int64), r=np.zeros(0), s_next=np.zeros(0, dtype=np.int64),
    )
    with pytest.raises(DatasetError, match="empty"):
        run_offline_primal_dual(empty, cov, spec, PdConfig(5, 5, 0.1), seed=0)
    dead = CovarianceEstimate(
        sigma=np.zeros((4, 4)), source="exact", ridge=0.0, min_eig_raw=0.0
    )
    with pytest.raises(DatasetError, match="singular"):
        run_offline_primal_dual(ds, dead, spec, PdConfig(5, 5, 0.1), seed=0)


# ---------------------------------------------------------------------------
# mixtures


def test_mixture_average_feature_identical_policies():
    spec, params = reference_instance()
    _, ds, cov = _deployment(spec, params)
    res = run_offline_primal_dual(ds, cov, spec, PdConfig(6, 4, 0.1), seed=2)
    pi = uniform_policy(spec)
    res.policies[:] = pi
    nu_tilde, obj = mixture_average_feature(res, params, spec)
    d_pi = occupancy_from_policy(pi, params, spec)
    np.testing.assert_allclose(nu_tilde, spec.features.T @ d_pi, atol=1e-12)
    lam = res.config.lam
    assert obj == pytest.approx(
        nu_tilde @ params.theta - 0.5 * lam * nu_tilde @ nu_tilde, abs=1e-12
    )
    np.testing.assert_array_equal(res.nu_tilde, nu_tilde)


def test_mixture_beats_uniform_on_tiny_instance():
    # Theorem-scale K and T for eps = 0.05 run to millions of iterations; a
    # scaled-down budget must still clearly improve on the uniform baseline.
    spec, params = _tiny_instance()
    _, ds, cov = _deployment(spec, params)
    d_u = occupancy_from_policy(uniform_policy(spec), params, spec)
    nu_u = spec.features.T @ d_u
    base = float(nu_u @ params.theta - 0.25 * nu_u @ nu_u)
    assert base == pytest.approx(0.5, abs=1e-12)
    for seed in (0, 1, 2):
        res = run_offline_primal_dual(
            ds, cov, spec, PdConfig(400, 60, 0.5, b_cov=16.0), seed=seed
        )
        _, obj = mixture_average_feature(res, params, spec)
        assert base + 0.02 < obj <= 1.0 + 1e-9


def test_mixture_objective_improves_with_iteration_budget():
    spec, params = reference_instance()
    _, ds, cov = _deployment(spec, params)
    pop = solve_regularized(params, spec, 0.1)
    nu_star = spec.features.T @ pop.d
    opt = float(nu_star @ params.theta - 0.05 * nu_star @ nu_star)
    medians = []
    for t_inner in (50, 200, 800):
        objs = []
        for seed in range(5):
            cfg = PdConfig(t_inner=t_inner, k_inner=40, lam=0.1, b_cov=40.0)
            res = run_offline_primal_dual(ds, cov, spec, cfg, seed=seed)
            _, obj = mixture_average_feature(res, params, spec)
            objs.append(obj)
        medians.append(float(np.median(objs)))
    assert medians[0] <= medians[1] + 1e-9 <= medians[2] + 2e-9
    assert all(m <= opt + 1e-9 for m in medians)
