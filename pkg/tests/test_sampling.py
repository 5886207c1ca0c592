"""Dataset generation, empirical Lagrangians, and the sampled retraining loop."""

import numpy as np
import pytest

import oracles
from perfmdp import (
    CovarianceEstimate,
    DatasetError,
    LinearMdpSpec,
    MdpParams,
    ResponseMap,
    RetrainRoundError,
    constant_map,
    coverage_bound,
    empirical_lagrangian,
    enumerate_dataset,
    estimate_covariance,
    exact_saddle_solve,
    expected_covariance,
    occupancy_from_policy,
    plugin_moments,
    reconstruct_dynamics,
    reference_instance,
    reference_response,
    run_finite_sample_retraining,
    run_repeated_optimization,
    sample_dataset,
    solve_regularized,
    theorem4_reference_m,
    true_lagrangian,
    uniform_policy,
)
from perfmdp.instances import random_tabular_instance
from perfmdp.rng import substream
from perfmdp.sampling import _normalize_schedule


LAM = 0.1


def _reference_deployment():
    spec, params = reference_instance()
    d = occupancy_from_policy(uniform_policy(spec), params, spec)
    return spec, params, d


# ---------------------------------------------------------------------------
# dataset draws


def test_sample_dataset_deterministic_and_seed_sensitive():
    spec, params, d = _reference_deployment()
    a = sample_dataset(d, params, spec, 512, seed=3)
    b = sample_dataset(d, params, spec, 512, seed=3)
    for name in ("s0", "s", "a", "r", "s_next"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
    c = sample_dataset(d, params, spec, 512, seed=4)
    changed = any(
        not np.array_equal(getattr(a, name), getattr(c, name))
        for name in ("s0", "s", "a", "s_next")
    )
    assert changed
    # round index keys its own substream
    e = sample_dataset(d, params, spec, 512, seed=3, round_index=2)
    assert not np.array_equal(a.s, e.s)
    assert e.round_index == 2 and a.m == 512


def test_sample_dataset_tuple_ranges_and_rewards():
    spec, params, d = _reference_deployment()
    ds = sample_dataset(d, params, spec, 2000, seed=0)
    assert ds.s0.min() >= 0 and ds.s0.max() < spec.num_states
    assert ds.s.min() >= 0 and ds.s.max() < spec.num_states
    assert ds.a.min() >= 0 and ds.a.max() < spec.num_actions
    assert ds.s_next.min() >= 0 and ds.s_next.max() < spec.num_states
    r_clean = spec.features @ params.theta
    np.testing.assert_allclose(ds.r, r_clean[ds.sa_indices(spec)], atol=0)
    assert np.max(np.abs(ds.r)) <= np.sqrt(spec.feature_dim) + 1e-12
    assert ds.weights is None
    np.testing.assert_allclose(ds.weight_vector(), np.full(2000, 1.0 / 2000))


def test_sample_dataset_reward_noise_window():
    spec, params, d = _reference_deployment()
    ds = sample_dataset(d, params, spec, 2000, seed=5, noise_half_width=0.05)
    clean = (spec.features @ params.theta)[ds.sa_indices(spec)]
    dev = ds.r - clean
    assert np.max(np.abs(dev)) <= 0.05 + 1e-12
    assert np.max(np.abs(dev)) > 1e-4


def test_sample_dataset_single_pair_degenerate():
    spec = LinearMdpSpec(1, 1, 0.5, [1.0], [[1.0]])
    params = MdpParams([0.3], [[1.0]])
    ds = sample_dataset([2.0], params, spec, 50, seed=9)
    np.testing.assert_array_equal(ds.s0, np.zeros(50, dtype=ds.s0.dtype))
    np.testing.assert_array_equal(ds.s, np.zeros(50, dtype=ds.s.dtype))
    np.testing.assert_array_equal(ds.a, np.zeros(50, dtype=ds.a.dtype))
    np.testing.assert_array_equal(ds.s_next, np.zeros(50, dtype=ds.s_next.dtype))
    np.testing.assert_allclose(ds.r, np.full(50, 0.3))
    assert list(ds.tuples())[0] == (0, 0, 0, pytest.approx(0.3), 0)


def test_sample_dataset_rejects_bad_inputs():
    spec, params, d = _reference_deployment()
    with pytest.raises(DatasetError, match="not a distribution"):
        sample_dataset(d * 0.5, params, spec, 10, seed=0)
    with pytest.raises(ValueError, match="at least one"):
        sample_dataset(d, params, spec, 0, seed=0)


def test_sampled_frequencies_match_deployment_distribution():
    spec, params, d = _reference_deployment()
    m = 100_000
    ds = sample_dataset(d, params, spec, m, seed=21)
    d_til = (1.0 - spec.discount) * d
    freq = np.bincount(ds.sa_indices(spec), minlength=spec.num_pairs) / m
    assert 0.5 * np.abs(freq - d_til).sum() <= 0.02
    rho_freq = np.bincount(ds.s0, minlength=spec.num_states) / m
    assert 0.5 * np.abs(rho_freq - spec.start_dist).sum() <= 0.02
    _, p_mat = reconstruct_dynamics(params, spec)
    joint = np.zeros((spec.num_pairs, spec.num_states))
    np.add.at(joint, (ds.sa_indices(spec), ds.s_next), 1.0 / m)
    joint_true = d_til[:, None] * p_mat.T
    assert 0.5 * np.abs(joint - joint_true).sum() <= 0.02


def test_enumerate_dataset_weights_are_exact_probabilities():
    spec, params, d = _reference_deployment()
    enum = enumerate_dataset(d, params, spec)
    w = enum.weight_vector()
    assert enum.seed is None
    assert w.min() > 0
    assert w.sum() == pytest.approx(1.0, abs=1e-14)
    d_til = (1.0 - spec.discount) * d
    marg = np.bincount(enum.sa_indices(spec), weights=w, minlength=spec.num_pairs)
    np.testing.assert_allclose(marg, d_til, atol=1e-14)
    rho_marg = np.bincount(enum.s0, weights=w, minlength=spec.num_states)
    np.testing.assert_allclose(rho_marg, spec.start_dist, atol=1e-14)
    _, p_mat = reconstruct_dynamics(params, spec)
    joint = np.zeros((spec.num_pairs, spec.num_states))
    np.add.at(joint, (enum.sa_indices(spec), enum.s_next), w)
    np.testing.assert_allclose(joint, d_til[:, None] * p_mat.T, atol=1e-14)
    assert enum.m <= spec.num_states * spec.num_pairs * spec.num_states
    r_clean = spec.features @ params.theta
    np.testing.assert_allclose(enum.r, r_clean[enum.sa_indices(spec)], atol=0)


# ---------------------------------------------------------------------------
# covariance


def test_expected_covariance_uniform_occupancy_is_scaled_identity():
    spec, params, _ = _reference_deployment()
    mass = 1.0 / (1.0 - spec.discount)
    d_uniform = np.full(spec.num_pairs, mass / spec.num_pairs)
    cov = expected_covariance(d_uniform, spec)
    assert cov.source == "exact"
    assert cov.ridge == 0.0
    np.testing.assert_allclose(
        cov.sigma, np.eye(spec.feature_dim) / spec.num_pairs, atol=1e-12
    )
    np.testing.assert_allclose(
        cov.inverse(), np.eye(spec.feature_dim) * spec.num_pairs, atol=1e-9
    )


def test_expected_covariance_rank_deficient_records_ridge():
    spec, params, _ = _reference_deployment()
    mass = 1.0 / (1.0 - spec.discount)
    d_point = np.zeros(spec.num_pairs)
    d_point[0] = mass
    cov = expected_covariance(d_point, spec)
    assert cov.ridge > 0
    assert cov.min_eig_raw < 1e-10
    raw = np.outer(spec.features[0], spec.features[0])
    np.testing.assert_allclose(
        cov.sigma, raw + cov.ridge * np.eye(spec.feature_dim), atol=1e-12
    )
    assert np.linalg.eigvalsh(cov.sigma)[0] >= cov.ridge - 1e-15


def test_estimated_covariance_concentrates_on_exact():
    spec, params, d = _reference_deployment()
    ds = sample_dataset(d, params, spec, 1_000_000, seed=13)
    est = estimate_covariance(ds, spec)
    exact = expected_covariance(d, spec, ridge=0.0)
    assert est.source == "estimated"
    assert est.ridge > 0
    diff = np.linalg.norm(est.sigma - exact.sigma, 2)
    assert diff <= 0.01
    assert np.linalg.eigvalsh(est.sigma)[0] >= est.ridge - 1e-12
    np.testing.assert_allclose(est.sigma, est.sigma.T, atol=0)


# ---------------------------------------------------------------------------
# Lagrangians


def test_true_lagrangian_term_isolation():
    spec, params, _ = _reference_deployment()
    gen = substream(2, "lagrange-iso")
    g = gen.standard_normal(spec.num_states)
    omega = gen.standard_normal(spec.feature_dim)
    zero_d = np.zeros(spec.num_pairs)
    zero_nu = np.zeros(spec.feature_dim)
    val = true_lagrangian(zero_d, zero_nu, g, omega, params, spec, LAM)
    assert val == pytest.approx(g @ spec.start_dist, abs=1e-14)
    # lam = 0, g = omega = 0, and consistent nu reads out the linear return
    d = gen.uniform(0.1, 1.0, size=spec.num_pairs)
    zeros_g = np.zeros(spec.num_states)
    nu_d = spec.features.T @ d
    val2 = true_lagrangian(d, nu_d, zeros_g, np.zeros(spec.feature_dim), params, spec, 0.0)
    assert val2 == pytest.approx(d @ (spec.features @ params.theta), abs=1e-12)


def test_true_lagrangian_flow_feasibility_cancels_g():
    spec, params, d = _reference_deployment()
    nu = spec.features.T @ d
    gen = substream(3, "lagrange-cancel")
    omega = gen.standard_normal(spec.feature_dim)
    vals = [
        true_lagrangian(d, nu, gen.standard_normal(spec.num_states), omega, params, spec, LAM)
        for _ in range(4)
    ]
    expect = nu @ (params.theta - omega) - 0.5 * LAM * nu @ nu + d @ (spec.features @ omega)
    np.testing.assert_allclose(vals, expect, atol=1e-10)


def test_empirical_matches_enumeration_exactly():
    spec, params, d = _reference_deployment()
    enum = enumerate_dataset(d, params, spec)
    cov = expected_covariance(d, spec)
    gen = substream(0, "lagrangian-args")
    for _ in range(20):
        dv = gen.dirichlet(np.ones(spec.num_pairs)) * 10.0
        nu = gen.standard_normal(spec.feature_dim)
        g = gen.standard_normal(spec.num_states)
        omega = gen.standard_normal(spec.feature_dim)
        emp = empirical_lagrangian(enum, cov, dv, nu, g, omega, spec, LAM)
        tru = true_lagrangian(dv, nu, g, omega, params, spec, LAM)
        assert emp == pytest.approx(tru, abs=1e-12)


def test_empirical_monte_carlo_within_hoeffding_envelope():
    spec, params, d = _reference_deployment()
    cov = expected_covariance(d, spec)
    cinv = cov.inverse()
    enum = enumerate_dataset(d, params, spec)
    m = 100_000
    ds = sample_dataset(d, params, spec, m, seed=11)
    phi = spec.features
    sa = enum.sa_indices(spec)
    gen = substream(1, "lagrangian-args")
    for _ in range(20):
        dv = gen.dirichlet(np.ones(spec.num_pairs)) * 10.0
        nu = gen.standard_normal(spec.feature_dim)
        g = gen.standard_normal(spec.num_states)
        omega = gen.standard_normal(spec.feature_dim)
        emp = empirical_lagrangian(ds, cov, dv, nu, g, omega, spec, LAM)
        tru = true_lagrangian(dv, nu, g, omega, params, spec, LAM)
        # per-sample outcome over the full enumerated support bounds the range
        z = (cinv @ nu) @ phi[sa].T * (enum.r + spec.discount * g[enum.s_next] - phi[sa] @ omega)
        z = z + g[enum.s0]
        radius = oracles.hoeffding_radius(z.max() - z.min(), m, 1e-4)
        assert abs(emp - tru) <= radius


def test_empirical_with_zero_duals_averages_initial_values():
    spec, params, d = _reference_deployment()
    cov = expected_covariance(d, spec)
    ds = sample_dataset(d, params, spec, 4_000, seed=6)
    g = substream(4, "avg").standard_normal(spec.num_states)
    val = empirical_lagrangian(
        ds, cov, np.zeros(spec.num_pairs), np.zeros(spec.feature_dim), g,
        np.zeros(spec.feature_dim), spec, LAM,
    )
    assert val == pytest.approx(float(np.mean(g[ds.s0])), abs=1e-12)


def test_empirical_singular_covariance_rejected():
    spec, params, d = _reference_deployment()
    ds = sample_dataset(d, params, spec, 32, seed=0)
    dead = CovarianceEstimate(
        sigma=np.zeros((spec.feature_dim, spec.feature_dim)),
        source="exact", ridge=0.0, min_eig_raw=0.0,
    )
    with pytest.raises(DatasetError, match="singular"):
        empirical_lagrangian(
            ds, dead, np.zeros(spec.num_pairs), np.ones(spec.feature_dim),
            np.zeros(spec.num_states), np.zeros(spec.feature_dim), spec, LAM,
        )


# ---------------------------------------------------------------------------
# coverage and sample-size reference


def test_coverage_bound_single_pair_closed_form():
    spec = LinearMdpSpec(1, 1, 0.5, [1.0], [[1.0]])
    params = MdpParams([0.3], [[1.0]])
    bound = coverage_bound([[1.0]], constant_map(params), spec)
    assert bound == pytest.approx(1.0, abs=1e-6)


def test_coverage_bound_reference_instance_finite():
    spec, params = reference_instance()
    bound = coverage_bound(uniform_policy(spec), constant_map(params), spec)
    assert np.isfinite(bound) and bound > 0


def test_sample_size_reference_arithmetic():
    spec = LinearMdpSpec(1, 2, 0.9, [1.0], np.eye(2))
    params = MdpParams([0.3, -0.2], [[1.0, 1.0]])
    # kappa = 1, c1 = min(1, 0.81 * 2) = 1, lead = 2^5 * 0.1^4 / (0.01 * 0.5^4)
    m = theorem4_reference_m(spec, params, b_cov=1.0, lam=0.1, delta=0.5, p=0.1)
    assert m == pytest.approx(5.12 * np.log(4.0), rel=1e-12)
    # log argument below e clamps to a unit log factor
    m_clamped = theorem4_reference_m(spec, params, b_cov=1.0, lam=0.1, delta=0.5, p=10.0)
    assert m_clamped == pytest.approx(5.12, rel=1e-12)


def test_sample_size_reference_infinite_without_feature_coverage():
    spec = LinearMdpSpec(2, 1, 0.5, [0.5, 0.5], [[1.0], [0.5]])
    params = MdpParams([0.4], [[0.8], [0.2]])
    assert theorem4_reference_m(spec, params, 1.0, 0.1, 0.5, 0.1) == np.inf


# ---------------------------------------------------------------------------
# plug-in moments and the empirical saddle


def test_plugin_moments_recover_tabular_parameters():
    spec, params = random_tabular_instance(3)
    d = occupancy_from_policy(uniform_policy(spec), params, spec)
    enum = enumerate_dataset(d, params, spec)
    mom = plugin_moments(enum, spec)
    d_til = (1.0 - spec.discount) * d
    np.testing.assert_allclose(mom.c_mat, np.diag(d_til), atol=1e-14)
    np.testing.assert_allclose(mom.rho_hat, spec.start_dist, atol=1e-14)
    assert mom.c_ridge == 0.0
    theta_hat = np.linalg.solve(mom.c_mat, mom.a_vec)
    np.testing.assert_allclose(theta_hat, params.theta, atol=1e-12)
    mu_hat = np.linalg.solve(mom.c_mat, mom.g_mat).T
    np.testing.assert_allclose(mu_hat, params.mu, atol=1e-12)


def test_plugin_moments_ridge_on_rank_deficient_data():
    spec, params = random_tabular_instance(3)
    mass = 1.0 / (1.0 - spec.discount)
    d_point = np.zeros(spec.num_pairs)
    d_point[1] = mass
    enum = enumerate_dataset(d_point, params, spec)
    mom = plugin_moments(enum, spec)
    assert mom.c_ridge > 0
    assert np.linalg.eigvalsh(mom.c_mat)[0] >= mom.c_ridge - 1e-15


def test_exact_saddle_equals_population_solver():
    spec, params, d = _reference_deployment()
    enum = enumerate_dataset(d, params, spec)
    cov = expected_covariance(d, spec)
    sol = exact_saddle_solve(enum, cov, spec, LAM)
    pop = solve_regularized(params, spec, LAM)
    np.testing.assert_allclose(sol.d, pop.d, atol=1e-8)
    assert sol.primal_objective == pytest.approx(pop.primal_objective, abs=1e-8)


def test_exact_saddle_equals_population_solver_rotated_features():
    spec, params = random_tabular_instance(4, rotate_features=True)
    d = occupancy_from_policy(uniform_policy(spec), params, spec)
    enum = enumerate_dataset(d, params, spec)
    cov = expected_covariance(d, spec)
    sol = exact_saddle_solve(enum, cov, spec, 0.3)
    pop = solve_regularized(params, spec, 0.3)
    np.testing.assert_allclose(sol.d, pop.d, atol=1e-6)


# ---------------------------------------------------------------------------
# sampled retraining loop


def test_schedule_normalization():
    assert _normalize_schedule(500, 3) == [500, 500, 500]
    assert _normalize_schedule(None, 2) == [None, None]
    assert _normalize_schedule("exact", 2) == [None, None]
    assert _normalize_schedule([100, 200], 4) == [100, 200, 200, 200]
    assert _normalize_schedule([None, 50], 3) == [None, 50, 50]


def test_exact_schedule_reproduces_population_retraining():
    spec, _ = reference_instance()
    response = reference_response()
    exact = run_repeated_optimization(response, spec, LAM, max_rounds=6)
    finite = run_finite_sample_retraining(
        response, spec, LAM, m_schedule=None, max_rounds=6, seed=0
    )
    assert len(finite.rounds) == 6
    for pop_round, fin_round in zip(exact.rounds, finite.rounds):
        assert fin_round.round == pop_round.round
        np.testing.assert_allclose(fin_round.d, pop_round.d, atol=1e-6)
    np.testing.assert_allclose(finite.final_d, exact.final_d, atol=1e-6)


def test_sampled_retraining_deterministic_per_seed():
    spec, _ = reference_instance()
    response = reference_response()
    kw = dict(m_schedule=400, max_rounds=3, solver="exact-saddle", sigma_mode="estimated")
    t1 = run_finite_sample_retraining(response, spec, LAM, seed=5, **kw)
    t2 = run_finite_sample_retraining(response, spec, LAM, seed=5, **kw)
    t3 = run_finite_sample_retraining(response, spec, LAM, seed=6, **kw)
    for a, b in zip(t1.rounds, t2.rounds):
        np.testing.assert_array_equal(a.d, b.d)
        assert a.rng_digest == b.rng_digest and len(a.rng_digest) == 16
    assert any(
        not np.array_equal(a.d, c.d) for a, c in zip(t1.rounds, t3.rounds)
    )
    assert [r.round for r in t1.rounds] == [1, 2, 3]
    assert all(np.isfinite(r.perf_value) for r in t1.rounds)


def test_sampled_retraining_tracks_population_loop_loosely():
    spec, _ = reference_instance()
    response = reference_response()
    exact = run_repeated_optimization(response, spec, LAM, max_rounds=4)
    noisy = run_finite_sample_retraining(
        response, spec, LAM, m_schedule=20_000, max_rounds=4, seed=2
    )
    # exact sigma plus 2e4 samples keeps each round near the noiseless path
    for pop_round, fin_round in zip(exact.rounds, noisy.rounds):
        assert np.linalg.norm(fin_round.d - pop_round.d) < 0.5


def test_finite_sample_loop_validation():
    spec, _ = reference_instance()
    response = reference_response()
    with pytest.raises(ValueError, match="unknown solver"):
        run_finite_sample_retraining(response, spec, LAM, 100, 2, 0, solver="magic")
    with pytest.raises(ValueError, match="unknown sigma mode"):
        run_finite_sample_retraining(response, spec, LAM, 100, 2, 0, sigma_mode="magic")
    with pytest.raises(ValueError, match="PdConfig"):
        run_finite_sample_retraining(response, spec, LAM, 100, 2, 0, solver="primal-dual")


def test_round_failures_carry_round_context():
    spec, params = reference_instance()

    def explode(d):
        raise RuntimeError("modelled environment went away")

    bad = ResponseMap(
        kind="stackelberg", base_params=params, eps_theta=0.0, eps_mu=0.0,
        custom_apply=explode,
    )
    with pytest.raises(RetrainRoundError, match="round 1") as info:
        run_finite_sample_retraining(bad, spec, LAM, m_schedule=None, max_rounds=3, seed=0)
    assert info.value.round_index == 1
