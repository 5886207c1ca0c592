"""Performative linear MDPs: regularized retraining to a stable occupancy.

The package simulates environments whose rewards and transitions react to the
deployed policy through a response map on occupancy measures. It provides an
exact regularized solver for the occupancy flow program, contraction
certificates for repeated retraining, finite-sample retraining from logged
tuples, an offline primal-dual saddle-point method, and Stackelberg games as
concrete response maps. The `perfmdp` command drives all of it from TOML
configs with reproducible counter-based randomness.
"""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    DatasetError,
    FitResidualError,
    InvalidKernelError,
    KappaZeroError,
    OracleNonConvergence,
    PerfmdpError,
    ProjectionInfeasibleError,
    RetrainRoundError,
    SingularSystemError,
    SizeLimitError,
)
from .mdp import (
    LinearMdpSpec,
    MdpParams,
    bellman_flow_residual,
    constraint_matrix,
    occupancy_from_policy,
    performative_value,
    policy_from_occupancy,
    policy_matrix,
    reconstruct_dynamics,
    uniform_policy,
    validate_params,
    validate_spec,
    value_of_policy,
)
from .responses import (
    MeasuredSensitivity,
    ResponseMap,
    affine_map,
    apply_response,
    constant_map,
    feasible_affine_map,
    load_response_map,
    measure_sensitivity,
    project_params,
    project_to_simplex,
    save_response_map,
)
from .solver import (
    KktReport,
    Solution,
    SpectralConstants,
    dual_norm_bound,
    dual_objective,
    flow_matrix,
    min_norm_dual_pair,
    oracle_solve_small,
    recover_nu_from_duals,
    solve_flow_program,
    solve_regularized,
    spectral_constants,
)
from .retraining import (
    Certificate,
    RetrainTrace,
    StabilityGapReport,
    TraceRound,
    auto_lambda,
    brute_force_performative_optimum,
    certify,
    run_repeated_optimization,
    self_consistent_occupancy,
    stability_gap,
    theorem2_bound,
    theorem3_bound,
)
from .sampling import (
    CovarianceEstimate,
    Dataset,
    coverage_bound,
    empirical_lagrangian,
    enumerate_dataset,
    estimate_covariance,
    exact_saddle_solve,
    expected_covariance,
    plugin_moments,
    run_finite_sample_retraining,
    sample_dataset,
    theorem4_reference_m,
    true_lagrangian,
)
from .primal_dual import (
    PdConfig,
    PdResult,
    mixture_average_feature,
    run_offline_primal_dual,
    theorem5_counts,
)
from .stackelberg import (
    StackelbergGame,
    build_follower_mdp,
    follower_softmax_response,
    induced_leader_mdp,
    induced_params,
    lemma1_sensitivity_check,
    lemma1_unit_bounds,
    lemma2_multi_follower_bounds,
    load_game,
    occupancy_l1_perturbation_check,
    random_game,
    save_game,
    stackelberg_response_map,
    tabular_leader_spec,
)
from .instances import (
    balanced_kernel_instance,
    random_certified_instance,
    random_tabular_instance,
    reference_instance,
    reference_params,
    reference_spec,
    reference_response,
)

__all__ = [name for name in dir() if not name.startswith("_")]
