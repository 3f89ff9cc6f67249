"""Deterministic simulation lab for local-update algorithms under
intermittent communication, with heterogeneity-controlled problem
generators, closed-form fixed-point analysis for quadratics, consensus
diagnostics, and federated bandit runners."""

from .algorithms import (
    CELSGDConfig,
    ICSchedule,
    LocalSGDConfig,
    RunTrace,
    closed_form_shared_optimum_iterate,
    run_ce_lsgd,
    run_local_sgd,
    run_mb_storm,
    run_minibatch_sgd,
    run_serial_sgd,
    tune_step_size,
)
from .diagnostics import (
    ConsensusProbe,
    TraceRecord,
    TrialStats,
    consensus_bound_fourth,
    consensus_bound_second,
    consensus_errors,
    iterate_errors,
    objective_stats,
    uniform_zeta_bound,
)
from .fixedpoint import (
    FixedPointResult,
    compute_fixed_point,
    convex_fixed_point,
    discrepancy_bound,
    fixed_point_norm_bound,
    geometry_comparison,
    kernel_intersection_trivial,
)
from .online import (
    LinearAdversary,
    OnlineConfig,
    RegretTrace,
    hindsight_regret,
    make_linear_adversary,
    one_point_estimator,
    run_fed_osgd,
    run_fed_posgd,
    run_nc_ogd,
    sample_unit_sphere,
    two_point_estimator,
)
from .problems import (
    HeterogeneityReport,
    Instance,
    QuadraticMachine,
    RegressionMachine,
    build_instance,
    global_optimum,
    heterogeneity_report,
    instance_from_json,
    instance_to_json,
    make_condition_number_instance,
    make_offset_highdim_instance,
    make_regression_cohort,
    make_rotated_pair,
    make_shared_optimum_pair,
    make_tau_decoupled_pair,
    multi_point_gradient,
    sample_spherical_cap,
    stochastic_gradient,
)

__version__ = "0.1.0"
