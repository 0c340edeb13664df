"""walklab: a desk-scale numerical laboratory for transient lattice walks."""

__version__ = "0.1.0"

from .lattice import (  # noqa: F401
    AtLeast,
    Exactly,
    Finite,
    LocalTimeField,
    TruncatedInfinite,
    TruncationCertificate,
    WalkState,
    level_set,
    random_connected_set,
    simulate_local_times,
    step_walk,
    truncation_bias_bound,
    walk_state,
)
from .green import (  # noqa: F401
    GreenEstimate,
    GreenOracle,
    GreenProfileEstimate,
    green_box_solve,
    green_mc,
    green_mc_profile,
    hitting_probability,
)
from .capacity import (  # noqa: F401
    EquilibriumSolution,
    capacity_mc,
    equilibrium_solve,
    variational_lower_bound,
)
from .moments import (  # noqa: F401
    HolderSeries,
    InterpolatedIntersection,
    MomentEnvelope,
    TailEstimate,
    holder_series,
    ladder_tail_fit,
    moment_bound_constant,
    overlap_truncation_bias,
    permutation_moment_bound,
    sample_overlaps,
    tail_fit,
    validity_window,
    zeta,
)
from .trail import (  # noqa: F401
    BoundConstants,
    CoalescenceHierarchy,
    EdgeOccupation,
    IntersectionBounds,
    TrailStock,
    coalesce,
    decomposition_probability,
    edge_occupation,
    extract_trail_stock,
    intersection_bound_evaluators,
    level_set_prob_bound,
    loop_transfer,
    multinomial_count_bound,
    ordered_path_sum,
)
from .rate import (  # noqa: F401
    IntersectionOperator,
    OptimizerConfig,
    ProfileFunction,
    RateResult,
    build_operator,
    calibrate_scale,
    minimize_rate,
    minimize_rate_ball,
    operator_norm,
    rate_predictions,
    singleton_rate,
)
from .experiments import (  # noqa: F401
    WeightedSample,
    effective_sample_size,
    forced_return_sampler,
    tilted_overlap_samples,
    run_intersection_decomposition,
    run_level_set_geometry,
    run_range_intersection,
)
from .config import ExperimentConfig, load_config  # noqa: F401
from .errors import ConfigError, NumericError  # noqa: F401
