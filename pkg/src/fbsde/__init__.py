"""
fbsde - Deep solver for forward-backward SDEs and semi-linear PDEs

Combines:
- Nested reverse-mode differentiation (diffgraph)
- Shared-parameter FC, ResNet and NAIS-Net approximators (nets)
- Black-Scholes, HJB, Allen-Cahn and heat benchmarks (problems)
- Euler-Maruyama sampling and multilevel schedules (sampler)
- Single-level and multilevel Adam training (trainer)
- Error curves, generalization sweeps and timing tables (report)
"""

__version__ = "1.0.0"

# =============================================================================
# Public API re-exports
# =============================================================================

from fbsde.core import (
    CHECKPOINT_FILE,
    EVENTS_FILE,
    LOSS_CURVE_FILE,
    RESOLVED_CONFIG_FILE,
    EXIT_OK,
    EXIT_FAILURE,
    EXIT_CONFIG,
    EXIT_CHECKPOINT,
    EXIT_DIVERGENCE,
    FBSDEError,
    ShapeError,
    ContractError,
    ConfigError,
    CheckpointError,
    NumericalError,
    DivergenceError,
    append_event,
    read_events,
    save_json,
    load_json,
)

from fbsde.diffgraph import (
    Graph,
    GraphNode,
    constant,
    variable,
    grad,
    hessian,
    finite_difference_check,
)

from fbsde.nets import (
    Architecture,
    NetConfig,
    NetworkParams,
    build_A,
    project_R,
    init_params,
    forward,
    gradient_x,
    save_checkpoint,
    load_checkpoint,
)

from fbsde.problems import (
    FBSDEProblem,
    GeneratorPoint,
    black_scholes,
    hjb,
    hjb_exact_mc,
    allen_cahn,
    heat,
    build_problem,
    generator_point,
    verify_driver_mapping,
)

from fbsde.sampler import (
    TimeGrid,
    PathBatch,
    LevelSchedule,
    sample_increments,
    euler_step,
    gbm_exact_path,
    coarsen_increments,
    strong_convergence_study,
)

from fbsde.trainer import (
    TrainConfig,
    RolloutState,
    TrainReport,
    rollout,
    loss,
    adam_step,
    train_single_level,
    train_multilevel,
)

from fbsde.report import (
    ErrorCurve,
    GeneralizationSweep,
    evaluate_error_curve,
    generalization_sweep,
    merge_timings,
    timing_table,
)

from fbsde.config import RunConfig, load_config
