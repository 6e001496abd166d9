"""Policy-gradient laboratory for clamped-entropy regularization on
finite-horizon token MDPs: exact small-instance oracles, bound checks, batch
surrogates, an adaptive-coefficient trainer, and an experiment CLI."""

from .softmax_policy import (
    ClampConfig,
    EntropyReport,
    GradientTable,
    SoftmaxPolicy,
    TokenState,
    entropy_report,
    read_checkpoint,
    save_checkpoint,
)
from .token_mdp import (
    EnumeratedTree,
    EnumerationLimitError,
    SyntheticTaskSpec,
    TokenMdp,
    Trajectory,
    TrajectoryBatch,
    build_synthetic_task,
    exact_dataset_value,
    exact_state_distribution,
    exact_value,
    rollout,
    sample_batch,
)
from .surrogates import (
    AdvantageBatch,
    ClipConfig,
    SurrogateEval,
    aent_objective,
    clamped_entropy_bonus,
    grpo_advantages,
    ppo_clip_objective,
    reinforce_gradient_estimate,
    sampled_entropy_gradient_estimate,
)
from .aent_trainer import (
    VARIANTS,
    CoefficientScheduler,
    StepRecord,
    TrainConfig,
    TrainingAborted,
    run_variant,
    train,
    update_lambda,
    variant_config,
)
from .theory_audit import (
    BoundReport,
    InequalityCheck,
    ValueTables,
    audit_instance,
    bound_report,
    check_advantage_centering,
    check_performance_difference,
    check_gradient_entropy_bound,
    check_stationary_suboptimality,
    check_regularized_stationary_bound,
    compute_value_tables,
    exact_entropy_and_grad,
    exact_gradient_ascent,
    exact_policy_gradient,
    finite_difference_gradient,
    gradient_relative_error,
    optimal_response_set,
    random_instance,
    soft_optimal_policy,
)

__version__ = "0.1.0"
