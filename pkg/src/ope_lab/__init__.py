"""Off-policy evaluation with marginalized importance weights on synthetic bandits."""

from .core import (
    CapacityError,
    LoggedDataset,
    LoggedSample,
    NumericalError,
    OPELabError,
    PolicyMatrix,
    ShapeError,
    SupportViolationError,
    ValidationError,
    check_common_embedding_support,
    check_common_support,
    marginal_embedding_dist,
)
from .estimators import (
    Estimate,
    FeatureConfig,
    RewardModel,
    WeightVector,
    compute_marginal_weights,
    estimate_dm,
    estimate_dr,
    estimate_ips,
    estimate_mdr,
    estimate_mips,
    fit_qhat,
    marginalize_qhat,
    vanilla_weights,
)
from .oracle import (
    POOL_EXACT,
    EvalReport,
    TrueRewardModel,
    TrueValue,
    VisitationExpectation,
    ZeroRewardModel,
    analytic_variance_dr,
    analytic_variance_ips,
    analytic_variance_mdr,
    check_no_direct_effect,
    exact_variance_gap,
    monte_carlo_eval,
    true_value,
    variance_gap_mdr,
)
from .synthetic import (
    EnvConfig,
    Environment,
    behavior_policy,
    embed_dist,
    evaluation_policy,
    expected_reward_xa,
    expected_reward_xae,
    expected_reward_xe,
    init_env,
    sample_logged_data,
)

__version__ = "0.1.0"
