"""Step-level reward labeling for chain-of-thought trajectories."""

from .core import (
    AnswerSet,
    Problem,
    PromptTemplate,
    Step,
    Trajectory,
    answers_equal,
    extract_final_answer,
    normalize_answer,
)
from .scorer import (
    CostLedger,
    DecodingParams,
    HTTPBackend,
    LengthNormalizedLogProb,
    RolloutResult,
    SyntheticBackend,
    ledger_report,
    sample_completions,
    score_answer,
)
from .rewards import (
    CPMIConfig,
    DiscreteDistribution,
    MCConfig,
    PAVConfig,
    StepReward,
    cpmi_jeffreys_check,
    cpmi_reward_averaged,
    cpmi_step_reward,
    generate_hard_negatives,
    heuristic_perturb,
    jeffreys_divergence,
    label_trajectory_cpmi,
    label_trajectory_mc,
    label_trajectory_pav,
    mc_step_reward,
    merge_rewards,
    pav_step_reward,
    rand_merge,
)
from .pipeline import (
    CompositionSpec,
    NormalizationConfig,
    bce_loss,
    build_dataset,
    normalize_rewards,
    sample_composition,
)
from .evaluate import (
    BoNCandidate,
    EfficiencyInput,
    EvalRecord,
    best_of_n,
    f1_score,
    predict_first_error,
    processbench_f1,
    relative_efficiency,
    roc_auc,
    step_labels_from_first_error,
    sweep_threshold,
    wasserstein1,
)

__version__ = "0.1.0"
