"""Decomposition-based black-box optimization over conditional search spaces."""

from .blocks import (
    AlternatingBlock,
    Block,
    BoundsEstimate,
    ConditioningBlock,
    EuiEstimate,
    JointBlock,
    RunState,
    eliminate_dominated,
    extend_arms,
    init_block,
)
from .data import Dataset, load_dataset, split_train_valid_test, subsample
from .ensemble import EnsembleWeights, ModelPool, ensemble_predict, ensemble_select
from .meta import (
    MetaTask,
    RankNetModel,
    RankTriple,
    RgpeEnsemble,
    attach_meta,
    extract_dataset_features,
    ranking_loss,
    rgpe_predict,
    rgpe_weights,
    select_arms,
    train_ranknet,
)
from .objective import (
    Objective,
    Observation,
    builtin_objective,
    make_pipeline_objective,
    make_synthetic_objective,
    score,
    synthetic_suite,
)
from .plan import (
    PlanSpec,
    RunResult,
    build_plan,
    enumerate_plans,
    run,
    run_plan,
    run_progressive,
)
from .space import SearchSpace, SubProblem, VariableSpec, load_space, parse_space
from .surrogate import GPModel, Prediction, expected_improvement, fit_gp, suggest

__version__ = "0.1.0"
