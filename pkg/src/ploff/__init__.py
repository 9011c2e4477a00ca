"""Pseudometric learning for offline reinforcement learning.

Exact and sampled fixed-point computation of a reward-based state-action
pseudometric on tabular MDPs, a Siamese gradient approximation trained from
logged transitions, neighbor-candidate lookup bonuses, and a
bonus-regularized actor-critic, plus a CLI chaining them end to end.
"""

from .agent import (
    AgentParams,
    AgentTrainConfig,
    evaluate_policy,
    hyperparameter_sweep,
    init_agent,
    load_agent,
    save_agent,
    train_agent,
)
from .data import (
    TransitionDataset,
    collect_qlearning_dataset,
    collect_scripted_dataset,
    load_dataset,
    sample_batch,
    save_dataset,
    scale_rewards,
    unscale_rewards,
)
from .envs import (
    ActionSpace,
    GridMap,
    TabularMDP,
    build_gridworld,
    build_pointmass,
    builtin_map,
    load_map,
    random_mdp,
)
from .errors import (
    ConvergenceError,
    DataFormatError,
    DivergenceError,
    NonFiniteError,
    ValidationError,
)
from .exact import (
    SamplerConfig,
    TabularPseudometric,
    apply_operator_F,
    apply_sampled_operator,
    check_pseudometric_axioms,
    iterate_to_fixed_point,
    sampled_fixed_point,
    sup_distance,
    zero_metric,
)
from .metric import (
    EmbedderPair,
    MetricTrainConfig,
    d_phi,
    d_psi,
    init_embedders,
    load_embedders,
    save_embedders,
    train_metric,
)
from .neighbors import (
    BonusSpec,
    NeighborIndex,
    bonus,
    build_neighbor_index,
    load_neighbor_index,
    projection_distance,
    query_candidates,
    save_neighbor_index,
)

__version__ = "0.1.0"

__all__ = [
    "__version__",
    "ActionSpace",
    "AgentParams",
    "AgentTrainConfig",
    "BonusSpec",
    "ConvergenceError",
    "DataFormatError",
    "DivergenceError",
    "EmbedderPair",
    "GridMap",
    "MetricTrainConfig",
    "NeighborIndex",
    "NonFiniteError",
    "SamplerConfig",
    "TabularMDP",
    "TabularPseudometric",
    "TransitionDataset",
    "ValidationError",
    "apply_operator_F",
    "apply_sampled_operator",
    "bonus",
    "build_gridworld",
    "build_neighbor_index",
    "build_pointmass",
    "builtin_map",
    "check_pseudometric_axioms",
    "collect_qlearning_dataset",
    "collect_scripted_dataset",
    "d_phi",
    "d_psi",
    "evaluate_policy",
    "hyperparameter_sweep",
    "init_agent",
    "init_embedders",
    "iterate_to_fixed_point",
    "load_agent",
    "load_dataset",
    "load_embedders",
    "load_map",
    "load_neighbor_index",
    "projection_distance",
    "query_candidates",
    "random_mdp",
    "sample_batch",
    "sampled_fixed_point",
    "save_agent",
    "save_dataset",
    "save_embedders",
    "save_neighbor_index",
    "scale_rewards",
    "sup_distance",
    "train_agent",
    "train_metric",
    "unscale_rewards",
    "zero_metric",
]
