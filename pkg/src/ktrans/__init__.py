"""Probabilistic knowledge translation between schemas.

Source knowledge (a log-linear model or a Markov logic network) is carried
into a target schema through a probabilistic mapping, either by sampling
through the mapping or by rewriting the source structure, and then fitted
by pseudo-likelihood.
"""

from .knowledge import Rule, log_odds_weight, rule_to_features, rule_weight, rules_to_model, tree_to_rules
from .learning import (
    ConvergenceError,
    DTSLParams,
    LearnConfig,
    Structure,
    empty_structure,
    learn_structure_dtsl,
    learn_weights,
    pll_gradient,
    pll_objective,
)
from .mapping import Correspondence, Mapping, build_joint_model, identity_mapping, implied_target_distribution, validate_mapping
from .model import (
    ContractError,
    Dataset,
    Feature,
    Literal,
    LogLinearModel,
    Schema,
    Variable,
    exact_kl,
    exact_marginal,
    pll,
)
from .pipeline import METHODS, ExperimentConfig, Inputs, cross_validate, evaluate, run_method, run_pipeline
from .relational import MLN, DomainSizes, RelationalDatabase, RelationalMapping, RelationalSchema, ground, wpll
from .sampling import SamplerConfig, gibbs_sample, sample_knowledge, translate_dataset
from .structure import eliminate_unmapped, translate_cliques, translate_structure
from .synthetic import TaskSpec, make_synthetic_task

__all__ = [
    "Rule",
    "log_odds_weight",
    "rule_to_features",
    "rule_weight",
    "rules_to_model",
    "tree_to_rules",
    "ConvergenceError",
    "DTSLParams",
    "LearnConfig",
    "Structure",
    "empty_structure",
    "learn_structure_dtsl",
    "learn_weights",
    "pll_gradient",
    "pll_objective",
    "Correspondence",
    "Mapping",
    "build_joint_model",
    "identity_mapping",
    "implied_target_distribution",
    "validate_mapping",
    "ContractError",
    "Dataset",
    "Feature",
    "Literal",
    "LogLinearModel",
    "Schema",
    "Variable",
    "exact_kl",
    "exact_marginal",
    "pll",
    "METHODS",
    "ExperimentConfig",
    "Inputs",
    "cross_validate",
    "evaluate",
    "run_method",
    "run_pipeline",
    "MLN",
    "DomainSizes",
    "RelationalDatabase",
    "RelationalMapping",
    "RelationalSchema",
    "ground",
    "wpll",
    "SamplerConfig",
    "gibbs_sample",
    "sample_knowledge",
    "translate_dataset",
    "eliminate_unmapped",
    "translate_cliques",
    "translate_structure",
    "TaskSpec",
    "make_synthetic_task",
]

__version__ = "0.1.0"
