"""Distillation-aware architecture search with a meta-learned accuracy predictor."""

from .errors import (
    BudgetError,
    CheckpointError,
    DecodeError,
    DistilnasError,
    RemapError,
    SpaceValidationError,
    TaskDBError,
)
from .space import (
    ArchConfig,
    CostBudget,
    CostReport,
    SearchSpaceSpec,
    count_costs,
    decode_onehot,
    default_spec,
    encode_onehot,
    imagenet_spec,
    largest,
    sample,
    sample_many,
    sample_unique,
    within_budget,
)

__version__ = "0.1.0"

__all__ = [
    "ArchConfig",
    "BudgetError",
    "CheckpointError",
    "CostBudget",
    "CostReport",
    "DecodeError",
    "DistilnasError",
    "RemapError",
    "SearchSpaceSpec",
    "SpaceValidationError",
    "TaskDBError",
    "count_costs",
    "decode_onehot",
    "default_spec",
    "encode_onehot",
    "imagenet_spec",
    "largest",
    "sample",
    "sample_many",
    "sample_unique",
    "within_budget",
    "__version__",
]
