"""
Core layer for LCM-lookahead.

This package contains interface-agnostic domain logic that can be used
by the CLI or any other presentation layer.

Architecture:
    - models.py: Domain models (ConditioningBundle, KVCache, EvalReport, etc.)
    - exceptions.py: Custom exceptions for domain logic
    - pipeline.py: Stage DAG and manifest orchestrator (import directly;
      it depends on the config layer)
"""

from .models import (
    GuidanceScales,
    DropFlags,
    KVCache,
    ConditioningBundle,
    TrainingSample,
    TrainingBatch,
    LossBreakdown,
    StyleBreakdown,
    EvalReport,
    StageRecord,
)
from .exceptions import (
    LookaheadError,
    ConfigurationError,
    ShapeError,
    TimestepRangeError,
    StateError,
    PromptValidationError,
    StageOrderError,
    ConfigHashMismatchError,
    CheckpointError,
    DivergenceError,
    MetricGateError,
    InvariantError,
)

__all__ = [
    # Models
    'GuidanceScales',
    'DropFlags',
    'KVCache',
    'ConditioningBundle',
    'TrainingSample',
    'TrainingBatch',
    'LossBreakdown',
    'StyleBreakdown',
    'EvalReport',
    'StageRecord',
    # Exceptions
    'LookaheadError',
    'ConfigurationError',
    'ShapeError',
    'TimestepRangeError',
    'StateError',
    'PromptValidationError',
    'StageOrderError',
    'ConfigHashMismatchError',
    'CheckpointError',
    'DivergenceError',
    'MetricGateError',
    'InvariantError',
]
