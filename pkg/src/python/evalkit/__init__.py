"""
Evaluation kit.

Modules:
    - networks.py: Frozen identity embedder and style classifier, quality gates
    - evaluate.py: Identity-similarity / style-alignment scoring and reports
"""

from .networks import (
    IdentityEmbedder,
    MetricConfig,
    StyleClassifier,
    identity_similarity,
)
from .evaluate import (
    EVAL_PROMPTS,
    EvaluationConfig,
    EvalCase,
    build_cases,
    compare_reports,
    evaluate,
    write_report,
)

__all__ = [
    # Networks
    'IdentityEmbedder',
    'MetricConfig',
    'StyleClassifier',
    'identity_similarity',
    # Evaluation
    'EVAL_PROMPTS',
    'EvaluationConfig',
    'EvalCase',
    'build_cases',
    'compare_reports',
    'evaluate',
    'write_report',
]
