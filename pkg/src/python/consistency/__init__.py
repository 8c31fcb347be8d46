"""
Consistency adapter: distillation, one-step previews, image losses and
alignment-preservation strategies.
"""

from .distill import (
    DistillConfig,
    c_skip,
    c_out,
    distill,
    lcm_preview,
    preview_alignment_probe,
    preview_divergence,
)
from .losses import METRIC_KINDS, image_distance, lookahead_loss
from .alignment import (
    AlignmentConfig,
    AlignmentContext,
    AlignmentStrategy,
    STRATEGY_CLASSES,
    build_strategy,
    alignment_term,
)

__all__ = [
    'DistillConfig',
    'c_skip',
    'c_out',
    'distill',
    'lcm_preview',
    'preview_alignment_probe',
    'preview_divergence',
    'METRIC_KINDS',
    'image_distance',
    'lookahead_loss',
    'AlignmentConfig',
    'AlignmentContext',
    'AlignmentStrategy',
    'STRATEGY_CLASSES',
    'build_strategy',
    'alignment_term',
]
