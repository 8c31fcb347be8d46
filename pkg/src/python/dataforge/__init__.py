"""
Procedural consistent-identity data.

Modules:
    - identity.py: Seeded identity parameters
    - styles.py: Context backgrounds and style transforms
    - dataset.py: Dataset build, manifest, pair sampling and probes
"""

from .identity import IdentitySpec, generate_identity, PARAM_BOUNDS
from .styles import StyleSpec, get_style, render, mean_saturation
from .dataset import (
    DataConfig,
    DatasetManifest,
    PairSampler,
    build_dataset,
    load_images,
    dataset_stats,
    linear_probe,
)

__all__ = [
    'IdentitySpec',
    'generate_identity',
    'PARAM_BOUNDS',
    'StyleSpec',
    'get_style',
    'render',
    'mean_saturation',
    'DataConfig',
    'DatasetManifest',
    'PairSampler',
    'build_dataset',
    'load_images',
    'dataset_stats',
    'linear_probe',
]
