"""
Procedural identities.

An identity is a parameter vector drawn from a 64-bit seed: face geometry,
skin tone, hair and accessories. It fixes what the subject looks like in
every style.
"""

from dataclasses import dataclass, asdict
from typing import Dict, List, Tuple

import numpy as np


HAIR_STYLES = ('curly', 'straight', 'bald', 'long')
HAIR_COLORS = ('dark', 'blond', 'red', 'gray')

HAIR_RGB = {
    'dark': (0.15, 0.10, 0.08),
    'blond': (0.85, 0.72, 0.40),
    'red': (0.65, 0.25, 0.10),
    'gray': (0.62, 0.62, 0.62),
}

# skin tone endpoints, interpolated by the identity's tone parameter
SKIN_LIGHT = np.array([0.96, 0.82, 0.70])
SKIN_DARK = np.array([0.42, 0.27, 0.18])

# inclusive bounds of every continuous parameter
PARAM_BOUNDS: Dict[str, Tuple[float, float]] = {
    'face_width': (0.50, 0.75),
    'face_height': (0.66, 0.90),
    'eye_spacing': (0.20, 0.40),
    'eye_height': (-0.22, -0.02),
    'eye_size': (0.07, 0.13),
    'nose_length': (0.10, 0.26),
    'nose_width': (0.04, 0.10),
    'mouth_width': (0.16, 0.40),
    'mouth_height': (0.28, 0.46),
    'mouth_curve': (-0.10, 0.10),
    'skin_tone': (0.0, 1.0),
    'hair_volume': (0.05, 0.25),
}


@dataclass(frozen=True)
class IdentitySpec:
    """Seeded face parameters."""

    seed: int
    face_width: float
    face_height: float
    eye_spacing: float
    eye_height: float
    eye_size: float
    nose_length: float
    nose_width: float
    mouth_width: float
    mouth_height: float
    mouth_curve: float
    skin_tone: float
    hair_volume: float
    hair_style: str
    hair_color: str
    old: bool
    glasses: bool
    hat: bool
    freckles: bool

    @property
    def skin_rgb(self) -> np.ndarray:
        return (1 - self.skin_tone) * SKIN_LIGHT + self.skin_tone * SKIN_DARK

    def vector(self) -> np.ndarray:
        """Numeric parameter vector (continuous parameters then categorical codes)."""
        continuous = [getattr(self, name) for name in PARAM_BOUNDS]
        categorical = [HAIR_STYLES.index(self.hair_style), HAIR_COLORS.index(self.hair_color),
                       int(self.old), int(self.glasses), int(self.hat), int(self.freckles)]
        return np.array(continuous + categorical, dtype=np.float64)

    def descriptors(self) -> List[str]:
        """Up to four subject descriptor words for the prompt template."""
        head = 'round' if self.face_width > 0.62 else 'narrow'
        words = ['old' if self.old else 'young',
                 self.hair_style,
                 self.hair_color if self.hair_style != 'bald' else head]
        if self.glasses:
            words.append('glasses')
        elif self.hat:
            words.append('hat')
        elif self.freckles:
            words.append('freckles')
        else:
            words.append('round' if self.face_width > 0.62 else 'narrow')
        return words[:4]

    def to_dict(self) -> Dict:
        return asdict(self)


def generate_identity(seed: int) -> IdentitySpec:
    """
    Draw an identity from a 64-bit seed.

    Args:
        seed: Non-negative integer seed

    Returns:
        IdentitySpec; equal seeds give equal specs
    """
    rng = np.random.default_rng(int(seed))
    params = {name: float(rng.uniform(lo, hi)) for name, (lo, hi) in PARAM_BOUNDS.items()}
    hair_style = HAIR_STYLES[int(rng.integers(len(HAIR_STYLES)))]
    old = bool(rng.random() < 0.4)
    hair_color = 'gray' if old and rng.random() < 0.6 else HAIR_COLORS[int(rng.integers(3))]
    return IdentitySpec(
        seed=int(seed),
        hair_style=hair_style,
        hair_color=hair_color,
        old=old,
        glasses=bool(rng.random() < 0.3),
        hat=bool(rng.random() < 0.2),
        freckles=bool(rng.random() < 0.25),
        **params,
    )
