"""
Style renderers.

``render`` draws an identity on a context background at 4x supersampling,
downsamples, then applies the style's forward transform. All randomness
comes from the ``numpy.random.Generator`` passed in.
"""

from dataclasses import dataclass, field
from typing import Callable, Dict, Optional

import numpy as np
import torch

from core.exceptions import ConfigurationError
from dataforge.identity import HAIR_RGB, IdentitySpec
from personalization.prompts import CONTEXTS, STYLES

SUPERSAMPLE = 4


@dataclass(frozen=True)
class StyleSpec:
    """A style id plus the parameters of its forward transform."""

    name: str
    params: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in STYLES:
            raise ConfigurationError("data.styles",
                                     f"unknown style '{self.name}' (use {'|'.join(STYLES)})")


DEFAULT_STYLE_PARAMS: Dict[str, Dict[str, float]] = {
    'photo': {'noise': 0.01, 'shading': 0.25},
    'sketch': {'edge_gain': 6.0},
    'poster': {'levels': 3, 'border': 2},
    'oil': {'levels': 5, 'saturation': 1.4},
    'comic': {'levels': 4, 'edge_threshold': 0.12},
    'grainy': {'noise': 0.12, 'desaturate': 0.5},
}


def get_style(name: str) -> StyleSpec:
    """Style with its default parameters."""
    if name not in STYLES:
        raise ConfigurationError("data.styles", f"unknown style '{name}' (use {'|'.join(STYLES)})")
    return StyleSpec(name=name, params=dict(DEFAULT_STYLE_PARAMS[name]))


# ----------------------------------------------------------------------
# Drawing
# ----------------------------------------------------------------------

def _grid(size: int):
    coords = (np.arange(size) + 0.5) / size * 2 - 1
    v, u = np.meshgrid(coords, coords, indexing='ij')
    return u, v


def _background(context: str, u: np.ndarray, v: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    h, w = u.shape
    canvas = np.zeros((h, w, 3))
    if context == 'forest':
        canvas[:] = (0.20, 0.45, 0.22)
        for x in rng.uniform(-1, 1, size=4):
            canvas[np.abs(u - x) < 0.06] = (0.35, 0.22, 0.12)
    elif context == 'city':
        canvas[:] = (0.70, 0.78, 0.88)
        for x, top in zip(np.linspace(-0.9, 0.9, 5), rng.uniform(-0.6, 0.2, size=5)):
            canvas[(np.abs(u - x) < 0.17) & (v > top)] = (0.40, 0.40, 0.45)
    elif context == 'beach':
        canvas[:] = (0.55, 0.75, 0.95)
        canvas[v > 0.2] = (0.20, 0.45, 0.75)
        canvas[v > 0.5] = (0.93, 0.84, 0.60)
    elif context == 'plain':
        canvas[:] = (0.88, 0.88, 0.86)
    else:
        raise ConfigurationError("data.contexts",
                                 f"unknown context '{context}' (use {'|'.join(CONTEXTS)})")
    return canvas


def _ellipse(u, v, cu, cv, ru, rv) -> np.ndarray:
    return ((u - cu) / ru) ** 2 + ((v - cv) / rv) ** 2 <= 1.0


def draw_face(identity: IdentitySpec, context: str, size: int, rng: np.random.Generator,
              shading: float = 0.25) -> np.ndarray:
    """Draw an identity as an HWC float image in [0, 1]."""
    big = size * SUPERSAMPLE
    u, v = _grid(big)
    img = _background(context, u, v, rng)
    fw, fh = identity.face_width, identity.face_height
    hair = np.array(HAIR_RGB[identity.hair_color])
    vol = identity.hair_volume

    # hair behind the head
    if identity.hair_style == 'long':
        img[_ellipse(u, v, 0, 0.15, fw + vol, fh + vol) & (v > -fh)] = hair
    elif identity.hair_style == 'curly':
        bumps = 0.04 * np.sin(14 * np.arctan2(v, u))
        curls = (u / (fw + vol + bumps)) ** 2 + ((v + 0.1) / (fh * 0.9 + vol + bumps)) ** 2
        img[curls <= 1] = hair

    face = _ellipse(u, v, 0, 0.05, fw, fh)
    r = np.sqrt((u / fw) ** 2 + ((v - 0.05) / fh) ** 2)
    skin = identity.skin_rgb[None, None, :] * (1 - shading * r[..., None] ** 2)
    img[face] = skin[face]

    # hair on top of the head
    if identity.hair_style in ('straight', 'curly', 'long'):
        hairline = -fh * 0.55
        img[face & (v < hairline)] = hair
    if identity.old:
        for y in (-fh * 0.40, -fh * 0.32):
            img[face & (np.abs(v - y) < 0.012) & (np.abs(u) < fw * 0.5)] = identity.skin_rgb * 0.6

    # eyes
    for side in (-1, 1):
        cu, cv, es = side * identity.eye_spacing, identity.eye_height, identity.eye_size
        img[_ellipse(u, v, cu, cv, es * 1.4, es)] = (0.97, 0.97, 0.97)
        img[_ellipse(u, v, cu, cv, es * 0.6, es * 0.6)] = (0.08, 0.08, 0.1)
        if identity.glasses:
            ring = _ellipse(u, v, cu, cv, es * 2.2, es * 1.8)
            inner = _ellipse(u, v, cu, cv, es * 1.8, es * 1.4)
            img[ring & ~inner] = (0.05, 0.05, 0.05)

    # nose
    nose_top = identity.eye_height + 0.05
    nose = (v > nose_top) & (v < nose_top + identity.nose_length) & \
        (np.abs(u) < identity.nose_width * (v - nose_top) / identity.nose_length + 0.01)
    img[nose] = identity.skin_rgb * 0.75

    # mouth
    mouth_v = identity.mouth_height + identity.mouth_curve * (1 - (u / identity.mouth_width) ** 2)
    img[(np.abs(v - mouth_v) < 0.03) & (np.abs(u) < identity.mouth_width)] = (0.65, 0.15, 0.18)

    if identity.freckles:
        spots = np.random.default_rng(identity.seed).uniform(-1, 1, size=(8, 2))
        for su, sv in spots:
            cu = np.sign(su) * (0.2 + 0.15 * abs(su)) * fw / 0.6
            cv = 0.1 + 0.08 * sv
            img[_ellipse(u, v, cu, cv, 0.02, 0.02) & face] = identity.skin_rgb * 0.55
    if identity.hat:
        brim = (np.abs(v + fh * 0.8) < 0.05) & (np.abs(u) < fw + 0.15)
        crown = (v < -fh * 0.8) & (v > -fh * 0.8 - 0.35) & (np.abs(u) < fw * 0.75)
        img[brim | crown] = (0.25, 0.12, 0.35)

    # box downsample
    img = img.reshape(size, SUPERSAMPLE, size, SUPERSAMPLE, 3).mean(axis=(1, 3))
    return np.clip(img, 0.0, 1.0)


# ----------------------------------------------------------------------
# Style transforms
# ----------------------------------------------------------------------

def _luminance(img: np.ndarray) -> np.ndarray:
    return img @ np.array([0.299, 0.587, 0.114])


def _edges(img: np.ndarray) -> np.ndarray:
    gy, gx = np.gradient(_luminance(img))
    return np.sqrt(gx ** 2 + gy ** 2)


def _quantize(img: np.ndarray, levels: int) -> np.ndarray:
    return np.round(img * (levels - 1)) / (levels - 1)


def _photo(img, params, rng):
    return img + rng.normal(0, params['noise'], size=img.shape)


def _sketch(img, params, rng):
    gray = 1.0 - np.clip(_edges(img) * params['edge_gain'], 0, 1)
    return np.repeat(gray[..., None], 3, axis=-1)


def _poster(img, params, rng):
    gray = _quantize(_luminance(img), int(params['levels']))
    sepia = np.stack([gray * 0.95 + 0.05, gray * 0.80 + 0.05, gray * 0.55 + 0.03], axis=-1)
    b = int(params['border'])
    sepia[:b], sepia[-b:], sepia[:, :b], sepia[:, -b:] = 0.2, 0.2, 0.2, 0.2
    return sepia


def _oil(img, params, rng):
    mean = img.mean(axis=-1, keepdims=True)
    vivid = mean + params['saturation'] * (img - mean)
    padded = np.pad(vivid, ((0, 1), (0, 1), (0, 0)), mode='edge')
    smooth = (padded[:-1, :-1] + padded[1:, :-1] + padded[:-1, 1:] + padded[1:, 1:]) / 4
    return _quantize(np.clip(smooth, 0, 1), int(params['levels']))


def _comic(img, params, rng):
    flat = _quantize(img, int(params['levels']))
    flat[_edges(img) > params['edge_threshold']] = 0.0
    return flat


def _grainy(img, params, rng):
    mean = img.mean(axis=-1, keepdims=True)
    dull = mean + (1 - params['desaturate']) * (img - mean)
    return dull + rng.normal(0, params['noise'], size=img.shape)


STYLE_TRANSFORMS: Dict[str, Callable] = {
    'photo': _photo,
    'sketch': _sketch,
    'poster': _poster,
    'oil': _oil,
    'comic': _comic,
    'grainy': _grainy,
}


def render(identity: IdentitySpec, style: StyleSpec, rng: np.random.Generator,
           context: str = 'plain', size: int = 32) -> torch.Tensor:
    """
    Render an identity in a style.

    Args:
        identity: Identity parameters
        style: Style id and transform parameters
        rng: Render generator (background layout and noise)
        context: Background context
        size: Output resolution

    Returns:
        Float32 CHW tensor in [-1, 1]
    """
    shading = style.params.get('shading', 0.25)
    img = draw_face(identity, context, size, rng, shading=shading)
    img = np.clip(STYLE_TRANSFORMS[style.name](img, style.params, rng), 0.0, 1.0)
    return torch.from_numpy(img.astype(np.float32)).permute(2, 0, 1) * 2.0 - 1.0


def mean_saturation(image: torch.Tensor) -> float:
    """Mean HSV saturation of a CHW image in [-1, 1]."""
    rgb = (image.clamp(-1, 1) + 1) / 2
    mx = rgb.max(dim=0).values
    mn = rgb.min(dim=0).values
    sat = torch.where(mx > 0, (mx - mn) / mx.clamp(min=1e-8), torch.zeros_like(mx))
    return float(sat.mean())
