"""
Image-space distances used by the lookahead loss and the guidance lab.

Metric networks are duck-typed: identity/perceptual distances need an
object with ``embed(x)`` and ``feature_maps(x)``; ``clip_like`` needs
``penultimate(x)``. Every metric network must be frozen.
"""

from typing import Optional, Sequence

import torch
import torch.nn.functional as F

from core.exceptions import ConfigurationError, StateError
from diffusion.codec import LatentCodec

METRIC_KINDS = ('mse', 'perceptual', 'identity', 'clip_like')

# per-layer weights of the perceptual distance, shallow to deep
PERCEPTUAL_WEIGHTS = (1.0, 0.5, 0.25)


def require_frozen(network, kind: str):
    """Raise StateError unless ``network`` is loaded and has no trainable parameters."""
    if network is None:
        raise StateError(f"metric network for '{kind}' distance missing; run train-metrics")
    if any(p.requires_grad for p in network.parameters()):
        raise StateError(f"metric network for '{kind}' distance must be frozen "
                         "before use as a loss")


def image_distance(image: torch.Tensor, reference: torch.Tensor, kind: str,
                   metric_net=None,
                   layer_weights: Sequence[float] = PERCEPTUAL_WEIGHTS) -> torch.Tensor:
    """
    Per-sample distance between images and references.

    Args:
        image: (B, C, H, W) images; gradients flow through
        reference: (B, C, H, W) references; treated as constants
        kind: One of ``METRIC_KINDS``
        metric_net: Frozen metric network for the non-mse kinds

    Returns:
        (B,) tensor of distances
    """
    if kind not in METRIC_KINDS:
        raise ConfigurationError("encoder.metric",
                                 f"unknown metric '{kind}' (use {'|'.join(METRIC_KINDS)})")
    reference = reference.to(image.dtype).detach()

    if kind == 'mse':
        return ((image - reference) ** 2).flatten(1).mean(1)

    require_frozen(metric_net, kind)
    if kind == 'identity':
        ref = metric_net.embed(reference).detach()
        return 1.0 - F.cosine_similarity(metric_net.embed(image), ref, dim=-1)
    if kind == 'clip_like':
        ref = metric_net.penultimate(reference).detach()
        return 1.0 - F.cosine_similarity(metric_net.penultimate(image), ref, dim=-1)

    feats = metric_net.feature_maps(image)
    with torch.no_grad():
        ref_feats = metric_net.feature_maps(reference)
    total = torch.zeros(image.shape[0], dtype=image.dtype, device=image.device)
    for weight, f, r in zip(layer_weights, feats, ref_feats):
        total = total + weight * ((f - r) ** 2).flatten(1).mean(1)
    return total


def lookahead_loss(preview: torch.Tensor, reference_image: torch.Tensor, metric: str,
                   codec: LatentCodec, metric_net=None) -> torch.Tensor:
    """
    Image-space loss on the decoded preview against the conditioning image.

    Args:
        preview: Preview latents (B, C, H, W)
        reference_image: Conditioning images I_c (B, C, H, W)
        metric: Distance kind
        codec: Codec decoding the preview
        metric_net: Frozen metric network when ``metric`` is not 'mse'

    Returns:
        Scalar batch-mean distance

    Raises:
        StateError: If the metric network is missing or trainable
    """
    decoded = codec.decode(preview)
    return image_distance(decoded, reference_image, metric, metric_net).mean()
