"""
Pixel/latent codec boundary.

``identity`` mode passes images straight through (pixel-space diffusion);
``autoencoder`` mode is a small convolutional autoencoder that plays the
role of a tiny VAE decoder in the lookahead loss.
"""

from dataclasses import dataclass, asdict
from typing import Dict, List, Optional, Tuple
import logging

import torch
import torch.nn as nn
import torch.nn.functional as F

from core.exceptions import ConfigurationError, ShapeError, StateError

logger = logging.getLogger(__name__)

CODEC_MODES = ('identity', 'autoencoder')


@dataclass
class CodecConfig:
    """Codec settings."""

    mode: str = 'identity'
    image_channels: int = 3
    latent_channels: int = 4
    hidden_channels: int = 32
    iterations: int = 2000
    batch_size: int = 64
    learning_rate: float = 1e-3
    reconstruction_threshold: float = 0.01

    def __post_init__(self):
        if self.mode not in CODEC_MODES:
            raise ConfigurationError("diffusion.codec.mode",
                                     f"unknown mode '{self.mode}' (use identity|autoencoder)")
        if self.reconstruction_threshold <= 0:
            raise ConfigurationError("diffusion.codec.reconstruction_threshold", "must be > 0")

    def to_dict(self) -> Dict:
        return asdict(self)


class LatentCodec(nn.Module):
    """Encode images in [-1, 1] to latents and decode them back."""

    def __init__(self, config: Optional[CodecConfig] = None):
        super().__init__()
        self.config = config or CodecConfig()
        self.register_buffer('trained', torch.tensor(self.config.mode == 'identity'))
        if self.config.mode == 'autoencoder':
            cfg = self.config
            c, h, z = cfg.image_channels, cfg.hidden_channels, cfg.latent_channels
            self.encoder = nn.Sequential(
                nn.Conv2d(c, h, 3, padding=1), nn.SiLU(),
                nn.Conv2d(h, h, 4, stride=2, padding=1), nn.SiLU(),
                nn.Conv2d(h, z, 3, padding=1),
            )
            self.decoder = nn.Sequential(
                nn.Conv2d(z, h, 3, padding=1), nn.SiLU(),
                nn.ConvTranspose2d(h, h, 4, stride=2, padding=1), nn.SiLU(),
                nn.Conv2d(h, c, 3, padding=1),
            )

    @property
    def mode(self) -> str:
        return self.config.mode

    @property
    def is_trained(self) -> bool:
        return bool(self.trained)

    def mark_trained(self):
        self.trained.fill_(True)

    def latent_shape(self, image_shape: Tuple[int, int, int]) -> Tuple[int, int, int]:
        """Latent (C, H, W) for an image of shape (C, H, W)."""
        c, h, w = image_shape
        if self.mode == 'identity':
            return (c, h, w)
        return (self.config.latent_channels, h // 2, w // 2)

    def _require_trained(self):
        if not self.is_trained:
            raise StateError(
                "autoencoder codec is untrained; run train-base (which fits the codec) "
                "or switch diffusion.codec.mode to 'identity'"
            )

    def encode(self, image: torch.Tensor) -> torch.Tensor:
        """Map images (B, C, H, W) in [-1, 1] to latents."""
        if image.ndim != 4 or image.shape[1] != self.config.image_channels:
            raise ShapeError(f"expected images (B, {self.config.image_channels}, H, W), "
                             f"got {tuple(image.shape)}")
        if self.mode == 'identity':
            return image
        self._require_trained()
        return self.encoder(image)

    def decode(self, latent: torch.Tensor) -> torch.Tensor:
        """Map latents back to images; differentiable end to end."""
        if self.mode == 'identity':
            return latent
        self._require_trained()
        return self.decoder(latent)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        return self.decode(self.encode(image))


def codec_encode(codec: LatentCodec, image: torch.Tensor) -> torch.Tensor:
    """Encode images to latents."""
    return codec.encode(image)


def codec_decode(codec: LatentCodec, latent: torch.Tensor) -> torch.Tensor:
    """Decode latents to images."""
    return codec.decode(latent)


def fit_codec(codec: LatentCodec, images: torch.Tensor, generator: torch.Generator,
              progress=None) -> List[float]:
    """
    Train the autoencoder codec on an image tensor.

    Args:
        codec: Codec in autoencoder mode
        images: Training images (N, C, H, W) in [-1, 1]
        generator: Seeded generator for minibatch order
        progress: Optional callable(iteration, loss)

    Returns:
        Loss history

    Raises:
        StateError: If the final reconstruction error misses the threshold
    """
    cfg = codec.config
    if codec.mode == 'identity':
        return []
    device = next(codec.parameters()).device
    params = list(codec.encoder.parameters()) + list(codec.decoder.parameters())
    optimizer = torch.optim.Adam(params, lr=cfg.learning_rate)
    history = []
    codec.train()
    for iteration in range(cfg.iterations):
        idx = torch.randint(0, images.shape[0], (cfg.batch_size,), generator=generator)
        batch = images[idx].to(device)
        loss = F.mse_loss(codec.decoder(codec.encoder(batch)), batch)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        history.append(loss.item())
        if progress is not None:
            progress(iteration, loss.item())
    codec.eval()

    with torch.no_grad():
        errors = []
        for start in range(0, images.shape[0], 256):
            batch = images[start:start + 256].to(device)
            recon = codec.decoder(codec.encoder(batch))
            errors.append(F.mse_loss(recon, batch, reduction='sum').item())
        mse = sum(errors) / images.numel()
    logger.info("codec reconstruction mse=%.5f (threshold %.5f)", mse, cfg.reconstruction_threshold)
    if mse >= cfg.reconstruction_threshold:
        raise StateError(
            f"codec reconstruction error {mse:.5f} misses threshold "
            f"{cfg.reconstruction_threshold}; raise diffusion.codec.iterations "
            "or switch to identity mode"
        )
    codec.mark_trained()
    for p in codec.parameters():
        p.requires_grad_(False)
    return history
