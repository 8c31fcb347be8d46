"""Base denoiser training (text-conditioned epsilon prediction)."""

from dataclasses import dataclass, asdict
from typing import Callable, Dict, List, Optional
import logging
import math

import torch
import torch.nn.functional as F

from core.exceptions import ConfigurationError, DivergenceError
from core.models import ConditioningBundle
from diffusion.codec import LatentCodec
from diffusion.schedule import NoiseSchedule, add_noise, uniform_timesteps

logger = logging.getLogger(__name__)


@dataclass
class BaseTrainConfig:
    """Settings of the base denoiser training stage."""

    iterations: int = 20000
    batch_size: int = 64
    learning_rate: float = 2e-4
    prompt_drop_prob: float = 0.1
    grad_clip: float = 1.0
    log_every: int = 100

    def __post_init__(self):
        if self.iterations < 0:
            raise ConfigurationError("base_training.iterations", "must be >= 0")
        if self.learning_rate <= 0:
            raise ConfigurationError("base_training.learning_rate", "must be > 0")
        if not 0.0 <= self.prompt_drop_prob <= 1.0:
            raise ConfigurationError("base_training.prompt_drop_prob", "must lie in [0, 1]")

    def to_dict(self) -> Dict:
        return asdict(self)


def denoising_loss(denoiser, codec: LatentCodec, schedule: NoiseSchedule, images: torch.Tensor,
                   prompt_ids: torch.Tensor, t: torch.Tensor, eps: torch.Tensor,
                   drop_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """
    Epsilon-prediction MSE for one batch.

    Args:
        denoiser: TinyUNet
        codec: Codec used to map images to latents
        schedule: Noise schedule
        images: (B, C, H, W) in [-1, 1]
        prompt_ids: (B, L) prompt token ids
        t: (B,) timesteps
        eps: Noise with the latent shape
        drop_mask: Optional (B,) bool; True replaces the prompt by the null prompt
    """
    with torch.no_grad():
        z0 = codec.encode(images)
    z_t = add_noise(schedule, z0, t, eps)
    tokens = denoiser.embed_prompt(prompt_ids)
    if drop_mask is not None:
        null = denoiser.null_prompt_tokens.unsqueeze(0).expand_as(tokens)
        tokens = torch.where(drop_mask[:, None, None], null, tokens)
    cond = ConditioningBundle(prompt_tokens=tokens, null_prompt_tokens=denoiser.null_prompt_tokens)
    return F.mse_loss(denoiser(z_t, t, cond), eps)


def train_denoiser(denoiser, codec: LatentCodec, schedule: NoiseSchedule, images: torch.Tensor,
                   prompt_ids: torch.Tensor, config: BaseTrainConfig, generator: torch.Generator,
                   progress: Optional[Callable[[int, float], None]] = None) -> List[float]:
    """
    Train the base denoiser with uniform timesteps and prompt dropout.

    Args:
        denoiser: TinyUNet to train in place (adapter projections stay untouched)
        codec: Trained codec
        schedule: Noise schedule
        images: Training images (N, C, H, W)
        prompt_ids: Prompt token ids (N, L)
        config: Training settings
        generator: Seeded generator for batches, timesteps, noise and drops
        progress: Optional callable(iteration, loss)

    Returns:
        Loss history

    Raises:
        DivergenceError: If the loss becomes non-finite
    """
    device = next(denoiser.parameters()).device
    params = denoiser.base_parameters()
    optimizer = torch.optim.AdamW(params, lr=config.learning_rate)
    history = []
    denoiser.train()
    for iteration in range(config.iterations):
        idx = torch.randint(0, images.shape[0], (config.batch_size,), generator=generator)
        batch = images[idx].to(device)
        ids = prompt_ids[idx].to(device)
        t = uniform_timesteps(schedule.T, generator, config.batch_size).to(device)
        latent_shape = codec.latent_shape(tuple(batch.shape[1:]))
        eps = torch.randn((config.batch_size, *latent_shape), generator=generator)
        eps = eps.to(device, batch.dtype)
        drop = torch.rand(config.batch_size, generator=generator) < config.prompt_drop_prob
        drop = drop.to(device)

        loss = denoising_loss(denoiser, codec, schedule, batch, ids, t, eps, drop)
        value = loss.item()
        if not math.isfinite(value):
            raise DivergenceError("base denoiser loss diverged", iteration=iteration, loss=value)
        optimizer.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(params, config.grad_clip)
        optimizer.step()
        history.append(value)
        if progress is not None:
            progress(iteration, value)
        if config.log_every and iteration % config.log_every == 0:
            logger.info("train-base iteration %d loss %.5f", iteration, value)
    denoiser.eval()
    return history
