"""
Personalization encoders.

- ``AdapterEncoder`` maps a conditioning image to a fixed number of adapter
  tokens consumed by the decoupled cross-attention.
- ``encode_kv`` runs a noisy conditioning latent through the frozen
  denoiser with the KV-encoder LoRA and captures every self-attention
  layer's keys and values.
"""

from dataclasses import dataclass, asdict
from typing import Dict, Optional

import torch
import torch.nn as nn

from core.exceptions import ConfigurationError, ShapeError
from core.models import ConditioningBundle, DropFlags, KVCache
from diffusion.codec import LatentCodec
from diffusion.lora import LoraDelta
from diffusion.schedule import NoiseSchedule, add_noise


@dataclass
class EncoderConfig:
    """Adapter encoder architecture."""

    image_size: int = 32
    image_channels: int = 3
    hidden_channels: int = 32
    num_tokens: int = 4
    token_dim: int = 64
    train_backbone: bool = True

    def __post_init__(self):
        if self.num_tokens < 1:
            raise ConfigurationError("encoder.num_tokens", "must be >= 1")
        if self.image_size % 8:
            raise ConfigurationError("encoder.image_size", "must be divisible by 8")

    def to_dict(self) -> Dict:
        return asdict(self)


class AdapterEncoder(nn.Module):
    """Conv backbone plus a linear projection to adapter tokens."""

    def __init__(self, config: Optional[EncoderConfig] = None):
        super().__init__()
        self.config = cfg = config or EncoderConfig()
        h = cfg.hidden_channels
        self.backbone = nn.Sequential(
            nn.Conv2d(cfg.image_channels, h, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(h, h * 2, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(h * 2, h * 2, 3, stride=2, padding=1), nn.SiLU(),
            nn.AdaptiveAvgPool2d(2),
            nn.Flatten(),
        )
        self.projection = nn.Linear(h * 2 * 4, cfg.num_tokens * cfg.token_dim)
        self.norm = nn.LayerNorm(cfg.token_dim)
        self.null_tokens = nn.Parameter(torch.randn(cfg.num_tokens, cfg.token_dim) * 0.02)
        if not cfg.train_backbone:
            for p in self.backbone.parameters():
                p.requires_grad_(False)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        if images.ndim != 4 or images.shape[1] != cfg.image_channels or \
                images.shape[-2:] != (cfg.image_size, cfg.image_size):
            raise ShapeError(f"adapter encoder expects (B, {cfg.image_channels}, {cfg.image_size}, "
                             f"{cfg.image_size}) images, got {tuple(images.shape)}")
        tokens = self.projection(self.backbone(images))
        return self.norm(tokens.reshape(images.shape[0], cfg.num_tokens, cfg.token_dim))


def encode_adapter(encoder: AdapterEncoder, image: torch.Tensor) -> torch.Tensor:
    """E(I_c): (B, num_tokens, token_dim) adapter tokens."""
    return encoder(image)


def encode_kv(denoiser, codec: LatentCodec, schedule: NoiseSchedule, image: torch.Tensor, t,
              kv_prompt_ids: torch.Tensor, lora: Optional[LoraDelta],
              generator: Optional[torch.Generator] = None,
              eps: Optional[torch.Tensor] = None) -> KVCache:
    """
    Capture self-attention keys/values of a noisy conditioning latent.

    Args:
        denoiser: Frozen base denoiser
        codec: Codec mapping images to latents
        schedule: Noise schedule
        image: Conditioning images (B, C, H, W)
        t: Timestep int or (B,) tensor
        kv_prompt_ids: Prompt token ids (B, L) the encoder pass is conditioned on
        lora: KV-encoder delta (or None for the base model)
        generator: Generator for the fresh noise
        eps: Explicit noise; drawn from ``generator`` when None

    Returns:
        KVCache with one entry per self-attention layer
    """
    z0 = codec.encode(image)
    if eps is None:
        eps = torch.randn(z0.shape, generator=generator, dtype=torch.float32)
        eps = eps.to(z0.device, z0.dtype)
    t_cpu = t.cpu() if torch.is_tensor(t) else t
    z_t = add_noise(schedule, z0, t_cpu, eps)
    cond = denoiser.prompt_conditioning(kv_prompt_ids.to(z0.device))
    record: Dict = {}
    t_dev = torch.as_tensor(t_cpu).to(z0.device)
    denoiser(z_t, t_dev, cond, lora=lora, kv_record=record)
    return KVCache(layers={name: record[name] for name in denoiser.self_attention_layers})


def build_conditioning(denoiser, prompt_ids: torch.Tensor,
                       adapter_tokens: Optional[torch.Tensor] = None,
                       kv_cache: Optional[KVCache] = None, drop: Optional[DropFlags] = None,
                       null_adapter_tokens: Optional[torch.Tensor] = None,
                       adapter_weight: float = 1.0) -> ConditioningBundle:
    """Assemble a ConditioningBundle with the denoiser's null prompt."""
    return ConditioningBundle(
        prompt_tokens=denoiser.embed_prompt(prompt_ids),
        adapter_tokens=adapter_tokens,
        kv_cache=kv_cache,
        drop=drop,
        null_prompt_tokens=denoiser.null_prompt_tokens,
        null_adapter_tokens=null_adapter_tokens,
        adapter_weight=adapter_weight,
    )
