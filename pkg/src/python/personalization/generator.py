"""Inference with a trained personalization encoder."""

from typing import Optional
import logging

import torch

from core.models import ConditioningBundle, GuidanceScales
from diffusion.codec import LatentCodec
from diffusion.lora import LoraDelta
from diffusion.sampler import SampleResult, SamplingConfig, ddim_sample
from diffusion.schedule import NoiseSchedule
from personalization.encoders import AdapterEncoder, build_conditioning, encode_adapter, encode_kv
from personalization.prompts import kv_encoder_prompt

logger = logging.getLogger(__name__)


class PersonalizedGenerator:
    """Samples images of a subject from one conditioning image and a prompt."""

    def __init__(self, denoiser, codec: LatentCodec, schedule: NoiseSchedule,
                 encoder: Optional[AdapterEncoder] = None, kv_lora: Optional[LoraDelta] = None,
                 config: Optional[SamplingConfig] = None):
        self.denoiser = denoiser
        self.codec = codec
        self.schedule = schedule
        self.encoder = encoder
        self.kv_lora = kv_lora
        self.config = config or SamplingConfig()

    @property
    def uses_kv(self) -> bool:
        return self.kv_lora is not None

    @torch.no_grad()
    def conditioning(self, cond_images: Optional[torch.Tensor], prompt_ids: torch.Tensor,
                     generator: Optional[torch.Generator] = None,
                     adapter_weight: float = 1.0) -> ConditioningBundle:
        """Encode the subject image(s) and prompt into a bundle."""
        device = next(self.denoiser.parameters()).device
        prompt_ids = prompt_ids.to(device)
        if self.encoder is None or cond_images is None:
            return build_conditioning(self.denoiser, prompt_ids)
        cond_images = cond_images.to(device)
        adapter_tokens = encode_adapter(self.encoder, cond_images)
        kv_cache = None
        if self.kv_lora is not None:
            rows = [kv_encoder_prompt()] * cond_images.shape[0]
            kv_ids = torch.tensor(rows, dtype=torch.long, device=device)
            kv_cache = encode_kv(self.denoiser, self.codec, self.schedule, cond_images,
                                 self.config.kv_timestep, kv_ids, self.kv_lora, generator)
        return build_conditioning(self.denoiser, prompt_ids, adapter_tokens, kv_cache,
                                  null_adapter_tokens=self.encoder.null_tokens,
                                  adapter_weight=adapter_weight)

    @torch.no_grad()
    def sample(self, cond_images: Optional[torch.Tensor], prompt_ids: torch.Tensor,
               generator: Optional[torch.Generator] = None, scales: Optional[GuidanceScales] = None,
               adapter_weight: float = 1.0, steps: Optional[int] = None,
               eta: Optional[float] = None) -> SampleResult:
        """
        Sample latents for each (conditioning image, prompt) row.

        Returns:
            SampleResult in latent space; see ``images`` for decoded output
        """
        cond = self.conditioning(cond_images, prompt_ids, generator, adapter_weight)
        cfg = self.denoiser.config
        latent_shape = (cfg.in_channels, cfg.image_size, cfg.image_size)
        return ddim_sample(self.denoiser, self.schedule, cond, steps or self.config.steps,
                           scales or self.config.scales, generator,
                           eta=self.config.eta if eta is None else eta, latent_shape=latent_shape)

    @torch.no_grad()
    def images(self, cond_images: Optional[torch.Tensor], prompt_ids: torch.Tensor,
               generator: Optional[torch.Generator] = None, **kwargs) -> torch.Tensor:
        """Sample and decode to images in [-1, 1]."""
        result = self.sample(cond_images, prompt_ids, generator, **kwargs)
        return self.codec.decode(result.final).clamp(-1, 1)
