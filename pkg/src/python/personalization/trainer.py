"""
Personalization encoder training.

One step combines the denoising loss on the target image with the
lookahead loss on the one-step preview, scored against the conditioning
image, plus the alignment strategy's term.
"""

from dataclasses import dataclass, asdict, field, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Union
import logging
import math

import torch
import torch.nn.functional as F

from core.exceptions import ConfigurationError, DivergenceError, InvariantError
from core.models import ConditioningBundle, LossBreakdown, TrainingBatch
from consistency.alignment import AlignmentConfig, AlignmentContext, alignment_term, build_strategy
from consistency.distill import lcm_preview
from consistency.losses import METRIC_KINDS, lookahead_loss, require_frozen
from diffusion.codec import LatentCodec
from diffusion.lora import LoraDelta
from diffusion.sampler import draw_drop_flags, draw_kv_drop_masks
from diffusion.schedule import NoiseSchedule, TimestepSampler, add_noise, sample_timestep
from personalization.encoders import AdapterEncoder, encode_adapter, encode_kv
from utils import append_jsonl, hash_state_dict

logger = logging.getLogger(__name__)

PREVIEW_KINDS = ('lcm', 'x0')


@dataclass
class TrainConfig:
    """Encoder training settings."""

    iterations: int = 3000
    batch_size: int = 8
    adapter_lr: float = 1e-4
    kv_lr: float = 5e-5
    kv_rank: int = 4
    use_kv: bool = True
    lookahead_weight: float = 0.1
    metric: str = 'identity'
    preview: str = 'lcm'
    annealing_strength: float = 0.2
    text_drop: float = 0.1
    adapter_drop: float = 0.1
    kv_token_drop: float = 0.05
    grad_clip: float = 1.0
    log_every: int = 10
    checkpoint_every: int = 500
    alignment: AlignmentConfig = field(default_factory=AlignmentConfig)

    def __post_init__(self):
        if isinstance(self.alignment, dict):
            self.alignment = AlignmentConfig(**self.alignment)
        if self.adapter_lr <= 0:
            raise ConfigurationError("encoder.adapter_lr", "must be > 0")
        if self.kv_lr <= 0:
            raise ConfigurationError("encoder.kv_lr", "must be > 0")
        if self.checkpoint_every < 0:
            raise ConfigurationError("encoder.checkpoint_every", "must be >= 0")
        if self.lookahead_weight < 0:
            raise ConfigurationError("encoder.lookahead_weight", "must be >= 0")
        if self.metric not in METRIC_KINDS:
            raise ConfigurationError("encoder.metric", f"unknown metric '{self.metric}'")
        if self.preview not in PREVIEW_KINDS:
            raise ConfigurationError("encoder.preview",
                                     f"unknown preview '{self.preview}' (use lcm|x0)")
        for name in ('text_drop', 'adapter_drop', 'kv_token_drop'):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigurationError(f"encoder.{name}", "must lie in [0, 1]")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


ABLATION_PRESETS: Dict[str, Dict[str, Any]] = {
    # ablation ladder
    'data_only': {'lookahead_weight': 0.0, 'use_kv': False, 'alignment': {'kind': 'none'}},
    'x0_loss': {'preview': 'x0', 'use_kv': False, 'alignment': {'kind': 'none'}},
    'lcm_loss': {'preview': 'lcm', 'use_kv': False},
    'lcm_kv': {'preview': 'lcm', 'use_kv': True},
    # alignment preservation
    'align_none': {'alignment': {'kind': 'none'}},
    'align_sds': {'alignment': {'kind': 'sds'}},
    'align_consistency': {'alignment': {'kind': 'consistency_loss'}},
    'align_lora_scaling': {'alignment': {'kind': 'lora_scaling'}},
    # lookahead weight sweep
    'lambda_0.01': {'lookahead_weight': 0.01},
    'lambda_0.1': {'lookahead_weight': 0.1},
    'lambda_1.0': {'lookahead_weight': 1.0},
}


def apply_preset(config: TrainConfig, preset: Optional[str]) -> TrainConfig:
    """Return a copy of ``config`` with a named preset applied."""
    if preset is None:
        return config
    if preset not in ABLATION_PRESETS:
        raise ConfigurationError("encoder.preset", f"unknown preset '{preset}' "
                                 f"(use {', '.join(ABLATION_PRESETS)})")
    overrides = dict(ABLATION_PRESETS[preset])
    if 'alignment' in overrides:
        overrides['alignment'] = replace(config.alignment, **overrides['alignment'])
    return replace(config, **overrides)


class EncoderTrainer:
    """Trains the adapter encoder, adapter projections and KV-encoder LoRA."""

    def __init__(self, denoiser, codec: LatentCodec, schedule: NoiseSchedule,
                 encoder: AdapterEncoder, config: TrainConfig,
                 lcm_lora: Optional[LoraDelta] = None, metric_net=None,
                 kv_lora: Optional[LoraDelta] = None, generator: Optional[torch.Generator] = None):
        """
        Args:
            denoiser: Trained base denoiser; base weights are frozen here
            codec: Trained codec
            schedule: Noise schedule
            encoder: Adapter encoder to train
            config: Training settings
            lcm_lora: Distilled consistency delta (required for the lcm preview)
            metric_net: Frozen metric network for non-mse lookahead metrics
            kv_lora: Existing KV-encoder delta; a fresh one is created when None
            generator: Generator for the fresh KV-encoder delta
        """
        self.denoiser = denoiser
        self.codec = codec
        self.schedule = schedule
        self.encoder = encoder
        self.config = config
        self.lcm_lora = lcm_lora
        self.metric_net = metric_net
        self.strategy = build_strategy(config.alignment)
        self.sampler = TimestepSampler(schedule.T, config.annealing_strength)

        if config.lookahead_weight > 0:
            if config.preview == 'lcm' and lcm_lora is None:
                raise ConfigurationError("encoder.preview",
                                         "lcm preview needs a distilled adapter; run distill-lcm")
            if config.metric != 'mse':
                require_frozen(metric_net, config.metric)

        adapter_ids = {id(p) for p in denoiser.adapter_parameters()}
        self._frozen_names = [n for n, p in denoiser.named_parameters() if id(p) not in adapter_ids]
        for p in denoiser.base_parameters():
            p.requires_grad_(False)
            p.grad = None
        for p in denoiser.adapter_parameters():
            p.requires_grad_(True)
        if lcm_lora is not None:
            for p in lcm_lora.parameters():
                p.requires_grad_(False)
                p.grad = None

        self.kv_lora = None
        if config.use_kv:
            self.kv_lora = kv_lora or denoiser.make_lora('kv_encoder', rank=config.kv_rank,
                                                         generator=generator)
            for p in self.kv_lora.parameters():
                p.requires_grad_(True)

        groups = [{'params': self.adapter_parameters(), 'lr': config.adapter_lr}]
        if self.kv_lora is not None:
            groups.append({'params': list(self.kv_lora.parameters()), 'lr': config.kv_lr})
        self.optimizer = torch.optim.AdamW(groups)
        self._frozen_hash = self.frozen_hash()

    def adapter_parameters(self) -> List[torch.nn.Parameter]:
        params = [p for p in self.encoder.parameters() if p.requires_grad]
        return params + list(self.denoiser.adapter_parameters())

    def trainable_parameters(self) -> List[torch.nn.Parameter]:
        params = self.adapter_parameters()
        if self.kv_lora is not None:
            params += list(self.kv_lora.parameters())
        return params

    def frozen_parameters(self) -> List[torch.nn.Parameter]:
        params = list(self.denoiser.base_parameters())
        if self.lcm_lora is not None:
            params += list(self.lcm_lora.parameters())
        return params

    def frozen_hash(self) -> str:
        """Content hash of the base denoiser weights and the consistency delta."""
        state = self.denoiser.state_dict()
        frozen = {n: state[n] for n in self._frozen_names}
        if self.lcm_lora is not None:
            frozen.update({f"lcm.{k}": v for k, v in self.lcm_lora.state_dict().items()})
        return hash_state_dict(frozen)

    def _check_frozen_grads(self):
        """Frozen parameters must neither track nor hold a gradient after backward."""
        for p in self.frozen_parameters():
            if p.requires_grad or p.grad is not None:
                raise InvariantError("gradient reached a frozen base or consistency parameter")

    def training_step(self, batch: TrainingBatch, generator: torch.Generator) -> LossBreakdown:
        """
        One optimizer update.

        Args:
            batch: Collated training pairs
            generator: Seeded generator for timesteps, noise and drops

        Returns:
            LossBreakdown of the step

        Raises:
            InvariantError: If a frozen parameter receives a gradient
            DivergenceError: If any loss component is non-finite
        """
        cfg = self.config
        device = next(self.denoiser.parameters()).device
        dtype = next(self.denoiser.parameters()).dtype
        cond_images = batch.conditioning_images.to(device, dtype)
        target_images = batch.target_images.to(device, dtype)
        b = len(batch)

        t = sample_timestep(self.sampler, generator, b)
        with torch.no_grad():
            z0 = self.codec.encode(target_images)
        eps = torch.randn(z0.shape, generator=generator, dtype=torch.float32).to(device, dtype)
        z_t = add_noise(self.schedule, z0, t, eps)
        t_dev = t.to(device)

        drop = draw_drop_flags(generator, cfg.text_drop, cfg.adapter_drop, cfg.kv_token_drop)
        kv_cache = None
        if self.kv_lora is not None:
            kv_cache = encode_kv(self.denoiser, self.codec, self.schedule, cond_images, t,
                                 batch.prompt_c.to(device), self.kv_lora, generator)
            masks = draw_kv_drop_masks(kv_cache, cfg.kv_token_drop, generator)
            kv_cache = kv_cache.with_masks(masks)

        cond = ConditioningBundle(
            prompt_tokens=self.denoiser.embed_prompt(batch.prompt_r.to(device)),
            adapter_tokens=encode_adapter(self.encoder, cond_images),
            kv_cache=kv_cache,
            drop=drop,
            null_prompt_tokens=self.denoiser.null_prompt_tokens,
            null_adapter_tokens=self.encoder.null_tokens,
        )
        l_diff = F.mse_loss(self.denoiser(z_t, t_dev, cond), eps)

        zero = torch.zeros((), device=device, dtype=dtype)
        l_lh, l_align, scale = zero, zero, 1.0
        if cfg.lookahead_weight > 0:
            context = AlignmentContext(generator=generator, denoiser=self.denoiser,
                                       schedule=self.schedule, cond=cond, z_t=z_t, t=t,
                                       lora=self.lcm_lora)
            if cfg.preview == 'lcm':
                context.preview_scale = self.strategy.draw_scale(generator)
                preview = lcm_preview(self.denoiser, self.schedule, z_t, t, cond, self.lcm_lora,
                                      scale=context.preview_scale)
            else:
                context.preview_scale = 0.0
                preview = lcm_preview(self.denoiser, self.schedule, z_t, t, cond, None, scale=0.0)
            l_lh = lookahead_loss(preview, cond_images, cfg.metric, self.codec, self.metric_net)
            context.preview = preview
            if cfg.preview == 'lcm':
                l_align, scale = alignment_term(self.strategy, context)
            else:
                scale = 0.0

        total = l_diff + cfg.lookahead_weight * l_lh + l_align
        values = [l_diff.item(), l_lh.item(), l_align.item(), total.item()]
        if not all(math.isfinite(v) for v in values):
            raise DivergenceError("encoder training loss is not finite", iteration=-1,
                                  loss=values[-1])

        self.optimizer.zero_grad()
        total.backward()
        self._check_frozen_grads()
        torch.nn.utils.clip_grad_norm_(self.trainable_parameters(), cfg.grad_clip)
        self.optimizer.step()

        return LossBreakdown(
            diffusion=values[0],
            lookahead=values[1],
            alignment=values[2],
            total=values[3],
            lookahead_weight=cfg.lookahead_weight,
            preview_scale=float(scale),
            timesteps=t.tolist(),
            drop_text=drop.drop_text,
            drop_adapter=drop.drop_adapter,
        )

    def train(self, sample_batch: Callable[[int, torch.Generator], TrainingBatch],
              generator: torch.Generator,
              data_generator: Optional[torch.Generator] = None,
              log_path: Optional[Union[str, Path]] = None,
              progress: Optional[Callable[[int, LossBreakdown], None]] = None,
              ) -> List[LossBreakdown]:
        """
        Run ``config.iterations`` training steps.

        Args:
            sample_batch: Callable(batch_size, generator) returning a TrainingBatch
            generator: Generator for the training step
            data_generator: Generator for batch sampling (defaults to ``generator``)
            log_path: Optional JSON-lines training log
            progress: Optional callable(iteration, breakdown)

        Returns:
            Per-iteration loss breakdowns

        Raises:
            InvariantError: If frozen weights changed
        """
        data_generator = data_generator or generator
        history = []
        self.encoder.train()
        buckets = 10
        for iteration in range(self.config.iterations):
            batch = sample_batch(self.config.batch_size, data_generator)
            try:
                breakdown = self.training_step(batch, generator)
            except DivergenceError as e:
                raise DivergenceError(e.message, iteration=iteration, loss=e.loss) from e
            history.append(breakdown)
            every = self.config.log_every
            if log_path is not None and every and iteration % every == 0:
                append_jsonl(log_path, {
                    'iteration': iteration,
                    'l_diff': breakdown.diffusion,
                    'l_lh': breakdown.lookahead,
                    'alignment': breakdown.alignment,
                    'total': breakdown.total,
                    'preview_scale': breakdown.preview_scale,
                    't_bucket': [int(t * buckets // self.schedule.T) for t in breakdown.timesteps],
                    'drop_text': breakdown.drop_text,
                    'drop_adapter': breakdown.drop_adapter,
                })
            if progress is not None:
                progress(iteration, breakdown)
        self.encoder.eval()
        if self.frozen_hash() != self._frozen_hash:
            raise InvariantError("frozen base denoiser or consistency adapter weights changed "
                                 "during training")
        logger.info("encoder training finished after %d iterations", self.config.iterations)
        return history
