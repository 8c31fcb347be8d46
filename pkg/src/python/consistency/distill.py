"""
Consistency distillation and the one-step preview.

The consistency function of the adapter-applied denoiser is

    f(z_t, t) = c_skip(t) * z_t + c_out(t) * x0(z_t, t, eps_lcm)

with c_skip(0) = 1 and c_out(0) = 0. A scaled preview blends between the
raw x0 approximation (scale 0) and f (scale 1), scaling both the LoRA
delta and the boundary parameterization.
"""

from dataclasses import dataclass, asdict, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union
import logging
import math

import torch
import torch.nn.functional as F

from core.exceptions import ConfigurationError, DivergenceError, InvariantError, StateError
from core.models import ConditioningBundle
from diffusion.codec import LatentCodec
from diffusion.lora import LoraDelta
from diffusion.sampler import (TWO_TERM_BRANCHES, cfg_two_term, ddim_loop, ddpm_loop,
                               initial_latent, make_predictor, stack_branches)
from diffusion.schedule import NoiseSchedule, _check_timestep, _extract, add_noise, predict_x0
from utils import append_jsonl, hash_module

logger = logging.getLogger(__name__)

PROBE_SAMPLERS = ('ddpm', 'ddim')


@dataclass
class DistillConfig:
    """Consistency distillation settings."""

    skip_steps: int = 20
    ema_decay: float = 0.95
    iterations: int = 4000
    learning_rate: float = 1e-4
    batch_size: int = 32
    rank: int = 4
    sigma_data: float = 0.5
    timestep_scaling: float = 10.0
    teacher_guidance: float = 1.0
    grad_clip: float = 1.0
    log_every: int = 100

    def __post_init__(self):
        if self.skip_steps < 1:
            raise ConfigurationError("distill.skip_steps", "must be >= 1")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigurationError("distill.ema_decay", "must lie in [0, 1)")
        if self.iterations < 0:
            raise ConfigurationError("distill.iterations", "must be >= 0")
        if self.learning_rate <= 0:
            raise ConfigurationError("distill.learning_rate", "must be > 0")

    def to_dict(self) -> Dict:
        return asdict(self)


def c_skip(t: torch.Tensor, sigma_data: float = 0.5,
           timestep_scaling: float = 10.0) -> torch.Tensor:
    """Skip coefficient; equals 1 at t = 0."""
    scaled = torch.as_tensor(t, dtype=torch.float64) * timestep_scaling
    return sigma_data ** 2 / (scaled ** 2 + sigma_data ** 2)


def c_out(t: torch.Tensor, sigma_data: float = 0.5, timestep_scaling: float = 10.0) -> torch.Tensor:
    """Output coefficient; equals 0 at t = 0."""
    scaled = torch.as_tensor(t, dtype=torch.float64) * timestep_scaling
    return scaled / torch.sqrt(scaled ** 2 + sigma_data ** 2)


def _per_sample(coeff: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    coeff = coeff.to(device=like.device, dtype=like.dtype)
    if coeff.ndim == 0:
        return coeff
    return coeff.reshape(-1, *([1] * (like.ndim - 1)))


def consistency_function(denoiser, schedule: NoiseSchedule, z_t: torch.Tensor, t,
                         cond: ConditioningBundle, lora: Optional[LoraDelta],
                         sigma_data: float = 0.5, timestep_scaling: float = 10.0) -> torch.Tensor:
    """Boundary-parameterized one-step prediction of the clean latent."""
    t = torch.as_tensor(t, device=z_t.device)
    eps = denoiser(z_t, t, cond, lora=lora)
    x0 = predict_x0(schedule, z_t, t.cpu(), eps)
    skip = _per_sample(c_skip(t.cpu(), sigma_data, timestep_scaling), z_t)
    out = _per_sample(c_out(t.cpu(), sigma_data, timestep_scaling), z_t)
    return skip * z_t + out * x0


def lcm_preview(denoiser, schedule: NoiseSchedule, z_t: torch.Tensor, t, cond: ConditioningBundle,
                lora: Optional[LoraDelta], scale: float = 1.0, sigma_data: float = 0.5,
                timestep_scaling: float = 10.0) -> torch.Tensor:
    """
    Differentiable one-step preview of the clean latent.

    Args:
        denoiser: Frozen base denoiser
        schedule: Noise schedule
        z_t: Noisy latents (B, C, H, W)
        t: Timestep int or (B,) tensor
        cond: Conditioning bundle; gradients flow into its tensors
        lora: Distilled consistency delta
        scale: Blend in [0, 1]; 0 is exactly the base x0 approximation

    Returns:
        Preview latents with the shape of ``z_t``
    """
    if not 0.0 <= float(scale) <= 1.0:
        raise ConfigurationError("preview.scale", f"must lie in [0, 1], got {scale}")
    t_idx = _check_timestep(schedule, t.cpu() if torch.is_tensor(t) else t)
    if scale == 0 or lora is None:
        eps = denoiser(z_t, t_idx.to(z_t.device), cond)
        return predict_x0(schedule, z_t, t_idx, eps)
    eps = denoiser(z_t, t_idx.to(z_t.device), cond, lora=lora, lora_scale=float(scale))
    x0 = predict_x0(schedule, z_t, t_idx, eps)
    skip = _per_sample(scale * c_skip(t_idx, sigma_data, timestep_scaling), z_t)
    out = _per_sample(1.0 - scale * (1.0 - c_out(t_idx, sigma_data, timestep_scaling)), z_t)
    return skip * z_t + out * x0


def ddim_teacher_step(schedule: NoiseSchedule, z_t: torch.Tensor, t: torch.Tensor,
                      t_prev: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """Deterministic DDIM jump with per-sample timesteps; t_prev < 0 means the clean end."""
    t = t.cpu()
    t_prev = t_prev.cpu()
    ab_prev_all = torch.cat([schedule.alpha_bar, torch.ones(1, dtype=schedule.alpha_bar.dtype)])
    # index -1 wraps to the appended 1.0
    clean_end = torch.full_like(t_prev, -1)
    ab_prev = _extract(ab_prev_all, torch.where(t_prev < 0, clean_end, t_prev), z_t)
    x0 = predict_x0(schedule, z_t, t, eps)
    return ab_prev.sqrt() * x0 + (1 - ab_prev).sqrt() * eps


def _teacher_eps(teacher, z_t, t, cond: ConditioningBundle, guidance: float) -> torch.Tensor:
    if guidance == 1.0:
        return teacher(z_t, t, cond)
    batched = stack_branches(cond, TWO_TERM_BRANCHES)
    eps = teacher(z_t.repeat(2, 1, 1, 1), t.repeat(2), batched).chunk(2)
    return cfg_two_term(eps[0], eps[1], guidance)


def distill(teacher, codec: LatentCodec, schedule: NoiseSchedule, images: torch.Tensor,
            prompt_ids: torch.Tensor, config: DistillConfig, generator: torch.Generator,
            progress: Optional[Callable[[int, float], None]] = None,
            log_path: Optional[Union[str, Path]] = None) -> LoraDelta:
    """
    Distill a consistency LoRA from a trained base denoiser.

    Args:
        teacher: Trained base denoiser (never modified)
        codec: Trained codec
        schedule: Noise schedule
        images: Training images (N, C, H, W)
        prompt_ids: Prompt token ids (N, L)
        config: Distillation settings
        generator: Seeded generator
        progress: Optional callable(iteration, loss)
        log_path: Optional JSON-lines log

    Returns:
        The online ``LoraDelta`` named 'lcm'

    Raises:
        StateError: If no teacher is given
        InvariantError: If teacher weights changed during distillation
        DivergenceError: If the loss becomes non-finite
    """
    if teacher is None:
        raise StateError("base denoiser missing; run train-base")
    device = next(teacher.parameters()).device
    teacher_hash = hash_module(teacher)
    teacher.eval()
    trainable_flags = [p.requires_grad for p in teacher.parameters()]
    for p in teacher.parameters():
        p.requires_grad_(False)

    online = teacher.make_lora('lcm', rank=config.rank, generator=generator)
    target = teacher.make_lora('lcm_target', rank=config.rank)
    target.copy_from(online)
    for p in target.parameters():
        p.requires_grad_(False)
    optimizer = torch.optim.AdamW(online.parameters(), lr=config.learning_rate)
    k = config.skip_steps

    try:
        for iteration in range(config.iterations):
            idx = torch.randint(0, images.shape[0], (config.batch_size,), generator=generator)
            with torch.no_grad():
                z0 = codec.encode(images[idx].to(device))
            cond = teacher.prompt_conditioning(prompt_ids[idx].to(device))
            t = torch.randint(k, schedule.T, (config.batch_size,), generator=generator)
            t_prev = t - k
            eps = torch.randn(z0.shape, generator=generator).to(device, z0.dtype)
            z_t = add_noise(schedule, z0, t, eps)

            pred = consistency_function(teacher, schedule, z_t, t, cond, online,
                                        config.sigma_data, config.timestep_scaling)
            with torch.no_grad():
                teacher_eps = _teacher_eps(teacher, z_t, t.to(device), cond,
                                           config.teacher_guidance)
                z_prev = ddim_teacher_step(schedule, z_t, t, t_prev, teacher_eps)
                tgt = consistency_function(teacher, schedule, z_prev, t_prev, cond, target,
                                           config.sigma_data, config.timestep_scaling)
            loss = F.mse_loss(pred, tgt)
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError("consistency distillation diverged", iteration=iteration,
                                      loss=value)
            optimizer.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(online.parameters(), config.grad_clip)
            optimizer.step()
            target.ema_update(online, config.ema_decay)

            if progress is not None:
                progress(iteration, value)
            if log_path is not None and config.log_every and iteration % config.log_every == 0:
                append_jsonl(log_path, {'iteration': iteration, 'loss': value})
    finally:
        for p, flag in zip(teacher.parameters(), trainable_flags):
            p.requires_grad_(flag)

    if hash_module(teacher) != teacher_hash:
        raise InvariantError("teacher weights changed during distillation")
    logger.info("distilled consistency adapter over %d iterations", config.iterations)
    return online


@dataclass
class ProbeResult:
    """Preview vs x0-approximation error against the sampler's final output."""

    fraction: float
    timestep: int
    preview_mse: List[float] = field(default_factory=list)
    x0_mse: List[float] = field(default_factory=list)

    @property
    def win_rate(self) -> float:
        if not self.preview_mse:
            return 0.0
        wins = sum(1 for p, x in zip(self.preview_mse, self.x0_mse) if p < x)
        return wins / len(self.preview_mse)

    def to_dict(self) -> Dict:
        return {
            'fraction': self.fraction,
            'timestep': self.timestep,
            'win_rate': self.win_rate,
            'mean_preview_mse': sum(self.preview_mse) / max(len(self.preview_mse), 1),
            'mean_x0_mse': sum(self.x0_mse) / max(len(self.x0_mse), 1),
        }


@torch.no_grad()
def preview_alignment_probe(denoiser, schedule: NoiseSchedule, lora: LoraDelta,
                            cond: ConditioningBundle, latent_shape: Sequence[int],
                            generator: torch.Generator, fractions: Sequence[float] = (0.25, 0.5),
                            steps: int = 50, sampler: str = 'ddpm') -> List[ProbeResult]:
    """
    Compare one-step previews with the x0 approximation along sampled trajectories.

    One seed per conditioning row. Each row is sampled to completion with
    ancestral DDPM over every timestep (``sampler='ddpm'``) or with ``steps``
    deterministic DDIM steps (``sampler='ddim'``). At every requested
    fraction of the trajectory the preview and the x0 approximation are
    scored against the final latent of that same run.
    """
    if sampler not in PROBE_SAMPLERS:
        raise ConfigurationError("probe.sampler",
                                 f"must be one of {PROBE_SAMPLERS}, got '{sampler}'")
    ref = cond.prompt_tokens
    shape = (cond.batch_size, *latent_shape)
    z_T = initial_latent(shape, generator, dtype=ref.dtype, device=ref.device)
    n_steps = schedule.T if sampler == 'ddpm' else steps
    index_of = {f: min(int(round(f * n_steps)), n_steps - 1) for f in fractions}
    captured: Dict[int, tuple] = {}

    def capture(i: int, t: int, z: torch.Tensor):
        if i in index_of.values():
            captured[i] = (t, z.detach())

    predictor = make_predictor(denoiser, cond)
    if sampler == 'ddpm':
        final = ddpm_loop(predictor, schedule, z_T, generator, on_step=capture).final
    else:
        final = ddim_loop(predictor, schedule, z_T, steps, on_step=capture,
                          keep_trajectory=False).final
    probes = []
    for fraction in fractions:
        t, z_t = captured[index_of[fraction]]
        preview = lcm_preview(denoiser, schedule, z_t, t, cond, lora, scale=1.0)
        x0 = lcm_preview(denoiser, schedule, z_t, t, cond, lora, scale=0.0)
        probe = ProbeResult(fraction=fraction, timestep=t)
        probe.preview_mse = ((preview - final) ** 2).flatten(1).mean(1).tolist()
        probe.x0_mse = ((x0 - final) ** 2).flatten(1).mean(1).tolist()
        probes.append(probe)
        logger.info("%s probe at %.0f%% (t=%d): preview wins %.2f", sampler, fraction * 100, t,
                    probe.win_rate)
    return probes


@torch.no_grad()
def preview_divergence(denoiser, schedule: NoiseSchedule, lora: LoraDelta, cond: ConditioningBundle,
                       z_t: torch.Tensor, t: int, steps: int = 10) -> float:
    """Mean squared gap between the one-step preview and a multi-step DDIM run from (z_t, t)."""
    preview = lcm_preview(denoiser, schedule, z_t, t, cond, lora, scale=1.0)
    timesteps = torch.linspace(t, 0, min(steps, t + 1), dtype=torch.float64).round().long().tolist()
    predictor = make_predictor(denoiser, cond)
    z = z_t
    for i, step_t in enumerate(timesteps):
        prev = timesteps[i + 1] if i + 1 < len(timesteps) else -1
        eps = predictor(z, step_t)
        z = ddim_teacher_step(schedule, z, torch.full((z.shape[0],), step_t),
                              torch.full((z.shape[0],), prev), eps)
    return float(((preview - z) ** 2).mean())
