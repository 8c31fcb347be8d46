"""
Guidance lab: latent optimization at an early sampling step.

A sample is drawn with DDIM; at one early step the current latent is
optimized for ``guide_iters`` gradient steps on an image-space loss
between the decoded one-step prediction and a guide image, then sampling
continues unguided. The one-step prediction is either the distilled
consistency preview (``lcm``) or the raw x0 approximation (``x0_approx``).
"""

from dataclasses import dataclass, asdict, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union
import csv
import logging

import numpy as np
import torch
from torch.nn.functional import cosine_similarity

from core.exceptions import ConfigurationError, DivergenceError, StateError
from core.models import ConditioningBundle, GuidanceScales
from consistency.distill import lcm_preview
from consistency.losses import image_distance
from diffusion.codec import LatentCodec
from diffusion.lora import LoraDelta
from diffusion.sampler import SampleResult, ddim_sample, initial_latent
from diffusion.schedule import NoiseSchedule
from utils import save_image_grid, seed_stream

logger = logging.getLogger(__name__)

GUIDANCE_LOSSES = ('perceptual', 'clip_like', 'identity')
PREVIEW_KINDS = ('lcm', 'x0_approx')


@dataclass
class GuidanceConfig:
    """Guidance lab settings."""

    guide_step: int = 44
    guide_iters: int = 20
    step_size: float = 0.1
    total_steps: int = 50
    normalize_gradient: bool = True
    loss_kinds: List[str] = field(default_factory=lambda: list(GUIDANCE_LOSSES))
    pairs: int = 50
    guidance_scale: Optional[float] = None

    def __post_init__(self):
        if not 0 <= self.guide_step < self.total_steps:
            raise ConfigurationError("guidance.guide_step",
                                     f"must lie in [0, total_steps={self.total_steps}), "
                                     f"got {self.guide_step}")
        if self.guide_iters < 0:
            raise ConfigurationError("guidance.guide_iters", "must be >= 0")
        if self.step_size < 0:
            raise ConfigurationError("guidance.step_size", "must be >= 0")
        for kind in self.loss_kinds:
            if kind not in GUIDANCE_LOSSES:
                raise ConfigurationError("guidance.loss_kinds",
                                         f"unknown loss '{kind}' (use {'|'.join(GUIDANCE_LOSSES)})")

    @property
    def guide_iteration(self) -> int:
        """Sampler iteration at which guidance runs (steps count down)."""
        return self.total_steps - 1 - self.guide_step

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def guidance_objective(denoiser, schedule: NoiseSchedule, codec: LatentCodec,
                       lcm: Optional[LoraDelta], z_t: torch.Tensor, t: int,
                       cond: ConditioningBundle, guide_image: torch.Tensor, loss_kind: str,
                       preview_kind: str, metric_net=None) -> torch.Tensor:
    """
    Differentiable guidance loss of a latent.

    Returns:
        Scalar loss; gradients flow into ``z_t``
    """
    if preview_kind not in PREVIEW_KINDS:
        raise ConfigurationError("guidance.preview_kind",
                                 f"unknown preview '{preview_kind}' "
                                 f"(use {'|'.join(PREVIEW_KINDS)})")
    if preview_kind == 'lcm' and lcm is None:
        raise StateError("consistency adapter missing; run distill-lcm")
    scale = 1.0 if preview_kind == 'lcm' else 0.0
    preview = lcm_preview(denoiser, schedule, z_t, t, cond, lcm, scale=scale)
    decoded = codec.decode(preview)
    return image_distance(decoded, guide_image.expand_as(decoded), loss_kind, metric_net).mean()


def _guidance_step(z: torch.Tensor, grad: torch.Tensor, step_size: float,
                   normalize: bool) -> torch.Tensor:
    if normalize:
        rms = grad.flatten(1).pow(2).mean(1).sqrt().clamp_min(1e-12)
        grad = grad / rms.view(-1, *([1] * (grad.ndim - 1)))
    return z - step_size * grad


def guided_sample(denoiser, schedule: NoiseSchedule, codec: LatentCodec, lcm: Optional[LoraDelta],
                  guide_image: torch.Tensor, cond: ConditioningBundle, loss_kind: str,
                  preview_kind: str, config: GuidanceConfig, generator: torch.Generator,
                  metric_net=None,
                  z_T: Optional[torch.Tensor] = None) -> SampleResult:
    """
    DDIM sample with repeated latent guidance at one early step.

    Args:
        denoiser: Frozen base denoiser
        schedule: Noise schedule
        codec: Codec decoding previews
        lcm: Distilled consistency adapter (needed for the lcm preview)
        guide_image: (C, H, W) or (B, C, H, W) image the loss pulls toward
        cond: Prompt conditioning of the sample batch
        loss_kind: One of ``GUIDANCE_LOSSES`` (or 'mse')
        preview_kind: 'lcm' or 'x0_approx'
        config: Guidance settings
        generator: Seeded generator of the starting latent
        metric_net: Frozen network backing ``loss_kind``
        z_T: Optional starting latent

    Returns:
        SampleResult; with ``guide_iters == 0`` or ``step_size == 0`` it equals plain DDIM

    Raises:
        DivergenceError: If the latent or loss becomes non-finite
    """
    if guide_image.ndim == 3:
        guide_image = guide_image.unsqueeze(0)
    guide_image = guide_image.to(cond.prompt_tokens.device)
    scales = None
    if config.guidance_scale is not None:
        scales = GuidanceScales(s_full=config.guidance_scale)
    if z_T is None:
        size = denoiser.config.image_size
        shape = (cond.batch_size, denoiser.config.in_channels, size, size)
        ref = cond.prompt_tokens
        z_T = initial_latent(shape, generator, dtype=ref.dtype, device=ref.device)
    target = config.guide_iteration
    active = config.guide_iters > 0 and config.step_size > 0

    def on_step(i: int, t: int, z: torch.Tensor) -> Optional[torch.Tensor]:
        if not active or i != target:
            return None
        with torch.enable_grad():
            for k in range(config.guide_iters):
                z = z.detach().requires_grad_(True)
                loss = guidance_objective(denoiser, schedule, codec, lcm, z, t, cond, guide_image,
                                          loss_kind, preview_kind, metric_net)
                if not torch.isfinite(loss):
                    raise DivergenceError(f"guidance loss diverged at t={t}", k, float(loss))
                (grad,) = torch.autograd.grad(loss, z)
                z = _guidance_step(z.detach(), grad, config.step_size, config.normalize_gradient)
                if not torch.isfinite(z).all():
                    raise DivergenceError(f"guided latent became non-finite at t={t}", k,
                                          float(loss))
        logger.debug("guided %s/%s at t=%d: final loss %.4f", loss_kind, preview_kind, t,
                     float(loss))
        return z.detach()

    return ddim_sample(denoiser, schedule, cond, config.total_steps, scales, generator,
                       z_T=z_T, on_step=on_step)


# ----------------------------------------------------------------------
# Comparison harness
# ----------------------------------------------------------------------

@dataclass
class ArmComparison:
    """Paired similarities of two preview arms under one loss kind."""

    loss_kind: str
    arms: Tuple[str, str]
    similarity_a: List[float] = field(default_factory=list)
    similarity_b: List[float] = field(default_factory=list)

    @property
    def win_rate(self) -> float:
        """Fraction of pairs where arm b beats arm a; ties count half."""
        if not self.similarity_a:
            return 0.0
        score = sum(1.0 if b > a else 0.5 if b == a else 0.0
                    for a, b in zip(self.similarity_a, self.similarity_b))
        return score / len(self.similarity_a)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'loss_kind': self.loss_kind,
            'arms': list(self.arms),
            'mean_similarity_a': float(np.mean(self.similarity_a)) if self.similarity_a else 0.0,
            'mean_similarity_b': float(np.mean(self.similarity_b)) if self.similarity_b else 0.0,
            'win_rate': self.win_rate,
            'pairs': len(self.similarity_a),
        }


def compare_guidance(denoiser, schedule: NoiseSchedule, codec: LatentCodec, lcm: LoraDelta,
                     guide_images: torch.Tensor, cond: ConditioningBundle,
                     loss_nets: Dict[str, Any], eval_embedder, config: GuidanceConfig,
                     master_seed: int,
                     arms: Tuple[str, str] = ('x0_approx', 'lcm'),
                     out_dir: Optional[Union[str, Path]] = None) -> List[ArmComparison]:
    """
    Paired comparison of two preview kinds across loss kinds.

    Pair ``i`` uses guide image ``i % N`` and the same starting latent in
    both arms. Identity similarity to the guide image is scored by the
    frozen evaluation embedder.

    Args:
        loss_nets: Metric network per loss kind
        eval_embedder: Frozen evaluation identity embedder
        arms: (baseline, candidate) preview kinds; equal kinds give the symmetry control
        out_dir: Optional directory for per-sample CSV and image grids

    Raises:
        StateError: If the evaluation embedder is missing
    """
    if eval_embedder is None:
        raise StateError("metric networks missing; run train-metrics")
    results = []
    for loss_kind in config.loss_kinds:
        comparison = ArmComparison(loss_kind=loss_kind, arms=tuple(arms))
        grid = []
        for i in range(config.pairs):
            guide = guide_images[i % guide_images.shape[0]].unsqueeze(0)
            outputs = []
            for arm in arms:
                gen = seed_stream(master_seed, f"guide/{i}")
                result = guided_sample(denoiser, schedule, codec, lcm, guide, cond, loss_kind, arm,
                                       config, gen, metric_net=loss_nets.get(loss_kind))
                outputs.append(codec.decode(result.final).clamp(-1, 1).detach())
            with torch.no_grad():
                ref = eval_embedder.embed(guide.to(outputs[0].dtype))
                sims = [float(cosine_similarity(eval_embedder.embed(o), ref).clamp(-1, 1).mean())
                        for o in outputs]
            comparison.similarity_a.append(sims[0])
            comparison.similarity_b.append(sims[1])
            grid.append([guide[0].cpu(), outputs[0][0].cpu(), outputs[1][0].cpu()])
        logger.info("guidance %s: %s %.3f vs %s %.3f, win rate %.2f", loss_kind, arms[0],
                    np.mean(comparison.similarity_a), arms[1], np.mean(comparison.similarity_b),
                    comparison.win_rate)
        if out_dir is not None:
            write_guidance_csv(comparison, Path(out_dir) / f"guidance_{loss_kind}.csv")
            save_image_grid(grid, Path(out_dir) / f"guidance_{loss_kind}.png")
        results.append(comparison)
    return results


def write_guidance_csv(comparison: ArmComparison, path: Union[str, Path]) -> Path:
    """Per-sample similarity values of both arms."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f)
        writer.writerow(['loss_kind', 'pair', f"{comparison.arms[0]}_similarity",
                         f"{comparison.arms[1]}_similarity"])
        for i, (a, b) in enumerate(zip(comparison.similarity_a, comparison.similarity_b)):
            writer.writerow([comparison.loss_kind, i, f"{a:.6f}", f"{b:.6f}"])
    return path
