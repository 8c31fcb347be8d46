"""
Alignment-preservation strategies.

Each strategy decides the preview scale for a training iteration
(``draw_scale``, before the preview is computed) and may contribute a loss
term computed from the preview (``loss``, after).
"""

from abc import ABC, abstractmethod
from dataclasses import dataclass, asdict
from enum import Enum
from typing import Any, Dict, Optional, Tuple, Type

import torch
import torch.nn.functional as F

from core.exceptions import ConfigurationError
from core.models import ConditioningBundle
from diffusion.lora import LoraDelta
from diffusion.schedule import NoiseSchedule, add_noise, uniform_timesteps
from consistency.distill import consistency_function, ddim_teacher_step


class AlignmentKind(Enum):
    """Kind of alignment preservation."""
    NONE = "none"
    LORA_SCALING = "lora_scaling"
    SDS = "sds"
    CONSISTENCY_LOSS = "consistency_loss"


@dataclass
class AlignmentConfig:
    """Strategy parameters."""

    kind: str = 'lora_scaling'
    min_scale: float = 0.1
    max_scale: float = 1.0
    probability: float = 0.5
    weight: float = 1.0
    skip_steps: int = 20

    def __post_init__(self):
        if self.kind not in STRATEGY_CLASSES:
            raise ConfigurationError("encoder.alignment.kind",
                                     f"unknown strategy '{self.kind}' "
                                     f"(use {'|'.join(STRATEGY_CLASSES)})")
        if not 0.0 <= self.min_scale <= self.max_scale <= 1.0:
            raise ConfigurationError("encoder.alignment.min_scale",
                                     "need 0 <= min_scale <= max_scale <= 1")
        if not 0.0 <= self.probability <= 1.0:
            raise ConfigurationError("encoder.alignment.probability", "must lie in [0, 1]")
        if self.weight < 0:
            raise ConfigurationError("encoder.alignment.weight", "must be >= 0")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class AlignmentContext:
    """Inputs a strategy may read during one training iteration."""

    generator: Optional[torch.Generator] = None
    denoiser: Any = None
    schedule: Optional[NoiseSchedule] = None
    cond: Optional[ConditioningBundle] = None
    z_t: Optional[torch.Tensor] = None
    t: Optional[torch.Tensor] = None
    preview: Optional[torch.Tensor] = None
    lora: Optional[LoraDelta] = None
    preview_scale: Optional[float] = None


def _zero(context: AlignmentContext) -> torch.Tensor:
    ref = context.preview if context.preview is not None else context.z_t
    if ref is None:
        return torch.zeros(())
    return torch.zeros((), dtype=ref.dtype, device=ref.device)


class AlignmentStrategy(ABC):
    """Abstract base class for alignment strategies."""

    kind: AlignmentKind = AlignmentKind.NONE

    def __init__(self, config: Optional[AlignmentConfig] = None):
        self.config = config or AlignmentConfig(kind=self.kind.value)

    def draw_scale(self, generator: Optional[torch.Generator] = None) -> float:
        """Preview scale for this iteration."""
        return 1.0

    @abstractmethod
    def loss(self, context: AlignmentContext) -> torch.Tensor:
        """Loss contribution for this iteration (already weighted)."""
        pass


class NoAlignment(AlignmentStrategy):
    kind = AlignmentKind.NONE

    def loss(self, context: AlignmentContext) -> torch.Tensor:
        return _zero(context)


class LoraScaling(AlignmentStrategy):
    """Fair coin per iteration; on heads the preview scale is uniform on [min, max]."""

    kind = AlignmentKind.LORA_SCALING

    def draw_scale(self, generator: Optional[torch.Generator] = None) -> float:
        u = torch.rand(2, generator=generator, dtype=torch.float64)
        if u[0] >= self.config.probability:
            return 1.0
        lo, hi = self.config.min_scale, self.config.max_scale
        return float(lo + (hi - lo) * u[1])

    def loss(self, context: AlignmentContext) -> torch.Tensor:
        return _zero(context)


class ScoreDistillation(AlignmentStrategy):
    """
    Score distillation on the preview.

    The preview is re-noised at a random timestep; the frozen base model's
    noise prediction minus the injected noise is the (stop-gradient) update
    direction, weighted with w(t) = 1.
    """

    kind = AlignmentKind.SDS

    def loss(self, context: AlignmentContext) -> torch.Tensor:
        preview = context.preview
        schedule = context.schedule
        t = uniform_timesteps(schedule.T, context.generator, preview.shape[0])
        noise = torch.randn(preview.shape, generator=context.generator, dtype=torch.float64)
        noise = noise.to(preview.device, preview.dtype)
        text_only = ConditioningBundle(prompt_tokens=context.cond.prompt_tokens.detach(),
                                       null_prompt_tokens=context.cond.null_prompt_tokens)
        with torch.no_grad():
            renoised = add_noise(schedule, preview.detach(), t, noise)
            teacher_eps = context.denoiser(renoised, t.to(preview.device), text_only)
            grad = teacher_eps - noise
            target = (preview - grad).detach()
        sq_error = F.mse_loss(preview, target, reduction='sum')
        return self.config.weight * 0.5 * sq_error / preview.shape[0]


class ConsistencyLoss(AlignmentStrategy):
    """
    Consistency objective on the encoder-conditioned LCM path.

    The online prediction at (z_t, t) is pulled toward the stop-gradient
    prediction at the base model's DDIM step to t - k.
    """

    kind = AlignmentKind.CONSISTENCY_LOSS

    def loss(self, context: AlignmentContext) -> torch.Tensor:
        schedule = context.schedule
        t = context.t.cpu()
        t_prev = (t - self.config.skip_steps).clamp(min=-1)
        online = consistency_function(context.denoiser, schedule, context.z_t, t, context.cond,
                                      context.lora)
        with torch.no_grad():
            base_eps = context.denoiser(context.z_t, t.to(context.z_t.device), context.cond)
            z_prev = ddim_teacher_step(schedule, context.z_t, t, t_prev, base_eps)
            # t_prev = -1 is the clean end, where the consistency function is the identity
            safe_prev = t_prev.clamp(min=0)
            target = consistency_function(context.denoiser, schedule, z_prev, safe_prev,
                                          context.cond.detached(), context.lora)
            clean = (t_prev < 0).to(z_prev.device).reshape(-1, *([1] * (z_prev.ndim - 1)))
            target = torch.where(clean, z_prev, target)
        return self.config.weight * F.mse_loss(online, target)


STRATEGY_CLASSES: Dict[str, Type[AlignmentStrategy]] = {
    "none": NoAlignment,
    "lora_scaling": LoraScaling,
    "sds": ScoreDistillation,
    "consistency_loss": ConsistencyLoss,
}


def build_strategy(config: AlignmentConfig) -> AlignmentStrategy:
    """Instantiate the strategy named by ``config.kind``."""
    if config.kind not in STRATEGY_CLASSES:
        raise ConfigurationError("encoder.alignment.kind", f"unknown strategy '{config.kind}'")
    return STRATEGY_CLASSES[config.kind](config)


def alignment_term(strategy: AlignmentStrategy,
                   context: AlignmentContext) -> Tuple[torch.Tensor, float]:
    """
    Loss contribution and effective preview scale for one iteration.

    The scale is drawn if the context does not carry one yet.
    """
    if context.preview_scale is None:
        context.preview_scale = strategy.draw_scale(context.generator)
    return strategy.loss(context), context.preview_scale
