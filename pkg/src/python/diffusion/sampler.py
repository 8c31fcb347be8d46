"""
Sampling loops and classifier-free guidance.

Guided noise prediction batches the guidance branches into one forward:

    three-term (KV cache present): [uncond, no_kv, full, kv]
    two-term   (no KV cache):      [uncond, full]

A "no KV" branch keeps the cache but masks every injected token, so the
batch shares one set of layer shapes.
"""

from dataclasses import dataclass, asdict, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple
import logging

import torch

from core.exceptions import ConfigurationError, ShapeError
from core.models import ConditioningBundle, DropFlags, GuidanceScales, KVCache
from diffusion.schedule import NoiseSchedule, _check_timestep, predict_x0

logger = logging.getLogger(__name__)

# eps predictor: (z_t, t) -> eps
Predictor = Callable[[torch.Tensor, int], torch.Tensor]


@dataclass
class SamplingConfig:
    """Inference-time sampling settings."""

    steps: int = 50
    eta: float = 0.0
    s_no_kv: float = 3.0
    s_full: float = 2.0
    s_kv: float = 2.0
    kv_timestep: int = 100
    samples_per_prompt: int = 1

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigurationError("sampling.steps", "must be >= 1")
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigurationError("sampling.eta", f"must lie in [0, 1], got {self.eta}")
        if self.kv_timestep < 0:
            raise ConfigurationError("sampling.kv_timestep", "must be >= 0")

    @property
    def scales(self) -> GuidanceScales:
        return GuidanceScales(self.s_no_kv, self.s_full, self.s_kv)

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class SampleResult:
    """Final latent plus the trajectory of intermediate latents."""

    final: torch.Tensor
    timesteps: List[int]
    trajectory: List[torch.Tensor] = field(default_factory=list)


# ----------------------------------------------------------------------
# Guidance combination
# ----------------------------------------------------------------------

def cfg_combine(eps_uncond: torch.Tensor, eps_no_kv: torch.Tensor, eps_full: torch.Tensor,
                eps_kv: torch.Tensor, scales: GuidanceScales) -> torch.Tensor:
    """Three-term guidance.

    eps_uncond + s_no_kv (eps_no_kv - eps_uncond) + s_full (eps_full - eps_uncond)
    + s_kv (eps_kv - eps_uncond)
    """
    for name, other in (('eps_no_kv', eps_no_kv), ('eps_full', eps_full), ('eps_kv', eps_kv)):
        if other.shape != eps_uncond.shape:
            raise ShapeError(f"{name} shape {tuple(other.shape)} does not match "
                             f"eps_uncond {tuple(eps_uncond.shape)}")
    return (eps_uncond
            + scales.s_no_kv * (eps_no_kv - eps_uncond)
            + scales.s_full * (eps_full - eps_uncond)
            + scales.s_kv * (eps_kv - eps_uncond))


def cfg_two_term(eps_uncond: torch.Tensor, eps_cond: torch.Tensor, scale: float) -> torch.Tensor:
    """Standard guidance: eps_uncond + scale * (eps_cond - eps_uncond)."""
    if eps_cond.shape != eps_uncond.shape:
        raise ShapeError(f"eps_cond shape {tuple(eps_cond.shape)} does not match "
                         f"eps_uncond {tuple(eps_uncond.shape)}")
    return eps_uncond + scale * (eps_cond - eps_uncond)


def stack_branches(cond: ConditioningBundle,
                   branches: Sequence[Tuple[bool, bool, bool]]) -> ConditioningBundle:
    """
    Build one batched bundle holding several guidance branches.

    Args:
        cond: Resolved conditioning of batch B
        branches: (use_text, use_adapter, use_kv) per branch

    Returns:
        Bundle of batch B * len(branches), branch-major
    """
    cond = cond.resolved()
    null_prompt = cond.null_prompt().expand_as(cond.prompt_tokens)
    prompts, adapters = [], []
    for use_text, use_adapter, _ in branches:
        prompts.append(cond.prompt_tokens if use_text else null_prompt)
        if cond.adapter_tokens is not None:
            adapters.append(cond.adapter_tokens if use_adapter
                            else cond.null_adapter().expand_as(cond.adapter_tokens))

    kv = None
    if cond.kv_cache is not None:
        n = len(branches)
        layers, masks = {}, {}
        for name, (keys, values) in cond.kv_cache.layers.items():
            layers[name] = (keys.repeat(n, 1, 1), values.repeat(n, 1, 1))
            base = cond.kv_cache.mask_for(name)
            if base is None:
                base = torch.zeros(keys.shape[:2], dtype=torch.bool, device=keys.device)
            masks[name] = torch.cat([base if use_kv else torch.ones_like(base)
                                     for _, _, use_kv in branches])
        kv = KVCache(layers=layers, drop_masks=masks)

    return ConditioningBundle(
        prompt_tokens=torch.cat(prompts),
        adapter_tokens=torch.cat(adapters) if adapters else None,
        kv_cache=kv,
        null_prompt_tokens=cond.null_prompt_tokens,
        null_adapter_tokens=cond.null_adapter_tokens,
        adapter_weight=cond.adapter_weight,
    )


THREE_TERM_BRANCHES = (
    (False, False, False), (True, True, False), (True, True, True), (False, False, True))
TWO_TERM_BRANCHES = ((False, False, False), (True, True, False))


def guided_eps(denoiser, z_t: torch.Tensor, t, cond: ConditioningBundle,
               scales: Optional[GuidanceScales] = None, lora=None,
               lora_scale: Optional[float] = None) -> torch.Tensor:
    """
    Noise prediction with classifier-free guidance.

    Without scales this is a single conditional forward. With a KV cache
    the three-term combination is used; otherwise two-term with ``s_full``.
    """
    if scales is None:
        return denoiser(z_t, t, cond, lora=lora, lora_scale=lora_scale)
    cond = cond.resolved()
    branches = THREE_TERM_BRANCHES if cond.kv_cache is not None else TWO_TERM_BRANCHES
    batched = stack_branches(cond, branches)
    n = len(branches)
    z = z_t.repeat(n, 1, 1, 1)
    t = torch.as_tensor(t, device=z_t.device)
    t = t.expand(z_t.shape[0]) if t.ndim == 0 else t
    eps = denoiser(z, t.repeat(n), batched, lora=lora, lora_scale=lora_scale).chunk(n)
    if n == 4:
        return cfg_combine(eps[0], eps[1], eps[2], eps[3], scales)
    return cfg_two_term(eps[0], eps[1], scales.s_full)


# ----------------------------------------------------------------------
# Condition dropping
# ----------------------------------------------------------------------

def draw_drop_flags(generator: Optional[torch.Generator] = None, text_prob: float = 0.1,
                    adapter_prob: float = 0.1, kv_fraction: float = 0.05) -> DropFlags:
    """Draw independent text/adapter drops for one training iteration."""
    u = torch.rand(2, generator=generator, dtype=torch.float64)
    return DropFlags(drop_text=bool(u[0] < text_prob), drop_adapter=bool(u[1] < adapter_prob),
                     kv_token_drop_fraction=kv_fraction)


def draw_kv_drop_masks(kv_cache: KVCache, fraction: float,
                       generator: Optional[torch.Generator] = None,
                       ) -> Optional[Dict[str, torch.Tensor]]:
    """Independent per-token drop masks for every cached layer."""
    if fraction <= 0:
        return None
    masks = {}
    for name in sorted(kv_cache.layers):
        keys, _ = kv_cache.layers[name]
        u = torch.rand(keys.shape[:2], generator=generator, dtype=torch.float64)
        masks[name] = (u < fraction).to(keys.device)
    return masks


# ----------------------------------------------------------------------
# Update rules
# ----------------------------------------------------------------------

def ddim_timesteps(T: int, steps: int) -> List[int]:
    """Descending timesteps used by a ``steps``-step sampler."""
    if steps > T:
        raise ConfigurationError("sampling.steps", f"{steps} exceeds the schedule length T={T}")
    if steps < 1:
        raise ConfigurationError("sampling.steps", "must be >= 1")
    return torch.linspace(T - 1, 0, steps, dtype=torch.float64).round().long().tolist()


def _alpha_bar(schedule: NoiseSchedule, t: int) -> torch.Tensor:
    if t < 0:
        return torch.tensor(1.0, dtype=torch.float64)
    return schedule.alpha_bar[t]


def ddim_step(schedule: NoiseSchedule, z_t: torch.Tensor, t: int, t_prev: int, eps: torch.Tensor,
              eta: float = 0.0, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """
    One DDIM update from ``t`` to ``t_prev`` (``t_prev = -1`` is the clean end).

    With eta = 1 and t_prev = t - 1 this is the ancestral DDPM update.
    """
    _check_timestep(schedule, t)
    ab_t = _alpha_bar(schedule, t).to(z_t.dtype)
    ab_prev = _alpha_bar(schedule, t_prev).to(z_t.dtype)
    x0 = predict_x0(schedule, z_t, t, eps)
    sigma = eta * torch.sqrt((1 - ab_prev) / (1 - ab_t)) * torch.sqrt(1 - ab_t / ab_prev)
    direction = torch.sqrt((1 - ab_prev - sigma ** 2).clamp(min=0)) * eps
    z_prev = ab_prev.sqrt() * x0 + direction
    if eta > 0 and t_prev >= 0:
        noise = torch.randn(z_t.shape, generator=generator, dtype=z_t.dtype).to(z_t.device)
        z_prev = z_prev + sigma * noise
    return z_prev


def ddpm_step(schedule: NoiseSchedule, z_t: torch.Tensor, t: int, eps: torch.Tensor,
              generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Ancestral step from t to t - 1 using the posterior mean and variance."""
    _check_timestep(schedule, t)
    beta_t = schedule.beta[t].to(z_t.dtype)
    ab_t = _alpha_bar(schedule, t).to(z_t.dtype)
    ab_prev = _alpha_bar(schedule, t - 1).to(z_t.dtype)
    x0 = predict_x0(schedule, z_t, t, eps)
    coef_x0 = ab_prev.sqrt() * beta_t / (1 - ab_t)
    coef_z = (1 - beta_t).sqrt() * (1 - ab_prev) / (1 - ab_t)
    mean = coef_x0 * x0 + coef_z * z_t
    if t == 0:
        return mean
    variance = beta_t * (1 - ab_prev) / (1 - ab_t)
    noise = torch.randn(z_t.shape, generator=generator, dtype=z_t.dtype).to(z_t.device)
    return mean + variance.sqrt() * noise


# ----------------------------------------------------------------------
# Loops
# ----------------------------------------------------------------------

def ddim_loop(predictor: Predictor, schedule: NoiseSchedule, z_T: torch.Tensor, steps: int,
              generator: Optional[torch.Generator] = None, eta: float = 0.0,
              on_step: Optional[Callable[[int, int, torch.Tensor], Optional[torch.Tensor]]] = None,
              keep_trajectory: bool = True) -> SampleResult:
    """
    Run DDIM from ``z_T`` with an arbitrary noise predictor.

    ``on_step(i, t, z_t)`` is called before iteration ``i`` and may return a
    replacement latent.
    """
    if not 0.0 <= eta <= 1.0:
        raise ConfigurationError("sampling.eta", f"must lie in [0, 1], got {eta}")
    timesteps = ddim_timesteps(schedule.T, steps)
    z = z_T
    trajectory = [z.detach()] if keep_trajectory else []
    for i, t in enumerate(timesteps):
        if on_step is not None:
            replaced = on_step(i, t, z)
            if replaced is not None:
                z = replaced
        t_prev = timesteps[i + 1] if i + 1 < len(timesteps) else -1
        with torch.no_grad():
            eps = predictor(z, t)
            z = ddim_step(schedule, z, t, t_prev, eps, eta=eta, generator=generator)
        if keep_trajectory:
            trajectory.append(z.detach())
    return SampleResult(final=z, timesteps=timesteps, trajectory=trajectory)


def ddpm_loop(predictor: Predictor, schedule: NoiseSchedule, z_T: torch.Tensor,
              generator: Optional[torch.Generator] = None,
              on_step: Optional[Callable[[int, int, torch.Tensor], None]] = None) -> SampleResult:
    """
    Full ancestral sampling over every timestep.

    ``on_step(i, t, z_t)`` sees the latent before iteration ``i``; the
    trajectory is not kept since it spans all T steps.
    """
    timesteps = list(range(schedule.T - 1, -1, -1))
    z = z_T
    with torch.no_grad():
        for i, t in enumerate(timesteps):
            if on_step is not None:
                on_step(i, t, z)
            z = ddpm_step(schedule, z, t, predictor(z, t), generator=generator)
    return SampleResult(final=z, timesteps=timesteps)


def initial_latent(shape: Sequence[int], generator: Optional[torch.Generator] = None,
                   dtype=torch.float32, device='cpu') -> torch.Tensor:
    return torch.randn(tuple(shape), generator=generator, dtype=dtype).to(device)


def make_predictor(denoiser, cond: ConditioningBundle, scales: Optional[GuidanceScales] = None,
                   lora=None, lora_scale: Optional[float] = None) -> Predictor:
    """Bind a denoiser and its conditioning into an eps predictor."""
    def predictor(z_t: torch.Tensor, t: int) -> torch.Tensor:
        return guided_eps(denoiser, z_t, t, cond, scales, lora=lora, lora_scale=lora_scale)
    return predictor


def ddim_sample(denoiser, schedule: NoiseSchedule, cond: ConditioningBundle, steps: int,
                scales: Optional[GuidanceScales], generator: Optional[torch.Generator] = None,
                eta: float = 0.0, latent_shape: Optional[Sequence[int]] = None,
                z_T: Optional[torch.Tensor] = None, lora=None, lora_scale: Optional[float] = None,
                on_step=None) -> SampleResult:
    """
    Sample latents with DDIM and classifier-free guidance.

    Args:
        denoiser: Noise predictor called as ``denoiser(z_t, t, cond, lora=..., lora_scale=...)``
        schedule: Noise schedule
        cond: Conditioning bundle (batch B)
        steps: Number of sampling steps (<= T)
        scales: Guidance scales, or None for a single conditional pass
        generator: Seeded generator for the initial latent and eta noise
        eta: 0 for deterministic DDIM, 1 for ancestral
        latent_shape: (C, H, W) of one latent when ``z_T`` is not given
        z_T: Optional starting latent
        on_step: Optional hook, see ``ddim_loop``

    Returns:
        SampleResult with the final latent and trajectory

    Raises:
        ConfigurationError: If steps > T or eta is out of range
    """
    ddim_timesteps(schedule.T, steps)
    if z_T is None:
        if latent_shape is None:
            raise ConfigurationError("sampling.latent_shape",
                                     "required when no starting latent is given")
        ref = cond.prompt_tokens
        shape = (cond.batch_size, *latent_shape)
        z_T = initial_latent(shape, generator, dtype=ref.dtype, device=ref.device)
    predictor = make_predictor(denoiser, cond, scales, lora=lora, lora_scale=lora_scale)
    logger.debug("ddim sampling: steps=%d eta=%.2f batch=%d", steps, eta, z_T.shape[0])
    return ddim_loop(predictor, schedule, z_T, steps, generator=generator, eta=eta, on_step=on_step)
