"""
Noise schedule, forward noising and clean-image prediction.

All functions are pure: they read the schedule tensors and the inputs and
draw randomness only from an explicit ``torch.Generator``.
"""

from dataclasses import dataclass, asdict
from typing import Dict, Optional, Union
import math

import torch

from core.exceptions import ConfigurationError, ShapeError, TimestepRangeError


Timestep = Union[int, torch.Tensor]


@dataclass(frozen=True)
class NoiseSchedule:
    """Forward-noising coefficients.

    ``beta`` and ``alpha_bar`` are float64 tensors of length T;
    ``beta_tilde = 1 - alpha_bar``.
    """

    beta: torch.Tensor
    alpha_bar: torch.Tensor

    @property
    def T(self) -> int:
        return self.beta.shape[0]

    @property
    def beta_tilde(self) -> torch.Tensor:
        return 1.0 - self.alpha_bar


@dataclass
class DiffusionConfig:
    """Noise schedule settings."""

    timesteps: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 0.02
    spacing: str = 'linear'

    def build(self) -> 'NoiseSchedule':
        return build_schedule(self.timesteps, self.beta_min, self.beta_max, self.spacing)

    def to_dict(self) -> Dict:
        return asdict(self)


def build_schedule(T: int, beta_min: float = 1e-4, beta_max: float = 0.02,
                   spacing: str = 'linear') -> NoiseSchedule:
    """
    Build a DDPM noise schedule.

    Args:
        T: Total diffusion steps (>= 2)
        beta_min: Smallest per-step variance
        beta_max: Largest per-step variance (< 1)
        spacing: 'linear' or 'cosine'

    Returns:
        NoiseSchedule with strictly decreasing alpha_bar

    Raises:
        ConfigurationError: If a parameter is out of range
    """
    if T < 2:
        raise ConfigurationError("diffusion.timesteps", f"must be >= 2, got {T}")
    if not 0.0 < beta_min:
        raise ConfigurationError("diffusion.beta_min", f"must be > 0, got {beta_min}")
    if not beta_min <= beta_max:
        raise ConfigurationError("diffusion.beta_max",
                                 f"must be >= beta_min ({beta_min}), got {beta_max}")
    if not beta_max < 1.0:
        raise ConfigurationError("diffusion.beta_max", f"must be < 1, got {beta_max}")

    if spacing == 'linear':
        beta = torch.linspace(beta_min, beta_max, T, dtype=torch.float64)
    elif spacing == 'cosine':
        s = 0.008
        steps = torch.arange(T + 1, dtype=torch.float64) / T
        f = torch.cos((steps + s) / (1 + s) * math.pi / 2) ** 2
        beta = (1 - f[1:] / f[:-1]).clamp(min=beta_min, max=beta_max)
    else:
        raise ConfigurationError("diffusion.spacing",
                                 f"unknown spacing '{spacing}' (use linear|cosine)")

    alpha_bar = torch.cumprod(1.0 - beta, dim=0)
    return NoiseSchedule(beta=beta, alpha_bar=alpha_bar)


def _check_timestep(schedule: NoiseSchedule, t: Timestep) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=torch.long)
    if t.numel() and (int(t.min()) < 0 or int(t.max()) >= schedule.T):
        raise TimestepRangeError(f"timestep out of range [0, {schedule.T}): {t.tolist()}")
    return t


def _extract(coeffs: torch.Tensor, t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    """Gather per-sample coefficients and broadcast them against ``like``."""
    values = coeffs.to(device=like.device)[t.to(like.device)]
    if values.ndim == 0:
        return values.to(like.dtype)
    return values.to(like.dtype).reshape(-1, *([1] * (like.ndim - 1)))


def add_noise(schedule: NoiseSchedule, z0: torch.Tensor, t: Timestep,
              eps: torch.Tensor) -> torch.Tensor:
    """Return sqrt(alpha_bar[t]) * z0 + sqrt(beta_tilde[t]) * eps."""
    if eps.shape != z0.shape:
        raise ShapeError(f"noise shape {tuple(eps.shape)} does not match "
                         f"latent shape {tuple(z0.shape)}")
    t = _check_timestep(schedule, t)
    sqrt_ab = _extract(schedule.alpha_bar.sqrt(), t, z0)
    sqrt_bt = _extract(schedule.beta_tilde.sqrt(), t, z0)
    return sqrt_ab * z0 + sqrt_bt * eps


def predict_x0(schedule: NoiseSchedule, z_t: torch.Tensor, t: Timestep,
               eps_pred: torch.Tensor) -> torch.Tensor:
    """Invert forward noising: (z_t - sqrt(beta_tilde[t]) * eps_pred) / sqrt(alpha_bar[t]).

    Differentiable in both ``z_t`` and ``eps_pred``.
    """
    if eps_pred.shape != z_t.shape:
        raise ShapeError(f"noise prediction shape {tuple(eps_pred.shape)} does not match "
                         f"latent shape {tuple(z_t.shape)}")
    t = _check_timestep(schedule, t)
    sqrt_ab = _extract(schedule.alpha_bar.sqrt(), t, z_t)
    sqrt_bt = _extract(schedule.beta_tilde.sqrt(), t, z_t)
    return (z_t - sqrt_bt * eps_pred) / sqrt_ab


def predict_eps(schedule: NoiseSchedule, z_t: torch.Tensor, t: Timestep,
                x0: torch.Tensor) -> torch.Tensor:
    """Noise implied by a clean estimate: (z_t - sqrt(alpha_bar[t]) * x0) / sqrt(beta_tilde[t])."""
    t = _check_timestep(schedule, t)
    sqrt_ab = _extract(schedule.alpha_bar.sqrt(), t, z_t)
    sqrt_bt = _extract(schedule.beta_tilde.sqrt(), t, z_t)
    return (z_t - sqrt_ab * x0) / sqrt_bt


@dataclass(frozen=True)
class TimestepSampler:
    """Annealed training-time sampler with f(t) = (1/T)(1 - alpha * cos(pi t / T))."""

    T: int
    annealing_strength: float = 0.2

    def __post_init__(self):
        if self.annealing_strength < 0:
            raise ConfigurationError("diffusion.annealing_strength", "must be >= 0")
        if self.annealing_strength > 1:
            raise ConfigurationError("diffusion.annealing_strength",
                                     "must be <= 1 so that every weight stays non-negative")

    @property
    def weights(self) -> torch.Tensor:
        t = torch.arange(self.T, dtype=torch.float64)
        return (1.0 - self.annealing_strength * torch.cos(math.pi * t / self.T)) / self.T

    @property
    def probabilities(self) -> torch.Tensor:
        w = self.weights
        return w / w.sum()


def sample_timestep(sampler: TimestepSampler, generator: Optional[torch.Generator] = None,
                    batch_size: int = 1) -> torch.Tensor:
    """Draw ``batch_size`` timesteps with probability f(t) / sum f.

    Deterministic given the generator state.
    """
    return torch.multinomial(sampler.weights, batch_size, replacement=True, generator=generator)


def uniform_timesteps(T: int, generator: Optional[torch.Generator] = None,
                      batch_size: int = 1) -> torch.Tensor:
    """Uniform timesteps on [0, T)."""
    return torch.randint(0, T, (batch_size,), generator=generator)
