"""
Diffusion backbone for LCM-lookahead.

Modules:
    - schedule.py: Noise schedule, forward noising, x0 prediction, timestep sampling
    - codec.py: Pixel/latent codec (identity or small autoencoder)
    - lora.py: Low-rank adapter deltas applied at call time
    - denoiser.py: Tiny U-Net with extended self-attention and decoupled cross-attention
    - sampler.py: DDIM/DDPM loops and classifier-free guidance
    - training.py: Base denoiser training
"""

from .schedule import (
    DiffusionConfig,
    NoiseSchedule,
    TimestepSampler,
    build_schedule,
    add_noise,
    predict_x0,
    predict_eps,
    sample_timestep,
)
from .codec import CodecConfig, LatentCodec, codec_encode, codec_decode, fit_codec
from .lora import LoraDelta, AdaptedLinear, apply_lora
from .denoiser import DenoiserConfig, TinyUNet, build_denoiser, extended_self_attention
from .sampler import (
    SamplingConfig,
    SampleResult,
    cfg_combine,
    cfg_two_term,
    guided_eps,
    ddim_step,
    ddpm_step,
    ddim_sample,
    draw_drop_flags,
)
from .training import BaseTrainConfig, train_denoiser

__all__ = [
    # Schedule
    'DiffusionConfig',
    'NoiseSchedule',
    'TimestepSampler',
    'build_schedule',
    'add_noise',
    'predict_x0',
    'predict_eps',
    'sample_timestep',
    # Codec
    'CodecConfig',
    'LatentCodec',
    'codec_encode',
    'codec_decode',
    'fit_codec',
    # Network
    'LoraDelta',
    'AdaptedLinear',
    'apply_lora',
    'DenoiserConfig',
    'TinyUNet',
    'build_denoiser',
    'extended_self_attention',
    # Sampling
    'SamplingConfig',
    'SampleResult',
    'cfg_combine',
    'cfg_two_term',
    'guided_eps',
    'ddim_step',
    'ddpm_step',
    'ddim_sample',
    'draw_drop_flags',
    # Training
    'BaseTrainConfig',
    'train_denoiser',
]
