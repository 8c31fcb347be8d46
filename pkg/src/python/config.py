"""
Configuration Management.

Handles:
- One YAML file with a mapping per pipeline section
- Section dataclasses owned by the modules that consume them
- Environment overrides (LOOKAHEAD_SEED, LOOKAHEAD_CONFIG)
- Section and whole-config hashes recorded by every stage
"""

import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Union

import yaml

from core.exceptions import ConfigurationError
from consistency.alignment import AlignmentConfig
from consistency.distill import DistillConfig
from dataforge.dataset import DataConfig
from diffusion.codec import CodecConfig
from diffusion.denoiser import DenoiserConfig
from diffusion.sampler import SamplingConfig
from diffusion.schedule import DiffusionConfig
from diffusion.training import BaseTrainConfig
from evalkit.evaluate import EvaluationConfig
from evalkit.networks import MetricConfig
from guidance_lab import GuidanceConfig
from personalization.encoders import EncoderConfig
from personalization.trainer import TrainConfig
from utils import hash_payload


DEFAULT_CONFIG_FILE = "lookahead.yaml"
SEED_ENV = "LOOKAHEAD_SEED"
CONFIG_ENV = "LOOKAHEAD_CONFIG"

SECTION_CLASSES = {
    'diffusion': DiffusionConfig,
    'codec': CodecConfig,
    'denoiser': DenoiserConfig,
    'data': DataConfig,
    'base_training': BaseTrainConfig,
    'distill': DistillConfig,
    'metrics': MetricConfig,
    'adapter': EncoderConfig,
    'encoder': TrainConfig,
    'sampling': SamplingConfig,
    'guidance': GuidanceConfig,
    'evaluation': EvaluationConfig,
}

TOP_LEVEL_KEYS = ('master_seed', 'workspace', 'log_level')


def _build_section(name: str, data: Optional[Dict[str, Any]]):
    cls = SECTION_CLASSES[name]
    data = dict(data or {})
    known = {f.name for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigurationError(f"{name}.{key}", "unknown key")
    if name == 'encoder' and isinstance(data.get('alignment'), dict):
        alignment_known = {f.name for f in fields(AlignmentConfig)}
        for key in data['alignment']:
            if key not in alignment_known:
                raise ConfigurationError(f"encoder.alignment.{key}", "unknown key")
        data['alignment'] = AlignmentConfig(**data['alignment'])
    try:
        return cls(**data)
    except TypeError as e:
        raise ConfigurationError(name, str(e))


@dataclass
class LookaheadConfig:
    """Root configuration composing every pipeline section."""

    master_seed: int = 0
    workspace: str = "runs"
    log_level: str = "INFO"
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    data: DataConfig = field(default_factory=DataConfig)
    base_training: BaseTrainConfig = field(default_factory=BaseTrainConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    metrics: MetricConfig = field(default_factory=MetricConfig)
    adapter: EncoderConfig = field(default_factory=EncoderConfig)
    encoder: TrainConfig = field(default_factory=TrainConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)

    def __post_init__(self):
        if not isinstance(self.master_seed, int) or self.master_seed < 0:
            raise ConfigurationError("master_seed", "must be a non-negative integer")
        if self.adapter.token_dim != self.denoiser.token_dim:
            raise ConfigurationError("adapter.token_dim",
                                     f"must equal denoiser.token_dim ({self.denoiser.token_dim})")
        if self.adapter.num_tokens != self.denoiser.adapter_tokens:
            raise ConfigurationError("adapter.num_tokens",
                                     "must equal denoiser.adapter_tokens "
                                     f"({self.denoiser.adapter_tokens})")
        if self.sampling.steps > self.diffusion.timesteps:
            raise ConfigurationError("sampling.steps", "must not exceed diffusion.timesteps")
        if self.guidance.total_steps > self.diffusion.timesteps:
            raise ConfigurationError("guidance.total_steps", "must not exceed diffusion.timesteps")
        if self.adapter.image_size != self.data.image_size:
            raise ConfigurationError("adapter.image_size",
                                     f"must equal data.image_size ({self.data.image_size})")
        if self.codec.mode == 'identity':
            latent_channels, latent_size = self.codec.image_channels, self.data.image_size
        else:
            latent_channels, latent_size = self.codec.latent_channels, self.data.image_size // 2
        if self.denoiser.in_channels != latent_channels:
            raise ConfigurationError("denoiser.in_channels",
                                     f"must equal the codec's latent channels ({latent_channels})")
        if self.denoiser.image_size != latent_size:
            raise ConfigurationError("denoiser.image_size",
                                     f"must equal the codec's latent size ({latent_size})")

    @classmethod
    def from_dict(cls, data: Optional[Dict[str, Any]]) -> "LookaheadConfig":
        """Build a config from a plain mapping; unknown keys are rejected."""
        data = dict(data or {})
        for key in data:
            if key not in SECTION_CLASSES and key not in TOP_LEVEL_KEYS:
                raise ConfigurationError(key, "unknown section")
        kwargs = {key: data[key] for key in TOP_LEVEL_KEYS if key in data}
        for name in SECTION_CLASSES:
            kwargs[name] = _build_section(name, data.get(name))
        return cls(**kwargs)

    @classmethod
    def load(cls, path: Optional[Union[str, Path]] = None) -> "LookaheadConfig":
        """
        Load config from YAML or create default.

        The path falls back to $LOOKAHEAD_CONFIG, then ``lookahead.yaml``
        in the working directory. $LOOKAHEAD_SEED overrides ``master_seed``.
        """
        path = Path(path or os.getenv(CONFIG_ENV) or DEFAULT_CONFIG_FILE)
        data = {}
        if path.exists():
            with open(path, encoding='utf-8') as f:
                data = yaml.safe_load(f) or {}
            if not isinstance(data, dict):
                raise ConfigurationError(str(path), "config file must hold a mapping")
        seed = os.getenv(SEED_ENV)
        if seed is not None:
            try:
                data['master_seed'] = int(seed)
            except ValueError:
                raise ConfigurationError("master_seed", f"{SEED_ENV}={seed!r} is not an integer")
        return cls.from_dict(data)

    def save(self, path: Union[str, Path]) -> Path:
        """Save config to YAML."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', encoding='utf-8') as f:
            yaml.safe_dump(self.to_dict(), f, sort_keys=False)
        return path

    def section(self, name: str):
        if name not in SECTION_CLASSES:
            raise ConfigurationError(name, "unknown section")
        return getattr(self, name)

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary."""
        data: Dict[str, Any] = {key: getattr(self, key) for key in TOP_LEVEL_KEYS}
        for name in SECTION_CLASSES:
            data[name] = getattr(self, name).to_dict()
        return data

    def section_hash(self, name: str) -> str:
        return hash_payload(self.section(name).to_dict())

    def sections_hash(self, names: Iterable[str]) -> str:
        """Hash of the master seed plus the named sections."""
        return hash_payload({'master_seed': self.master_seed,
                             **{name: self.section(name).to_dict() for name in sorted(names)}})

    def config_hash(self) -> str:
        payload = self.to_dict()
        payload.pop('workspace')
        payload.pop('log_level')
        return hash_payload(payload)
