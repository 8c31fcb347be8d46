"""
Domain models for LCM-lookahead.

These dataclasses represent the core entities passed between the
diffusion, personalization and evaluation layers. Tensor-carrying
models stay free of module references so they can cross process and
checkpoint boundaries.
"""

from dataclasses import dataclass, field, replace, asdict
from typing import Dict, List, Optional, Tuple, Any
import json
import math

import torch

from core.exceptions import ConfigurationError, ShapeError


@dataclass(frozen=True)
class GuidanceScales:
    """Scales of the three-term classifier-free guidance."""

    s_no_kv: float = 3.0
    s_full: float = 2.0
    s_kv: float = 2.0

    def __post_init__(self):
        for name in ('s_no_kv', 's_full', 's_kv'):
            if not math.isfinite(getattr(self, name)):
                raise ConfigurationError(f"guidance.{name}", "must be finite")

    def to_dict(self) -> Dict[str, float]:
        """Convert to dictionary."""
        return asdict(self)


@dataclass(frozen=True)
class DropFlags:
    """Per-iteration condition dropping decisions."""

    drop_text: bool = False
    drop_adapter: bool = False
    kv_token_drop_fraction: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.kv_token_drop_fraction <= 1.0:
            raise ConfigurationError("drop.kv_token_drop_fraction", "must lie in [0, 1]")


@dataclass
class KVCache:
    """Self-attention keys and values captured from the conditioning pass.

    ``layers`` maps a self-attention layer name to a ``(keys, values)`` pair of
    shape ``(batch, tokens, dim)``. ``drop_masks`` optionally maps the same
    layer names to boolean ``(batch, tokens)`` masks; True removes the token.
    """

    layers: Dict[str, Tuple[torch.Tensor, torch.Tensor]] = field(default_factory=dict)
    drop_masks: Optional[Dict[str, torch.Tensor]] = None

    def __post_init__(self):
        for name, (keys, values) in self.layers.items():
            if keys.shape[:-1] != values.shape[:-1]:
                raise ShapeError(
                    f"KV cache layer {name}: key tokens {tuple(keys.shape)} "
                    f"do not match value tokens {tuple(values.shape)}"
                )

    @property
    def layer_names(self) -> List[str]:
        return list(self.layers.keys())

    def get(self, name: str) -> Optional[Tuple[torch.Tensor, torch.Tensor]]:
        return self.layers.get(name)

    def mask_for(self, name: str) -> Optional[torch.Tensor]:
        if self.drop_masks is None:
            return None
        return self.drop_masks.get(name)

    def with_masks(self, masks: Optional[Dict[str, torch.Tensor]]) -> 'KVCache':
        return KVCache(layers=self.layers, drop_masks=masks)


@dataclass
class ConditioningBundle:
    """Everything the denoiser is conditioned on.

    Prompt and adapter tokens are already embedded to ``token_dim``. Null
    embeddings travel with the bundle so dropped branches stay well defined.
    """

    prompt_tokens: torch.Tensor
    adapter_tokens: Optional[torch.Tensor] = None
    kv_cache: Optional[KVCache] = None
    drop: Optional[DropFlags] = None
    null_prompt_tokens: Optional[torch.Tensor] = None
    null_adapter_tokens: Optional[torch.Tensor] = None
    adapter_weight: float = 1.0

    @property
    def batch_size(self) -> int:
        return self.prompt_tokens.shape[0]

    def resolved(self) -> 'ConditioningBundle':
        """Return a copy with null tokens substituted where drop flags are set."""
        if self.drop is None:
            return self
        prompt = self.prompt_tokens
        adapter = self.adapter_tokens
        if self.drop.drop_text:
            prompt = self.null_prompt().expand_as(prompt)
        if self.drop.drop_adapter and adapter is not None:
            adapter = self.null_adapter().expand_as(adapter)
        return replace(self, prompt_tokens=prompt, adapter_tokens=adapter, drop=None)

    def null_prompt(self) -> torch.Tensor:
        """Null prompt embedding broadcastable to ``prompt_tokens``."""
        if self.null_prompt_tokens is None:
            return torch.zeros_like(self.prompt_tokens[:1])
        return self.null_prompt_tokens.reshape(1, *self.prompt_tokens.shape[1:])

    def null_adapter(self) -> Optional[torch.Tensor]:
        """Null adapter tokens broadcastable to ``adapter_tokens``."""
        if self.adapter_tokens is None:
            return None
        if self.null_adapter_tokens is None:
            return torch.zeros_like(self.adapter_tokens[:1])
        return self.null_adapter_tokens.reshape(1, *self.adapter_tokens.shape[1:])

    def detached(self) -> 'ConditioningBundle':
        """Copy with every tensor detached from the autograd graph."""
        kv = None
        if self.kv_cache is not None:
            kv = KVCache(
                layers={n: (k.detach(), v.detach()) for n, (k, v) in self.kv_cache.layers.items()},
                drop_masks=self.kv_cache.drop_masks,
            )
        return replace(
            self,
            prompt_tokens=self.prompt_tokens.detach(),
            adapter_tokens=None if self.adapter_tokens is None else self.adapter_tokens.detach(),
            kv_cache=kv,
        )


@dataclass
class TrainingSample:
    """A (conditioning, target) pair of the same synthetic identity."""

    conditioning_image: torch.Tensor
    target_image: torch.Tensor
    prompt_c: List[int]
    prompt_r: List[int]
    identity_id: int
    style_c: str
    style_r: str


@dataclass
class TrainingBatch:
    """Collated training samples."""

    conditioning_images: torch.Tensor
    target_images: torch.Tensor
    prompt_c: torch.Tensor
    prompt_r: torch.Tensor
    identity_ids: torch.Tensor
    style_c: List[str]
    style_r: List[str]

    @classmethod
    def collate(cls, samples: List[TrainingSample]) -> 'TrainingBatch':
        """Stack a list of samples into batch tensors."""
        return cls(
            conditioning_images=torch.stack([s.conditioning_image for s in samples]),
            target_images=torch.stack([s.target_image for s in samples]),
            prompt_c=torch.tensor([s.prompt_c for s in samples], dtype=torch.long),
            prompt_r=torch.tensor([s.prompt_r for s in samples], dtype=torch.long),
            identity_ids=torch.tensor([s.identity_id for s in samples], dtype=torch.long),
            style_c=[s.style_c for s in samples],
            style_r=[s.style_r for s in samples],
        )

    def __len__(self) -> int:
        return self.target_images.shape[0]


@dataclass
class LossBreakdown:
    """Loss components of one encoder training step."""

    diffusion: float
    lookahead: float
    alignment: float
    total: float
    lookahead_weight: float
    preview_scale: float
    timesteps: List[int] = field(default_factory=list)
    drop_text: bool = False
    drop_adapter: bool = False

    @property
    def finite(self) -> bool:
        return all(math.isfinite(v) for v in (self.diffusion, self.lookahead,
                                              self.alignment, self.total))

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary."""
        return asdict(self)


@dataclass
class StyleBreakdown:
    """Per-style evaluation statistics."""

    identity_similarity: float
    style_accuracy: float
    sample_count: int


@dataclass
class EvalReport:
    """Identity-similarity and style-alignment statistics for one model."""

    run: str
    mean_identity_similarity: float
    style_accuracy: float
    sample_count: int
    config_hash: str
    metric_hash: str
    seed: int
    per_style: Dict[str, StyleBreakdown] = field(default_factory=dict)

    def __post_init__(self):
        if not -1.0 - 1e-6 <= self.mean_identity_similarity <= 1.0 + 1e-6:
            raise ConfigurationError("report.mean_identity_similarity", "must lie in [-1, 1]")
        if not 0.0 <= self.style_accuracy <= 1.0:
            raise ConfigurationError("report.style_accuracy", "must lie in [0, 1]")

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary."""
        return {
            'run': self.run,
            'mean_identity_similarity': self.mean_identity_similarity,
            'style_accuracy': self.style_accuracy,
            'sample_count': self.sample_count,
            'config_hash': self.config_hash,
            'metric_hash': self.metric_hash,
            'seed': self.seed,
            'per_style': {k: asdict(v) for k, v in sorted(self.per_style.items())},
        }

    def to_json(self) -> str:
        """Convert to JSON string."""
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'EvalReport':
        """Create EvalReport from a dictionary produced by ``to_dict``."""
        per_style = {k: StyleBreakdown(**v) for k, v in data.get('per_style', {}).items()}
        return cls(
            run=data['run'],
            mean_identity_similarity=data['mean_identity_similarity'],
            style_accuracy=data['style_accuracy'],
            sample_count=data['sample_count'],
            config_hash=data['config_hash'],
            metric_hash=data['metric_hash'],
            seed=data['seed'],
            per_style=per_style,
        )

    def csv_rows(self) -> List[Dict[str, Any]]:
        """Flatten into CSV rows, one per style plus an ``all`` row."""
        rows = [{
            'run': self.run, 'style': 'all',
            'identity_similarity': self.mean_identity_similarity,
            'style_accuracy': self.style_accuracy, 'samples': self.sample_count,
        }]
        for style, stats in sorted(self.per_style.items()):
            rows.append({
                'run': self.run, 'style': style,
                'identity_similarity': stats.identity_similarity,
                'style_accuracy': stats.style_accuracy, 'samples': stats.sample_count,
            })
        return rows


@dataclass
class StageRecord:
    """Manifest entry written by every pipeline stage."""

    stage: str
    run: str
    config_hash: str
    input_hashes: Dict[str, str] = field(default_factory=dict)
    output_paths: List[str] = field(default_factory=list)
    seed: int = 0
    wall_time: float = 0.0
    created_at: Optional[str] = None

    @classmethod
    def from_db_row(cls, row: Dict[str, Any]) -> 'StageRecord':
        """Create StageRecord from database row."""
        input_hashes = row.get('input_hashes', {})
        if isinstance(input_hashes, str):
            input_hashes = json.loads(input_hashes)
        output_paths = row.get('output_paths', [])
        if isinstance(output_paths, str):
            output_paths = json.loads(output_paths)
        return cls(
            stage=row['stage'],
            run=row['run'],
            config_hash=row['config_hash'],
            input_hashes=input_hashes,
            output_paths=output_paths,
            seed=row.get('seed', 0),
            wall_time=row.get('wall_time', 0.0),
            created_at=row.get('created_at'),
        )

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary."""
        return asdict(self)
