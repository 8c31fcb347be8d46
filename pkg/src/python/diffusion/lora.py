"""
Low-rank adapter machinery.

A ``LoraDelta`` is a named set of (down, up) factor pairs keyed by the
dotted module path of the linear layer it adapts. It is never merged into
the host model; layers receive it at call time, so one frozen denoiser can
serve the distilled consistency adapter and the KV-encoder fine-tune
without copies.
"""

from typing import Dict, Optional, Tuple
import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from core.exceptions import ConfigurationError, ShapeError


def effective_weight(base_weight: torch.Tensor, down: torch.Tensor, up: torch.Tensor,
                     scale: float) -> torch.Tensor:
    """base + scale * up @ down; the base tensor itself when scale is 0."""
    if scale == 0:
        return base_weight
    return base_weight + scale * (up @ down)


def _check_scale(scale: float, field: str = "lora.scale") -> float:
    if not 0.0 <= float(scale) <= 1.0:
        raise ConfigurationError(field, f"must lie in [0, 1], got {scale}")
    return float(scale)


class LoraDelta(nn.Module):
    """Named low-rank weight deltas with a scalar scale."""

    def __init__(self, name: str, targets: Dict[str, Tuple[int, int]], rank: int = 4,
                 scale: float = 1.0, generator: Optional[torch.Generator] = None):
        """
        Args:
            name: Tag stored with the delta (e.g. 'lcm', 'kv_encoder')
            targets: Layer path -> (d_in, d_out)
            rank: Low-rank dimension r
            scale: Default scale in [0, 1]
            generator: Seeded generator for the down-projection init
        """
        super().__init__()
        if rank < 1:
            raise ConfigurationError("lora.rank", f"must be >= 1, got {rank}")
        self.name = name
        self.rank = rank
        self._scale = _check_scale(scale)
        self._targets = {k: (int(v[0]), int(v[1])) for k, v in sorted(targets.items())}
        self.down = nn.ParameterDict()
        self.up = nn.ParameterDict()
        for key, (d_in, d_out) in self._targets.items():
            if rank > min(d_in, d_out):
                raise ConfigurationError("lora.rank",
                                         f"rank {rank} exceeds min(d_in, d_out) for {key}")
            bound = 1.0 / math.sqrt(d_in)
            down = torch.empty(rank, d_in).uniform_(-bound, bound, generator=generator)
            self.down[self._slot(key)] = nn.Parameter(down)
            self.up[self._slot(key)] = nn.Parameter(torch.zeros(d_out, rank))

    @staticmethod
    def _slot(key: str) -> str:
        return key.replace('.', '__')

    @property
    def targets(self) -> Dict[str, Tuple[int, int]]:
        return dict(self._targets)

    @property
    def scale(self) -> float:
        return self._scale

    @scale.setter
    def scale(self, value: float):
        self._scale = _check_scale(value)

    def has(self, key: str) -> bool:
        return key in self._targets

    def factors(self, key: str) -> Tuple[torch.Tensor, torch.Tensor]:
        slot = self._slot(key)
        return self.down[slot], self.up[slot]

    def delta_weight(self, key: str, scale: Optional[float] = None) -> torch.Tensor:
        """scale * up @ down for one target layer."""
        down, up = self.factors(key)
        s = self._scale if scale is None else _check_scale(scale)
        return s * (up @ down)

    def to_config(self) -> Dict:
        return {
            'name': self.name,
            'rank': self.rank,
            'scale': self._scale,
            'targets': {k: list(v) for k, v in self._targets.items()},
        }

    @classmethod
    def from_config(cls, config: Dict) -> 'LoraDelta':
        return cls(
            name=config['name'],
            targets={k: tuple(v) for k, v in config['targets'].items()},
            rank=config['rank'],
            scale=config['scale'],
        )

    @torch.no_grad()
    def copy_from(self, other: 'LoraDelta'):
        self.load_state_dict(other.state_dict())

    @torch.no_grad()
    def ema_update(self, online: 'LoraDelta', decay: float):
        """self <- decay * self + (1 - decay) * online."""
        for mine, theirs in zip(self.parameters(), online.parameters()):
            mine.mul_(decay).add_(theirs.detach(), alpha=1.0 - decay)

    def extra_repr(self) -> str:
        return (f"name={self.name}, rank={self.rank}, scale={self._scale}, "
                f"targets={len(self._targets)}")


def apply_lora(base_params: Dict[str, torch.Tensor], delta: LoraDelta,
               scale_override: Optional[float] = None) -> Dict[str, torch.Tensor]:
    """
    Compute effective parameters with the delta folded in.

    Args:
        base_params: Parameter dict (e.g. ``model.state_dict()``)
        delta: Low-rank deltas keyed by layer path
        scale_override: Optional scale in [0, 1] replacing ``delta.scale``

    Returns:
        New dict where every targeted ``<layer>.weight`` equals
        base + scale * up @ down; other entries are passed through.
    """
    scale = delta.scale
    if scale_override is not None:
        scale = _check_scale(scale_override, "lora.scale_override")
    effective = dict(base_params)
    for key, (d_in, d_out) in delta.targets.items():
        weight_key = f"{key}.weight"
        if weight_key not in base_params:
            raise ConfigurationError("lora.targets", f"unknown target layer '{key}'")
        base = base_params[weight_key]
        if tuple(base.shape) != (d_out, d_in):
            raise ShapeError(f"LoRA target {key} expects weight {(d_out, d_in)}, "
                             f"found {tuple(base.shape)}")
        down, up = delta.factors(key)
        effective[weight_key] = effective_weight(base, down, up, scale)
    return effective


class AdaptedLinear(nn.Linear):
    """Linear layer that can take a ``LoraDelta`` at call time."""

    lora_key: str = ''

    def forward(self, x: torch.Tensor, lora: Optional[LoraDelta] = None,
                scale: Optional[float] = None) -> torch.Tensor:
        weight = self.weight
        if lora is not None and lora.has(self.lora_key):
            down, up = lora.factors(self.lora_key)
            weight = effective_weight(self.weight, down, up, lora.scale if scale is None else scale)
        return F.linear(x, weight, self.bias)


def bind_lora_keys(model: nn.Module) -> Dict[str, Tuple[int, int]]:
    """Stamp every ``AdaptedLinear`` with its dotted path; return path -> (d_in, d_out)."""
    targets = {}
    for name, module in model.named_modules():
        if isinstance(module, AdaptedLinear):
            module.lora_key = name
            targets[name] = (module.in_features, module.out_features)
    return targets
