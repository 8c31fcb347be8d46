"""
Versioned checkpoint container.

A checkpoint file holds named entries, each ``{kind, config, state}``:
the module kind, the config it was built from and its state dict. Entries
load independently; loading into a module built from a different config
fails instead of reshaping.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Union
import logging

import torch
import torch.nn as nn

from core.exceptions import CheckpointError
from diffusion.codec import CodecConfig, LatentCodec
from diffusion.denoiser import DenoiserConfig, TinyUNet
from diffusion.lora import LoraDelta
from evalkit.networks import IdentityEmbedder, MetricConfig, StyleClassifier
from personalization.encoders import AdapterEncoder, EncoderConfig

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


def _module_config(module: nn.Module) -> Dict[str, Any]:
    if isinstance(module, TinyUNet):
        return module.config.to_dict()
    if isinstance(module, LatentCodec):
        return module.config.to_dict()
    if isinstance(module, LoraDelta):
        return module.to_config()
    if isinstance(module, AdapterEncoder):
        return module.config.to_dict()
    if isinstance(module, IdentityEmbedder):
        return {'num_identities': module.num_identities, 'channels': module.channels,
                'metric': module.config.to_dict()}
    if isinstance(module, StyleClassifier):
        return {'styles': list(module.styles), 'channels': module.channels,
                'metric': module.config.to_dict()}
    raise CheckpointError(f"cannot checkpoint module of type {type(module).__name__}")


def _build_metric(cls, key: str):
    def build(config: Dict[str, Any]) -> nn.Module:
        return cls(config[key], MetricConfig(**config['metric']), channels=config['channels'])
    return build


# kind -> (module class, builder from config)
KIND_CLASSES: Dict[str, Any] = {
    'denoiser': (TinyUNet, lambda c: TinyUNet(DenoiserConfig(**c))),
    'codec': (LatentCodec, lambda c: LatentCodec(CodecConfig(**c))),
    'lora': (LoraDelta, LoraDelta.from_config),
    'adapter_encoder': (AdapterEncoder, lambda c: AdapterEncoder(EncoderConfig(**c))),
    'identity_embedder': (IdentityEmbedder, _build_metric(IdentityEmbedder, 'num_identities')),
    'style_classifier': (StyleClassifier, _build_metric(StyleClassifier, 'styles')),
}

FROZEN_KINDS = ('identity_embedder', 'style_classifier')


def kind_of(module: nn.Module) -> str:
    for kind, (cls, _) in KIND_CLASSES.items():
        if isinstance(module, cls):
            return kind
    raise CheckpointError(f"cannot checkpoint module of type {type(module).__name__}")


def module_entry(module: nn.Module) -> Dict[str, Any]:
    """Self-describing entry for a module."""
    return {
        'kind': kind_of(module),
        'config': _module_config(module),
        'state': {k: v.detach().cpu() for k, v in module.state_dict().items()},
    }


def optimizer_entry(optimizer: torch.optim.Optimizer) -> Dict[str, Any]:
    return {'kind': 'optimizer', 'config': {'type': type(optimizer).__name__},
            'state': optimizer.state_dict()}


@dataclass
class Checkpoint:
    """Loaded checkpoint container."""

    path: Path
    entries: Dict[str, Dict[str, Any]] = field(default_factory=dict)
    metadata: Dict[str, Any] = field(default_factory=dict)

    def names(self):
        return sorted(self.entries)

    def entry(self, name: str) -> Dict[str, Any]:
        if name not in self.entries:
            present = ', '.join(self.names()) or 'none'
            raise CheckpointError(f"{self.path} has no entry '{name}' (has: {present})")
        return self.entries[name]

    def build(self, name: str, map_location: Union[str, torch.device] = 'cpu') -> nn.Module:
        """Instantiate a module from an entry's embedded config and load its weights."""
        entry = self.entry(name)
        kind = entry['kind']
        if kind not in KIND_CLASSES:
            raise CheckpointError(f"entry '{name}' has unknown kind '{kind}'")
        try:
            module = KIND_CLASSES[kind][1](entry['config'])
        except (TypeError, KeyError, ValueError) as e:
            raise CheckpointError(f"entry '{name}' carries an invalid {kind} config: {e}")
        self._load_state(name, module, entry)
        if kind in FROZEN_KINDS:
            module.freeze()
        return module.to(map_location)

    def load_into(self, name: str, module: nn.Module):
        """
        Load an entry into an existing module.

        Raises:
            CheckpointError: If the kind or config differs from the module's
        """
        entry = self.entry(name)
        if entry['kind'] != kind_of(module):
            raise CheckpointError(f"entry '{name}' is a {entry['kind']}, not a {kind_of(module)}")
        if entry['config'] != _module_config(module):
            raise CheckpointError(f"entry '{name}' was saved with a different {entry['kind']} "
                                  "config; rebuild the module from the checkpoint "
                                  "or re-run the stage")
        self._load_state(name, module, entry)

    def load_optimizer(self, name: str, optimizer: torch.optim.Optimizer):
        entry = self.entry(name)
        if entry['kind'] != 'optimizer':
            raise CheckpointError(f"entry '{name}' is a {entry['kind']}, not an optimizer")
        optimizer.load_state_dict(entry['state'])

    def _load_state(self, name: str, module: nn.Module, entry: Dict[str, Any]):
        try:
            module.load_state_dict(entry['state'], strict=True)
        except RuntimeError as e:
            raise CheckpointError(f"entry '{name}' does not match the {entry['kind']} "
                                  f"architecture: {e}")


def save_checkpoint(path: Union[str, Path], modules: Dict[str, nn.Module],
                    optimizers: Optional[Dict[str, torch.optim.Optimizer]] = None,
                    metadata: Optional[Dict[str, Any]] = None) -> Path:
    """
    Write named modules (and optional optimizer states) to one file.

    Returns:
        Path of the written checkpoint
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = {name: module_entry(module) for name, module in modules.items()}
    for name, optimizer in (optimizers or {}).items():
        entries[name] = optimizer_entry(optimizer)
    payload = {'format_version': FORMAT_VERSION, 'metadata': dict(metadata or {}),
               'entries': entries}
    torch.save(payload, path)
    logger.info("wrote checkpoint %s (%s)", path, ", ".join(sorted(entries)))
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    """
    Read a checkpoint container.

    Raises:
        CheckpointError: If the file is missing, unreadable or of another format version
    """
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location='cpu', weights_only=False)
    except Exception as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}")
    if not isinstance(payload, dict) or 'entries' not in payload:
        raise CheckpointError(f"{path} is not a checkpoint container")
    version = payload.get('format_version')
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path} has format version {version}, expected {FORMAT_VERSION}")
    return Checkpoint(path=path, entries=payload['entries'], metadata=payload.get('metadata', {}))
