"""
Frozen metric networks.

- ``IdentityEmbedder``: margin-based (CosFace) identity classifier whose
  normalized penultimate layer is a 64-d identity embedding.
- ``StyleClassifier``: style recognizer; its penultimate features back
  the ``clip_like`` distance.

Both are trained once, checked against quality gates, frozen and
content-hashed.
"""

from abc import ABC, abstractmethod
from dataclasses import dataclass, asdict
from typing import Callable, Dict, List, Optional, Sequence
import logging

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.metrics import roc_auc_score

from core.exceptions import ConfigurationError, MetricGateError
from utils import hash_module

logger = logging.getLogger(__name__)


@dataclass
class MetricConfig:
    """Metric network training and gate settings."""

    embed_dim: int = 64
    hidden_channels: int = 32
    iterations: int = 3000
    batch_size: int = 128
    learning_rate: float = 1e-3
    margin: float = 0.35
    scale: float = 30.0
    auc_gate: float = 0.9
    separation_gate: float = 0.2
    style_gate: float = 0.95
    enforce_gates: bool = True

    def __post_init__(self):
        if self.embed_dim < 2:
            raise ConfigurationError("metrics.embed_dim", "must be >= 2")
        if not 0.0 <= self.margin < 1.0:
            raise ConfigurationError("metrics.margin", "must lie in [0, 1)")

    def to_dict(self) -> Dict:
        return asdict(self)


class MetricNetwork(nn.Module, ABC):
    """Base class of frozen metric networks."""

    def freeze(self) -> 'MetricNetwork':
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        return self

    @property
    def frozen(self) -> bool:
        return not any(p.requires_grad for p in self.parameters())

    def content_hash(self) -> str:
        return hash_module(self)

    @abstractmethod
    def feature_maps(self, images: torch.Tensor) -> List[torch.Tensor]:
        """Intermediate activations, shallow to deep."""
        pass


def _backbone(channels: int, hidden: int) -> nn.ModuleList:
    return nn.ModuleList([
        nn.Sequential(nn.Conv2d(channels, hidden, 3, padding=1), nn.SiLU()),
        nn.Sequential(nn.Conv2d(hidden, hidden * 2, 3, stride=2, padding=1), nn.SiLU()),
        nn.Sequential(nn.Conv2d(hidden * 2, hidden * 2, 3, stride=2, padding=1), nn.SiLU()),
    ])


class IdentityEmbedder(MetricNetwork):
    """Conv embedder trained with a CosFace margin head."""

    def __init__(self, num_identities: int, config: Optional[MetricConfig] = None,
                 channels: int = 3):
        super().__init__()
        self.config = cfg = config or MetricConfig()
        self.num_identities = num_identities
        self.channels = channels
        self.blocks = _backbone(channels, cfg.hidden_channels)
        self.pool = nn.AdaptiveAvgPool2d(2)
        self.project = nn.Linear(cfg.hidden_channels * 2 * 4, cfg.embed_dim)
        self.class_weight = nn.Parameter(torch.randn(num_identities, cfg.embed_dim) * 0.01)

    def feature_maps(self, images: torch.Tensor) -> List[torch.Tensor]:
        feats, h = [], images
        for block in self.blocks:
            h = block(h)
            feats.append(h)
        return feats

    def embed(self, images: torch.Tensor) -> torch.Tensor:
        """Unit-norm (B, embed_dim) identity embeddings."""
        h = self.feature_maps(images)[-1]
        return F.normalize(self.project(self.pool(h).flatten(1)), dim=-1)

    def margin_logits(self, embeddings: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        """s * (cos(theta) - m * onehot)."""
        cos = embeddings @ F.normalize(self.class_weight, dim=-1).t()
        onehot = F.one_hot(labels, self.num_identities).to(cos.dtype)
        return self.config.scale * (cos - self.config.margin * onehot)


class StyleClassifier(MetricNetwork):
    """Conv style classifier."""

    def __init__(self, styles: Sequence[str], config: Optional[MetricConfig] = None,
                 channels: int = 3):
        super().__init__()
        self.config = cfg = config or MetricConfig()
        self.styles = list(styles)
        self.channels = channels
        self.blocks = _backbone(channels, cfg.hidden_channels)
        self.pool = nn.AdaptiveAvgPool2d(2)
        self.hidden = nn.Linear(cfg.hidden_channels * 2 * 4, cfg.embed_dim)
        self.head = nn.Linear(cfg.embed_dim, len(self.styles))

    def feature_maps(self, images: torch.Tensor) -> List[torch.Tensor]:
        feats, h = [], images
        for block in self.blocks:
            h = block(h)
            feats.append(h)
        return feats

    def penultimate(self, images: torch.Tensor) -> torch.Tensor:
        h = self.feature_maps(images)[-1]
        return F.silu(self.hidden(self.pool(h).flatten(1)))

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.head(self.penultimate(images))

    def predict(self, images: torch.Tensor) -> List[str]:
        with torch.no_grad():
            return [self.styles[i] for i in self(images).argmax(dim=-1).tolist()]


def identity_similarity(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Cosine similarity of embeddings, clamped to [-1, 1]."""
    return F.cosine_similarity(a, b, dim=-1).clamp(-1.0, 1.0)


def _batched(fn, images: torch.Tensor, size: int = 256) -> torch.Tensor:
    with torch.no_grad():
        return torch.cat([fn(images[i:i + size]) for i in range(0, images.shape[0], size)])


# ----------------------------------------------------------------------
# Training
# ----------------------------------------------------------------------

def train_identity_embedder(images: torch.Tensor, identity_ids: Sequence[int], config: MetricConfig,
                            generator: torch.Generator,
                            progress: Optional[Callable[[int, float], None]] = None,
                            ) -> IdentityEmbedder:
    """
    Train an identity embedder with the CosFace margin loss.

    Args:
        images: Training images (N, C, H, W)
        identity_ids: Identity per image
        config: Metric settings
        generator: Seeded generator (initialization and batches)
        progress: Optional callable(iteration, loss)

    Returns:
        Frozen IdentityEmbedder
    """
    classes = sorted(set(int(i) for i in identity_ids))
    index = {ident: k for k, ident in enumerate(classes)}
    labels = torch.tensor([index[int(i)] for i in identity_ids], dtype=torch.long)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(torch.randint(0, 2 ** 31 - 1, (1,), generator=generator)))
        model = IdentityEmbedder(len(classes), config, channels=images.shape[1])
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    model.train()
    for iteration in range(config.iterations):
        idx = torch.randint(0, images.shape[0], (config.batch_size,), generator=generator)
        logits = model.margin_logits(model.embed(images[idx]), labels[idx])
        loss = F.cross_entropy(logits, labels[idx])
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        if progress is not None:
            progress(iteration, loss.item())
    return model.freeze()


def train_style_classifier(images: torch.Tensor, styles: Sequence[str], style_names: Sequence[str],
                           config: MetricConfig, generator: torch.Generator,
                           progress: Optional[Callable[[int, float], None]] = None,
                           ) -> StyleClassifier:
    """Train a style classifier with cross-entropy; returns it frozen."""
    index = {s: k for k, s in enumerate(style_names)}
    labels = torch.tensor([index[s] for s in styles], dtype=torch.long)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(torch.randint(0, 2 ** 31 - 1, (1,), generator=generator)))
        model = StyleClassifier(style_names, config, channels=images.shape[1])
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    model.train()
    for iteration in range(config.iterations):
        idx = torch.randint(0, images.shape[0], (config.batch_size,), generator=generator)
        loss = F.cross_entropy(model(images[idx]), labels[idx])
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        if progress is not None:
            progress(iteration, loss.item())
    return model.freeze()


# ----------------------------------------------------------------------
# Gates
# ----------------------------------------------------------------------

@dataclass
class IdentityGate:
    """Held-out verification statistics of an identity embedder."""

    auc: float
    same_identity_mean: float
    cross_identity_mean: float

    @property
    def separation(self) -> float:
        return self.same_identity_mean - self.cross_identity_mean

    def to_dict(self) -> Dict:
        return {**asdict(self), 'separation': self.separation}


def verify_identity_embedder(embedder: IdentityEmbedder, images: torch.Tensor,
                             identity_ids: Sequence[int],
                             seed: int = 0, max_pairs: int = 20000) -> IdentityGate:
    """
    Verification AUC and same/cross-identity similarity on held-out images.

    All same-identity pairs are positives; an equal number of random
    cross-identity pairs are negatives.
    """
    emb = _batched(embedder.embed, images)
    ids = np.asarray(identity_ids)
    rng = np.random.default_rng(seed)
    pos = [(i, j) for i in range(len(ids)) for j in range(i + 1, len(ids)) if ids[i] == ids[j]]
    if not pos or len(set(ids.tolist())) < 2:
        raise MetricGateError(
            f"identity verification needs at least two identities and one with two images, "
            f"got {len(set(ids.tolist()))} identities over {len(ids)} images")
    if len(pos) > max_pairs:
        pos = [pos[k] for k in rng.choice(len(pos), max_pairs, replace=False)]
    neg = []
    while len(neg) < len(pos):
        i, j = rng.integers(len(ids), size=2)
        if ids[i] != ids[j]:
            neg.append((int(i), int(j)))
    pairs = pos + neg
    sims = identity_similarity(emb[[p[0] for p in pairs]], emb[[p[1] for p in pairs]]).numpy()
    labels = np.array([1] * len(pos) + [0] * len(neg))
    return IdentityGate(
        auc=float(roc_auc_score(labels, sims)),
        same_identity_mean=float(sims[:len(pos)].mean()),
        cross_identity_mean=float(sims[len(pos):].mean()),
    )


def style_accuracy(classifier: StyleClassifier, images: torch.Tensor,
                   styles: Sequence[str]) -> float:
    """Fraction of images whose predicted style matches the label."""
    logits = _batched(classifier, images)
    predicted = [classifier.styles[i] for i in logits.argmax(dim=-1).tolist()]
    return float(np.mean([p == s for p, s in zip(predicted, styles)]))


def check_identity_gate(gate: IdentityGate, config: MetricConfig):
    """Raise MetricGateError if the embedder misses its AUC or separation gate."""
    if gate.auc <= config.auc_gate:
        raise MetricGateError(f"identity embedder AUC {gate.auc:.3f} <= {config.auc_gate}; "
                              "raise metrics.iterations")
    if gate.separation < config.separation_gate:
        raise MetricGateError(f"identity embedder separation {gate.separation:.3f} "
                              f"< {config.separation_gate}")


def check_style_gate(accuracy: float, config: MetricConfig):
    """Raise MetricGateError if the style classifier misses its accuracy gate."""
    if accuracy <= config.style_gate:
        raise MetricGateError(f"style classifier accuracy {accuracy:.3f} <= {config.style_gate}")
