"""
Consistent-identity dataset: generation, manifest, pair sampling and checks.
"""

from dataclasses import dataclass, asdict, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union
import json
import logging

import numpy as np
import torch
from PIL import Image
from sklearn.linear_model import LogisticRegression

from core.exceptions import ConfigurationError, StateError
from core.models import TrainingBatch, TrainingSample
from dataforge.identity import generate_identity
from dataforge.styles import get_style, render
from personalization.prompts import CONTEXTS, STYLES, build_prompt, compress_prompt
from utils import derive_seed, save_image

logger = logging.getLogger(__name__)

SPLITS = ('train', 'val', 'test')
MANIFEST_NAME = 'manifest.jsonl'
# Held-out splits need two identities for cross-identity pairs.
MIN_SPLIT_IDENTITIES = 2


@dataclass
class DataConfig:
    """Dataset generation settings."""

    num_identities: int = 2000
    image_size: int = 32
    styles: Tuple[str, ...] = STYLES
    contexts: Tuple[str, ...] = CONTEXTS
    val_fraction: float = 0.05
    test_fraction: float = 0.1
    cross_style_prob: float = 0.9
    photo_only: bool = False

    def __post_init__(self):
        self.styles = tuple(self.styles)
        self.contexts = tuple(self.contexts)
        if self.num_identities < 1:
            raise ConfigurationError("data.num_identities", "must be >= 1")
        for s in self.styles:
            if s not in STYLES:
                raise ConfigurationError("data.styles", f"unknown style '{s}'")
        for c in self.contexts:
            if c not in CONTEXTS:
                raise ConfigurationError("data.contexts", f"unknown context '{c}'")
        if len(self.styles) < 2 and not self.photo_only:
            raise ConfigurationError("data.styles",
                                     "at least two styles are needed for cross-style pairs")
        held_out = self.val_fraction + self.test_fraction
        if self.val_fraction < 0 or self.test_fraction < 0 or held_out >= 1:
            raise ConfigurationError("data.test_fraction",
                                     "split fractions must be >= 0 and leave a train split")
        if not 0.0 <= self.cross_style_prob <= 1.0:
            raise ConfigurationError("data.cross_style_prob", "must lie in [0, 1]")
        n_test, n_val = self.split_sizes()
        if self.num_identities - n_test - n_val < MIN_SPLIT_IDENTITIES:
            raise ConfigurationError(
                "data.num_identities",
                f"{self.num_identities} identities cannot fill test ({n_test}), val ({n_val}) "
                f"and train (>= {MIN_SPLIT_IDENTITIES}) splits")

    def split_sizes(self) -> Tuple[int, int]:
        """Identity counts of the (test, val) splits; a non-zero fraction gets at least two."""
        def size(fraction: float) -> int:
            if fraction == 0:
                return 0
            return max(MIN_SPLIT_IDENTITIES, int(round(self.num_identities * fraction)))
        return size(self.test_fraction), size(self.val_fraction)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data['styles'] = list(self.styles)
        data['contexts'] = list(self.contexts)
        return data


@dataclass
class DatasetManifest:
    """JSON-lines records {path, identity_id, identity_seed, style, context, prompt, split}."""

    records: List[Dict[str, Any]] = field(default_factory=list)
    variant: str = 'styled'

    def __len__(self) -> int:
        return len(self.records)

    def identities(self, split: Optional[str] = None) -> List[int]:
        ids = {r['identity_id'] for r in self.records if split is None or r['split'] == split}
        return sorted(ids)

    def by_split(self, split: str) -> List[Dict[str, Any]]:
        return [r for r in self.records if r['split'] == split]

    def validate(self):
        """Check identity-disjoint splits and per-identity style coverage."""
        split_of: Dict[int, str] = {}
        styles_of: Dict[int, set] = {}
        for r in self.records:
            ident = r['identity_id']
            if split_of.setdefault(ident, r['split']) != r['split']:
                raise StateError(f"identity {ident} appears in more than one split")
            key = (r['style'], r['context']) if self.variant == 'photo_only' else r['style']
            styles_of.setdefault(ident, set()).add(key)
        thin = [i for i, s in styles_of.items() if len(s) < 2]
        if thin:
            raise StateError(f"{len(thin)} identities appear in fewer than two styles "
                             f"(e.g. {thin[:5]})")

    def write(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', encoding='utf-8') as f:
            for record in self.records:
                f.write(json.dumps({**record, 'variant': self.variant}, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> 'DatasetManifest':
        path = Path(path)
        if not path.exists():
            raise StateError(f"dataset manifest missing at {path}; run forge-data")
        records, variant = [], 'styled'
        with open(path, 'r', encoding='utf-8') as f:
            for line in f:
                if line.strip():
                    record = json.loads(line)
                    variant = record.pop('variant', variant)
                    records.append(record)
        return cls(records=records, variant=variant)


def assign_splits(identity_ids: Sequence[int], config: DataConfig,
                  rng: np.random.Generator) -> Dict[int, str]:
    """Identity-disjoint train/val/test assignment."""
    ids = np.array(sorted(identity_ids))
    rng.shuffle(ids)
    n_test, n_val = config.split_sizes()
    splits = {}
    for i, ident in enumerate(ids.tolist()):
        splits[ident] = 'test' if i < n_test else 'val' if i < n_test + n_val else 'train'
    return splits


def build_dataset(config: DataConfig, out_dir: Union[str, Path], master_seed: int,
                  progress: Optional[Callable[[int], None]] = None) -> DatasetManifest:
    """
    Render every identity in every style and write images plus a manifest.

    Args:
        config: Generation settings
        out_dir: Output directory (receives images/ and manifest.jsonl)
        master_seed: Master seed; the dataset is a pure function of (config, seed)
        progress: Optional callable(identity_index)

    Returns:
        The validated DatasetManifest
    """
    out_dir = Path(out_dir)
    split_rng = np.random.default_rng(derive_seed(master_seed, 'dataforge.splits'))
    splits = assign_splits(range(config.num_identities), config, split_rng)
    variant = 'photo_only' if config.photo_only else 'styled'
    records = []
    for ident in range(config.num_identities):
        identity_seed = derive_seed(master_seed, f"dataforge.identity.{ident}")
        identity = generate_identity(identity_seed)
        styles = ['photo'] * len(config.styles) if config.photo_only else list(config.styles)
        for slot, style_name in enumerate(styles):
            rng = np.random.default_rng(derive_seed(identity_seed, f"render.{slot}.{style_name}"))
            if config.photo_only:
                context = config.contexts[slot % len(config.contexts)]
            else:
                context = config.contexts[int(rng.integers(len(config.contexts)))]
            image = render(identity, get_style(style_name), rng, context=context,
                           size=config.image_size)
            rel = f"images/{ident:05d}_{slot}_{style_name}.png"
            save_image(image, out_dir / rel)
            records.append({
                'path': rel,
                'identity_id': ident,
                'identity_seed': identity_seed,
                'style': style_name,
                'context': context,
                'prompt': build_prompt(style_name, identity.descriptors(), context),
                'split': splits[ident],
            })
        if progress is not None:
            progress(ident)
    manifest = DatasetManifest(records=records, variant=variant)
    manifest.validate()
    manifest.write(out_dir / MANIFEST_NAME)
    stats = dataset_stats(manifest)
    with open(out_dir / 'stats.json', 'w', encoding='utf-8') as f:
        json.dump(stats, f, indent=2, sort_keys=True)
    logger.info("forged %d images of %d identities", len(records), config.num_identities)
    return manifest


def load_image(path: Union[str, Path]) -> torch.Tensor:
    """Load a PNG as a float32 CHW tensor in [-1, 1]."""
    array = np.asarray(Image.open(path).convert('RGB'), dtype=np.float32)
    return torch.from_numpy(array).permute(2, 0, 1) / 127.5 - 1.0


def load_images(manifest: DatasetManifest, root: Union[str, Path],
                split: Optional[str] = None) -> Tuple[torch.Tensor, List[Dict[str, Any]]]:
    """Stack the images of a split (all splits when None) with their records."""
    root = Path(root)
    records = manifest.records if split is None else manifest.by_split(split)
    if not records:
        raise StateError(f"no images in split '{split}'")
    return torch.stack([load_image(root / r['path']) for r in records]), records


def dataset_stats(manifest: DatasetManifest) -> Dict[str, Any]:
    """Identities, per-style and per-split counts, and cross-style pairing coverage."""
    styles: Dict[str, int] = {}
    splits: Dict[str, int] = {}
    per_identity: Dict[int, set] = {}
    for r in manifest.records:
        styles[r['style']] = styles.get(r['style'], 0) + 1
        splits[r['split']] = splits.get(r['split'], 0) + 1
        per_identity.setdefault(r['identity_id'], set()).add(r['style'])
    covered = sum(1 for s in per_identity.values() if len(s) >= 2)
    return {
        'variant': manifest.variant,
        'identities': len(per_identity),
        'images': len(manifest.records),
        'styles': dict(sorted(styles.items())),
        'splits': dict(sorted(splits.items())),
        'pairing_coverage': covered / max(len(per_identity), 1),
    }


class PairSampler:
    """Draws (conditioning, target) pairs of the same identity."""

    def __init__(self, images: torch.Tensor, records: List[Dict[str, Any]],
                 cross_style_prob: float = 0.9):
        """
        Args:
            images: (N, C, H, W) tensor aligned with ``records``
            records: Manifest records of one split
            cross_style_prob: P(style_c != style_r) when the identity has several styles
        """
        self.images = images
        self.records = records
        self.cross_style_prob = cross_style_prob
        self._by_identity: Dict[int, List[int]] = {}
        for i, r in enumerate(records):
            self._by_identity.setdefault(r['identity_id'], []).append(i)
        self.identity_ids = sorted(self._by_identity)
        if not self.identity_ids:
            raise StateError("pair sampler needs at least one identity")

    def sample(self, generator: torch.Generator) -> TrainingSample:
        pick = torch.randint(len(self.identity_ids), (1,), generator=generator)
        ident = self.identity_ids[int(pick)]
        members = self._by_identity[ident]
        c = members[int(torch.randint(len(members), (1,), generator=generator))]
        draw = float(torch.rand(1, generator=generator, dtype=torch.float64))
        cross = draw < self.cross_style_prob
        if cross:
            pool = [m for m in members if self.records[m]['style'] != self.records[c]['style']] or \
                   [m for m in members if m != c] or members
        else:
            pool = [m for m in members if self.records[m]['style'] == self.records[c]['style']]
        r = pool[int(torch.randint(len(pool), (1,), generator=generator))]
        rec_c, rec_r = self.records[c], self.records[r]
        return TrainingSample(
            conditioning_image=self.images[c],
            target_image=self.images[r],
            prompt_c=compress_prompt(rec_c['prompt']),
            prompt_r=compress_prompt(rec_r['prompt']),
            identity_id=ident,
            style_c=rec_c['style'],
            style_r=rec_r['style'],
        )

    def batch(self, batch_size: int, generator: torch.Generator) -> TrainingBatch:
        return TrainingBatch.collate([self.sample(generator) for _ in range(batch_size)])


@dataclass
class ProbeReport:
    """Linear-probe identity separability on raw pixels."""

    accuracy: float
    chance: float
    identities: int

    @property
    def above_chance(self) -> bool:
        return self.accuracy > self.chance


def linear_probe(images: torch.Tensor, identity_ids: Sequence[int], styles: Sequence[str],
                 max_identities: int = 50, seed: int = 0) -> ProbeReport:
    """
    Fit a logistic-regression probe on raw pixels; hold out one style per identity.

    Args:
        images: (N, C, H, W) tensor
        identity_ids: Identity per image
        styles: Style per image
        max_identities: Identities used by the probe
        seed: Seed of the identity subset

    Returns:
        ProbeReport with held-out accuracy and chance level
    """
    ids = sorted(set(identity_ids))
    rng = np.random.default_rng(seed)
    chosen = set(rng.permutation(ids)[:max_identities].tolist())
    features = images.reshape(images.shape[0], -1).numpy()
    held_style: Dict[int, str] = {}
    train_x, train_y, test_x, test_y = [], [], [], []
    for x, ident, style in zip(features, identity_ids, styles):
        if ident not in chosen:
            continue
        if held_style.setdefault(ident, style) == style:
            test_x.append(x)
            test_y.append(ident)
        else:
            train_x.append(x)
            train_y.append(ident)
    if not train_x or not test_x:
        raise StateError("linear probe needs at least two images per identity")
    probe = LogisticRegression(max_iter=500)
    probe.fit(np.stack(train_x), np.array(train_y))
    accuracy = float((probe.predict(np.stack(test_x)) == np.array(test_y)).mean())
    return ProbeReport(accuracy=accuracy, chance=1.0 / len(chosen), identities=len(chosen))
