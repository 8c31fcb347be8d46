"""
Tests for procedural identities, style rendering and the dataset build.
"""
import json

import numpy as np
import pytest
import torch

from core.exceptions import ConfigurationError, StateError
from dataforge.dataset import (MANIFEST_NAME, DataConfig, DatasetManifest, PairSampler,
                               build_dataset, dataset_stats, linear_probe, load_images)
from dataforge.identity import PARAM_BOUNDS, generate_identity
from dataforge.styles import get_style, mean_saturation, render
from personalization.prompts import DESCRIPTORS, FACE, TOKEN_IDS
from utils import hash_file


@pytest.fixture(scope="module")
def forged(tmp_path_factory):
    """A small styled dataset built once for the module."""
    out = tmp_path_factory.mktemp("data")
    config = DataConfig(num_identities=10, image_size=16, val_fraction=0.1, test_fraction=0.2)
    manifest = build_dataset(config, out, master_seed=7)
    return config, out, manifest


class TestIdentity:
    """Tests for generate_identity."""

    def test_same_seed_same_identity(self):
        assert generate_identity(123) == generate_identity(123)
        assert generate_identity(123) != generate_identity(124)

    def test_parameters_within_bounds(self):
        for seed in range(50):
            identity = generate_identity(seed)
            for name, (lo, hi) in PARAM_BOUNDS.items():
                assert lo <= getattr(identity, name) <= hi

    def test_descriptors_are_prompt_words(self):
        for seed in range(50):
            words = generate_identity(seed).descriptors()
            assert 1 <= len(words) <= 4
            assert all(w in DESCRIPTORS for w in words)


class TestStyles:
    """Tests for style rendering."""

    def test_render_shape_and_range(self):
        image = render(generate_identity(0), get_style('oil'), np.random.default_rng(0), 'forest',
                       size=16)
        assert image.shape == (3, 16, 16) and image.dtype == torch.float32
        assert image.min() >= -1 and image.max() <= 1

    def test_render_is_deterministic(self):
        identity = generate_identity(3)
        a = render(identity, get_style('grainy'), np.random.default_rng(5), 'city', size=16)
        b = render(identity, get_style('grainy'), np.random.default_rng(5), 'city', size=16)
        assert torch.equal(a, b)

    def test_sketch_is_desaturated(self):
        identity = generate_identity(1)
        sketch = render(identity, get_style('sketch'), np.random.default_rng(0), 'beach', size=32)
        photo = render(identity, get_style('photo'), np.random.default_rng(0), 'beach', size=32)
        assert mean_saturation(sketch) < 0.05
        assert mean_saturation(photo) > mean_saturation(sketch)

    def test_unknown_style(self):
        with pytest.raises(ConfigurationError):
            get_style('watercolor')


class TestBuildDataset:
    """Tests for build_dataset and the manifest."""

    def test_every_identity_in_every_style(self, forged):
        config, _, manifest = forged
        assert len(manifest) == config.num_identities * len(config.styles)
        for ident in manifest.identities():
            styles = {r['style'] for r in manifest.records if r['identity_id'] == ident}
            assert len(styles) >= 2

    def test_splits_are_identity_disjoint(self, forged):
        _, _, manifest = forged
        split_sets = [set(manifest.identities(split)) for split in ('train', 'val', 'test')]
        assert not (split_sets[0] & split_sets[1]) and not (split_sets[0] & split_sets[2])
        assert not (split_sets[1] & split_sets[2])
        assert len(split_sets[2]) == 2 and len(split_sets[1]) == 2

    def test_rebuild_is_byte_identical(self, forged, tmp_path):
        config, out, manifest = forged
        again = build_dataset(config, tmp_path, master_seed=7)
        assert again.records == manifest.records
        assert hash_file(tmp_path / MANIFEST_NAME) == hash_file(out / MANIFEST_NAME)
        first = manifest.records[0]['path']
        assert hash_file(tmp_path / first) == hash_file(out / first)

    def test_manifest_round_trip(self, forged):
        _, out, manifest = forged
        loaded = DatasetManifest.load(out / MANIFEST_NAME)
        assert loaded.records == manifest.records
        assert loaded.variant == 'styled'

    def test_stats_file(self, forged):
        _, out, _ = forged
        stats = json.loads((out / 'stats.json').read_text())
        assert stats['identities'] == 10
        assert stats['pairing_coverage'] == 1.0

    def test_prompts_carry_identity_descriptors(self, forged):
        _, _, manifest = forged
        record = manifest.records[0]
        descriptors = generate_identity(record['identity_seed']).descriptors()
        assert record['prompt'][1:1 + len(descriptors)] == [TOKEN_IDS[w] for w in descriptors]

    def test_photo_only_variant(self, tmp_path):
        config = DataConfig(num_identities=3, image_size=16, val_fraction=0.0, test_fraction=0.0,
                            photo_only=True)
        manifest = build_dataset(config, tmp_path, master_seed=1)
        assert manifest.variant == 'photo_only'
        assert {r['style'] for r in manifest.records} == {'photo'}

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(StateError) as exc:
            DatasetManifest.load(tmp_path / MANIFEST_NAME)
        assert "forge-data" in str(exc.value)

    def test_overlapping_splits_rejected(self):
        manifest = DatasetManifest(records=[
            {'identity_id': 0, 'style': 'photo', 'context': 'city', 'split': 'train'},
            {'identity_id': 0, 'style': 'oil', 'context': 'city', 'split': 'test'},
        ])
        with pytest.raises(StateError):
            manifest.validate()

    def test_invalid_config(self):
        with pytest.raises(ConfigurationError):
            DataConfig(styles=('photo',))
        with pytest.raises(ConfigurationError):
            DataConfig(val_fraction=0.5, test_fraction=0.5)

    def test_small_held_out_splits_get_two_identities(self):
        assert DataConfig(num_identities=8).split_sizes() == (2, 2)
        no_test = DataConfig(num_identities=40, val_fraction=0.05, test_fraction=0.0)
        assert no_test.split_sizes() == (0, 2)
        assert DataConfig(num_identities=2000).split_sizes() == (200, 100)

    def test_too_few_identities_for_splits(self):
        with pytest.raises(ConfigurationError) as exc:
            DataConfig(num_identities=5)
        assert exc.value.field == "data.num_identities"
        DataConfig(num_identities=6)


class TestPairSampler:
    """Tests for PairSampler."""

    def test_pairs_share_identity(self, forged, make_generator):
        _, out, manifest = forged
        images, records = load_images(manifest, out, 'train')
        sampler = PairSampler(images, records, cross_style_prob=1.0)
        gen = make_generator(0)
        for _ in range(20):
            sample = sampler.sample(gen)
            assert sample.style_c != sample.style_r
            assert sample.prompt_c[1] == TOKEN_IDS[FACE]

    def test_same_style_pairs(self, forged, make_generator):
        _, out, manifest = forged
        images, records = load_images(manifest, out, 'train')
        sampler = PairSampler(images, records, cross_style_prob=0.0)
        gen = make_generator(1)
        assert all(s.style_c == s.style_r for s in (sampler.sample(gen) for _ in range(20)))

    def test_batch(self, forged, make_generator):
        _, out, manifest = forged
        images, records = load_images(manifest, out, 'train')
        batch = PairSampler(images, records).batch(3, make_generator(2))
        assert batch.conditioning_images.shape == (3, 3, 16, 16)
        assert batch.prompt_r.shape == (3, 6)

    def test_empty_sampler(self):
        with pytest.raises(StateError):
            PairSampler(torch.zeros(0, 3, 8, 8), [])


class TestLinearProbe:
    """Tests for the raw-pixel identity probe."""

    def test_probe_report(self, forged):
        _, out, manifest = forged
        images, records = load_images(manifest, out)
        report = linear_probe(images, [r['identity_id'] for r in records],
                              [r['style'] for r in records])
        assert report.identities == 10
        assert report.chance == pytest.approx(0.1)
        assert 0.0 <= report.accuracy <= 1.0

    def test_stats_counts(self, forged):
        _, _, manifest = forged
        stats = dataset_stats(manifest)
        assert sum(stats['splits'].values()) == len(manifest)
