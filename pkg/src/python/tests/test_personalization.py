"""
Tests for the personalization encoders, generator and encoder training loop.
"""

import pytest
import torch

from core.exceptions import ConfigurationError, InvariantError, ShapeError, StateError
from core.models import TrainingBatch
from diffusion.sampler import SamplingConfig
from personalization.encoders import (AdapterEncoder, EncoderConfig, build_conditioning,
                                      encode_adapter, encode_kv)
from personalization.generator import PersonalizedGenerator
from personalization.prompts import kv_encoder_prompt
from personalization.trainer import ABLATION_PRESETS, EncoderTrainer, TrainConfig, apply_preset
from utils import read_jsonl


@pytest.fixture
def batch(images, prompt_ids):
    return TrainingBatch(
        conditioning_images=images[:2],
        target_images=images[2:],
        prompt_c=prompt_ids,
        prompt_r=prompt_ids.flip(0),
        identity_ids=torch.tensor([0, 1]),
        style_c=['photo', 'oil'],
        style_r=['oil', 'photo'],
    )


@pytest.fixture
def lcm_lora(denoiser, make_generator):
    lora = denoiser.make_lora('lcm', rank=2, generator=make_generator(3))
    with torch.no_grad():
        for p in lora.up.values():
            p.normal_(0.0, 0.05, generator=make_generator(4))
    return lora


def _trainer(denoiser, codec, schedule, adapter_encoder, lcm_lora, make_generator, **overrides):
    settings = dict(iterations=2, batch_size=2, kv_rank=2, metric='mse', lookahead_weight=0.5,
                    log_every=1)
    settings.update(overrides)
    return EncoderTrainer(denoiser, codec, schedule, adapter_encoder, TrainConfig(**settings),
                          lcm_lora=lcm_lora, generator=make_generator(5))


class TestAdapterEncoder:
    """Tests for the adapter encoder and KV capture."""

    def test_token_shape(self, adapter_encoder, images):
        assert adapter_encoder(images).shape == (4, 4, 16)

    def test_encode_adapter_is_encoder_forward(self, adapter_encoder, images):
        with torch.no_grad():
            assert torch.equal(encode_adapter(adapter_encoder, images), adapter_encoder(images))

    def test_wrong_image_size(self, adapter_encoder):
        with pytest.raises(ShapeError):
            adapter_encoder(torch.zeros(1, 3, 16, 16))

    def test_frozen_backbone(self):
        config = EncoderConfig(image_size=8, hidden_channels=8, token_dim=16, train_backbone=False)
        encoder = AdapterEncoder(config)
        assert not any(p.requires_grad for p in encoder.backbone.parameters())
        assert encoder.projection.weight.requires_grad

    def test_invalid_config(self):
        with pytest.raises(ConfigurationError):
            EncoderConfig(image_size=12)

    def test_encode_kv_covers_every_layer(self, denoiser, codec, schedule, images, make_generator):
        kv_ids = torch.tensor([kv_encoder_prompt()] * 4)
        lora = denoiser.make_lora('kv_encoder', rank=2, generator=make_generator(0))
        with torch.no_grad():
            cache = encode_kv(denoiser, codec, schedule, images, 10, kv_ids, lora,
                              make_generator(1))
        assert sorted(cache.layer_names) == sorted(denoiser.self_attention_layers)
        assert all(k.shape[0] == 4 for k, _ in cache.layers.values())

    def test_build_conditioning_carries_nulls(self, denoiser, adapter_encoder, prompt_ids, images):
        cond = build_conditioning(denoiser, prompt_ids, adapter_encoder(images[:2]),
                                  null_adapter_tokens=adapter_encoder.null_tokens,
                                  adapter_weight=0.5)
        assert cond.null_prompt_tokens is not None
        assert cond.null_adapter().shape == (1, 4, 16)
        assert cond.adapter_weight == 0.5


class TestPersonalizedGenerator:
    """Tests for inference."""

    def test_text_only_without_encoder(self, denoiser, codec, schedule, prompt_ids, images):
        generator = PersonalizedGenerator(denoiser, codec, schedule)
        cond = generator.conditioning(images[:2], prompt_ids)
        assert cond.adapter_tokens is None and cond.kv_cache is None

    def test_kv_conditioning(self, denoiser, codec, schedule, adapter_encoder, prompt_ids, images,
                             make_generator):
        kv = denoiser.make_lora('kv_encoder', rank=2, generator=make_generator(0))
        generator = PersonalizedGenerator(denoiser, codec, schedule, adapter_encoder, kv,
                                          SamplingConfig(steps=3, kv_timestep=50))
        assert generator.uses_kv
        cond = generator.conditioning(images[:2], prompt_ids, make_generator(1))
        assert cond.kv_cache is not None and cond.adapter_tokens.shape == (2, 4, 16)

    def test_images_are_deterministic_and_bounded(self, denoiser, codec, schedule, adapter_encoder,
                                                  prompt_ids, images, make_generator):
        kv = denoiser.make_lora('kv_encoder', rank=2, generator=make_generator(0))
        generator = PersonalizedGenerator(denoiser, codec, schedule, adapter_encoder, kv,
                                          SamplingConfig(steps=3, kv_timestep=50))
        first = generator.images(images[:2], prompt_ids, make_generator(2))
        second = generator.images(images[:2], prompt_ids, make_generator(2))
        assert first.shape == (2, 3, 8, 8)
        assert torch.equal(first, second)
        assert first.min() >= -1 and first.max() <= 1


class TestPresets:
    """Tests for the ablation presets."""

    def test_x0_preset(self):
        config = apply_preset(TrainConfig(), 'x0_loss')
        assert config.preview == 'x0' and not config.use_kv
        assert config.alignment.kind == 'none'

    def test_preset_keeps_other_alignment_fields(self):
        base = TrainConfig(alignment={'kind': 'lora_scaling', 'min_scale': 0.2})
        config = apply_preset(base, 'align_sds')
        assert config.alignment.kind == 'sds' and config.alignment.min_scale == 0.2

    def test_every_preset_builds(self):
        for name in ABLATION_PRESETS:
            assert isinstance(apply_preset(TrainConfig(), name), TrainConfig)

    def test_unknown_preset(self):
        with pytest.raises(ConfigurationError):
            apply_preset(TrainConfig(), 'lcm_turbo')

    def test_none_is_passthrough(self):
        config = TrainConfig()
        assert apply_preset(config, None) is config


class TestEncoderTrainer:
    """Tests for EncoderTrainer."""

    def test_lcm_preview_needs_adapter(self, denoiser, codec, schedule, adapter_encoder,
                                       make_generator):
        with pytest.raises(ConfigurationError):
            _trainer(denoiser, codec, schedule, adapter_encoder, None, make_generator)

    def test_identity_metric_needs_network(self, denoiser, codec, schedule, adapter_encoder,
                                           lcm_lora, make_generator):
        with pytest.raises(StateError):
            _trainer(denoiser, codec, schedule, adapter_encoder, lcm_lora, make_generator,
                     metric='identity')

    def test_total_is_weighted_sum(self, denoiser, codec, schedule, adapter_encoder, lcm_lora,
                                   batch, make_generator):
        trainer = _trainer(denoiser, codec, schedule, adapter_encoder, lcm_lora, make_generator)
        breakdown = trainer.training_step(batch, make_generator(7))
        expected = breakdown.diffusion + 0.5 * breakdown.lookahead + breakdown.alignment
        assert breakdown.total == pytest.approx(expected, abs=1e-6)
        assert breakdown.finite
        assert 0.0 <= breakdown.preview_scale <= 1.0
        assert len(breakdown.timesteps) == 2

    def test_seeded_step_is_reproducible(self, denoiser_config, codec, schedule, encoder_config,
                                         batch, make_generator):
        from diffusion.denoiser import build_denoiser
        results = []
        for _ in range(2):
            model = build_denoiser(denoiser_config, seed=0)
            lora = model.make_lora('lcm', rank=2, generator=make_generator(3))
            torch.manual_seed(0)
            encoder = AdapterEncoder(encoder_config)
            trainer = _trainer(model, codec, schedule, encoder, lora, make_generator)
            results.append(trainer.training_step(batch, make_generator(7)).to_dict())
        assert results[0] == results[1]

    def test_frozen_weights_unchanged(self, denoiser, codec, schedule, adapter_encoder, lcm_lora,
                                      batch, make_generator, tmp_path):
        trainer = _trainer(denoiser, codec, schedule, adapter_encoder, lcm_lora, make_generator)
        base = [p.clone() for p in denoiser.base_parameters()]
        lcm = [p.clone() for p in lcm_lora.parameters()]
        adapter = [p.clone() for p in denoiser.adapter_parameters()]
        kv = [p.clone() for p in trainer.kv_lora.parameters()]
        seen = []
        history = trainer.train(lambda size, gen: batch, make_generator(8),
                                log_path=tmp_path / "train.jsonl",
                                progress=lambda i, b: seen.append(i))
        assert len(history) == 2 and seen == [0, 1]
        for old, new in zip(base, denoiser.base_parameters()):
            assert torch.equal(old, new)
        for old, new in zip(lcm, lcm_lora.parameters()):
            assert torch.equal(old, new)
        assert any(not torch.equal(o, n) for o, n in zip(adapter, denoiser.adapter_parameters()))
        assert any(not torch.equal(o, n) for o, n in zip(kv, trainer.kv_lora.parameters()))
        records = read_jsonl(tmp_path / "train.jsonl")
        assert [r['iteration'] for r in records] == [0, 1]
        assert all(0 <= b < 10 for r in records for b in r['t_bucket'])

    def test_unfrozen_base_parameter_is_caught(self, denoiser, codec, schedule, adapter_encoder,
                                               lcm_lora, batch, make_generator):
        trainer = _trainer(denoiser, codec, schedule, adapter_encoder, lcm_lora, make_generator)
        next(iter(denoiser.base_parameters())).requires_grad_(True)
        with pytest.raises(InvariantError):
            trainer.training_step(batch, make_generator(7))

    def test_stale_gradient_on_consistency_adapter_is_caught(self, denoiser, codec, schedule,
                                                             adapter_encoder, lcm_lora, batch,
                                                             make_generator):
        trainer = _trainer(denoiser, codec, schedule, adapter_encoder, lcm_lora, make_generator)
        p = next(iter(lcm_lora.parameters()))
        p.grad = torch.zeros_like(p)
        with pytest.raises(InvariantError):
            trainer.training_step(batch, make_generator(7))

    def test_x0_preview_ablation(self, denoiser, codec, schedule, adapter_encoder, batch,
                                 make_generator):
        trainer = _trainer(denoiser, codec, schedule, adapter_encoder, None, make_generator,
                           preview='x0', use_kv=False, alignment={'kind': 'none'})
        breakdown = trainer.training_step(batch, make_generator(7))
        assert trainer.kv_lora is None
        assert breakdown.preview_scale == 0.0
        assert breakdown.lookahead > 0.0

    def test_data_only_has_no_lookahead(self, denoiser, codec, schedule, adapter_encoder, batch,
                                        make_generator):
        trainer = _trainer(denoiser, codec, schedule, adapter_encoder, None, make_generator,
                           lookahead_weight=0.0, use_kv=False)
        breakdown = trainer.training_step(batch, make_generator(7))
        assert breakdown.lookahead == 0.0 and breakdown.alignment == 0.0
        assert breakdown.total == pytest.approx(breakdown.diffusion)

    def test_invalid_config(self):
        with pytest.raises(ConfigurationError):
            TrainConfig(metric='lpips')
        with pytest.raises(ConfigurationError):
            TrainConfig(preview='ddim')
        with pytest.raises(ConfigurationError):
            TrainConfig(text_drop=1.5)
