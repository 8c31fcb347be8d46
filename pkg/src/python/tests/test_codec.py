"""
Tests for the latent codec and base denoiser training.
"""
import pytest
import torch

from core.exceptions import ConfigurationError, ShapeError, StateError
from diffusion.codec import CodecConfig, LatentCodec, fit_codec
from diffusion.training import BaseTrainConfig, denoising_loss, train_denoiser


class TestLatentCodec:
    """Tests for LatentCodec."""

    def test_identity_round_trip_exact(self, codec, images):
        assert torch.equal(codec.decode(codec.encode(images)), images)
        assert codec.latent_shape((3, 8, 8)) == (3, 8, 8)

    def test_untrained_autoencoder_refuses(self, images):
        codec = LatentCodec(CodecConfig(mode='autoencoder', hidden_channels=8))
        with pytest.raises(StateError) as exc:
            codec.encode(images)
        assert "identity" in str(exc.value)

    def test_autoencoder_latent_shape(self):
        codec = LatentCodec(CodecConfig(mode='autoencoder', latent_channels=4))
        assert codec.latent_shape((3, 32, 32)) == (4, 16, 16)

    def test_wrong_channels(self, codec):
        with pytest.raises(ShapeError):
            codec.encode(torch.zeros(1, 1, 8, 8))

    def test_unknown_mode(self):
        with pytest.raises(ConfigurationError):
            CodecConfig(mode='vq')

    def test_decode_gradcheck(self):
        torch.manual_seed(0)
        config = CodecConfig(mode='autoencoder', hidden_channels=4, latent_channels=2)
        codec = LatentCodec(config).double()
        codec.mark_trained()
        z = torch.randn(1, 2, 4, 4, dtype=torch.float64, requires_grad=True)
        assert torch.autograd.gradcheck(codec.decode, (z,), eps=1e-6, atol=1e-5, rtol=1e-3)

    def test_fit_codec_marks_trained(self, images, make_generator):
        torch.manual_seed(0)
        codec = LatentCodec(CodecConfig(mode='autoencoder', hidden_channels=8, iterations=5,
                                        batch_size=4, reconstruction_threshold=100.0))
        history = fit_codec(codec, images, make_generator(0))
        assert len(history) == 5
        assert codec.is_trained
        assert codec.encode(images).shape == (4, 4, 4, 4)

    def test_fit_codec_threshold_miss(self, images, make_generator):
        codec = LatentCodec(CodecConfig(mode='autoencoder', hidden_channels=8, iterations=1,
                                        batch_size=4, reconstruction_threshold=1e-9))
        with pytest.raises(StateError):
            fit_codec(codec, images, make_generator(0))
        assert not codec.is_trained


class TestBaseTraining:
    """Tests for the base denoiser loop."""

    def test_loss_is_finite_scalar(self, denoiser, codec, schedule, images, prompt_ids):
        ids = prompt_ids.repeat(2, 1)
        loss = denoising_loss(denoiser, codec, schedule, images, ids, torch.tensor([1, 20, 50, 99]),
                              torch.randn_like(images))
        assert loss.ndim == 0 and torch.isfinite(loss)

    def test_train_leaves_adapter_path_untouched(self, denoiser, codec, schedule, images,
                                                 prompt_ids, make_generator):
        adapter = [p.clone() for p in denoiser.adapter_parameters()]
        config = BaseTrainConfig(iterations=3, batch_size=4, log_every=0)
        seen = []
        history = train_denoiser(denoiser, codec, schedule, images, prompt_ids.repeat(2, 1), config,
                                 make_generator(0), progress=lambda i, loss: seen.append(i))
        assert len(history) == 3 and seen == [0, 1, 2]
        for old, new in zip(adapter, denoiser.adapter_parameters()):
            assert torch.equal(old, new)

    def test_train_is_reproducible(self, denoiser_config, codec, schedule, images, prompt_ids,
                                   make_generator):
        from diffusion.denoiser import build_denoiser
        config = BaseTrainConfig(iterations=2, batch_size=4, log_every=0)
        prompts = prompt_ids.repeat(2, 1)
        runs = []
        for _ in range(2):
            model = build_denoiser(denoiser_config, seed=1)
            runs.append(train_denoiser(model, codec, schedule, images, prompts, config,
                                       make_generator(4)))
        assert runs[0] == runs[1]

    def test_invalid_config(self):
        with pytest.raises(ConfigurationError):
            BaseTrainConfig(prompt_drop_prob=1.5)
