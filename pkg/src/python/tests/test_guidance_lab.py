"""
Tests for latent guidance at an early sampling step.
"""
import pytest
import torch

from core.exceptions import ConfigurationError, StateError
from diffusion.denoiser import build_denoiser
from diffusion.sampler import ddim_sample
from evalkit.networks import IdentityEmbedder, MetricConfig
from guidance_lab import (ArmComparison, GuidanceConfig, _guidance_step, compare_guidance,
                          guidance_objective, guided_sample)


@pytest.fixture
def embedder():
    torch.manual_seed(0)
    return IdentityEmbedder(2, MetricConfig(embed_dim=8, hidden_channels=4)).freeze()


@pytest.fixture
def lcm(denoiser, make_generator):
    lora = denoiser.make_lora('lcm', rank=2, generator=make_generator(0))
    with torch.no_grad():
        for p in lora.up.values():
            p.normal_(0.0, 0.05, generator=make_generator(1))
    return lora


def _config(**overrides):
    settings = dict(guide_step=2, guide_iters=2, step_size=0.1, total_steps=4, pairs=2,
                    loss_kinds=['identity'])
    settings.update(overrides)
    return GuidanceConfig(**settings)


class TestGuidanceConfig:
    """Tests for GuidanceConfig."""

    def test_guide_iteration(self):
        assert GuidanceConfig().guide_iteration == 5
        assert GuidanceConfig(guide_step=0, total_steps=10).guide_iteration == 9

    def test_guide_step_range(self):
        with pytest.raises(ConfigurationError) as exc:
            GuidanceConfig(guide_step=50, total_steps=50)
        assert exc.value.field == "guidance.guide_step"

    def test_unknown_loss(self):
        with pytest.raises(ConfigurationError):
            GuidanceConfig(loss_kinds=['lpips'])


class TestGuidanceStep:
    """Tests for the normalized latent update."""

    def test_normalized_step_has_unit_rms(self):
        z = torch.zeros(2, 3, 4, 4, dtype=torch.float64)
        scale = torch.tensor([1.0, 100.0], dtype=torch.float64).view(2, 1, 1, 1)
        grad = torch.randn(2, 3, 4, 4, dtype=torch.float64) * scale
        step = _guidance_step(z, grad, 0.1, normalize=True)
        rms = step.flatten(1).pow(2).mean(1).sqrt()
        assert torch.allclose(rms, torch.full((2,), 0.1, dtype=torch.float64))

    def test_raw_step(self):
        z = torch.ones(1, 1, 2, 2)
        step = _guidance_step(z, torch.ones_like(z), 0.5, normalize=False)
        assert torch.equal(step, torch.full_like(z, 0.5))


class TestGuidedSample:
    """Tests for guided_sample."""

    def test_zero_iterations_is_plain_ddim(self, denoiser, schedule, codec, lcm, prompt_ids, images,
                                           embedder, make_generator):
        cond = denoiser.prompt_conditioning(prompt_ids[:1])
        z_T = torch.randn((1, 3, 8, 8), generator=make_generator(4))
        guided = guided_sample(denoiser, schedule, codec, lcm, images[0], cond, 'identity', 'lcm',
                               _config(guide_iters=0), make_generator(0), embedder, z_T=z_T)
        with torch.no_grad():
            plain = ddim_sample(denoiser, schedule, cond, 4, None, make_generator(0), z_T=z_T)
        assert torch.equal(guided.final, plain.final)

    def test_guidance_moves_the_sample(self, denoiser, schedule, codec, lcm, prompt_ids, images,
                                       embedder, make_generator):
        cond = denoiser.prompt_conditioning(prompt_ids[:1])
        z_T = torch.randn((1, 3, 8, 8), generator=make_generator(4))
        runs = [guided_sample(denoiser, schedule, codec, lcm, images[0], cond, 'perceptual', 'lcm',
                              _config(guide_iters=iters), make_generator(0), embedder,
                              z_T=z_T).final
                for iters in (0, 2)]
        assert not torch.equal(runs[0], runs[1])

    def test_lcm_arm_needs_adapter(self, denoiser, schedule, codec, prompt_ids, images, embedder):
        cond = denoiser.prompt_conditioning(prompt_ids[:1])
        with pytest.raises(StateError):
            guidance_objective(denoiser, schedule, codec, None, torch.zeros(1, 3, 8, 8), 50, cond,
                               images[:1], 'identity', 'lcm', embedder)

    def test_unknown_preview_kind(self, denoiser, schedule, codec, lcm, prompt_ids, images,
                                  embedder):
        cond = denoiser.prompt_conditioning(prompt_ids[:1])
        with pytest.raises(ConfigurationError):
            guidance_objective(denoiser, schedule, codec, lcm, torch.zeros(1, 3, 8, 8), 50, cond,
                               images[:1], 'identity', 'ddim', embedder)

    def test_gradcheck_objective(self, denoiser_config, schedule, codec, images, prompt_ids,
                                 make_generator):
        model = build_denoiser(denoiser_config, seed=0).double().eval()
        lora = model.make_lora('lcm', rank=2, generator=make_generator(0))
        torch.manual_seed(0)
        net = IdentityEmbedder(2, MetricConfig(embed_dim=8, hidden_channels=4)).double().freeze()
        cond = model.prompt_conditioning(prompt_ids[:1])
        cond.prompt_tokens = cond.prompt_tokens.detach()
        guide = images[:1].double()
        z = torch.randn((1, 3, 8, 8), generator=make_generator(2), dtype=torch.float64,
                        requires_grad=True)

        def objective(x):
            return guidance_objective(model, schedule, codec, lora, x, 30, cond, guide,
                                      'perceptual', 'lcm', net)

        assert torch.autograd.gradcheck(objective, (z,), eps=1e-6, atol=1e-5, rtol=1e-3)


class TestCompareGuidance:
    """Tests for the paired arm comparison."""

    def test_symmetry_control(self, denoiser, schedule, codec, lcm, prompt_ids, images, embedder,
                              tmp_path):
        cond = denoiser.prompt_conditioning(prompt_ids[:1])
        results = compare_guidance(denoiser, schedule, codec, lcm, images[:2], cond,
                                   {'identity': embedder}, embedder, _config(), master_seed=0,
                                   arms=('lcm', 'lcm'), out_dir=tmp_path)
        assert len(results) == 1
        assert results[0].similarity_a == results[0].similarity_b
        assert results[0].win_rate == 0.5
        assert (tmp_path / "guidance_identity.csv").exists()
        assert (tmp_path / "guidance_identity.png").exists()

    def test_missing_eval_embedder(self, denoiser, schedule, codec, lcm, prompt_ids, images):
        with pytest.raises(StateError):
            compare_guidance(denoiser, schedule, codec, lcm, images[:1],
                             denoiser.prompt_conditioning(prompt_ids[:1]), {}, None, _config(),
                             master_seed=0)

    def test_win_rate_counts_ties_half(self):
        comparison = ArmComparison('identity', ('x0_approx', 'lcm'), [0.1, 0.5, 0.3],
                                   [0.2, 0.5, 0.1])
        assert comparison.win_rate == pytest.approx(0.5)
        assert comparison.to_dict()['pairs'] == 3
