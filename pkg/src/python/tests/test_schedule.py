"""
Tests for the noise schedule, forward noising and annealed timestep sampling.
"""
import math

import numpy as np
import pytest
import torch
from scipy import stats

from core.exceptions import ConfigurationError, ShapeError, TimestepRangeError
from diffusion.schedule import (DiffusionConfig, TimestepSampler, add_noise, build_schedule,
                                predict_eps, predict_x0, sample_timestep, uniform_timesteps)


class TestBuildSchedule:
    """Tests for build_schedule."""

    def test_default_schedule_monotone(self):
        schedule = build_schedule(1000, 1e-4, 0.02, 'linear')
        ab = schedule.alpha_bar
        assert schedule.T == 1000
        assert torch.all(ab[1:] < ab[:-1])
        assert ab[999] < 0.05
        assert ab[0] > 0.99 * (1 - schedule.beta[0])

    def test_two_step_product(self):
        schedule = build_schedule(2, 0.1, 0.1)
        assert torch.allclose(schedule.alpha_bar, torch.tensor([0.9, 0.81], dtype=torch.float64))

    @pytest.mark.parametrize("spacing", ["linear", "cosine"])
    def test_alpha_bar_plus_beta_tilde(self, spacing):
        schedule = build_schedule(200, spacing=spacing)
        total = schedule.alpha_bar + schedule.beta_tilde
        assert torch.allclose(total, torch.ones_like(total), rtol=0, atol=1e-12)

    @pytest.mark.parametrize("kwargs,field", [
        ({'T': 1}, "diffusion.timesteps"),
        ({'T': 10, 'beta_min': 0.0}, "diffusion.beta_min"),
        ({'T': 10, 'beta_min': 0.1, 'beta_max': 0.05}, "diffusion.beta_max"),
        ({'T': 10, 'beta_max': 1.0}, "diffusion.beta_max"),
        ({'T': 10, 'spacing': 'quadratic'}, "diffusion.spacing"),
    ])
    def test_invalid_parameters_name_field(self, kwargs, field):
        with pytest.raises(ConfigurationError) as exc:
            build_schedule(**kwargs)
        assert exc.value.field == field

    def test_config_builds_schedule(self):
        schedule = DiffusionConfig(timesteps=50).build()
        assert schedule.T == 50
        assert DiffusionConfig().to_dict()['spacing'] == 'linear'


class TestForwardNoising:
    """Tests for add_noise, predict_x0 and predict_eps."""

    def test_zero_noise_scales_latent(self, schedule):
        z0 = torch.randn(2, 3, 4, 4, dtype=torch.float64)
        out = add_noise(schedule, z0, 30, torch.zeros_like(z0))
        assert torch.allclose(out, schedule.alpha_bar[30].sqrt() * z0)

    def test_round_trip_every_timestep(self, schedule, make_generator):
        gen = make_generator(0)
        z0 = torch.randn((schedule.T, 3, 4, 4), generator=gen, dtype=torch.float64)
        eps = torch.randn((schedule.T, 3, 4, 4), generator=gen, dtype=torch.float64)
        t = torch.arange(schedule.T)
        recovered = predict_x0(schedule, add_noise(schedule, z0, t, eps), t, eps)
        assert torch.allclose(recovered, z0, rtol=1e-5, atol=1e-5)

    def test_predict_eps_inverts_predict_x0(self, schedule):
        z_t = torch.randn(2, 3, 4, 4, dtype=torch.float64)
        eps = torch.randn_like(z_t)
        x0 = predict_x0(schedule, z_t, 40, eps)
        assert torch.allclose(predict_eps(schedule, z_t, 40, x0), eps, atol=1e-10)

    def test_near_identity_at_t0(self, schedule):
        z_t = torch.randn(1, 3, 4, 4, dtype=torch.float64)
        x0 = predict_x0(schedule, z_t, 0, torch.zeros_like(z_t))
        assert torch.allclose(x0, z_t, atol=1e-3)

    def test_gradient_wrt_eps_is_constant(self, schedule):
        t = 25
        z_t = torch.randn(1, 1, 4, 4, dtype=torch.float64)
        eps = torch.randn(1, 1, 4, 4, dtype=torch.float64, requires_grad=True)
        predict_x0(schedule, z_t, t, eps).sum().backward()
        expected = -(schedule.beta_tilde[t].sqrt() / schedule.alpha_bar[t].sqrt()).item()
        assert torch.allclose(eps.grad, torch.full_like(eps, expected), atol=1e-12)

    def test_gradcheck_both_inputs(self, schedule):
        z_t = torch.randn(1, 1, 4, 4, dtype=torch.float64, requires_grad=True)
        eps = torch.randn(1, 1, 4, 4, dtype=torch.float64, requires_grad=True)
        assert torch.autograd.gradcheck(lambda z, e: predict_x0(schedule, z, 60, e), (z_t, eps),
                                        eps=1e-6, atol=1e-6)

    def test_shape_mismatch(self, schedule):
        with pytest.raises(ShapeError) as exc:
            add_noise(schedule, torch.zeros(1, 3, 4, 4), 0, torch.zeros(1, 3, 4, 5))
        assert "(1, 3, 4, 5)" in str(exc.value)
        assert "(1, 3, 4, 4)" in str(exc.value)

    @pytest.mark.parametrize("t", [-1, 100])
    def test_timestep_out_of_range(self, schedule, t):
        z = torch.zeros(1, 3, 4, 4)
        with pytest.raises(TimestepRangeError):
            predict_x0(schedule, z, t, z)
        with pytest.raises(IndexError):
            add_noise(schedule, z, t, z)


class TestTimestepSampler:
    """Tests for the annealed timestep sampler."""

    def test_weights_formula(self):
        sampler = TimestepSampler(100, 0.2)
        t = torch.arange(100, dtype=torch.float64)
        expected = (1 - 0.2 * torch.cos(math.pi * t / 100)) / 100
        assert torch.allclose(sampler.weights, expected)
        assert torch.all(sampler.weights > 0)

    def test_zero_strength_is_uniform(self):
        weights = TimestepSampler(50, 0.0).weights
        assert torch.all(weights == weights[0])

    def test_midpoint_and_endpoint_ratio(self):
        sampler = TimestepSampler(1000, 0.2)
        w = sampler.weights
        assert w[500].item() == pytest.approx(1 / 1000)
        assert (w[999] / w[0]).item() == pytest.approx(1.5, abs=1e-4)

    def test_invalid_strength(self):
        with pytest.raises(ConfigurationError):
            TimestepSampler(10, -0.1)
        with pytest.raises(ConfigurationError):
            TimestepSampler(10, 1.5)

    def test_deterministic_given_generator(self, make_generator):
        sampler = TimestepSampler(100, 0.2)
        a = sample_timestep(sampler, make_generator(7), batch_size=64)
        b = sample_timestep(sampler, make_generator(7), batch_size=64)
        assert torch.equal(a, b)
        assert int(a.min()) >= 0 and int(a.max()) < 100

    def test_uniform_timesteps_range(self, make_generator):
        t = uniform_timesteps(10, make_generator(0), batch_size=1000)
        assert set(t.tolist()) == set(range(10))

    @pytest.mark.slow
    @pytest.mark.parametrize("alpha", [0.0, 0.2])
    def test_histogram_matches_weights(self, make_generator, alpha):
        """10^6 draws match f(t)/sum f per bucket."""
        T, n = 10, 1_000_000
        sampler = TimestepSampler(T, alpha)
        draws = sample_timestep(sampler, make_generator(3), batch_size=n)
        counts = np.bincount(draws.numpy(), minlength=T)
        p = sampler.probabilities.numpy()
        sigma = np.sqrt(n * p * (1 - p))
        assert np.all(np.abs(counts - n * p) < 4 * sigma)
        assert stats.chisquare(counts, n * p).pvalue > 1e-3
