"""
Pytest configuration and shared fixtures.

This conftest.py ensures the src/python directory is on the Python path
so that imports like `from diffusion.schedule import build_schedule` work.
Model fixtures are tiny (8x8 latents) so the unit suite runs on a CPU in
seconds.
"""
import sys
from pathlib import Path
import pytest

# Add src/python to path for imports - MUST happen before any other imports
_python_src = Path(__file__).parent.parent.resolve()
if str(_python_src) not in sys.path:
    sys.path.insert(0, str(_python_src))

# Tests should import directly: from diffusion.schedule import build_schedule
import torch


@pytest.fixture
def make_generator():
    """Factory for seeded CPU generators."""
    def make(seed: int = 0) -> torch.Generator:
        gen = torch.Generator()
        gen.manual_seed(seed)
        return gen
    return make


@pytest.fixture
def schedule():
    """Short linear schedule (T=100)."""
    from diffusion.schedule import build_schedule
    return build_schedule(100)


@pytest.fixture
def denoiser_config():
    """Smallest U-Net that still has two attention levels."""
    from diffusion.denoiser import DenoiserConfig
    return DenoiserConfig(
        image_size=8,
        in_channels=3,
        base_channels=8,
        channel_mult=(1, 2),
        depth=1,
        attention_levels=(8, 4),
        token_dim=16,
        num_heads=2,
        adapter_tokens=4,
        groups=4,
    )


@pytest.fixture
def denoiser(denoiser_config):
    from diffusion.denoiser import build_denoiser
    model = build_denoiser(denoiser_config, seed=0)
    model.eval()
    return model


@pytest.fixture
def codec():
    """Identity codec: latents are the images themselves."""
    from diffusion.codec import LatentCodec, CodecConfig
    return LatentCodec(CodecConfig(mode='identity'))


@pytest.fixture
def encoder_config():
    from personalization.encoders import EncoderConfig
    return EncoderConfig(image_size=8, hidden_channels=8, num_tokens=4, token_dim=16)


@pytest.fixture
def adapter_encoder(encoder_config):
    from personalization.encoders import AdapterEncoder
    torch.manual_seed(0)
    return AdapterEncoder(encoder_config)


@pytest.fixture
def prompt_ids():
    """Two prompts: compressed photo/forest and oil/city."""
    from personalization.prompts import FACE, build_prompt
    return torch.tensor([build_prompt('photo', [FACE], 'forest'),
                         build_prompt('oil', [FACE], 'city')], dtype=torch.long)


@pytest.fixture
def images(make_generator):
    """Four random images in [-1, 1] at 8x8."""
    return torch.rand((4, 3, 8, 8), generator=make_generator(1)) * 2 - 1


@pytest.fixture
def registry():
    """In-memory run registry with the schema initialized."""
    from run_registry import RunRegistry
    return RunRegistry(db_path=":memory:")
