"""
Personalization encoder stack.

Modules:
    - prompts.py: Prompt template grammar and compression
    - encoders.py: Adapter encoder and KV capture
    - trainer.py: Encoder training loop and ablation presets
    - generator.py: Inference with a trained encoder
"""

from .prompts import build_prompt, compress_prompt, kv_encoder_prompt, parse_prompt, prompt_text

__all__ = [
    'build_prompt',
    'compress_prompt',
    'kv_encoder_prompt',
    'parse_prompt',
    'prompt_text',
]
