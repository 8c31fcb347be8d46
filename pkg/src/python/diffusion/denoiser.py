"""
Tiny U-Net noise predictor.

Each attention level carries a transformer block with:

- extended self-attention, which can append keys/values injected from a
  conditioning pass (KV injection);
- decoupled cross-attention, with one path for prompt tokens and a second,
  separately projected path for adapter image tokens;
- a feed-forward layer.

All attention projections are ``AdaptedLinear`` so a ``LoraDelta`` can be
supplied per call.
"""

from dataclasses import dataclass, asdict, field
from typing import Dict, List, Optional, Tuple
import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from core.exceptions import ConfigurationError, ShapeError
from core.models import ConditioningBundle, KVCache
from diffusion.lora import AdaptedLinear, LoraDelta, bind_lora_keys

KVRecord = Dict[str, Tuple[torch.Tensor, torch.Tensor]]


@dataclass
class DenoiserConfig:
    """Architecture of the tiny U-Net."""

    image_size: int = 32
    in_channels: int = 3
    base_channels: int = 32
    channel_mult: Tuple[int, ...] = (1, 2, 2)
    depth: int = 2
    attention_levels: Tuple[int, ...] = (16, 8)
    token_dim: int = 64
    num_heads: int = 4
    adapter_tokens: int = 4
    vocab_size: int = 64
    prompt_length: int = 6
    groups: int = 8

    def __post_init__(self):
        self.channel_mult = tuple(self.channel_mult)
        self.attention_levels = tuple(sorted(self.attention_levels, reverse=True))
        if self.token_dim % self.num_heads:
            raise ConfigurationError(
                "denoiser.token_dim",
                f"{self.token_dim} is not divisible by num_heads={self.num_heads}")
        if not self.attention_levels:
            raise ConfigurationError("denoiser.attention_levels",
                                     "at least one attention level is required")
        if len(self.channel_mult) != self.depth + 1:
            raise ConfigurationError("denoiser.channel_mult",
                                     f"needs depth + 1 = {self.depth + 1} entries")
        resolutions = self.resolutions
        for level in self.attention_levels:
            if level not in resolutions:
                raise ConfigurationError(
                    "denoiser.attention_levels",
                    f"{level} is not one of the U-Net resolutions {resolutions}")
        for res, mult in zip(resolutions, self.channel_mult):
            if res in self.attention_levels and (self.base_channels * mult) % self.num_heads:
                raise ConfigurationError(
                    "denoiser.num_heads",
                    f"does not divide {self.base_channels * mult} channels at resolution {res}")

    @property
    def resolutions(self) -> List[int]:
        return [self.image_size // (2 ** i) for i in range(self.depth + 1)]

    def to_dict(self) -> Dict:
        data = asdict(self)
        data['channel_mult'] = list(self.channel_mult)
        data['attention_levels'] = list(self.attention_levels)
        return data


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal timestep embedding (B,) -> (B, dim)."""
    half = dim // 2
    steps = torch.arange(half, device=t.device, dtype=torch.float64)
    freqs = torch.exp(-math.log(max_period) * steps / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


def scaled_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, num_heads: int,
                     key_mask: Optional[torch.Tensor] = None, return_weights: bool = False):
    """Multi-head attention over (B, N, D) queries and (B, M, D) keys/values.

    ``key_mask`` is a boolean (B, M) tensor; True removes the key before softmax.
    """
    b, n, d = q.shape
    m = k.shape[1]
    head = d // num_heads
    qh = q.reshape(b, n, num_heads, head).transpose(1, 2)
    kh = k.reshape(b, m, num_heads, head).transpose(1, 2)
    vh = v.reshape(b, m, num_heads, head).transpose(1, 2)
    logits = qh @ kh.transpose(-1, -2) / math.sqrt(head)
    if key_mask is not None:
        logits = logits.masked_fill(key_mask[:, None, None, :], float('-inf'))
    weights = logits.softmax(dim=-1)
    out = (weights @ vh).transpose(1, 2).reshape(b, n, d)
    if return_weights:
        return out, weights
    return out


def extended_self_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor,
                            injected: Optional[Tuple[torch.Tensor, torch.Tensor]] = None,
                            drop_mask: Optional[torch.Tensor] = None, num_heads: int = 1,
                            layer: str = '', return_weights: bool = False):
    """
    Self-attention whose keys/values are extended with injected ones.

    Args:
        q, k, v: Target-latent projections (B, N, D)
        injected: Optional (keys, values) of shape (B, M, D) from the conditioning pass
        drop_mask: Optional boolean (B, M); True drops that injected token
        num_heads: Attention heads
        layer: Layer name used in error messages
        return_weights: Also return the (B, H, N, N + M) attention weights

    Returns:
        Attended features (B, N, D) [and weights]
    """
    if injected is None:
        return scaled_attention(q, k, v, num_heads, return_weights=return_weights)
    ik, iv = injected
    if ik.shape[-1] != k.shape[-1] or iv.shape[-1] != v.shape[-1]:
        raise ShapeError(f"layer {layer}: injected dim {ik.shape[-1]} does not match "
                         f"layer dim {k.shape[-1]}")
    if ik.shape[0] != k.shape[0] or ik.shape[:2] != iv.shape[:2]:
        raise ShapeError(f"layer {layer}: injected keys {tuple(ik.shape)} / "
                         f"values {tuple(iv.shape)} do not fit target batch {k.shape[0]}")
    keys = torch.cat([k, ik.to(k.dtype)], dim=1)
    values = torch.cat([v, iv.to(v.dtype)], dim=1)
    key_mask = None
    if drop_mask is not None:
        if drop_mask.shape != ik.shape[:2]:
            raise ShapeError(f"layer {layer}: drop mask {tuple(drop_mask.shape)} does not match "
                             f"injected tokens {tuple(ik.shape[:2])}")
        own = torch.zeros(k.shape[:2], dtype=torch.bool, device=k.device)
        key_mask = torch.cat([own, drop_mask.to(k.device)], dim=1)
    return scaled_attention(q, keys, values, num_heads, key_mask=key_mask,
                            return_weights=return_weights)


class SelfAttention(nn.Module):
    """Extended self-attention layer."""

    layer_name: str = ''

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.to_q = AdaptedLinear(dim, dim, bias=False)
        self.to_k = AdaptedLinear(dim, dim, bias=False)
        self.to_v = AdaptedLinear(dim, dim, bias=False)
        self.to_out = AdaptedLinear(dim, dim)

    def forward(self, x: torch.Tensor, lora: Optional[LoraDelta] = None,
                scale: Optional[float] = None, kv_cache: Optional[KVCache] = None,
                kv_record: Optional[KVRecord] = None) -> torch.Tensor:
        q = self.to_q(x, lora, scale)
        k = self.to_k(x, lora, scale)
        v = self.to_v(x, lora, scale)
        if kv_record is not None:
            kv_record[self.layer_name] = (k, v)
        injected, mask = None, None
        if kv_cache is not None:
            injected = kv_cache.get(self.layer_name)
            if injected is None:
                raise ShapeError(
                    f"KV cache has no entry for self-attention layer {self.layer_name}")
            mask = kv_cache.mask_for(self.layer_name)
        out = extended_self_attention(q, k, v, injected, mask, self.num_heads,
                                      layer=self.layer_name)
        return self.to_out(out, lora, scale)


class DecoupledCrossAttention(nn.Module):
    """Cross-attention with separate prompt and adapter key/value projections.

    output = features + CrossAttn(features, prompt) + w * CrossAttn(features, adapter)
    """

    def __init__(self, dim: int, token_dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.token_dim = token_dim
        self.norm = nn.LayerNorm(dim)
        self.to_q = AdaptedLinear(dim, dim, bias=False)
        self.to_k = AdaptedLinear(token_dim, dim, bias=False)
        self.to_v = AdaptedLinear(token_dim, dim, bias=False)
        self.to_out = AdaptedLinear(dim, dim)
        # adapter path, trained with the personalization encoder
        self.to_k_ip = nn.Linear(token_dim, dim, bias=False)
        self.to_v_ip = nn.Linear(token_dim, dim, bias=False)

    def forward(self, features: torch.Tensor, prompt_tokens: torch.Tensor,
                adapter_tokens: Optional[torch.Tensor] = None, adapter_weight: float = 1.0,
                lora: Optional[LoraDelta] = None, scale: Optional[float] = None) -> torch.Tensor:
        if prompt_tokens.shape[-1] != self.token_dim:
            raise ShapeError(f"prompt tokens have dim {prompt_tokens.shape[-1]}, "
                             f"expected {self.token_dim}")
        q = self.to_q(self.norm(features), lora, scale)
        hidden = scaled_attention(q, self.to_k(prompt_tokens, lora, scale),
                                  self.to_v(prompt_tokens, lora, scale), self.num_heads)
        if adapter_tokens is not None and adapter_weight != 0:
            if adapter_tokens.shape[-1] != self.token_dim:
                raise ShapeError(f"adapter tokens have dim {adapter_tokens.shape[-1]}, "
                                 f"expected {self.token_dim}")
            ip = scaled_attention(q, self.to_k_ip(adapter_tokens), self.to_v_ip(adapter_tokens),
                                  self.num_heads)
            hidden = hidden + adapter_weight * ip
        return features + self.to_out(hidden, lora, scale)


class TransformerBlock(nn.Module):
    """Self-attention, decoupled cross-attention and feed-forward on a feature map."""

    def __init__(self, dim: int, token_dim: int, num_heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.self_attn = SelfAttention(dim, num_heads)
        self.cross_attn = DecoupledCrossAttention(dim, token_dim, num_heads)
        self.norm3 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, dim * 2), nn.GELU(), nn.Linear(dim * 2, dim))

    def forward(self, x: torch.Tensor, cond: ConditioningBundle, lora: Optional[LoraDelta],
                scale: Optional[float], kv_record: Optional[dict]) -> torch.Tensor:
        b, c, hgt, wdt = x.shape
        h = x.flatten(2).transpose(1, 2)
        h = h + self.self_attn(self.norm1(h), lora, scale, cond.kv_cache, kv_record)
        h = self.cross_attn(h, cond.prompt_tokens, cond.adapter_tokens, cond.adapter_weight,
                            lora, scale)
        h = h + self.ff(self.norm3(h))
        return h.transpose(1, 2).reshape(b, c, hgt, wdt)


class ResBlock(nn.Module):
    """Residual conv block with timestep conditioning."""

    def __init__(self, in_ch: int, out_ch: int, temb_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(groups, in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.temb = nn.Linear(temb_dim, out_ch)
        self.norm2 = nn.GroupNorm(min(groups, out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class PromptEmbedder(nn.Module):
    """Token embedding for the prompt grammar plus a learned null prompt."""

    def __init__(self, vocab_size: int, length: int, dim: int):
        super().__init__()
        self.length = length
        self.token = nn.Embedding(vocab_size, dim)
        self.position = nn.Parameter(torch.randn(length, dim) * 0.02)
        self.null = nn.Parameter(torch.randn(length, dim) * 0.02)

    def forward(self, token_ids: torch.Tensor) -> torch.Tensor:
        if token_ids.shape[-1] != self.length:
            raise ShapeError(f"prompt has {token_ids.shape[-1]} tokens, expected {self.length}")
        return self.token(token_ids) + self.position


class TinyUNet(nn.Module):
    """Epsilon-prediction U-Net conditioned through a ``ConditioningBundle``."""

    def __init__(self, config: Optional[DenoiserConfig] = None):
        super().__init__()
        self.config = cfg = config or DenoiserConfig()
        base = cfg.base_channels
        self.temb_dim = base * 4
        self.time_embed = nn.Sequential(nn.Linear(base, self.temb_dim), nn.SiLU(),
                                        nn.Linear(self.temb_dim, self.temb_dim))
        self.prompt_embedder = PromptEmbedder(cfg.vocab_size, cfg.prompt_length, cfg.token_dim)
        self.conv_in = nn.Conv2d(cfg.in_channels, base, 3, padding=1)

        resolutions = cfg.resolutions
        self.down = nn.ModuleList()
        skip_channels = []
        in_ch = base
        for level, res in enumerate(resolutions):
            out_ch = base * cfg.channel_mult[level]
            stage = nn.ModuleDict({'res': ResBlock(in_ch, out_ch, self.temb_dim, cfg.groups)})
            if res in cfg.attention_levels:
                stage['attn'] = TransformerBlock(out_ch, cfg.token_dim, cfg.num_heads)
            if level < cfg.depth:
                stage['downsample'] = nn.Conv2d(out_ch, out_ch, 3, stride=2, padding=1)
            self.down.append(stage)
            skip_channels.append(out_ch)
            in_ch = out_ch

        self.mid = nn.ModuleDict({
            'res1': ResBlock(in_ch, in_ch, self.temb_dim, cfg.groups),
            'res2': ResBlock(in_ch, in_ch, self.temb_dim, cfg.groups),
        })
        if resolutions[-1] in cfg.attention_levels:
            self.mid['attn'] = TransformerBlock(in_ch, cfg.token_dim, cfg.num_heads)

        self.up = nn.ModuleList()
        for level in reversed(range(len(resolutions))):
            out_ch = base * cfg.channel_mult[level]
            block = ResBlock(in_ch + skip_channels[level], out_ch, self.temb_dim, cfg.groups)
            stage = nn.ModuleDict({'res': block})
            if resolutions[level] in cfg.attention_levels:
                stage['attn'] = TransformerBlock(out_ch, cfg.token_dim, cfg.num_heads)
            if level > 0:
                stage['upsample'] = nn.Conv2d(out_ch, out_ch, 3, padding=1)
            self.up.append(stage)
            in_ch = out_ch

        self.norm_out = nn.GroupNorm(min(cfg.groups, base), base)
        self.conv_out = nn.Conv2d(base, cfg.in_channels, 3, padding=1)

        self.lora_targets = bind_lora_keys(self)
        self.self_attention_layers: List[str] = []
        for name, module in self.named_modules():
            if isinstance(module, SelfAttention):
                module.layer_name = name
                self.self_attention_layers.append(name)

    # ------------------------------------------------------------------
    # Parameter groups
    # ------------------------------------------------------------------

    def adapter_parameters(self) -> List[nn.Parameter]:
        """Projections of the adapter cross-attention path."""
        params = []
        for module in self.modules():
            if isinstance(module, DecoupledCrossAttention):
                params.extend([module.to_k_ip.weight, module.to_v_ip.weight])
        return params

    def base_parameters(self) -> List[nn.Parameter]:
        """Every parameter that is not part of the adapter path."""
        adapter_ids = {id(p) for p in self.adapter_parameters()}
        return [p for p in self.parameters() if id(p) not in adapter_ids]

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def make_lora(self, name: str, rank: int = 4, scale: float = 1.0,
                  generator: Optional[torch.Generator] = None) -> LoraDelta:
        """Fresh ``LoraDelta`` over every attention projection."""
        delta = LoraDelta(name, self.lora_targets, rank=rank, scale=scale, generator=generator)
        ref = next(self.parameters())
        return delta.to(device=ref.device, dtype=ref.dtype)

    # ------------------------------------------------------------------
    # Conditioning helpers
    # ------------------------------------------------------------------

    def embed_prompt(self, token_ids: torch.Tensor) -> torch.Tensor:
        return self.prompt_embedder(token_ids)

    @property
    def null_prompt_tokens(self) -> torch.Tensor:
        return self.prompt_embedder.null

    def prompt_conditioning(self, token_ids: torch.Tensor) -> ConditioningBundle:
        """Text-only conditioning bundle for prompt token ids (B, L)."""
        return ConditioningBundle(prompt_tokens=self.embed_prompt(token_ids),
                                  null_prompt_tokens=self.null_prompt_tokens)

    # ------------------------------------------------------------------
    # Forward
    # ------------------------------------------------------------------

    def _check(self, z_t: torch.Tensor, cond: ConditioningBundle, lora: Optional[LoraDelta]):
        cfg = self.config
        if z_t.ndim != 4 or z_t.shape[1] != cfg.in_channels:
            raise ShapeError(f"expected latents (B, {cfg.in_channels}, H, W), "
                             f"got {tuple(z_t.shape)}")
        if cond.prompt_tokens.shape[-1] != cfg.token_dim:
            raise ShapeError(f"prompt tokens have dim {cond.prompt_tokens.shape[-1]}, "
                             f"expected {cfg.token_dim}")
        if cond.adapter_tokens is not None and cond.adapter_tokens.shape[-1] != cfg.token_dim:
            raise ShapeError(f"adapter tokens have dim {cond.adapter_tokens.shape[-1]}, "
                             f"expected {cfg.token_dim}")
        if lora is not None:
            unknown = set(lora.targets) - set(self.lora_targets)
            if unknown:
                raise ConfigurationError("lora.targets", f"unknown target layers {sorted(unknown)}")

    def _attend(self, stage: nn.ModuleDict, key: str, h, cond, lora, scale, kv_record):
        if key in stage:
            return stage[key](h, cond, lora, scale, kv_record)
        return h

    def forward(self, z_t: torch.Tensor, t, cond: ConditioningBundle,
                lora: Optional[LoraDelta] = None, lora_scale: Optional[float] = None,
                kv_record: Optional[KVRecord] = None) -> torch.Tensor:
        """
        Predict the noise in ``z_t``.

        Args:
            z_t: Noisy latents (B, C, H, W)
            t: Timestep int or (B,) tensor
            cond: Conditioning bundle; drop flags are resolved here
            lora: Optional low-rank delta applied to the attention projections
            lora_scale: Optional scale override for ``lora``
            kv_record: If given, receives each self-attention layer's (K, V)

        Returns:
            Noise prediction with the shape of ``z_t``
        """
        self._check(z_t, cond, lora)
        cond = cond.resolved()
        if lora is not None and (lora.scale if lora_scale is None else lora_scale) == 0:
            lora = None
        scale = lora_scale

        t = torch.as_tensor(t, device=z_t.device)
        if t.ndim == 0:
            t = t.expand(z_t.shape[0])
        temb = self.time_embed(timestep_embedding(t, self.config.base_channels).to(z_t.dtype))

        h = self.conv_in(z_t)
        skips = []
        for stage in self.down:
            h = stage['res'](h, temb)
            h = self._attend(stage, 'attn', h, cond, lora, scale, kv_record)
            skips.append(h)
            if 'downsample' in stage:
                h = stage['downsample'](h)

        h = self.mid['res1'](h, temb)
        h = self._attend(self.mid, 'attn', h, cond, lora, scale, kv_record)
        h = self.mid['res2'](h, temb)

        for stage in self.up:
            h = torch.cat([h, skips.pop()], dim=1)
            h = stage['res'](h, temb)
            h = self._attend(stage, 'attn', h, cond, lora, scale, kv_record)
            if 'upsample' in stage:
                h = stage['upsample'](F.interpolate(h, scale_factor=2, mode='nearest'))

        return self.conv_out(F.silu(self.norm_out(h)))


def build_denoiser(config: DenoiserConfig, seed: Optional[int] = None) -> TinyUNet:
    """Construct a denoiser, optionally with seeded initialization."""
    if seed is not None:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            return TinyUNet(config)
    return TinyUNet(config)
