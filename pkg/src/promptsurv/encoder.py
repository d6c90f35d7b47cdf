"""Frozen transformer encoder with per-layer tunable prompt adaptors.

The backbone is a ViT-style stack: patch embedding with fixed 2-D sinusoidal
positions, then N transformer layers. Each layer i has a companion bottleneck
adaptor whose output is added to the layer output as a residual visual
prompt; with the adaptor up-projection at its zero init the stack is
bit-identical to the plain frozen encoder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

LAYER_FORMS = ("paper", "prenorm")


@dataclass
class EncoderConfig:
    depth: int = 4
    dim: int = 64
    n_heads: int = 4
    patch_size: int = 8
    tile_size: int = 32
    down_dim: int = 8
    in_channels: int = 1
    prompt_sources: tuple[str, ...] = ()
    layer_form: str = "paper"

    def __post_init__(self) -> None:
        if self.tile_size % self.patch_size != 0:
            raise ValueError("tile_size must be divisible by patch_size")
        if self.dim % self.n_heads != 0:
            raise ValueError("dim must be divisible by n_heads")
        if self.dim % 4 != 0:
            raise ValueError("dim must be divisible by 4 for 2-D sinusoidal positions")
        if not 0 < self.down_dim < self.dim:
            raise ValueError("down_dim must be in (0, dim)")
        if self.layer_form not in LAYER_FORMS:
            raise ValueError(f"layer_form must be one of {LAYER_FORMS}")
        self.prompt_sources = tuple(self.prompt_sources)

    @property
    def tokens_per_tile(self) -> int:
        return (self.tile_size // self.patch_size) ** 2


def sinusoidal_position_encoding_2d(n_rows: int, n_cols: int, dim: int) -> torch.Tensor:
    """Fixed 2-D sin/cos position table [n_rows * n_cols, dim], row-major."""
    if dim % 4 != 0:
        raise ValueError("dim must be divisible by 4")

    def one_axis(positions: np.ndarray, d: int) -> np.ndarray:
        half = d // 2
        freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
        args = positions[:, None] * freqs[None, :]
        return np.concatenate([np.sin(args), np.cos(args)], axis=1)

    rows, cols = np.meshgrid(np.arange(n_rows), np.arange(n_cols), indexing="ij")
    table = np.concatenate(
        [one_axis(rows.reshape(-1).astype(float), dim // 2), one_axis(cols.reshape(-1).astype(float), dim // 2)],
        axis=1,
    )
    return torch.from_numpy(table).float()


class PatchEmbed(nn.Module):
    """Non-overlapping patch projection plus fixed sinusoidal positions."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.patch_size = config.patch_size
        self.proj = nn.Conv2d(config.in_channels, config.dim, kernel_size=config.patch_size, stride=config.patch_size)
        side = config.tile_size // config.patch_size
        self.register_buffer("pos", sinusoidal_position_encoding_2d(side, side, config.dim))

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        # images [B, C, H, W] with H, W divisible by the patch size
        if images.shape[-1] % self.patch_size or images.shape[-2] % self.patch_size:
            raise ValueError("image side must be divisible by the patch size")
        tokens = self.proj(images).flatten(2).transpose(1, 2)  # [B, n_tokens, dim]
        if tokens.shape[1] != self.pos.shape[0]:
            raise ValueError(
                f"got {tokens.shape[1]} tokens but the position table covers {self.pos.shape[0]}; "
                "image size must match the configured tile size"
            )
        return tokens + self.pos


class MultiHeadAttention(nn.Module):
    """Standard multi-head scaled dot-product attention with output projection."""

    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        if dim % n_heads != 0:
            raise ValueError("dim must be divisible by n_heads")
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, n, _ = x.shape
        return x.view(b, n, self.n_heads, self.head_dim).transpose(1, 2)

    def forward(self, query: torch.Tensor, key_value: torch.Tensor) -> torch.Tensor:
        if query.shape[-1] != key_value.shape[-1]:
            raise ValueError("query and key/value token dims must match")
        q = self._split(self.q_proj(query))
        k = self._split(self.k_proj(key_value))
        v = self._split(self.v_proj(key_value))
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        out = torch.softmax(scores, dim=-1) @ v
        b, _, n, _ = out.shape
        return self.out_proj(out.transpose(1, 2).reshape(b, n, -1))


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden_ratio: int = 4):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden_ratio * dim)
        self.fc2 = nn.Linear(hidden_ratio * dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(torch.nn.functional.gelu(self.fc1(x)))


class EncoderLayer(nn.Module):
    """One transformer layer of the backbone.

    The default composition follows the printed form
    ``LayerNorm(FFN(Attention(x) + x)) + x`` (one norm, two residual adds of
    the input); ``layer_form="prenorm"`` switches to the conventional
    pre-norm block for use with externally supplied pretrained weights.
    """

    def __init__(self, dim: int, n_heads: int, layer_form: str = "paper"):
        super().__init__()
        if layer_form not in LAYER_FORMS:
            raise ValueError(f"layer_form must be one of {LAYER_FORMS}")
        self.layer_form = layer_form
        self.attn = MultiHeadAttention(dim, n_heads)
        self.ffn = FeedForward(dim)
        if layer_form == "paper":
            self.norm = nn.LayerNorm(dim)
        else:
            self.norm1 = nn.LayerNorm(dim)
            self.norm2 = nn.LayerNorm(dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.layer_form == "paper":
            h = self.attn(x, x) + x
            return self.norm(self.ffn(h)) + x
        a = self.norm1(x)
        x = x + self.attn(a, a)
        return x + self.ffn(self.norm2(x))


class PromptAdaptor(nn.Module):
    """Bottleneck adaptor producing the per-layer visual prompt residual.

    Queries are down-projected from the current feature tokens; keys and
    values share one embedding of the source stream. Attention runs single
    head at the bottleneck width with no value/output projection, so a single
    source token passes through attention unchanged. The up-projection starts
    at zero, making the adaptor an exact no-op at init.
    """

    def __init__(self, dim: int, down_dim: int):
        super().__init__()
        self.down_dim = down_dim
        self.f_down = nn.Linear(dim, down_dim)
        self.f_emb = nn.Linear(dim, down_dim)
        self.q_proj = nn.Linear(down_dim, down_dim, bias=False)
        self.k_proj = nn.Linear(down_dim, down_dim, bias=False)
        self.f_up = nn.Linear(down_dim, dim)
        nn.init.zeros_(self.f_up.weight)
        nn.init.zeros_(self.f_up.bias)

    def forward(self, tokens: torch.Tensor, source: torch.Tensor) -> torch.Tensor:
        if source.shape[-2] == 0:
            raise ValueError("adaptor source must contain at least one token")
        q2 = self.f_down(tokens)
        kv = self.f_emb(source)  # shared key/value embedding
        scores = self.q_proj(q2) @ self.k_proj(kv).transpose(-2, -1) / math.sqrt(self.down_dim)
        att = torch.softmax(scores, dim=-1) @ kv
        return self.f_up(att + q2)


class VptEncoder(nn.Module):
    """Patch embedding plus N frozen layers, each paired with a tunable adaptor."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.patch_embed = PatchEmbed(config)
        self.layers = nn.ModuleList(
            EncoderLayer(config.dim, config.n_heads, config.layer_form) for _ in range(config.depth)
        )
        self.adaptors = nn.ModuleList(PromptAdaptor(config.dim, config.down_dim) for _ in range(config.depth))

    def embed_prompt_sources(self, sources: dict[str, torch.Tensor] | None) -> torch.Tensor | None:
        """Patch-embed enabled prompt images and concatenate their token streams.

        ``sources`` maps kind -> [B, C, H, W]; returns [B, m, dim] or None when
        no source is enabled (the self-prompt fallback).
        """
        if not sources:
            return None
        streams = []
        for kind in sorted(sources):
            if kind not in ("scale", "structure"):
                raise ValueError(f"unknown prompt source kind {kind!r}")
            streams.append(self.patch_embed(sources[kind]))
        return torch.cat(streams, dim=1)

    def forward(
        self,
        tiles: torch.Tensor,
        sources: dict[str, torch.Tensor] | None = None,
        use_adaptors: bool = True,
    ) -> torch.Tensor:
        """Encode a batch of tiles to one pooled token each: [B, C, H, W] -> [B, dim].

        In multi-source mode the adaptor keys/values come from the embedded
        prompt streams; with no sources the adaptor attends to the current
        feature tokens themselves (self-prompt).
        """
        tokens = self.patch_embed(tiles)
        prompt_tokens = self.embed_prompt_sources(sources) if use_adaptors else None
        for layer, adaptor in zip(self.layers, self.adaptors):
            if use_adaptors:
                source = prompt_tokens if prompt_tokens is not None else tokens
                tokens = layer(tokens) + adaptor(tokens, source)
            else:
                tokens = layer(tokens)
        return tokens.mean(dim=1)
