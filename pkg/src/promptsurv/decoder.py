"""Survival decoder: learnable token queries cross-attend to pooled tile tokens.

Two pre-norm transformer decoder layers (query self-attention, cross-attention
to the tile tokens, feed-forward) turn the survival queries into a hazard
token, which a linear head with per-bin sigmoid maps to hazards in (0, 1).
Cross-attention keys are order-canonicalized so the output is bit-identical
under any permutation of the tile tokens.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .encoder import FeedForward, MultiHeadAttention
from .survival import EPS, HazardPrediction, hazard_to_survival


@dataclass
class DecoderConfig:
    dim: int = 64
    n_layers: int = 2
    n_heads: int = 4
    query_count: int = 1
    n_bins: int = 4

    def __post_init__(self) -> None:
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.query_count < 1:
            raise ValueError("query_count must be >= 1")
        if self.n_bins < 1:
            raise ValueError("n_bins must be >= 1")
        if self.dim % self.n_heads != 0:
            raise ValueError("dim must be divisible by n_heads")


def canonical_order(tokens: torch.Tensor) -> torch.Tensor:
    """Lexicographic row order of a [n, dim] token matrix.

    Attention is mathematically permutation-invariant over keys, but float
    reduction order is not; sorting the keys first makes the decoder output
    bit-identical under any input permutation.
    """
    arr = tokens.detach().cpu().numpy()
    order = np.lexsort(arr.T[::-1])
    return torch.as_tensor(np.ascontiguousarray(order), dtype=torch.long, device=tokens.device)


class DecoderLayer(nn.Module):
    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.norm3 = nn.LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, n_heads)
        self.cross_attn = MultiHeadAttention(dim, n_heads)
        self.ffn = FeedForward(dim)

    def forward(self, queries: torch.Tensor, tile_tokens: torch.Tensor) -> torch.Tensor:
        a = self.norm1(queries)
        queries = queries + self.self_attn(a, a)
        queries = queries + self.cross_attn(self.norm2(queries), tile_tokens)
        return queries + self.ffn(self.norm3(queries))


class SurvivalDecoder(nn.Module):
    """Maps pooled tile tokens to per-bin hazards via learnable survival queries."""

    def __init__(self, config: DecoderConfig):
        super().__init__()
        self.config = config
        self.queries = nn.Parameter(torch.randn(config.query_count, config.dim) * 0.02)
        self.layers = nn.ModuleList(DecoderLayer(config.dim, config.n_heads) for _ in range(config.n_layers))
        self.final_norm = nn.LayerNorm(config.dim)
        self.hazard_head = nn.Linear(config.dim, config.n_bins)

    def forward(self, tile_tokens: torch.Tensor) -> torch.Tensor:
        """[J, dim] -> hazards [n_bins], or [B, J, dim] -> [B, n_bins]."""
        single = tile_tokens.dim() == 2
        if single:
            tile_tokens = tile_tokens.unsqueeze(0)
        if tile_tokens.shape[1] == 0:
            raise ValueError("tile token sequence must be non-empty")
        if tile_tokens.shape[-1] != self.config.dim:
            raise ValueError(f"token dim {tile_tokens.shape[-1]} != decoder dim {self.config.dim}")

        kv = torch.stack([sample[canonical_order(sample)] for sample in tile_tokens])
        b = kv.shape[0]
        q = self.queries.unsqueeze(0).expand(b, -1, -1)
        for layer in self.layers:
            q = layer(q, kv)
        hazard_token = self.final_norm(q).mean(dim=1)
        hazards = torch.sigmoid(self.hazard_head(hazard_token)).clamp(EPS, 1.0 - EPS)
        return hazards.squeeze(0) if single else hazards


def decode(tile_tokens: torch.Tensor, decoder: SurvivalDecoder) -> HazardPrediction:
    """Run the decoder on one slide's pooled tokens and package the prediction."""
    hazards = decoder(tile_tokens)
    if hazards.dim() != 1:
        raise ValueError("decode expects a single slide: pass [J, dim] tokens")
    survival = hazard_to_survival(hazards)
    return HazardPrediction(
        hazards=hazards.detach().cpu().numpy(), survival=survival.detach().cpu().numpy()
    )
