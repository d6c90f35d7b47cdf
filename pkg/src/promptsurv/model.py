"""Full model assembly: frozen backbone + adaptors + survival decoder.

Owns the freeze mask, deterministic construction from a seed, checkpoint
serialization, and closed-form parameter accounting.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
from torch import nn

from .decoder import DecoderConfig, SurvivalDecoder
from .encoder import EncoderConfig, VptEncoder
from .survival import HazardPrediction, hazard_to_survival

CHECKPOINT_VERSION = 1


class SurvivalModel(nn.Module):
    """Encoder-decoder survival model with a frozen backbone.

    The patch embedding and transformer layers never receive gradients; the
    adaptors, decoder, survival queries and hazard head are trainable.
    """

    def __init__(self, encoder_config: EncoderConfig, decoder_config: DecoderConfig):
        super().__init__()
        if encoder_config.dim != decoder_config.dim:
            raise ValueError("encoder and decoder dims must match")
        self.encoder_config = encoder_config
        self.decoder_config = decoder_config
        self.encoder = VptEncoder(encoder_config)
        self.decoder = SurvivalDecoder(decoder_config)
        self._freeze_backbone()

    def _freeze_backbone(self) -> None:
        for p in self.encoder.patch_embed.parameters():
            p.requires_grad_(False)
        for p in self.encoder.layers.parameters():
            p.requires_grad_(False)

    def freeze_mask(self) -> dict[str, bool]:
        """Parameter name -> True when frozen."""
        return {name: not p.requires_grad for name, p in self.named_parameters()}

    def trainable_parameters(self):
        return (p for p in self.parameters() if p.requires_grad)

    def encode_tiles(
        self,
        tiles: torch.Tensor,
        sources: dict[str, torch.Tensor] | None = None,
        use_adaptors: bool = True,
        chunk_size: int | None = None,
    ) -> torch.Tensor:
        """Encode [J, C, H, W] tiles to [J, dim] pooled tokens, in input order.

        ``chunk_size`` bounds peak memory for long no-grad sequences; it must
        not be set when gradients are required.
        """
        if tiles.shape[0] < 1:
            raise ValueError("need at least one tile")
        if chunk_size is None:
            return self.encoder(tiles, sources, use_adaptors)
        if torch.is_grad_enabled() and any(p.requires_grad for p in self.parameters()):
            raise ValueError("chunked encoding is for no-grad evaluation only")
        pooled = []
        for start in range(0, tiles.shape[0], chunk_size):
            stop = start + chunk_size
            chunk_sources = None
            if sources:
                chunk_sources = {k: v[start:stop] for k, v in sources.items()}
            pooled.append(self.encoder(tiles[start:stop], chunk_sources, use_adaptors))
        return torch.cat(pooled, dim=0)

    def forward(
        self,
        tiles: torch.Tensor,
        sources: dict[str, torch.Tensor] | None = None,
        use_adaptors: bool = True,
    ) -> torch.Tensor:
        """Tiles of one slide -> per-bin hazards [n_bins]."""
        pooled = self.encode_tiles(tiles, sources, use_adaptors)
        return self.decoder(pooled)

    @torch.no_grad()
    def predict(
        self,
        tiles: torch.Tensor,
        sources: dict[str, torch.Tensor] | None = None,
        chunk_size: int | None = 256,
    ) -> HazardPrediction:
        pooled = self.encode_tiles(tiles, sources, chunk_size=chunk_size)
        hazards = self.decoder(pooled)
        survival = hazard_to_survival(hazards)
        return HazardPrediction(hazards=hazards.cpu().numpy(), survival=survival.cpu().numpy())


def build_model(
    encoder_config: EncoderConfig,
    decoder_config: DecoderConfig,
    seed: int = 0,
    dtype: torch.dtype = torch.float32,
) -> SurvivalModel:
    """Deterministically initialize a model from a seed.

    The backbone gets a seeded-random frozen initialization; adaptor
    up-projections start at zero so training begins exactly at the frozen
    model's output.
    """
    torch.manual_seed(seed)
    model = SurvivalModel(encoder_config, decoder_config)
    return model.to(dtype)


def load_encoder_weights(model: SurvivalModel, path: str) -> None:
    """Import externally supplied backbone weights (patch embedding + layers).

    The file must hold a state dict whose shapes match the configured
    encoder; adaptors and decoder are left untouched.
    """
    state = torch.load(path, map_location="cpu", weights_only=True)
    backbone = {k: v for k, v in state.items() if k.startswith(("patch_embed.", "layers."))}
    missing, unexpected = model.encoder.load_state_dict(backbone, strict=False)
    missing_backbone = [k for k in missing if k.startswith(("patch_embed.", "layers."))]
    if missing_backbone or unexpected:
        raise ValueError(f"weight file does not match the encoder config: missing={missing_backbone}, unexpected={unexpected}")
    model._freeze_backbone()


def save_checkpoint(path, model: SurvivalModel, metadata: dict | None = None) -> None:
    """Versioned archive: configs, named parameter tensors, freeze mask, metadata."""
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "encoder_config": asdict(model.encoder_config),
        "decoder_config": asdict(model.decoder_config),
        "state_dict": model.state_dict(),
        "freeze_mask": model.freeze_mask(),
        "metadata": metadata or {},
    }
    torch.save(payload, path)


def load_checkpoint(path) -> tuple[SurvivalModel, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version!r}")
    enc_cfg = EncoderConfig(**{**payload["encoder_config"], "prompt_sources": tuple(payload["encoder_config"]["prompt_sources"])})
    dec_cfg = DecoderConfig(**payload["decoder_config"])
    model = SurvivalModel(enc_cfg, dec_cfg)
    model.load_state_dict(payload["state_dict"])
    model._freeze_backbone()
    return model, payload["metadata"]


@dataclass
class ParameterAudit:
    trainable: int
    frozen: int

    @property
    def total(self) -> int:
        return self.trainable + self.frozen

    @property
    def trainable_fraction(self) -> float:
        return self.trainable / self.total if self.total else 0.0


def parameter_audit(model: SurvivalModel) -> ParameterAudit:
    """Exact trainable/frozen counts from the freeze mask."""
    trainable = sum(p.numel() for p in model.parameters() if p.requires_grad)
    frozen = sum(p.numel() for p in model.parameters() if not p.requires_grad)
    return ParameterAudit(trainable=trainable, frozen=frozen)


def parameter_counts_from_config(enc: EncoderConfig, dec: DecoderConfig) -> ParameterAudit:
    """Closed-form parameter accounting; must agree with a real instantiation."""
    d = enc.dim
    attn = 4 * (d * d + d)
    ffn = 8 * d * d + 5 * d
    norms = 2 * d if enc.layer_form == "paper" else 4 * d
    embed = d * enc.in_channels * enc.patch_size**2 + d
    frozen = embed + enc.depth * (attn + ffn + norms)

    dd = enc.down_dim
    adaptor = 2 * (d * dd + dd) + 2 * dd * dd + (dd * d + d)
    dec_layer = 2 * attn + ffn + 6 * d
    head = d * dec.n_bins + dec.n_bins
    trainable = enc.depth * adaptor + dec.n_layers * dec_layer + dec.query_count * d + 2 * d + head
    return ParameterAudit(trainable=trainable, frozen=frozen)


def desk_encoder_config(prompt_sources: tuple[str, ...] = ()) -> EncoderConfig:
    """Small preset for CPU-scale runs and verification."""
    return EncoderConfig(
        depth=4, dim=64, n_heads=4, patch_size=8, tile_size=32, down_dim=8,
        in_channels=1, prompt_sources=prompt_sources,
    )


def paper_shape_encoder_config(prompt_sources: tuple[str, ...] = ()) -> EncoderConfig:
    """Full-size preset matching the published architecture dimensions."""
    return EncoderConfig(
        depth=12, dim=768, n_heads=12, patch_size=16, tile_size=256, down_dim=24,
        in_channels=3, prompt_sources=prompt_sources,
    )


def desk_decoder_config(n_bins: int = 4) -> DecoderConfig:
    return DecoderConfig(dim=64, n_layers=2, n_heads=4, query_count=1, n_bins=n_bins)


def paper_shape_decoder_config(n_bins: int = 4) -> DecoderConfig:
    return DecoderConfig(dim=768, n_layers=2, n_heads=12, query_count=1, n_bins=n_bins)
