"""The assembled network: encoders, adapter and decoder behind one module."""

from __future__ import annotations

from typing import Sequence

import numpy as np
import torch
from torch import Tensor, nn

from msam.backbone import (
    ImageEncoder,
    MaskDecoder,
    MaskEncoder,
    ModelConfig,
    PromptEncoder,
    PromptPoint,
    TokenEmbedding,
    apply_lora,
)
from msam.errors import EmptyPrompt, OutOfBoundsPoint, ShapeMismatch
from msam.mea import MaskEnhancedAdapter
from msam.volume_io import MaskVolume, Volume3D


class MSAM(nn.Module):
    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__()
        self.cfg = cfg
        self.image_encoder = ImageEncoder(cfg)
        self.prompt_encoder = PromptEncoder(cfg)
        self.mask_encoder = MaskEncoder(cfg)
        self.mea = MaskEnhancedAdapter(cfg.embed_dim, cfg.encoder_heads, cfg.mlp_ratio)
        self.decoder = MaskDecoder(cfg)

    @property
    def dtype(self) -> torch.dtype:
        return self.decoder.head_bias.dtype

    # batched tensor paths ---------------------------------------------------

    def image_tokens(self, images: Tensor) -> Tensor:
        return self.image_encoder(images.to(self.dtype))

    def mask_tokens(self, masks: Tensor) -> Tensor:
        return self.mask_encoder(masks.to(self.dtype))

    def point_tokens(self, coords: Tensor, labels: Tensor) -> Tensor:
        return self.prompt_encoder(coords, labels)

    def decode(self, image_tokens: Tensor, prompt_tokens: Tensor) -> Tensor:
        pe = self.prompt_encoder.dense_positional(self.cfg.grid_size)
        return self.decoder(image_tokens, prompt_tokens, pe)

    # single-volume API --------------------------------------------------------

    def _check_spatial(self, shape: Sequence[int], what: str) -> None:
        s = self.cfg.volume_size
        if tuple(shape) != (s, s, s):
            raise ShapeMismatch(f"{what} spatial extents {tuple(shape)} != model size {(s, s, s)}")

    def encode_image(self, v: Volume3D) -> TokenEmbedding:
        self._check_spatial(v.spatial_shape, "image")
        if v.shape[0] != self.cfg.in_channels:
            raise ShapeMismatch(f"image has {v.shape[0]} channels, model expects {self.cfg.in_channels}")
        tokens = self.image_tokens(torch.from_numpy(v.data).unsqueeze(0))
        return TokenEmbedding(tokens[0], self.cfg.grid_shape)

    def encode_mask(self, m: MaskVolume) -> TokenEmbedding:
        self._check_spatial(m.spatial_shape, "mask")
        labels = torch.from_numpy(m.labels[:1].astype(np.float32)).unsqueeze(0)
        return TokenEmbedding(self.mask_tokens(labels)[0], self.cfg.grid_shape)

    def encode_points(self, points: Sequence[PromptPoint]) -> TokenEmbedding:
        coords, labels = points_to_tensors(points, self.cfg.volume_size)
        return TokenEmbedding(self.point_tokens(coords[None], labels[None])[0])

    def decode_mask(self, image_emb: TokenEmbedding, prompt_emb: TokenEmbedding) -> tuple[MaskVolume, Volume3D]:
        if image_emb.grid_shape != self.cfg.grid_shape:
            raise ShapeMismatch(f"image embedding grid {image_emb.grid_shape} != {self.cfg.grid_shape}")
        d = self.cfg.embed_dim
        if image_emb.values.shape[1] != d or prompt_emb.values.shape[1] != d:
            raise ShapeMismatch(f"embedding dims must equal {d}")
        logits = self.decode(image_emb.values[None], prompt_emb.values[None])[0]
        arr = logits.detach().cpu().numpy()
        return MaskVolume(arr > 0), Volume3D(arr)


def points_to_tensors(points: Sequence[PromptPoint], volume_size: int) -> tuple[Tensor, Tensor]:
    if len(points) == 0:
        raise EmptyPrompt("at least one prompt point is required")
    coords = torch.tensor([p.coord for p in points], dtype=torch.long)
    if coords.shape[1] != 3 or (coords < 0).any() or (coords >= volume_size).any():
        bad = [p.coord for p in points if not all(0 <= c < volume_size for c in p.coord)]
        raise OutOfBoundsPoint(f"points outside [0, {volume_size}): {bad}")
    labels = torch.tensor([p.label for p in points], dtype=torch.long)
    return coords, labels


def build_model(cfg: ModelConfig, lora_targets: Sequence[str] | None = None) -> MSAM:
    """Deterministically initialize a model from ``cfg.seed``; adds LoRA when ``cfg.lora_rank > 0``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        model = MSAM(cfg)
    if cfg.lora_rank > 0:
        apply_lora(model, cfg.lora_rank, lora_targets, seed=cfg.seed)
    return model
