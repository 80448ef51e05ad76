"""Toy-scale SAM-Med3D style backbone.

ViT patch encoder for images, Fourier-feature point encoder, strided-conv
mask encoder, a two-way attention mask decoder with transposed-conv
upscaling, and LoRA wrappers for linear maps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Iterable, Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from msam.errors import ConfigOutOfRange, UnknownTarget

FOREGROUND = 1
BACKGROUND = 0


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    The defaults are the desk-scale toy model; :meth:`paper_scale` gives the
    128³ configuration the original experiments ran at.
    """

    volume_size: int = 32
    patch_size: int = 8
    in_channels: int = 1
    embed_dim: int = 64
    encoder_depth: int = 2
    encoder_heads: int = 4
    decoder_depth: int = 2
    decoder_heads: int = 4
    mask_channels: tuple[int, int] = (16, 32)
    mlp_ratio: int = 4
    lora_rank: int = 0
    foreground_prior: float = 0.05
    seed: int = 0

    def __post_init__(self) -> None:
        self.mask_channels = tuple(int(c) for c in self.mask_channels)
        self.validate()

    @classmethod
    def paper_scale(cls, **overrides) -> "ModelConfig":
        base = dict(
            volume_size=128,
            patch_size=16,
            embed_dim=384,
            encoder_depth=12,
            encoder_heads=6,
            decoder_depth=2,
            decoder_heads=8,
            mask_channels=(16, 64),
            lora_rank=4,
        )
        base.update(overrides)
        return cls(**base)

    def validate(self) -> None:
        if self.volume_size < 1 or self.patch_size < 4 or self.patch_size % 4:
            raise ConfigOutOfRange(f"patch_size must be a multiple of 4, got {self.patch_size}")
        if self.volume_size % self.patch_size:
            raise ConfigOutOfRange(
                f"volume_size {self.volume_size} not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim % 8:
            raise ConfigOutOfRange(f"embed_dim must be a multiple of 8, got {self.embed_dim}")
        for heads in (self.encoder_heads, self.decoder_heads):
            if heads < 1 or self.embed_dim % heads:
                raise ConfigOutOfRange(f"embed_dim {self.embed_dim} not divisible by {heads} heads")
        if self.lora_rank < 0:
            raise ConfigOutOfRange("lora_rank must be >= 0")
        if min(self.encoder_depth, self.decoder_depth, self.in_channels, self.mlp_ratio) < 1:
            raise ConfigOutOfRange("depths, in_channels and mlp_ratio must be >= 1")
        if len(self.mask_channels) != 2 or min(self.mask_channels) < 1:
            raise ConfigOutOfRange(f"mask_channels must be two positive ints, got {self.mask_channels}")
        if not 0.0 < self.foreground_prior < 1.0:
            raise ConfigOutOfRange(f"foreground_prior must lie in (0, 1), got {self.foreground_prior}")

    @property
    def grid_size(self) -> int:
        return self.volume_size // self.patch_size

    @property
    def grid_shape(self) -> tuple[int, int, int]:
        g = self.grid_size
        return (g, g, g)

    @property
    def num_tokens(self) -> int:
        return self.grid_size**3

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class TokenEmbedding:
    """``(N, D)`` token array; ``grid_shape`` is set for image and mask embeddings."""

    values: Tensor
    grid_shape: tuple[int, int, int] | None = None

    def __post_init__(self) -> None:
        if self.values.ndim != 2:
            raise ValueError(f"token embedding must be 2-D, got shape {tuple(self.values.shape)}")
        if self.grid_shape is not None and math.prod(self.grid_shape) != self.values.shape[0]:
            raise ValueError(f"grid {self.grid_shape} does not match {self.values.shape[0]} tokens")

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.values.shape)


@dataclass(frozen=True)
class PromptPoint:
    coord: tuple[int, int, int]
    label: int = FOREGROUND

    @property
    def is_foreground(self) -> bool:
        return self.label == FOREGROUND


# --------------------------------------------------------------------------
# Building blocks
# --------------------------------------------------------------------------


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    """Scaled dot-product attention over ``(B, N, D)`` inputs split into heads."""
    b, nq, d = q.shape
    nk = k.shape[1]
    hd = d // heads
    q = q.reshape(b, nq, heads, hd).transpose(1, 2)
    k = k.reshape(b, nk, heads, hd).transpose(1, 2)
    v = v.reshape(b, nk, heads, hd).transpose(1, 2)
    weights = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(hd), dim=-1)
    return (weights @ v).transpose(1, 2).reshape(b, nq, d)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int) -> None:
        super().__init__()
        self.heads = heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(self, q: Tensor, k: Tensor | None = None, v: Tensor | None = None) -> Tensor:
        k = q if k is None else k
        v = k if v is None else v
        out = multi_head_attention(self.q_proj(q), self.k_proj(k), self.v_proj(v), self.heads)
        return self.out_proj(out)


class MLP(nn.Module):
    def __init__(self, dim: int, hidden: int, out: int | None = None) -> None:
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim if out is None else out)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class Block(nn.Module):
    """Pre-LayerNorm transformer block."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4) -> None:
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=1e-5)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, eps=1e-5)
        self.mlp = MLP(dim, dim * mlp_ratio)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class LoRALinear(nn.Module):
    """``y = base(x) + scale * x @ A @ B`` with ``A: (d_in, r)``, ``B: (r, d_out)``.

    ``B`` starts at zero so the wrapped map is initially identical to ``base``.
    """

    def __init__(
        self,
        base: nn.Linear,
        rank: int,
        alpha: float | None = None,
        init_std: float = 0.02,
        generator: torch.Generator | None = None,
    ) -> None:
        super().__init__()
        if rank < 1:
            raise ConfigOutOfRange(f"LoRA rank must be >= 1, got {rank}")
        self.base = base
        self.rank = rank
        self.scale = (rank if alpha is None else alpha) / rank
        w = base.weight
        a = torch.empty(base.in_features, rank, dtype=w.dtype, device=w.device)
        a.normal_(0.0, init_std, generator=generator)
        self.lora_A = nn.Parameter(a)
        self.lora_B = nn.Parameter(torch.zeros(rank, base.out_features, dtype=w.dtype, device=w.device))
        for p in self.base.parameters():
            p.requires_grad_(False)

    @property
    def in_features(self) -> int:
        return self.base.in_features

    @property
    def out_features(self) -> int:
        return self.base.out_features

    def forward(self, x: Tensor) -> Tensor:
        return self.base(x) + self.scale * ((x @ self.lora_A) @ self.lora_B)


LORA_PROJECTIONS = ("q_proj", "k_proj", "v_proj", "out_proj", "qkv")


def default_lora_targets(model: nn.Module, prefix: str = "image_encoder.") -> list[str]:
    """Attention projections of the image encoder (the frozen transformer)."""
    return [
        name
        for name, mod in model.named_modules()
        if name.startswith(prefix)
        and name.rsplit(".", 1)[-1] in LORA_PROJECTIONS
        and isinstance(mod, nn.Linear)
    ]


def apply_lora(
    model: nn.Module,
    rank: int,
    targets: Sequence[str] | None = None,
    alpha: float | None = None,
    seed: int = 0,
) -> nn.Module:
    """Wrap the named ``nn.Linear`` submodules of ``model`` in :class:`LoRALinear` in place."""
    if rank < 1:
        raise ConfigOutOfRange(f"LoRA rank must be >= 1, got {rank}")
    if targets is None:
        targets = default_lora_targets(model)
    modules = dict(model.named_modules())
    for name in targets:
        if not isinstance(modules.get(name), nn.Linear):
            raise UnknownTarget(f"{name!r} is not a linear map of the model")
    gen = torch.Generator().manual_seed(seed)
    for name in targets:
        parent_name, _, attr = name.rpartition(".")
        parent = model.get_submodule(parent_name) if parent_name else model
        setattr(parent, attr, LoRALinear(modules[name], rank, alpha, generator=gen))
    return model


def lora_modules(model: nn.Module) -> Iterable[tuple[str, LoRALinear]]:
    return ((n, m) for n, m in model.named_modules() if isinstance(m, LoRALinear))


# --------------------------------------------------------------------------
# Encoders
# --------------------------------------------------------------------------


class ImageEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__()
        d = cfg.embed_dim
        self.patch_embed = nn.Conv3d(cfg.in_channels, d, kernel_size=cfg.patch_size, stride=cfg.patch_size)
        self.pos_embed = nn.Parameter(torch.randn(1, cfg.num_tokens, d) * 0.02)
        self.blocks = nn.ModuleList(Block(d, cfg.encoder_heads, cfg.mlp_ratio) for _ in range(cfg.encoder_depth))
        self.norm = nn.LayerNorm(d, eps=1e-5)

    def forward(self, x: Tensor) -> Tensor:
        """``(B, C, S, S, S)`` -> ``(B, N, D)`` with tokens in C-order of the patch grid."""
        x = self.patch_embed(x).flatten(2).transpose(1, 2) + self.pos_embed
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)


class PromptEncoder(nn.Module):
    """Points become random Fourier features of their normalized coordinate
    plus a learned per-label offset."""

    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__()
        self.volume_size = cfg.volume_size
        self.register_buffer("gaussian", torch.randn(3, cfg.embed_dim // 2))
        self.label_embed = nn.Embedding(2, cfg.embed_dim)

    def positional(self, unit_coords: Tensor) -> Tensor:
        """Fourier features of coordinates in ``[0, 1]``; last axis has size 3."""
        c = (2.0 * unit_coords - 1.0) @ self.gaussian.to(unit_coords.dtype)
        c = 2.0 * math.pi * c
        return torch.cat([torch.sin(c), torch.cos(c)], dim=-1)

    def forward(self, coords: Tensor, labels: Tensor) -> Tensor:
        """``coords: (B, P, 3)`` voxel indices, ``labels: (B, P)`` -> ``(B, P, D)``."""
        dtype = self.label_embed.weight.dtype
        unit = (coords.to(dtype) + 0.5) / self.volume_size
        return self.positional(unit) + self.label_embed(labels.long())

    def dense_positional(self, grid: int) -> Tensor:
        """Encoding at each token center, ``(grid³, D)`` in C-order."""
        dtype = self.label_embed.weight.dtype
        centers = (torch.arange(grid, dtype=dtype) + 0.5) / grid
        mesh = torch.stack(torch.meshgrid(centers, centers, centers, indexing="ij"), dim=-1)
        return self.positional(mesh.reshape(-1, 3))


def _strides(patch_size: int) -> tuple[int, int, int]:
    return (2, 2, patch_size // 4)


class MaskEncoder(nn.Module):
    """Three strided convs (kernel == stride) whose strides multiply to the patch size."""

    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__()
        s1, s2, s3 = _strides(cfg.patch_size)
        c1, c2 = cfg.mask_channels
        self.conv1 = nn.Conv3d(1, c1, kernel_size=s1, stride=s1)
        self.conv2 = nn.Conv3d(c1, c2, kernel_size=s2, stride=s2)
        self.conv3 = nn.Conv3d(c2, cfg.embed_dim, kernel_size=s3, stride=s3)

    def forward(self, m: Tensor) -> Tensor:
        """``(B, 1, S, S, S)`` -> ``(B, N, D)``."""
        x = F.gelu(self.conv1(m))
        x = F.gelu(self.conv2(x))
        return self.conv3(x).flatten(2).transpose(1, 2)


# --------------------------------------------------------------------------
# Decoder
# --------------------------------------------------------------------------


class TwoWayBlock(nn.Module):
    """Token self-attention, token->image cross-attention, token MLP, then
    image->token cross-attention (post-norm, as in SAM)."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4) -> None:
        super().__init__()
        self.self_attn = Attention(dim, heads)
        self.norm1 = nn.LayerNorm(dim, eps=1e-5)
        self.cross_token_to_image = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, eps=1e-5)
        self.mlp = MLP(dim, dim * mlp_ratio)
        self.norm3 = nn.LayerNorm(dim, eps=1e-5)
        self.cross_image_to_token = Attention(dim, heads)
        self.norm4 = nn.LayerNorm(dim, eps=1e-5)

    def forward(self, tokens: Tensor, image: Tensor, image_pe: Tensor) -> tuple[Tensor, Tensor]:
        tokens = self.norm1(tokens + self.self_attn(tokens))
        tokens = self.norm2(tokens + self.cross_token_to_image(tokens, image + image_pe, image))
        tokens = self.norm3(tokens + self.mlp(tokens))
        image = self.norm4(image + self.cross_image_to_token(image + image_pe, tokens, tokens))
        return tokens, image


class MaskDecoder(nn.Module):
    """Two-way attention between an output token, the prompt tokens and the
    image tokens, then transposed-conv upscaling to full resolution.

    The final per-voxel linear head takes its weights from the output token
    (hypernetwork style), so the prompt steers every voxel's logit. Its bias
    starts at the logit of ``cfg.foreground_prior`` so an untrained model
    predicts mostly background. Upscaling kernels are twice the stride so
    voxels near a patch border also see the neighbouring tokens.
    """

    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__()
        d = cfg.embed_dim
        self.grid = cfg.grid_size
        self.output_token = nn.Parameter(torch.randn(1, 1, d) * 0.02)
        self.layers = nn.ModuleList(TwoWayBlock(d, cfg.decoder_heads, cfg.mlp_ratio) for _ in range(cfg.decoder_depth))
        self.final_attn = Attention(d, cfg.decoder_heads)
        self.norm_final = nn.LayerNorm(d, eps=1e-5)
        up2 = cfg.patch_size // 2
        self.upscale1 = nn.ConvTranspose3d(d, d // 4, kernel_size=4, stride=2, padding=1)
        self.upscale2 = nn.ConvTranspose3d(d // 4, d // 4, kernel_size=2 * up2, stride=up2, padding=up2 // 2)
        self.hyper_mlp = MLP(d, d, d // 4)
        prior = cfg.foreground_prior
        self.head_bias = nn.Parameter(torch.full((1,), math.log(prior / (1.0 - prior))))

    def forward(self, image: Tensor, prompts: Tensor, image_pe: Tensor) -> Tensor:
        """``image: (B, N, D)``, ``prompts: (B, P, D)``, ``image_pe: (N, D)`` -> logits ``(B, 1, S, S, S)``."""
        b, n, d = image.shape
        tokens = torch.cat([self.output_token.expand(b, -1, -1), prompts], dim=1)
        pe = image_pe.unsqueeze(0)
        for layer in self.layers:
            tokens, image = layer(tokens, image, pe)
        tokens = self.norm_final(tokens + self.final_attn(tokens, image + pe, image))
        g = self.grid
        feat = image.transpose(1, 2).reshape(b, d, g, g, g)
        feat = F.gelu(self.upscale1(feat))
        feat = F.gelu(self.upscale2(feat))
        weights = self.hyper_mlp(tokens[:, 0])
        logits = torch.einsum("bc,bcxyz->bxyz", weights, feat) + self.head_bias
        return logits.unsqueeze(1)
