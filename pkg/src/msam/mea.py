"""Mask-Enhanced Adapter.

Fuses a mask embedding into an image embedding so that the decoder sees
where the previous stage put the lesion:

1. MFEB: two parallel pre-LN transformer branches whose attention residuals
   cross over (the image branch adds the mask stream and vice versa).
2. Residual back to the inputs, one LayerNorm per stream.
3. Fusion: ``[Q, K, V] = (E''_I + E''_M) @ W_QKV`` followed by multi-head
   self-attention with an output projection.
4. ``LN(fused + E''_I)`` then an MLP (no residual around it).

Nothing here is position-dependent, so jointly permuting the token rows of
both inputs permutes the output the same way.
"""

from __future__ import annotations

import torch
from torch import Tensor, nn

from msam.backbone import MLP, Attention, TokenEmbedding, multi_head_attention
from msam.errors import NonFiniteActivation, ShapeMismatch

LN_EPS = 1e-5


class TransformerBranch(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4) -> None:
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=LN_EPS)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, eps=LN_EPS)
        self.mlp = MLP(dim, dim * mlp_ratio)


class MFEB(nn.Module):
    """Mutual feature enhancement block.

    ``A_I = MHSA(LN(E_I)) + E_M``, ``E'_I = MLP(LN(A_I)) + A_I`` and the
    mirror image for the mask stream.
    """

    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4) -> None:
        super().__init__()
        self.image_branch = TransformerBranch(dim, heads, mlp_ratio)
        self.mask_branch = TransformerBranch(dim, heads, mlp_ratio)

    def forward(self, e_i: Tensor, e_m: Tensor) -> tuple[Tensor, Tensor]:
        ib, mb = self.image_branch, self.mask_branch
        a_i = ib.attn(ib.norm1(e_i)) + e_m
        a_m = mb.attn(mb.norm1(e_m)) + e_i
        return ib.mlp(ib.norm2(a_i)) + a_i, mb.mlp(mb.norm2(a_m)) + a_m


class MaskEnhancedAdapter(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4, check_finite: bool = True) -> None:
        super().__init__()
        self.heads = heads
        self.check_finite = check_finite
        self.mfeb = MFEB(dim, heads, mlp_ratio)
        self.norm_image = nn.LayerNorm(dim, eps=LN_EPS)
        self.norm_mask = nn.LayerNorm(dim, eps=LN_EPS)
        self.qkv = nn.Linear(dim, 3 * dim, bias=False)
        self.out_proj = nn.Linear(dim, dim)
        self.norm_fused = nn.LayerNorm(dim, eps=LN_EPS)
        self.mlp = MLP(dim, dim * mlp_ratio)

    def _check(self, name: str, t: Tensor) -> None:
        if self.check_finite and not torch.isfinite(t).all():
            bad = int((~torch.isfinite(t)).sum())
            raise NonFiniteActivation(f"MEA intermediate {name!r} has {bad} non-finite entries (shape {tuple(t.shape)})")

    def forward(self, e_i: Tensor, e_m: Tensor) -> Tensor:
        """``(B, N, D)`` image and mask embeddings -> updated image embedding ``(B, N, D)``."""
        if e_i.shape != e_m.shape:
            raise ShapeMismatch(f"image embedding {tuple(e_i.shape)} vs mask embedding {tuple(e_m.shape)}")
        e_i2, e_m2 = self.mfeb(e_i, e_m)
        self._check("mfeb_image", e_i2)
        self._check("mfeb_mask", e_m2)
        n_i = self.norm_image(e_i + e_i2)
        n_m = self.norm_mask(e_m + e_m2)
        q, k, v = self.qkv(n_i + n_m).chunk(3, dim=-1)
        fused = self.out_proj(multi_head_attention(q, k, v, self.heads))
        self._check("fused", fused)
        out = self.mlp(self.norm_fused(fused + n_i))
        self._check("output", out)
        return out


def _as_batch(e: TokenEmbedding | Tensor) -> Tensor:
    values = e.values if isinstance(e, TokenEmbedding) else e
    return values.unsqueeze(0) if values.ndim == 2 else values


def _wrap(t: Tensor, like: TokenEmbedding | Tensor):
    if isinstance(like, TokenEmbedding):
        return TokenEmbedding(t[0], like.grid_shape)
    return t[0] if like.ndim == 2 else t


def _check_pair(e_i, e_m) -> None:
    si, sm = tuple(_as_batch(e_i).shape), tuple(_as_batch(e_m).shape)
    if si != sm:
        raise ShapeMismatch(f"image embedding {si} vs mask embedding {sm}")


def mfeb(e_i: TokenEmbedding | Tensor, e_m: TokenEmbedding | Tensor, adapter: MaskEnhancedAdapter):
    """Run only the MFEB stage of ``adapter``; returns ``(E'_I, E'_M)``."""
    _check_pair(e_i, e_m)
    out_i, out_m = adapter.mfeb(_as_batch(e_i), _as_batch(e_m))
    return _wrap(out_i, e_i), _wrap(out_m, e_m)


def mea_forward(e_i: TokenEmbedding | Tensor, e_m: TokenEmbedding | Tensor, adapter: MaskEnhancedAdapter):
    _check_pair(e_i, e_m)
    return _wrap(adapter(_as_batch(e_i), _as_batch(e_m)), e_i)
