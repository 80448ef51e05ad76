"""Mask-enhanced promptable 3D lesion segmentation at desk scale."""

from msam.backbone import BACKGROUND, FOREGROUND, ModelConfig, PromptPoint, TokenEmbedding, apply_lora
from msam.losses import ce_loss, dice_ce_loss, dice_loss, dsc, iou
from msam.mea import MaskEnhancedAdapter, mea_forward, mfeb
from msam.model import MSAM, build_model
from msam.refinement import refine, sample_point
from msam.volume_io import (
    MaskVolume,
    PhantomConfig,
    Volume3D,
    generate_phantom,
    read_mask,
    read_volume,
    write_volume,
)

__version__ = "0.1.0"

__all__ = [
    "BACKGROUND",
    "FOREGROUND",
    "MSAM",
    "MaskEnhancedAdapter",
    "MaskVolume",
    "ModelConfig",
    "PhantomConfig",
    "PromptPoint",
    "TokenEmbedding",
    "Volume3D",
    "apply_lora",
    "build_model",
    "ce_loss",
    "dice_ce_loss",
    "dice_loss",
    "dsc",
    "generate_phantom",
    "iou",
    "mea_forward",
    "mfeb",
    "read_mask",
    "read_volume",
    "refine",
    "sample_point",
    "write_volume",
]
