"""Iterative coarse-to-fine refinement with simulated clicks.

Stage ``t`` samples one point (ground-truth foreground at ``t = 0``, the
error region of the previous mask afterwards), encodes every point so far,
runs the adapter on ``(E_I^t, E_M^t)`` and decodes ``M^t``. The adapter
output becomes ``E_I^{t+1}`` and ``encode_mask(M^t)`` becomes ``E_M^{t+1}``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import Tensor

from msam.backbone import BACKGROUND, FOREGROUND, PromptPoint
from msam.errors import EmptyForeground, NonFiniteActivation, ShapeMismatch, UnwritablePath
from msam.losses import dsc, iou
from msam.model import MSAM, points_to_tensors
from msam.volume_io import MaskVolume, Volume3D


@dataclass
class ErrorRegion:
    false_negatives: np.ndarray
    false_positives: np.ndarray

    @classmethod
    def between(cls, current, gt) -> "ErrorRegion":
        pred, truth = _spatial(current), _spatial(gt)
        if pred.shape != truth.shape:
            raise ShapeMismatch(f"mask {pred.shape} vs ground truth {truth.shape}")
        return cls(truth & ~pred, pred & ~truth)

    @property
    def region(self) -> np.ndarray:
        return self.false_negatives | self.false_positives

    def is_empty(self) -> bool:
        return not self.region.any()


@dataclass
class RefinementState:
    stage: int
    image_emb: Tensor
    mask_emb: Tensor
    points: list[PromptPoint]
    mask: MaskVolume
    logits: Tensor | None = None
    dsc: float | None = None
    iou: float | None = None


@dataclass
class StageOutput:
    """Batched result of one stage as produced by :func:`run_stages`."""

    stage: int
    image_emb: Tensor
    mask_emb: Tensor
    logits: Tensor
    masks: np.ndarray
    points: list[list[PromptPoint]] = field(default_factory=list)


def _spatial(m) -> np.ndarray:
    """Boolean ``(X, Y, Z)`` array from a MaskVolume or a 3-D/4-D array (channel 0)."""
    arr = np.asarray(getattr(m, "labels", m))
    if arr.ndim == 4:
        arr = arr[0]
    return arr.astype(bool)


def _choose(candidates: np.ndarray, rng: np.random.Generator) -> tuple[int, int, int]:
    flat = np.flatnonzero(candidates)
    idx = flat[rng.integers(len(flat))]
    return tuple(int(i) for i in np.unravel_index(idx, candidates.shape))


def sample_point(stage: int, gt, current, rng: np.random.Generator) -> PromptPoint:
    """Simulated click for ``stage``.

    Stage 0 draws uniformly from the ground-truth foreground. Later stages
    draw uniformly from the error region: a false negative yields a
    foreground click, a false positive a background click. An empty error
    region falls back to a foreground click.
    """
    truth = _spatial(gt)
    if not truth.any():
        raise EmptyForeground("ground truth has no foreground voxel")
    if stage < 0:
        raise ValueError(f"stage must be >= 0, got {stage}")
    if (current is None) != (stage == 0):
        raise ValueError("a current mask is required exactly when stage >= 1")
    if stage == 0:
        return PromptPoint(_choose(truth, rng), FOREGROUND)
    err = ErrorRegion.between(current, truth)
    if err.is_empty():
        return PromptPoint(_choose(truth, rng), FOREGROUND)
    coord = _choose(err.region, rng)
    label = FOREGROUND if err.false_negatives[coord] else BACKGROUND
    return PromptPoint(coord, label)


def no_gt_initial_point(volume, rng: np.random.Generator) -> PromptPoint:
    """Uniform in-bounds foreground click for inference without ground truth."""
    shape = volume.spatial_shape if hasattr(volume, "spatial_shape") else tuple(volume)
    return PromptPoint(tuple(int(rng.integers(n)) for n in shape), FOREGROUND)


def run_stages(
    model: MSAM,
    images: Tensor,
    gts: Sequence[np.ndarray] | None,
    n_stages: int,
    rng: np.random.Generator,
    straight_through: bool = False,
) -> list[StageOutput]:
    """Batched refinement loop over ``images: (B, C, S, S, S)``.

    With ``straight_through`` the binarized mask fed to the mask encoder
    passes gradients to the logits unchanged; otherwise it is detached.
    """
    if n_stages < 1:
        raise ValueError(f"n_stages must be >= 1, got {n_stages}")
    b = images.shape[0]
    s = model.cfg.volume_size
    if tuple(images.shape[2:]) != (s, s, s):
        raise ShapeMismatch(f"images {tuple(images.shape)} do not match model size {s}")
    gts = None if gts is None else [_spatial(g) for g in gts]

    e_i = model.image_tokens(images)
    e_m = model.mask_tokens(torch.zeros(b, 1, s, s, s, dtype=model.dtype))
    points: list[list[PromptPoint]] = [[] for _ in range(b)]
    prev: np.ndarray | None = None
    outputs = []
    for t in range(n_stages):
        for i in range(b):
            if gts is not None:
                points[i].append(sample_point(t, gts[i], None if t == 0 else prev[i], rng))
            elif t == 0:
                points[i].append(no_gt_initial_point((s, s, s), rng))
        coords, labels = zip(*(points_to_tensors(p, s) for p in points))
        e_p = model.point_tokens(torch.stack(coords), torch.stack(labels))
        e_hat = model.mea(e_i, e_m)
        logits = model.decode(e_hat, e_p)
        if not torch.isfinite(logits).all():
            raise NonFiniteActivation(f"stage {t}: decoder produced non-finite logits")
        hard = (logits > 0).to(logits.dtype)
        prev = hard.detach()[:, 0].cpu().numpy().astype(bool)
        outputs.append(StageOutput(t, e_i, e_m, logits, prev, [list(p) for p in points]))
        mask_in = hard + (logits - logits.detach()) if straight_through else hard.detach()
        e_i = e_hat
        e_m = model.mask_tokens(mask_in)
    return outputs


@torch.no_grad()
def refine(
    volume: Volume3D,
    gt: MaskVolume | None,
    n_stages: int,
    model: MSAM,
    rng: np.random.Generator,
) -> tuple[MaskVolume, list[RefinementState]]:
    """Refine one preprocessed volume; returns the last-stage mask and the per-stage trace."""
    image = torch.from_numpy(volume.data).unsqueeze(0)
    gts = None if gt is None else [gt]
    outputs = run_stages(model, image, gts, n_stages, rng)
    trace = []
    for out in outputs:
        mask = MaskVolume(out.masks[:1], volume.spacing)
        state = RefinementState(
            stage=out.stage,
            image_emb=out.image_emb[0],
            mask_emb=out.mask_emb[0],
            points=out.points[0],
            mask=mask,
            logits=out.logits[0],
        )
        if gt is not None:
            state.dsc = dsc(mask.labels[0], _spatial(gt))
            state.iou = iou(mask.labels[0], _spatial(gt))
        trace.append(state)
    return trace[-1].mask, trace


TRACE_COLUMNS = ("volume", "stage", "x", "y", "z", "label", "dsc", "iou")


def format_trace(trace: Sequence[RefinementState], volume_id: str = "-") -> list[str]:
    """One tab-separated record per stage (the click added at that stage)."""
    rows = []
    for st in trace:
        p = st.points[-1]
        label = "fg" if p.is_foreground else "bg"
        d = "nan" if st.dsc is None else f"{st.dsc:.6f}"
        j = "nan" if st.iou is None else f"{st.iou:.6f}"
        rows.append("\t".join([volume_id, str(st.stage), *map(str, p.coord), label, d, j]))
    return rows


def write_trace(traces: dict[str, Sequence[RefinementState]], path: str | Path) -> None:
    lines = ["\t".join(TRACE_COLUMNS)]
    for vid, trace in traces.items():
        lines.extend(format_trace(trace, vid))
    try:
        Path(path).write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise UnwritablePath(f"cannot write {path}: {exc}") from exc


def read_trace(path: str | Path) -> list[dict[str, str]]:
    lines = Path(path).read_text().splitlines()
    header = lines[0].split("\t")
    return [dict(zip(header, line.split("\t"))) for line in lines[1:] if line]
