"""Training, evaluation, parameter accounting and run reports."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import torch
from torch import nn

from msam.backbone import ModelConfig
from msam.checkpoint import load_checkpoint, save_checkpoint
from msam.config import coerce_fields, format_key_values, read_key_values
from msam.errors import (
    ConfigOutOfRange,
    DataError,
    DivergenceError,
    MSAMError,
    NonFiniteActivation,
    UnwritablePath,
)
from msam.losses import dice_ce_from_logits
from msam.model import MSAM, build_model
from msam.refinement import refine, run_stages, write_trace
from msam.volume_io import (
    ManifestEntry,
    MaskVolume,
    Volume3D,
    crop_or_pad,
    random_flip,
    read_manifest,
    read_mask,
    read_volume,
    zscore_normalize,
)

log = logging.getLogger(__name__)

REFERENCE_COUNTS = (118, 25)  # total / tunable parameters in millions
REFERENCE_TUNABLE_PERCENT = 21.41


@dataclass
class TrainConfig:
    """Optimization settings. Defaults are desk-scale; see :meth:`paper_scale`."""

    lr: float = 8e-4
    epochs: int = 50
    batch_size: int = 1
    weight_decay: float = 0.1
    grad_clip: float = 1.0
    seed: int = 0
    n_stages: int = 4
    supervision: str = "all"
    finetune: str = "adapter"
    augment: bool = True
    w_ce: float = 0.5
    w_dice: float = 0.5
    data: str = ""
    checkpoint_dir: str = "checkpoint"
    report_dir: str | None = None
    eval_seed: int = 1234

    def __post_init__(self) -> None:
        self.validate()

    @classmethod
    def paper_scale(cls, **overrides) -> "TrainConfig":
        base = dict(epochs=200, batch_size=4, n_stages=10)
        base.update(overrides)
        return cls(**base)

    def validate(self) -> None:
        if min(self.lr, self.weight_decay, self.grad_clip, self.w_ce, self.w_dice) < 0:
            raise ConfigOutOfRange("rates, decays, clip norm and loss weights must be >= 0")
        if self.epochs < 1 or self.batch_size < 1 or self.n_stages < 1:
            raise ConfigOutOfRange("epochs, batch_size and n_stages must be >= 1")
        if self.supervision not in ("all", "last"):
            raise ConfigOutOfRange(f"supervision must be 'all' or 'last', got {self.supervision!r}")
        if self.finetune not in ("adapter", "full"):
            raise ConfigOutOfRange(f"finetune must be 'adapter' or 'full', got {self.finetune!r}")


def load_config(path: str | Path | None = None, paper_scale: bool = False) -> tuple[ModelConfig, TrainConfig]:
    """Read a flat ``key: value`` file into model and training configs.

    ``seed`` seeds both; keys belonging to neither config are rejected.
    ``paper_scale`` replaces the scale-related settings after the file is read.
    """
    values = read_key_values(path) if path is not None else {}
    known = set(ModelConfig.__dataclass_fields__) | set(TrainConfig.__dataclass_fields__)
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigOutOfRange(f"unknown config keys: {unknown}")
    m_kw = coerce_fields(ModelConfig, values)
    t_kw = coerce_fields(TrainConfig, values)
    if path is not None and t_kw.get("data"):
        data = Path(t_kw["data"])
        if not data.is_absolute():
            t_kw["data"] = str(Path(path).parent / data)
    if paper_scale:
        return ModelConfig.paper_scale(**{k: v for k, v in m_kw.items() if k in ("seed", "in_channels")}), \
            TrainConfig.paper_scale(**{k: v for k, v in t_kw.items() if k not in ("epochs", "batch_size", "n_stages")})
    return ModelConfig(**m_kw), TrainConfig(**t_kw)


# --------------------------------------------------------------------------
# Parameter accounting
# --------------------------------------------------------------------------


class ParameterCount(NamedTuple):
    total: int
    tunable: int
    fraction: float


def fraction_from_counts(total: float, tunable: float) -> ParameterCount:
    return ParameterCount(total, tunable, tunable / total)


def count_parameters(model: nn.Module) -> ParameterCount:
    total = sum(p.numel() for p in model.parameters())
    tunable = sum(p.numel() for p in model.parameters() if p.requires_grad)
    return ParameterCount(total, tunable, tunable / total)


TUNABLE_IN_ADAPTER_MODE = ("mea.", "decoder.")


def set_finetune_mode(model: MSAM, mode: str) -> MSAM:
    """``full`` trains everything; ``adapter`` freezes the three encoders and
    trains the adapter, the decoder and any LoRA factors."""
    if mode not in ("adapter", "full"):
        raise ConfigOutOfRange(f"unknown finetune mode {mode!r}")
    for name, p in model.named_parameters():
        trainable = mode == "full" or name.startswith(TUNABLE_IN_ADAPTER_MODE) or "lora_" in name
        p.requires_grad_(trainable)
    return model


# --------------------------------------------------------------------------
# Data
# --------------------------------------------------------------------------


@dataclass
class Sample:
    name: str
    image: np.ndarray  # (C, S, S, S) float32, z-scored
    mask: np.ndarray  # (S, S, S) bool


def load_samples(entries: Sequence[ManifestEntry], cfg: ModelConfig) -> list[Sample]:
    if not entries:
        raise DataError("manifest lists no volume/mask pairs")
    target = (cfg.volume_size,) * 3
    samples = []
    for e in entries:
        try:
            v = read_volume(e.volume)
            m = read_mask(e.mask)
        except MSAMError as exc:
            raise DataError(f"cannot load {e.volume} / {e.mask}: {exc}") from exc
        if v.shape != m.shape:
            raise DataError(f"{e.volume}: image {v.shape} and mask {m.shape} differ")
        if v.shape[0] != cfg.in_channels:
            raise DataError(f"{e.volume}: {v.shape[0]} channels, model expects {cfg.in_channels}")
        v = zscore_normalize(crop_or_pad(v, target))
        m = crop_or_pad(m, target)
        if not m.labels[0].any():
            raise DataError(f"{e.mask}: no foreground after crop-or-pad")
        samples.append(Sample(Path(e.volume).stem, v.data, m.labels[0].astype(bool)))
    return samples


def _load_data(data) -> list[ManifestEntry]:
    try:
        return read_manifest(data)
    except MSAMError as exc:
        raise DataError(f"cannot read manifest {data}: {exc}") from exc


# --------------------------------------------------------------------------
# Reports
# --------------------------------------------------------------------------


@dataclass
class RunReport:
    seed: int
    n_stages: int
    epoch_losses: list[float] = field(default_factory=list)
    stage_dsc: list[float] = field(default_factory=list)
    stage_iou: list[float] = field(default_factory=list)
    total_params: int = 0
    tunable_params: int = 0
    tunable_fraction: float = 0.0
    wall_clock: float = 0.0
    traces: dict = field(default_factory=dict, repr=False)

    @property
    def final_dsc(self) -> float:
        return self.stage_dsc[-1]

    def summary(self) -> dict:
        out = {
            "seed": self.seed,
            "n_stages": self.n_stages,
            "epochs": len(self.epoch_losses),
            "total_params": self.total_params,
            "tunable_params": self.tunable_params,
            "tunable_fraction": self.tunable_fraction,
            "wall_clock_s": round(self.wall_clock, 3),
        }
        if self.epoch_losses:
            out["first_epoch_loss"] = self.epoch_losses[0]
            out["final_epoch_loss"] = self.epoch_losses[-1]
        if self.stage_dsc:
            out["final_dsc"] = self.stage_dsc[-1]
            out["final_iou"] = self.stage_iou[-1]
        return out

    def write(self, out_dir: str | Path, figures: bool = True) -> Path:
        """Write ``summary.txt``, ``epochs.tsv``, ``stages.tsv``, ``trace.tsv`` and PNG figures."""
        out = Path(out_dir)
        try:
            out.mkdir(parents=True, exist_ok=True)
            (out / "summary.txt").write_text(format_key_values(self.summary()))
            if self.epoch_losses:
                rows = ["epoch\tmean_loss"] + [f"{i + 1}\t{v:.8f}" for i, v in enumerate(self.epoch_losses)]
                (out / "epochs.tsv").write_text("\n".join(rows) + "\n")
            if self.stage_dsc:
                rows = ["stage\tmean_dsc\tmean_iou"] + [
                    f"{i + 1}\t{d:.6f}\t{j:.6f}" for i, (d, j) in enumerate(zip(self.stage_dsc, self.stage_iou))
                ]
                (out / "stages.tsv").write_text("\n".join(rows) + "\n")
            if self.traces:
                write_trace(self.traces, out / "trace.tsv")
        except OSError as exc:
            raise UnwritablePath(f"cannot write report to {out}: {exc}") from exc
        if figures:
            from msam import plotting

            if self.epoch_losses:
                plotting.plot_loss_curve(self.epoch_losses, out / "loss.png")
            if self.stage_dsc:
                plotting.plot_stage_metrics(self.stage_dsc, self.stage_iou, out / "stages.png")
        return out


# --------------------------------------------------------------------------
# Evaluation and training
# --------------------------------------------------------------------------


def evaluate_model(model: MSAM, samples: Sequence[Sample], n_stages: int, seed: int) -> RunReport:
    """Refine every sample with ground-truth click simulation; per-stage mean DSC/IoU."""
    was_training = model.training
    model.eval()
    rng = np.random.default_rng(seed)
    per_dsc, per_iou, traces = [], [], {}
    for s in samples:
        _, trace = refine(Volume3D(s.image), MaskVolume(s.mask[None]), n_stages, model, rng)
        per_dsc.append([st.dsc for st in trace])
        per_iou.append([st.iou for st in trace])
        traces[s.name] = trace
    model.train(was_training)
    counts = count_parameters(model)
    return RunReport(
        seed=seed,
        n_stages=n_stages,
        stage_dsc=[float(x) for x in np.mean(per_dsc, axis=0)],
        stage_iou=[float(x) for x in np.mean(per_iou, axis=0)],
        total_params=counts.total,
        tunable_params=counts.tunable,
        tunable_fraction=counts.fraction,
        traces=traces,
    )


def train_model(
    model: MSAM, samples: Sequence[Sample], cfg: TrainConfig, on_epoch=None
) -> list[float]:
    """Optimize ``model`` in place; returns the mean loss of each epoch."""
    rng = np.random.default_rng(cfg.seed)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    model.train()
    epoch_losses = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(samples))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = [samples[i] for i in order[start : start + cfg.batch_size]]
            images, masks = [], []
            for s in batch:
                v, m = Volume3D(s.image), MaskVolume(s.mask[None])
                if cfg.augment:
                    v, m = random_flip(v, m, rng)
                images.append(v.data)
                masks.append(m.labels[0].astype(bool))
            x = torch.from_numpy(np.stack(images))
            y = torch.from_numpy(np.stack(masks)).to(model.dtype)
            try:
                outputs = run_stages(model, x, masks, cfg.n_stages, rng, straight_through=True)
            except NonFiniteActivation as exc:
                raise DivergenceError(f"epoch {epoch + 1}: {exc}") from exc
            stage_losses = [dice_ce_from_logits(o.logits[:, 0], y, cfg.w_ce, cfg.w_dice) for o in outputs]
            for t, sl in enumerate(stage_losses):
                if not torch.isfinite(sl):
                    raise DivergenceError(
                        f"non-finite loss at epoch {epoch + 1}, stage {t}: "
                        + ", ".join(f"stage {k}={v.item():.4g}" for k, v in enumerate(stage_losses))
                    )
            supervised = stage_losses if cfg.supervision == "all" else stage_losses[-1:]
            loss = torch.stack(supervised).mean()
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            opt.step()
            losses.append(loss.item())
        epoch_losses.append(float(np.mean(losses)))
        log.info("epoch %d/%d loss %.5f", epoch + 1, cfg.epochs, epoch_losses[-1])
        if on_epoch is not None:
            on_epoch(epoch, epoch_losses[-1])
    model.eval()
    return epoch_losses


def train(cfg: TrainConfig, model_cfg: ModelConfig, data=None) -> tuple[RunReport, Path]:
    """Train from a manifest, save a checkpoint, evaluate on the training set.

    Returns the report and the checkpoint directory.
    """
    t0 = time.perf_counter()
    samples = load_samples(_load_data(data if data is not None else cfg.data), model_cfg)
    model = set_finetune_mode(build_model(model_cfg), cfg.finetune)
    epoch_losses = train_model(model, samples, cfg)
    ckpt = save_checkpoint(model, cfg.checkpoint_dir)
    report = evaluate_model(model, samples, cfg.n_stages, cfg.eval_seed)
    report.seed = cfg.seed
    report.epoch_losses = epoch_losses
    report.wall_clock = time.perf_counter() - t0
    if cfg.report_dir:
        report.write(cfg.report_dir)
    return report, ckpt


def evaluate(checkpoint, data, n_stages: int, seed: int = 1234, report_dir=None) -> RunReport:
    t0 = time.perf_counter()
    model = load_checkpoint(checkpoint)
    samples = load_samples(_load_data(data), model.cfg)
    report = evaluate_model(model, samples, n_stages, seed)
    report.wall_clock = time.perf_counter() - t0
    if report_dir:
        report.write(report_dir)
    return report


def reported_fraction_consistent(total: float = REFERENCE_COUNTS[0], tunable: float = REFERENCE_COUNTS[1],
                              percent: float = REFERENCE_TUNABLE_PERCENT) -> bool:
    """Whether ``percent`` lies within the range reachable by counts that round to ``total``/``tunable``."""
    lo = (tunable - 0.5) / (total + 0.5) * 100
    hi = (tunable + 0.5) / (total - 0.5) * 100
    return lo <= percent <= hi and math.isfinite(percent)

