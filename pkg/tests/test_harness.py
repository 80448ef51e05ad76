import math

import numpy as np
import pytest
import torch

from msam.backbone import ModelConfig
from msam.checkpoint import load_checkpoint, payload_digest, save_checkpoint
from msam.errors import (
    ChecksumMismatch,
    ConfigOutOfRange,
    DataError,
    DivergenceError,
    MissingFile,
    ShapeMismatch,
)
from msam.harness import (
    REFERENCE_COUNTS,
    RunReport,
    Sample,
    TrainConfig,
    count_parameters,
    evaluate,
    evaluate_model,
    fraction_from_counts,
    load_config,
    load_samples,
    reported_fraction_consistent,
    set_finetune_mode,
    train,
    train_model,
)
from msam.losses import dice_ce_from_logits
from msam.model import build_model
from msam.refinement import run_stages
from msam.volume_io import (
    ManifestEntry,
    PhantomConfig,
    generate_phantom,
    generate_phantom_set,
    read_manifest,
    write_manifest,
)

SMALL = dict(
    volume_size=16, patch_size=8, embed_dim=16, encoder_depth=1, encoder_heads=2,
    decoder_depth=1, decoder_heads=2, mask_channels=(4, 8), mlp_ratio=2, lora_rank=2,
)


def small_cfg(**kw):
    return ModelConfig(**{**SMALL, **kw})


def phantom_samples(n, size=16, seed=0):
    rng = np.random.default_rng(seed)
    from msam.volume_io import zscore_normalize

    out = []
    for k in range(n):
        v, m = generate_phantom(PhantomConfig(size=(size,) * 3), rng)
        out.append(Sample(f"p{k}", zscore_normalize(v).data, m.labels[0].astype(bool)))
    return out


@pytest.fixture
def data_dir(tmp_path):
    generate_phantom_set(3, 16, 0, tmp_path / "data")
    return tmp_path / "data"


class TestAccounting:
    def test_reference_counts(self):
        counts = fraction_from_counts(*REFERENCE_COUNTS)
        assert counts.fraction == pytest.approx(25 / 118)
        assert round(100 * counts.fraction, 1) == 21.2

    def test_reported_percentage_within_rounding(self):
        assert reported_fraction_consistent()
        assert not reported_fraction_consistent(percent=25.0)

    def test_full_mode(self):
        assert count_parameters(set_finetune_mode(build_model(small_cfg()), "full")).fraction == 1.0

    def test_adapter_mode_freezes_encoders(self):
        model = set_finetune_mode(build_model(small_cfg()), "adapter")
        for name, p in model.named_parameters():
            expect = name.startswith(("mea.", "decoder.")) or "lora_" in name
            assert p.requires_grad == expect, name

    def test_unknown_mode(self):
        with pytest.raises(ConfigOutOfRange):
            set_finetune_mode(build_model(small_cfg()), "partial")


class TestTraining:
    def test_zero_lr_leaves_parameters(self):
        model = set_finetune_mode(build_model(small_cfg()), "full")
        before = {k: v.clone() for k, v in model.state_dict().items()}
        train_model(model, phantom_samples(2), TrainConfig(lr=0.0, epochs=1))
        for k, v in model.state_dict().items():
            assert torch.equal(v, before[k]), k

    def test_same_seed_same_losses(self):
        samples = phantom_samples(2)
        runs = []
        for _ in range(2):
            model = set_finetune_mode(build_model(small_cfg()), "adapter")
            runs.append(train_model(model, samples, TrainConfig(epochs=3, seed=5)))
        assert runs[0] == runs[1]

    def test_frozen_tensors_unchanged(self):
        model = set_finetune_mode(build_model(small_cfg()), "adapter")
        before = {k: v.clone() for k, v in model.state_dict().items()}
        train_model(model, phantom_samples(2), TrainConfig(epochs=2))
        changed = {k for k, v in model.state_dict().items() if not torch.equal(v, before[k])}
        trainable = {n for n, p in model.named_parameters() if p.requires_grad}
        assert changed <= trainable
        assert any("lora_B" in k for k in changed)
        assert any(k.startswith("mea.") for k in changed)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_loss_decreases(self, seed):
        model = set_finetune_mode(build_model(small_cfg(seed=seed)), "adapter")
        losses = train_model(model, phantom_samples(4, seed=seed), TrainConfig(epochs=10, seed=seed))
        assert losses[-1] < losses[0]

    def test_divergence(self):
        model = set_finetune_mode(build_model(small_cfg()), "adapter")
        with torch.no_grad():
            model.decoder.head_bias.fill_(float("nan"))
        with pytest.raises(DivergenceError) as info:
            train_model(model, phantom_samples(1), TrainConfig(epochs=1))
        assert "stage 0" in str(info.value)

    def test_last_stage_supervision_runs(self):
        model = set_finetune_mode(build_model(small_cfg()), "adapter")
        losses = train_model(model, phantom_samples(1), TrainConfig(epochs=1, supervision="last"))
        assert math.isfinite(losses[0])

    def test_straight_through_gradient(self):
        model = set_finetune_mode(build_model(small_cfg()), "full")
        s = phantom_samples(1)[0]
        x = torch.from_numpy(s.image[None])
        y = torch.from_numpy(s.mask[None]).float()
        for st, expect_flow in ((True, True), (False, False)):
            outs = run_stages(model, x, [s.mask], 2, np.random.default_rng(0), straight_through=st)
            loss = dice_ce_from_logits(outs[1].logits[:, 0], y)
            (g,) = torch.autograd.grad(loss, outs[0].logits, allow_unused=True)
            flows = g is not None and bool(g.abs().sum() > 0)
            assert flows == expect_flow

    def test_untrained_baseline(self):
        model = build_model(ModelConfig())
        samples = phantom_samples(5, size=32, seed=3)
        report = evaluate_model(model, samples, 3, seed=0)
        assert max(report.stage_dsc) < 0.2

    def test_overfit_single_phantom_200_steps(self):
        model = set_finetune_mode(build_model(ModelConfig(lora_rank=4)), "adapter")
        samples = phantom_samples(1, size=32, seed=0)
        train_model(model, samples, TrainConfig(epochs=200, augment=False))
        report = evaluate_model(model, samples, 4, seed=0)
        assert report.final_dsc > 0.90


class TestData:
    def test_empty_manifest(self, tmp_path):
        write_manifest([], tmp_path / "manifest.tsv")
        with pytest.raises(DataError):
            train(TrainConfig(epochs=1, checkpoint_dir=str(tmp_path / "ck")), small_cfg(), tmp_path)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DataError):
            train(TrainConfig(epochs=1, checkpoint_dir=str(tmp_path / "ck")), small_cfg(), tmp_path / "nothing")

    def test_broken_entry(self, tmp_path):
        entry = ManifestEntry(str(tmp_path / "a.vol"), str(tmp_path / "a.mask"), 0.1)
        with pytest.raises(DataError):
            load_samples([entry], small_cfg())

    def test_samples_are_standardized(self, data_dir):
        samples = load_samples(read_manifest(data_dir), small_cfg())
        for s in samples:
            assert abs(float(s.image.mean())) < 1e-5
            assert s.mask.shape == (16, 16, 16) and s.mask.any()

    def test_crop_or_pad_to_model_size(self, tmp_path):
        generate_phantom_set(1, 24, 0, tmp_path)
        samples = load_samples(read_manifest(tmp_path), small_cfg(volume_size=32))
        assert samples[0].image.shape == (1, 32, 32, 32)


class TestEndToEnd:
    def test_train_then_evaluate(self, data_dir, tmp_path):
        cfg = TrainConfig(epochs=2, n_stages=3, checkpoint_dir=str(tmp_path / "ck"), report_dir=str(tmp_path / "rep"))
        report, ckpt = train(cfg, small_cfg(), data_dir)
        assert len(report.epoch_losses) == 2
        assert len(report.stage_dsc) == 3
        for name in ("summary.txt", "epochs.tsv", "stages.tsv", "trace.tsv", "loss.png", "stages.png"):
            assert (tmp_path / "rep" / name).is_file(), name
        assert (tmp_path / "rep" / "loss.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
        again = evaluate(ckpt, data_dir, 3, seed=cfg.eval_seed)
        assert again.stage_dsc == report.stage_dsc
        assert again.stage_iou == report.stage_iou

    def test_report_summary(self):
        r = RunReport(seed=1, n_stages=2, epoch_losses=[1.0, 0.5], stage_dsc=[0.3, 0.4], stage_iou=[0.2, 0.25])
        s = r.summary()
        assert s["first_epoch_loss"] == 1.0 and s["final_epoch_loss"] == 0.5
        assert s["final_dsc"] == 0.4 and s["epochs"] == 2


class TestCheckpoint:
    def _trained(self, seed=0):
        model = set_finetune_mode(build_model(small_cfg()), "adapter")
        train_model(model, phantom_samples(2), TrainConfig(epochs=2, seed=seed))
        return model

    def test_bit_exact_across_runs(self, tmp_path):
        a = save_checkpoint(self._trained(), tmp_path / "a")
        b = save_checkpoint(self._trained(), tmp_path / "b")
        assert payload_digest(a) == payload_digest(b)
        for f in (a / "tensors").iterdir():
            assert f.read_bytes() == (b / "tensors" / f.name).read_bytes()

    def test_round_trip(self, tmp_path):
        model = self._trained()
        back = load_checkpoint(save_checkpoint(model, tmp_path / "ck"))
        for k, v in model.state_dict().items():
            assert torch.equal(back.state_dict()[k], v)

    def test_corrupt_tensor(self, tmp_path):
        ck = save_checkpoint(build_model(small_cfg()), tmp_path / "ck")
        f = ck / "tensors" / "decoder.head_bias.bin"
        raw = bytearray(f.read_bytes())
        raw[0] ^= 1
        f.write_bytes(bytes(raw))
        with pytest.raises(ChecksumMismatch):
            load_checkpoint(ck)

    def test_config_mismatch(self, tmp_path):
        ck = save_checkpoint(build_model(small_cfg()), tmp_path / "ck")
        with pytest.raises(ShapeMismatch):
            load_checkpoint(ck, small_cfg(embed_dim=32))

    def test_missing(self, tmp_path):
        with pytest.raises(MissingFile):
            load_checkpoint(tmp_path / "nope")


class TestConfigFile:
    def test_parse(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("# toy run\nembed_dim: 32\nlora_rank: 2\nepochs: 7\naugment: false\nseed: 3\ndata: phantoms\n")
        model_cfg, cfg = load_config(path)
        assert (model_cfg.embed_dim, model_cfg.lora_rank, model_cfg.seed) == (32, 2, 3)
        assert (cfg.epochs, cfg.augment, cfg.seed) == (7, False, 3)
        assert cfg.data == str(tmp_path / "phantoms")

    def test_unknown_key(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("learning_rate: 1\n")
        with pytest.raises(ConfigOutOfRange):
            load_config(path)

    def test_bad_value(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("epochs: many\n")
        with pytest.raises(ConfigOutOfRange):
            load_config(path)

    def test_out_of_range(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("finetune: everything\n")
        with pytest.raises(ConfigOutOfRange):
            load_config(path)

    def test_full_scale_config(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("epochs: 3\nembed_dim: 32\nlr: 0.001\n")
        model_cfg, cfg = load_config(path, paper_scale=True)
        assert (model_cfg.volume_size, model_cfg.embed_dim, model_cfg.lora_rank) == (128, 384, 4)
        assert (cfg.epochs, cfg.batch_size, cfg.n_stages, cfg.lr) == (200, 4, 10, 0.001)
