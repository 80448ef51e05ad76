import numpy as np
import pytest
import torch

from msam.backbone import BACKGROUND, FOREGROUND, PromptPoint
from msam.errors import EmptyForeground, ShapeMismatch
from msam.losses import dsc
from msam.mea import mea_forward
from msam.model import build_model
from msam.refinement import (
    TRACE_COLUMNS,
    ErrorRegion,
    no_gt_initial_point,
    read_trace,
    refine,
    run_stages,
    sample_point,
    write_trace,
)
from msam.volume_io import MaskVolume, PhantomConfig, Volume3D, generate_phantom


def random_mask(rng, shape=(16, 16, 16), p=None):
    return rng.random(shape) < (rng.random() * 0.3 if p is None else p)


class TestSamplePoint:
    def test_single_voxel_foreground(self, rng):
        gt = np.zeros((8, 8, 8), bool)
        gt[2, 5, 7] = True
        assert sample_point(0, gt, None, rng) == PromptPoint((2, 5, 7), FOREGROUND)

    def test_perfect_mask_falls_back(self, rng):
        gt = random_mask(rng, p=0.2)
        pt = sample_point(3, gt, gt.copy(), rng)
        assert pt.label == FOREGROUND
        assert gt[pt.coord]

    def test_false_positive_only(self, rng):
        gt = np.zeros((16, 16, 16), bool)
        gt[4:8, 4:8, 4:8] = True
        current = gt.copy()
        current[10:12, 0:3, 5] = True
        fp = current & ~gt
        for _ in range(1000):
            pt = sample_point(1, gt, current, rng)
            assert pt.label == BACKGROUND
            assert fp[pt.coord]

    def test_exhaustive_membership(self, rng):
        for _ in range(1000):
            gt = random_mask(rng)
            if not gt.any():
                gt[tuple(rng.integers(0, 16, 3))] = True
            current = random_mask(rng)
            pt = sample_point(int(rng.integers(1, 10)), gt, current, rng)
            err = ErrorRegion.between(current, gt)
            if err.is_empty():
                assert pt.label == FOREGROUND and gt[pt.coord]
            elif pt.label == FOREGROUND:
                assert err.false_negatives[pt.coord]
            else:
                assert err.false_positives[pt.coord]

    def test_stage0_always_in_foreground(self, rng):
        for _ in range(200):
            gt = random_mask(rng)
            gt[0, 0, 0] = True
            pt = sample_point(0, gt, None, rng)
            assert pt.label == FOREGROUND and gt[pt.coord]

    def test_uniform_over_error_region(self):
        gt = np.zeros((4, 4, 4), bool)
        gt[0, 0, :2] = True
        current = np.zeros_like(gt)
        current[3, 3, 3] = True
        rng = np.random.default_rng(0)
        hits = {}
        for _ in range(3000):
            c = sample_point(1, gt, current, rng).coord
            hits[c] = hits.get(c, 0) + 1
        assert set(hits) == {(0, 0, 0), (0, 0, 1), (3, 3, 3)}
        assert all(abs(h - 1000) < 150 for h in hits.values())

    def test_empty_foreground(self, rng):
        with pytest.raises(EmptyForeground):
            sample_point(0, np.zeros((4, 4, 4), bool), None, rng)

    def test_mask_volume_inputs(self, rng):
        gt = MaskVolume(np.ones((1, 4, 4, 4), np.uint8))
        cur = MaskVolume(np.zeros((1, 4, 4, 4), np.uint8))
        assert sample_point(1, gt, cur, rng).label == FOREGROUND

    def test_current_required_after_stage0(self, rng):
        gt = np.ones((4, 4, 4), bool)
        with pytest.raises(ValueError):
            sample_point(1, gt, None, rng)
        with pytest.raises(ValueError):
            sample_point(0, gt, gt, rng)

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeMismatch):
            sample_point(1, np.ones((4, 4, 4), bool), np.ones((4, 4, 5), bool), rng)


class TestNoGtPoint:
    def test_bounds(self, rng):
        for _ in range(500):
            pt = no_gt_initial_point((32, 32, 32), rng)
            assert all(0 <= c < 32 for c in pt.coord)
            assert pt.label == FOREGROUND

    def test_volume_argument(self, rng):
        pt = no_gt_initial_point(Volume3D(np.zeros((1, 5, 6, 7))), rng)
        assert all(0 <= c < n for c, n in zip(pt.coord, (5, 6, 7)))

    def test_seeded(self):
        a = no_gt_initial_point((32, 32, 32), np.random.default_rng(9))
        b = no_gt_initial_point((32, 32, 32), np.random.default_rng(9))
        assert a == b

    def test_different_seeds_differ(self):
        # collision probability per pair is 1/32768; 100 pairs collide with probability < 0.4%
        same = sum(
            no_gt_initial_point((32, 32, 32), np.random.default_rng(2 * k))
            == no_gt_initial_point((32, 32, 32), np.random.default_rng(2 * k + 1))
            for k in range(100)
        )
        assert same <= 1


@pytest.fixture(scope="module")
def tiny_setup():
    from msam.backbone import ModelConfig

    torch.set_num_threads(1)
    cfg = ModelConfig(
        volume_size=16, patch_size=8, embed_dim=16, encoder_depth=1, encoder_heads=2,
        decoder_depth=1, decoder_heads=2, mask_channels=(4, 8), mlp_ratio=2,
    )
    model = build_model(cfg).eval()
    with torch.no_grad():
        model.decoder.head_bias.zero_()  # untrained but not all-background, so the error region varies
    v, m = generate_phantom(PhantomConfig(size=(16, 16, 16)), np.random.default_rng(0))
    return model, v, m


class TestRefine:
    def test_single_stage(self, tiny_setup, rng):
        model, v, m = tiny_setup
        final, trace = refine(v, m, 1, model, rng)
        assert len(trace) == 1
        assert len(trace[0].points) == 1
        assert final.shape == (1, 16, 16, 16)

    def test_ten_stages_ten_points(self, tiny_setup, rng):
        model, v, m = tiny_setup
        _, trace = refine(v, m, 10, model, rng)
        assert [len(st.points) for st in trace] == list(range(1, 11))
        for a, b in zip(trace, trace[1:]):
            assert b.points[:-1] == a.points

    def test_points_follow_error_regions(self, tiny_setup, rng):
        model, v, m = tiny_setup
        gt = m.labels[0].astype(bool)
        _, trace = refine(v, m, 10, model, rng)
        assert gt[trace[0].points[0].coord]
        for prev, st in zip(trace, trace[1:]):
            pt = st.points[-1]
            err = ErrorRegion.between(prev.mask, gt)
            if err.is_empty():
                assert pt.label == FOREGROUND and gt[pt.coord]
            elif pt.label == FOREGROUND:
                assert err.false_negatives[pt.coord]
            else:
                assert err.false_positives[pt.coord]

    def test_repeatable(self, tiny_setup):
        model, v, m = tiny_setup
        _, a = refine(v, m, 5, model, np.random.default_rng(4))
        _, b = refine(v, m, 5, model, np.random.default_rng(4))
        for x, y in zip(a, b):
            assert x.points == y.points
            assert torch.equal(x.logits, y.logits)
            assert x.dsc == y.dsc

    def test_embedding_chain_and_mask_state(self, tiny_setup, rng):
        model, v, m = tiny_setup
        _, trace = refine(v, m, 4, model, rng)
        with torch.no_grad():
            assert torch.equal(trace[0].image_emb, model.encode_image(v).values)
            zero = model.encode_mask(MaskVolume.zeros_like(v)).values
            assert torch.equal(trace[0].mask_emb, zero)
            for prev, st in zip(trace, trace[1:]):
                assert torch.equal(st.image_emb, mea_forward(prev.image_emb, prev.mask_emb, model.mea))
                assert torch.equal(st.mask_emb, model.encode_mask(prev.mask).values)

    def test_trace_metrics(self, tiny_setup, rng):
        model, v, m = tiny_setup
        _, trace = refine(v, m, 3, model, rng)
        for st in trace:
            assert st.dsc == dsc(st.mask, m)
            np.testing.assert_array_equal(st.mask.labels[0], (st.logits[0] > 0).numpy())

    def test_without_ground_truth(self, tiny_setup, rng):
        model, v, _ = tiny_setup
        final, trace = refine(v, None, 3, model, rng)
        assert len(trace) == 3
        assert all(len(st.points) == 1 for st in trace)
        assert trace[0].dsc is None

    def test_bad_stage_count(self, tiny_setup, rng):
        model, v, m = tiny_setup
        with pytest.raises(ValueError):
            refine(v, m, 0, model, rng)

    def test_batched_matches_single(self, tiny_setup):
        model, v, m = tiny_setup
        v2, m2 = generate_phantom(PhantomConfig(size=(16, 16, 16)), np.random.default_rng(1))
        images = torch.from_numpy(np.stack([v.data, v2.data]))
        with torch.no_grad():
            batched = run_stages(model, images, [m.labels, m2.labels], 3, np.random.default_rng(0))
        # each volume's decode depends only on its own row, points and chained embeddings
        for out in batched:
            for b, pts in enumerate(out.points):
                with torch.no_grad():
                    e_hat = model.mea(out.image_emb[b : b + 1], out.mask_emb[b : b + 1])
                    logits = model.decode(e_hat, model.encode_points(pts).values[None])
                torch.testing.assert_close(logits[0], out.logits[b], rtol=1e-5, atol=1e-5)


class TestTraceExport:
    def test_round_trip(self, tiny_setup, rng, tmp_path):
        model, v, m = tiny_setup
        _, trace = refine(v, m, 4, model, rng)
        write_trace({"vol_a": trace}, tmp_path / "trace.tsv")
        rows = read_trace(tmp_path / "trace.tsv")
        assert len(rows) == 4
        assert tuple(rows[0]) == TRACE_COLUMNS
        for row, st in zip(rows, trace):
            pt = st.points[-1]
            assert int(row["stage"]) == st.stage
            assert (int(row["x"]), int(row["y"]), int(row["z"])) == pt.coord
            assert row["label"] == ("fg" if pt.is_foreground else "bg")
            assert float(row["dsc"]) == pytest.approx(st.dsc, abs=1e-6)
            assert float(row["iou"]) == pytest.approx(st.iou, abs=1e-6)
