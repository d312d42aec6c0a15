import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from inpaintvad.data import CorruptionMeta, GeneratorConfig, LabeledSequence, build_test_set, corrupt_spatial
from inpaintvad.evaluation import (
    EvalConfig, EvalReport, ScoredSequence, compute_eer, eer_from_scored, evaluation_masks,
    export_loss_map, localization_check, read_pgm, read_scores, score_dataset, square_region, write_scores,
)
from inpaintvad.scoring import AnomalyScore, LossMap

from oracles import eer_sweep

SMALL = GeneratorConfig(frame_size=12, n_frames=5, n_digits=1, sprite_size=8)


def pairs(normals, corrupted):
    return [("normal", s) for s in normals] + [("corrupted", s) for s in corrupted]


class TestComputeEer:
    def test_perfect_separation(self):
        assert compute_eer(pairs([0.1, 0.2], [0.8, 0.9])).eer == 0.0

    def test_identical_scores_is_chance(self):
        assert compute_eer(pairs([0.3] * 4, [0.3] * 6)).eer == 0.5

    def test_fixture_case(self):
        r = compute_eer(pairs([0.1, 0.2, 0.3, 0.4], [0.35, 0.5, 0.6, 0.7]))
        assert r.eer == pytest.approx(0.25, abs=1e-12)
        assert r.threshold_at_eer == pytest.approx(0.375, abs=1e-12)
        assert (r.n_normal, r.n_corrupted) == (4, 4)

    def test_inverted_scores(self):
        assert compute_eer(pairs([0.8, 0.9], [0.1, 0.2])).eer == 1.0

    def test_boolean_labels(self):
        assert compute_eer([(0, 0.1), (1, 0.9)]).eer == 0.0

    @pytest.mark.parametrize("data", [pairs([0.1], []), pairs([], [0.2]), []])
    def test_single_class_rejected(self, data):
        with pytest.raises(ValueError):
            compute_eer(data)

    def test_unknown_label_rejected(self):
        with pytest.raises(ValueError, match="label"):
            compute_eer([("normal", 0.1), ("weird", 0.2)])

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            compute_eer(pairs([0.1], [math.nan]))

    def test_matches_sweep_oracle(self):
        rng = np.random.default_rng(11)
        for _ in range(200):
            n = int(rng.integers(2, 201))
            labels = rng.integers(0, 2, size=n)
            labels[:2] = [0, 1]
            scores = rng.normal(size=n) + 0.7 * labels
            if rng.random() < 0.3:
                scores = np.round(scores, 1)
            want, thr = eer_sweep(list(labels), list(scores))
            got = compute_eer(zip(labels, scores))
            assert got.eer == pytest.approx(want, abs=1e-12)
            if math.isfinite(thr):
                assert got.threshold_at_eer == pytest.approx(thr, abs=1e-12)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.integers(-50, 50), min_size=1, max_size=30),
           st.lists(st.integers(-50, 50), min_size=1, max_size=30))
    def test_invariant_under_monotone_transform(self, normals, corrupted):
        # a grid keeps the transform strictly increasing in floating point too
        def f(v):
            return math.exp(v / 10) + (v / 10) ** 3

        base = compute_eer(pairs([v / 10 for v in normals], [v / 10 for v in corrupted])).eer
        moved = compute_eer(pairs([f(v) for v in normals], [f(v) for v in corrupted])).eer
        assert moved == pytest.approx(base, abs=1e-12)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=1, max_size=20), st.lists(st.floats(0, 1), min_size=1, max_size=20))
    def test_range(self, normals, corrupted):
        assert 0.0 <= compute_eer(pairs(normals, corrupted)).eer <= 1.0

    def test_report_text_has_every_field(self):
        text = EvalReport(0.25, 0.375, 4, 4, "masked_only", "abc").to_text()
        for key in ("eer: 0.250000", "accuracy_at_eer: 0.750000", "threshold_at_eer: 0.375000",
                    "n_normal: 4", "n_corrupted: 4", "scope: masked_only", "checkpoint: abc"):
            assert key in text


def scored(i, label, mean, nll=None, corruption=None):
    nll = np.zeros((4, 4)) if nll is None else nll
    return ScoredSequence(i, label, AnomalyScore(mean * 16, mean, 16, "masked_only"), LossMap(nll), corruption)


class TestScoreDataset:
    def test_empty(self, tiny_params):
        assert score_dataset(tiny_params, []) == []

    def test_duplicate_sequences_score_identically(self, tiny_params, rng):
        frames = rng.integers(0, 256, size=(4, 6, 5, 1), dtype=np.uint8)
        a, b = score_dataset(tiny_params, [LabeledSequence(frames), LabeledSequence(frames.copy())])
        assert a.score == b.score
        np.testing.assert_array_equal(a.loss_map.nll, b.loss_map.nll)

    def test_deterministic_and_batch_independent(self, tiny_params, rng):
        data = [LabeledSequence(rng.integers(0, 256, size=(3, 6, 5, 1), dtype=np.uint8)) for _ in range(5)]
        a = score_dataset(tiny_params, data, EvalConfig(batch_size=2))
        b = score_dataset(tiny_params, data, EvalConfig(batch_size=16))
        assert [s.score.mean_nll for s in a] == pytest.approx([s.score.mean_nll for s in b], rel=1e-12)

    def test_mask_seed_matters(self, tiny_params, rng):
        data = [LabeledSequence(rng.integers(0, 256, size=(3, 6, 5, 1), dtype=np.uint8))]
        a = score_dataset(tiny_params, data, EvalConfig(mask_seed=0, mask_periods=(2, 2)))
        b = score_dataset(tiny_params, data, EvalConfig(mask_seed=1, mask_periods=(2, 2)))
        masks = [evaluation_masks(6, 5, EvalConfig(mask_seed=s, mask_periods=(2, 2)))[0] for s in (0, 1)]
        if not np.array_equal(masks[0].visible, masks[1].visible):
            assert a[0].score.total_nll != b[0].score.total_nll

    def test_scopes_and_counts(self, tiny_params, rng):
        data = [LabeledSequence(rng.integers(0, 256, size=(3, 6, 5, 1), dtype=np.uint8))]
        mask = evaluation_masks(6, 5, EvalConfig())[0]
        only = score_dataset(tiny_params, data, EvalConfig(scope="masked_only"))[0].score
        every = score_dataset(tiny_params, data, EvalConfig(scope="all"))[0].score
        assert only.pixels_counted == int((~mask.visible).sum())
        assert every.pixels_counted == 30
        assert only.scope == "masked_only" and every.scope == "all"

    def test_multi_mask_average(self, tiny_params, rng):
        data = [LabeledSequence(rng.integers(0, 256, size=(3, 6, 5, 1), dtype=np.uint8))]
        s = score_dataset(tiny_params, data, EvalConfig(n_masks=4, scope="all"))[0].score
        assert s.pixels_counted == 4 * 30
        assert math.isfinite(s.mean_nll)

    def test_dimension_mismatch_rejected(self, tiny_params):
        with pytest.raises(ValueError, match="do not match"):
            score_dataset(tiny_params, [LabeledSequence(np.zeros((3, 7, 5, 1), np.uint8))])

    def test_short_sequence_rejected(self, tiny_params):
        with pytest.raises(ValueError, match="context"):
            score_dataset(tiny_params, [LabeledSequence(np.zeros((2, 6, 5, 1), np.uint8))])

    def test_ragged_rejected(self, tiny_params):
        with pytest.raises(ValueError, match="sequence 1"):
            score_dataset(tiny_params, [LabeledSequence(np.zeros((3, 6, 5, 1), np.uint8)),
                                        LabeledSequence(np.zeros((4, 6, 5, 1), np.uint8))])

    def test_eer_from_scored(self):
        items = [scored(0, "normal", 0.1), scored(1, "corrupted", 0.9)]
        report = eer_from_scored(items, "ck")
        assert (report.eer, report.scope, report.checkpoint_id) == (0.0, "masked_only", "ck")


class TestExports:
    def test_constant_map_exports_zero(self, tmp_path):
        path = tmp_path / "m.pgm"
        export_loss_map(LossMap(np.full((64, 64), 2.5)), path)
        assert path.read_bytes()[:13] == b"P5\n64 64\n255\n"
        img = read_pgm(path)
        assert img.shape == (64, 64) and not img.any()

    def test_single_max_pixel(self, tmp_path):
        nll = np.zeros((5, 7))
        nll[2, 3] = 4.0
        export_loss_map(LossMap(nll), tmp_path / "m.pgm")
        img = read_pgm(tmp_path / "m.pgm")
        assert img.shape == (5, 7) and img[2, 3] == 255 and img.sum() == 255

    def test_non_rectangular_header(self, tmp_path):
        export_loss_map(LossMap(np.arange(6.0).reshape(2, 3)), tmp_path / "m.pgm")
        raw = (tmp_path / "m.pgm").read_bytes()
        assert raw.startswith(b"P5\n3 2\n255\n") and len(raw) == 11 + 6

    def test_non_finite_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            export_loss_map(LossMap(np.array([[np.inf, 0.0]])), tmp_path / "m.pgm")

    def test_unwritable_path(self, tmp_path):
        with pytest.raises(OSError):
            export_loss_map(LossMap(np.zeros((2, 2))), tmp_path / "missing" / "m.pgm")

    def test_score_file_round_trip(self, tmp_path):
        items = [scored(0, "normal", 0.125), scored(1, "corrupted", 1.0 / 3.0)]
        write_scores(tmp_path / "s.tsv", items)
        lines = (tmp_path / "s.tsv").read_text().splitlines()
        assert lines[0].split("\t") == ["0", "normal", "0.125", "2"]
        back = read_scores(tmp_path / "s.tsv")
        assert back[1][:2] == (1, "corrupted") and back[1][2] == pytest.approx(1 / 3, rel=1e-8)


class TestLocalization:
    META = CorruptionMeta("spatial", 2, 2)

    def test_identical_pair_is_one(self):
        nll = np.random.default_rng(0).random((6, 6))
        a = scored(0, "corrupted", 1.0, nll, self.META)
        assert localization_check(a, scored(0, "normal", 1.0, nll.copy())) == 1.0

    def test_ratio_reads_square_only(self):
        clean = np.ones((6, 6))
        hot = clean.copy()
        hot[1:4, 1:4] = 3.0
        hot[5, 5] = 100.0
        assert localization_check(scored(0, "corrupted", 1, hot, self.META), scored(0, "normal", 1, clean)) == pytest.approx(3.0, rel=1e-9)

    def test_zero_maps_give_one(self):
        z = np.zeros((6, 6))
        assert localization_check(scored(0, "corrupted", 0, z, self.META), scored(0, "normal", 0, z)) == 1.0

    def test_square_clipped_at_border(self):
        rows, cols = square_region(CorruptionMeta("spatial", 0, 5), 6, 6)
        assert (rows, cols) == (slice(0, 2), slice(4, 6))

    def test_missing_meta_rejected(self):
        with pytest.raises(ValueError, match="spatially corrupted"):
            localization_check(scored(0, "normal", 1), scored(0, "normal", 1))

    def test_temporal_meta_rejected(self):
        meta = CorruptionMeta("temporal", -1, -1)
        with pytest.raises(ValueError):
            localization_check(scored(0, "corrupted", 1, corruption=meta), scored(0, "normal", 1))

    def test_positive_finite_on_model(self, tiny_params):
        cfg = GeneratorConfig(frame_size=6, n_frames=4, n_digits=1, sprite_size=4)
        seqs = build_test_set(2, 0, seed=3, config=cfg)
        seqs = [LabeledSequence(s.frames[..., :5, :], s.label) for s in seqs]
        seqs = [s for s in seqs if (s.frames[-1] >= 128).any()]
        rng = np.random.default_rng(0)
        for s in seqs:
            bad = corrupt_spatial(s, rng)
            a, b = score_dataset(tiny_params, [bad, s])
            ratio = localization_check(a, b)
            assert math.isfinite(ratio) and ratio > 0
