"""Segmentation head: similarity scoring, label assignment, windows, mIoU."""

import numpy as np
import pytest

from patchseg.errors import ConfigError, DegenerateInputError, ValidationError
from patchseg.seghead import (
    ScoreVolume,
    SegmentationMap,
    TextEmbeddingBank,
    assign_labels,
    miou,
    patch_text_similarity,
    read_segmap,
    sliding_window_infer,
    write_segmap,
)

from oracles import miou_counts


def unit_rows(rng, m, d):
    rows = rng.normal(size=(m, d))
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def make_bank(seed=0, m=4, d=6):
    rng = np.random.default_rng(seed)
    return TextEmbeddingBank(
        names=[f"class_{i}" for i in range(m)], embeddings=unit_rows(rng, m, d)
    )


class TestTextEmbeddingBank:
    def test_rejects_duplicate_names(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ValidationError):
            TextEmbeddingBank(names=["a", "a"], embeddings=unit_rows(rng, 2, 4))

    def test_rejects_non_unit_rows(self):
        with pytest.raises(ValidationError):
            TextEmbeddingBank(names=["a", "b"], embeddings=np.eye(2) * 2.0)


class TestPatchTextSimilarity:
    def test_bank_vector_scores_one_for_itself(self):
        bank = make_bank()
        features = np.zeros((bank.dim, 2, 2))
        features[:, 1, 0] = bank.embeddings[3]
        features[:, 0, 0] = features[:, 0, 1] = features[:, 1, 1] = 1.0
        scores = patch_text_similarity(features, bank)
        assert abs(scores.values[3, 1, 0] - 1.0) < 1e-12
        assert np.all(scores.values[:, 1, 0] <= 1.0 + 1e-12)

    def test_orthogonal_feature_scores_zero(self):
        bank = TextEmbeddingBank(
            names=["a", "b"],
            embeddings=np.array([[1.0, 0, 0, 0], [0, 1.0, 0, 0]]),
        )
        features = np.zeros((4, 1, 1))
        features[2, 0, 0] = 5.0
        scores = patch_text_similarity(features, bank)
        np.testing.assert_allclose(scores.values, 0.0, atol=1e-12)

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_per_location_cosine_oracle(self, seed):
        rng = np.random.default_rng(seed)
        bank = make_bank(seed=seed, m=4, d=5)
        features = rng.normal(size=(5, 4, 4))
        scores = patch_text_similarity(features, bank).values
        for j in range(4):
            for h in range(4):
                for w in range(4):
                    v = features[:, h, w]
                    t = bank.embeddings[j]
                    expected = v @ t / (np.linalg.norm(v) * np.linalg.norm(t))
                    assert abs(scores[j, h, w] - expected) < 1e-12

    def test_zero_norm_location_is_reported(self):
        bank = make_bank()
        features = np.ones((bank.dim, 3, 3))
        features[:, 2, 1] = 0.0
        with pytest.raises(DegenerateInputError, match=r"\(2, 1\)"):
            patch_text_similarity(features, bank)


class TestAssignLabels:
    def test_single_category(self):
        scores = ScoreVolume(values=np.random.default_rng(0).uniform(-1, 1, (1, 3, 3)))
        labels = assign_labels(scores)
        assert np.all(labels.labels == 0)

    def test_tie_breaks_to_lowest_index(self):
        values = np.zeros((4, 1, 1))
        values[1] = values[3] = 0.7
        labels = assign_labels(ScoreVolume(values=values))
        assert labels.labels[0, 0] == 1

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_loop_argmax(self, seed):
        rng = np.random.default_rng(seed)
        values = rng.uniform(-1, 1, (5, 6, 6))
        labels = assign_labels(ScoreVolume(values=values)).labels
        for h in range(6):
            for w in range(6):
                best = max(range(5), key=lambda j: (values[j, h, w], -j))
                assert labels[h, w] == best

    def test_invariant_to_positive_scale(self):
        rng = np.random.default_rng(7)
        values = rng.uniform(-1, 1, (4, 5, 5))
        base = assign_labels(ScoreVolume(values=values)).labels
        again = assign_labels(ScoreVolume(values=0.4 * values)).labels
        np.testing.assert_array_equal(base, again)


class TestSlidingWindow:
    def test_full_window_equals_direct_similarity(self):
        rng = np.random.default_rng(0)
        bank = make_bank(m=3, d=4)
        features = rng.normal(size=(4, 6, 6))
        direct = patch_text_similarity(features, bank).values
        windowed = sliding_window_infer(features, bank, window=6, stride=6).values
        np.testing.assert_allclose(windowed, direct, atol=1e-12)

    def test_exact_tiling_covers_once(self):
        rng = np.random.default_rng(1)
        bank = make_bank(m=3, d=4)
        features = rng.normal(size=(4, 8, 8))
        direct = patch_text_similarity(features, bank).values
        tiled = sliding_window_infer(features, bank, window=4, stride=4).values
        np.testing.assert_allclose(tiled, direct, atol=1e-12)

    def test_overlapping_windows_match_enumeration_oracle(self):
        rng = np.random.default_rng(2)
        bank = make_bank(m=3, d=4)
        features = rng.normal(size=(4, 8, 8))
        result = sliding_window_infer(features, bank, window=4, stride=2).values

        acc = np.zeros_like(result)
        cover = np.zeros((8, 8))
        starts = [0, 2, 4]
        for ys in starts:
            for xs in starts:
                sub = patch_text_similarity(
                    features[:, ys : ys + 4, xs : xs + 4], bank
                ).values
                acc[:, ys : ys + 4, xs : xs + 4] += sub
                cover[ys : ys + 4, xs : xs + 4] += 1
        assert np.all(cover > 0)
        np.testing.assert_allclose(result, acc / cover[None], atol=1e-12)
        # per-location scoring makes overlap averaging a no-op
        direct = patch_text_similarity(features, bank).values
        np.testing.assert_allclose(result, direct, atol=1e-12)

    def test_clamped_last_window_gives_full_coverage(self):
        rng = np.random.default_rng(3)
        bank = make_bank(m=2, d=3)
        features = rng.normal(size=(3, 7, 7))
        result = sliding_window_infer(features, bank, window=4, stride=3)
        assert np.all(np.isfinite(result.values))

    def test_window_too_large_raises(self):
        bank = make_bank(m=2, d=3)
        with pytest.raises(ConfigError):
            sliding_window_infer(np.ones((3, 4, 4)), bank, window=5, stride=1)


class TestMiou:
    def test_perfect_prediction(self):
        labels = np.arange(9).reshape(3, 3) % 3
        seg = SegmentationMap(labels=labels)
        score, table = miou(seg, SegmentationMap(labels=labels.copy()), 3)
        assert score == 1.0
        assert set(table) == {0, 1, 2}

    def test_disjoint_single_class_maps(self):
        pred = SegmentationMap(labels=np.zeros((4, 4), dtype=int))
        gt = SegmentationMap(labels=np.ones((4, 4), dtype=int))
        score, table = miou(pred, gt, 2)
        assert table == {0: 0.0, 1: 0.0}
        assert score == 0.0

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_counting_oracle(self, seed):
        rng = np.random.default_rng(seed)
        pred = SegmentationMap(labels=rng.integers(0, 3, (8, 8)))
        gt = SegmentationMap(labels=rng.integers(0, 3, (8, 8)))
        score, table = miou(pred, gt, 3)
        expected = miou_counts(pred.labels, gt.labels, 3, ignore_label=-1)
        assert set(table) == set(expected)
        for k, v in expected.items():
            assert abs(table[k] - v) < 1e-12
        assert abs(score - np.mean(list(expected.values()))) < 1e-12

    def test_ignore_label_pixels_are_excluded(self):
        pred = SegmentationMap(labels=np.zeros((2, 2), dtype=int))
        gt = SegmentationMap(labels=np.array([[0, 255], [255, 0]]))
        score, table = miou(pred, gt, 2, ignore_label=255)
        assert table == {0: 1.0}
        assert score == 1.0

    def test_absent_classes_excluded_from_mean(self):
        pred = SegmentationMap(labels=np.zeros((2, 2), dtype=int))
        gt = SegmentationMap(labels=np.zeros((2, 2), dtype=int))
        score, table = miou(pred, gt, 5)
        assert set(table) == {0}
        assert score == 1.0

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(11)
        pred = rng.integers(0, 4, (6, 6))
        gt = rng.integers(0, 4, (6, 6))
        _, base = miou(SegmentationMap(labels=pred), SegmentationMap(labels=gt), 4)
        perm = np.array([2, 0, 3, 1])
        _, permuted = miou(
            SegmentationMap(labels=perm[pred]), SegmentationMap(labels=perm[gt]), 4
        )
        for k, v in base.items():
            assert abs(permuted[perm[k]] - v) < 1e-12

    def test_transposed_confusion_gives_same_table(self):
        rng = np.random.default_rng(12)
        pred = rng.integers(0, 3, (5, 5))
        gt = rng.integers(0, 3, (5, 5))
        _, forward = miou(SegmentationMap(labels=pred), SegmentationMap(labels=gt), 3)
        _, swapped = miou(SegmentationMap(labels=gt), SegmentationMap(labels=pred), 3)
        assert forward == swapped

    def test_dim_mismatch(self):
        with pytest.raises(ValidationError):
            miou(
                SegmentationMap(labels=np.zeros((2, 2), dtype=int)),
                SegmentationMap(labels=np.zeros((3, 3), dtype=int)),
                2,
            )


class TestSegmapFormat:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        seg = SegmentationMap(labels=rng.integers(0, 5, (4, 7)))
        path = tmp_path / "map.segmap"
        write_segmap(path, seg)
        back = read_segmap(path)
        np.testing.assert_array_equal(back.labels, seg.labels)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.segmap"
        path.write_text("NOTAMAP\n2 2\n0 0\n0 0\n")
        from patchseg.errors import FormatError

        with pytest.raises(FormatError):
            read_segmap(path)
