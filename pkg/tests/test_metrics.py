"""Instance and semantic metrics: frozen cases, oracles, pooling."""
import numpy as np
import pytest

from asis.checks import check_metric_oracles, oracle_coverage, oracle_prec_recall, random_region_sets
from asis.metrics import (
    MetricsAccumulator,
    Region,
    confusion_matrix,
    coverage,
    coverage_per_class,
    iou,
    prec_recall,
    regions_from_labels,
    semantic_scores,
)


class TestIoU:
    def test_frozen_values(self):
        np.testing.assert_allclose(iou([0, 1], [0, 1, 2, 3]), 0.5, rtol=0, atol=0)
        np.testing.assert_allclose(iou([0, 1, 2], [0, 1, 2]), 1.0, rtol=0, atol=0)
        np.testing.assert_allclose(iou([0, 1], [2, 3]), 0.0, rtol=0, atol=0)

    def test_symmetric(self):
        rng = np.random.default_rng(50)
        for _ in range(5):
            a = rng.choice(40, size=rng.integers(1, 20), replace=False)
            b = rng.choice(40, size=rng.integers(1, 20), replace=False)
            assert iou(a, b) == iou(b, a)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            iou(np.array([], dtype=np.int64), np.array([], dtype=np.int64))


class TestCoverage:
    def test_frozen_values(self):
        gt = [Region(np.arange(6), 0), Region(np.array([6, 7]), 1)]
        pred = [Region(np.arange(6), 0)]
        np.testing.assert_allclose(coverage(gt, pred), 0.5, rtol=0, atol=0)
        np.testing.assert_allclose(coverage(gt, pred, weighted=True), 0.75, rtol=0, atol=0)

    def test_empty_prediction_scores_zero(self):
        gt = [Region(np.arange(4), 0)]
        assert coverage(gt, []) == 0.0

    def test_matching_is_class_agnostic(self):
        gt = [Region(np.arange(4), 0)]
        pred = [Region(np.arange(4), 3)]
        assert coverage(gt, pred) == 1.0

    def test_equal_sizes_make_weighted_equal_plain(self):
        rng = np.random.default_rng(51)
        gt = [Region(np.arange(i * 10, (i + 1) * 10), 0) for i in range(5)]
        assignment = rng.integers(0, 4, size=50)
        pred = [Region(np.flatnonzero(assignment == i), 0) for i in range(4)]
        np.testing.assert_allclose(
            coverage(gt, pred), coverage(gt, pred, weighted=True), rtol=1e-12
        )

    def test_overlapping_regions_rejected(self):
        overlapping = [Region(np.arange(4), 0), Region(np.arange(2, 6), 0)]
        with pytest.raises(ValueError):
            coverage(overlapping, [])
        with pytest.raises(ValueError):
            coverage([Region(np.arange(4), 0)], overlapping)

    def test_needs_ground_truth(self):
        with pytest.raises(ValueError):
            coverage([], [Region(np.arange(4), 0)])

    def test_per_class_restriction(self):
        gt = [Region(np.arange(4), 0), Region(np.arange(4, 8), 1)]
        pred = [Region(np.arange(4), 2)]
        table = coverage_per_class(gt, pred)
        np.testing.assert_allclose(table[0], 1.0)
        np.testing.assert_allclose(table[1], 0.0)


class TestPrecRecall:
    def test_exact_match_counts(self):
        gt = [Region(np.arange(4), 0), Region(np.arange(4, 8), 0)]
        pred = [Region(np.arange(4), 0)]
        prec, rec, table = prec_recall(gt, pred)
        assert prec == 1.0
        assert rec == 0.5
        assert table[0] == (1.0, 0.5)

    def test_threshold_is_inclusive(self):
        gt = [Region(np.arange(4), 0)]
        pred = [Region(np.arange(2), 0)]  # IoU exactly 0.5
        prec, rec, _ = prec_recall(gt, pred, iou_threshold=0.5)
        assert (prec, rec) == (1.0, 1.0)

    def test_one_to_one_matching(self):
        gt = [Region(np.arange(8), 0)]
        pred = [Region(np.arange(6), 0), Region(np.arange(6, 8), 0)]
        prec, rec, _ = prec_recall(gt, pred)
        assert rec == 1.0
        assert prec == 0.5  # the second prediction cannot reuse the matched gt

    def test_class_without_predictions_skips_precision(self):
        gt = [Region(np.arange(4), 0), Region(np.arange(4, 8), 1)]
        pred = [Region(np.arange(4), 0)]
        prec, rec, table = prec_recall(gt, pred)
        assert prec == 1.0  # only class 0 contributes a precision term
        assert rec == 0.5
        assert table[1] == (-1.0, 0.0)

    def test_wrong_class_prediction_never_matches(self):
        gt = [Region(np.arange(4), 0)]
        pred = [Region(np.arange(4), 1)]
        prec, rec, _ = prec_recall(gt, pred)
        assert (prec, rec) == (0.0, 0.0)


class TestOracleEquivalence:
    def test_random_pairs_match_set_oracles(self):
        rng = np.random.default_rng(52)
        for _ in range(10):
            gt, pred = random_region_sets(rng)
            for weighted in (False, True):
                np.testing.assert_allclose(
                    coverage(gt, pred, weighted),
                    oracle_coverage(gt, pred, weighted),
                    rtol=0, atol=1e-12,
                )
            got = prec_recall(gt, pred)[:2]
            want = oracle_prec_recall(gt, pred)
            np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)

    def test_packaged_checker_is_clean(self):
        assert check_metric_oracles(seed=3, n_pairs=10) == []


class TestRegionsFromLabels:
    def test_majority_class_and_skip(self):
        regions = regions_from_labels(
            np.array([0, 0, 1, 1, 1, -1]), np.array([2, 3, 1, 1, 0, 3])
        )
        assert len(regions) == 2
        np.testing.assert_array_equal(regions[0].indices, [0, 1])
        assert regions[0].label == 2  # tie between 2 and 3 -> smaller
        assert regions[1].label == 1

    def test_offset_shifts_indices(self):
        regions = regions_from_labels(np.array([0, 0]), np.array([1, 1]), index_offset=100)
        np.testing.assert_array_equal(regions[0].indices, [100, 101])


class TestSemanticScores:
    def test_frozen_values(self):
        matrix = np.array([[2, 1], [0, 3]])
        scores = semantic_scores(matrix)
        np.testing.assert_allclose(scores["overall_accuracy"], 5.0 / 6.0, rtol=1e-15)
        np.testing.assert_allclose(scores["class_iou"][0], 2.0 / 3.0, rtol=1e-15)
        np.testing.assert_allclose(scores["class_iou"][1], 3.0 / 4.0, rtol=1e-15)
        np.testing.assert_allclose(scores["mean_iou"], (2 / 3 + 3 / 4) / 2, rtol=1e-15)
        np.testing.assert_allclose(scores["mean_accuracy"], (2 / 3 + 1.0) / 2, rtol=1e-15)

    def test_absent_class_excluded_from_means(self):
        matrix = np.zeros((3, 3), dtype=np.int64)
        matrix[0, 0] = 4
        matrix[1, 1] = 2
        matrix[1, 0] = 2
        scores = semantic_scores(matrix)
        assert np.isnan(scores["class_iou"][2])
        np.testing.assert_allclose(scores["mean_accuracy"], (1.0 + 0.5) / 2)

    def test_empty_matrix_rejected(self):
        with pytest.raises(ValueError):
            semantic_scores(np.zeros((3, 3)))


class TestConfusionMatrix:
    def test_counts_and_skip(self):
        matrix = confusion_matrix(
            np.array([0, 0, 1, -1]), np.array([0, 1, 1, 0]), n_classes=2
        )
        np.testing.assert_array_equal(matrix, [[1, 1], [0, 1]])

    def test_range_validation(self):
        with pytest.raises(ValueError):
            confusion_matrix(np.array([0, 2]), np.array([0, 0]), n_classes=2)
        with pytest.raises(ValueError):
            confusion_matrix(np.array([0, 0]), np.array([0, -1]), n_classes=2)


class TestAccumulator:
    def test_pooling_matches_manual_offsets(self):
        rng = np.random.default_rng(53)
        scenes = []
        for _ in range(3):
            n = int(rng.integers(30, 60))
            gt_sem = rng.integers(0, 3, size=n)
            gt_inst = rng.integers(0, 5, size=n)
            pred_sem = rng.integers(0, 3, size=n)
            pred_inst = rng.integers(0, 5, size=n)
            scenes.append((gt_sem, gt_inst, pred_sem, pred_inst))

        acc = MetricsAccumulator(n_classes=3)
        for scene in scenes:
            acc.add_scene(*scene)
        pooled = acc.compute()

        gt_all, pred_all = [], []
        offset = 0
        matrix = np.zeros((3, 3), dtype=np.int64)
        for gt_sem, gt_inst, pred_sem, pred_inst in scenes:
            gt_all.extend(regions_from_labels(gt_inst, gt_sem, offset))
            pred_all.extend(regions_from_labels(pred_inst, pred_sem, offset))
            matrix += confusion_matrix(gt_sem, pred_sem, 3)
            offset += gt_sem.size
        np.testing.assert_allclose(pooled.mean_coverage, coverage(gt_all, pred_all))
        np.testing.assert_allclose(
            pooled.mean_weighted_coverage, coverage(gt_all, pred_all, weighted=True)
        )
        prec, rec, _ = prec_recall(gt_all, pred_all)
        np.testing.assert_allclose((pooled.mean_precision, pooled.mean_recall), (prec, rec))
        sem = semantic_scores(matrix)
        np.testing.assert_allclose(pooled.mean_iou, sem["mean_iou"])
        np.testing.assert_allclose(pooled.overall_accuracy, sem["overall_accuracy"])

    def test_settings_metadata_present(self):
        acc = MetricsAccumulator(n_classes=2, iou_threshold=0.25)
        acc.add_scene(np.array([0, 1]), np.array([0, 1]), np.array([0, 1]), np.array([0, 1]))
        report = acc.compute()
        assert report.settings["iou_threshold"] == 0.25
        assert report.settings["n_classes"] == 2
        assert "matching" in report.settings

    def test_shape_validation(self):
        acc = MetricsAccumulator(n_classes=2)
        with pytest.raises(ValueError):
            acc.add_scene(np.array([0, 1]), np.array([0]), np.array([0, 1]), np.array([0, 1]))

    def test_report_serializes(self):
        acc = MetricsAccumulator(n_classes=2)
        acc.add_scene(np.array([0, 1]), np.array([0, 1]), np.array([0, 1]), np.array([0, 1]))
        report = acc.compute()
        payload = report.to_dict()
        assert set(report.SUMMARY_FIELDS) <= set(payload)
        table = report.format_table()
        for name in report.SUMMARY_FIELDS:
            assert name in table


class TestRelabelingInvariance:
    def test_instance_ids_are_nominal(self):
        rng = np.random.default_rng(54)
        n = 80
        gt_sem = rng.integers(0, 4, size=n)
        gt_inst = rng.integers(0, 6, size=n)
        pred_sem = rng.integers(0, 4, size=n)
        pred_inst = rng.integers(0, 6, size=n)
        perm = rng.permutation(6)
        acc_a = MetricsAccumulator(4)
        acc_a.add_scene(gt_sem, gt_inst, pred_sem, pred_inst)
        acc_b = MetricsAccumulator(4)
        acc_b.add_scene(gt_sem, gt_inst, pred_sem, perm[pred_inst])
        a, b = acc_a.compute(), acc_b.compute()
        for name in a.SUMMARY_FIELDS:
            np.testing.assert_allclose(getattr(a, name), getattr(b, name), rtol=1e-12)
