"""Mean-shift clustering, per-cluster classes, and cross-block merging."""
import numpy as np
import pytest

from asis.grouping import (
    BlockResult,
    InstanceSegmentation,
    MeanShiftConfig,
    MergeConfig,
    assign_instance_classes,
    block_merge,
    mean_shift,
)


def _blobs(rng, centers, per_blob, sigma):
    points = []
    truth = []
    for i, center in enumerate(centers):
        points.append(rng.normal(loc=center, scale=sigma, size=(per_blob, len(center))))
        truth.append(np.full(per_blob, i))
    return np.concatenate(points), np.concatenate(truth)


def _same_partition(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    pairs_a = a[:, None] == a[None, :]
    pairs_b = b[:, None] == b[None, :]
    return bool((pairs_a == pairs_b).all())


class TestMeanShift:
    def test_recovers_separated_blobs(self):
        rng = np.random.default_rng(40)
        for trial in range(10):
            k = int(rng.integers(2, 6))
            dim = int(rng.integers(2, 6))
            centers = rng.normal(size=(k, dim)) * 6.0
            if np.min(
                np.abs(centers[:, None, :] - centers[None, :, :]).sum(axis=2)
                + np.eye(k) * 1e9
            ) < 3.0:
                continue  # blobs too close for a clean truth assignment
            points, truth = _blobs(rng, centers, per_blob=25, sigma=0.08)
            labels = mean_shift(points, MeanShiftConfig(bandwidth=0.6))
            assert labels.max() + 1 == k
            assert _same_partition(labels, truth)

    def test_ids_dense_and_ordered_by_first_member(self):
        points = np.array([[0.0], [5.0], [0.1], [5.1], [10.0]])
        labels = mean_shift(points, MeanShiftConfig(bandwidth=0.5))
        np.testing.assert_array_equal(labels, [0, 1, 0, 1, 2])

    def test_single_point(self):
        labels = mean_shift(np.array([[3.0, 4.0]]), MeanShiftConfig(bandwidth=1.0))
        np.testing.assert_array_equal(labels, [0])

    def test_wide_bandwidth_merges_everything(self):
        rng = np.random.default_rng(41)
        points = rng.uniform(0.0, 1.0, size=(30, 3))
        labels = mean_shift(points, MeanShiftConfig(bandwidth=50.0))
        np.testing.assert_array_equal(labels, 0)

    def test_mode_merge_radius_controls_collapse(self):
        points = np.concatenate([np.zeros((5, 1)), np.full((5, 1), 1.0)])
        tight = mean_shift(points, MeanShiftConfig(bandwidth=0.4, mode_merge_radius=0.2))
        assert tight.max() == 1
        loose = mean_shift(points, MeanShiftConfig(bandwidth=0.4, mode_merge_radius=1.5))
        assert loose.max() == 0

    def test_input_validation(self):
        with pytest.raises(ValueError):
            mean_shift(np.zeros((0, 2)))
        with pytest.raises(ValueError):
            mean_shift(np.array([[np.nan, 0.0]]))
        with pytest.raises(ValueError):
            MeanShiftConfig(bandwidth=0.0)
        with pytest.raises(ValueError):
            MeanShiftConfig(bandwidth=1.0, convergence_tol=0.0)


class TestAssignInstanceClasses:
    def test_majority_vote(self):
        seg = assign_instance_classes(
            np.array([0, 0, 0, 1, 1]), np.array([2, 2, 1, 3, 3]), n_classes=4
        )
        np.testing.assert_array_equal(seg.instance_classes, [2, 3])
        np.testing.assert_array_equal(seg.point_classes(), [2, 2, 2, 3, 3])

    def test_tie_breaks_to_smaller_class(self):
        seg = assign_instance_classes(
            np.array([0, 0, 0, 0]), np.array([2, 1, 2, 1]), n_classes=4
        )
        np.testing.assert_array_equal(seg.instance_classes, [1])

    def test_requires_dense_ids(self):
        with pytest.raises(ValueError):
            assign_instance_classes(np.array([0, 2]), np.array([0, 0]), n_classes=2)

    def test_label_and_shape_validation(self):
        with pytest.raises(ValueError):
            assign_instance_classes(np.array([0, 1]), np.array([0]), n_classes=2)
        with pytest.raises(ValueError):
            assign_instance_classes(np.array([0]), np.array([5]), n_classes=2)

    def test_segmentation_contract(self):
        with pytest.raises(ValueError):
            InstanceSegmentation(np.array([0, 2]), np.array([1, 1]))


def _line_positions(xs, y=0.5):
    pts = np.zeros((len(xs), 3))
    pts[:, 0] = np.asarray(xs)
    pts[:, 1] = y
    return pts


class TestBlockMerge:
    def test_overlapping_instance_reunites(self):
        # One object crosses two blocks; the strip both blocks sample
        # makes the second block adopt the first block's instance.
        xs = np.arange(10) * 0.1 + 0.025
        positions = _line_positions(xs)
        sems = np.zeros(10, dtype=np.int64)
        block_a = BlockResult(np.array([0.0, 0.0]), np.arange(0, 7),
                              np.zeros(7, dtype=np.int64), 1)
        block_b = BlockResult(np.array([0.5, 0.0]), np.arange(3, 10),
                              np.zeros(7, dtype=np.int64), 1)
        seg = block_merge(positions, [block_a, block_b], sems,
                          block_size=1.0, config=MergeConfig(voxel_size=0.1))
        assert seg.n_instances == 1
        np.testing.assert_array_equal(seg.instance_ids, 0)

    def test_disjoint_blocks_stay_separate(self):
        xs = np.concatenate([np.arange(5) * 0.1, np.arange(5) * 0.1 + 2.0])
        positions = _line_positions(xs)
        sems = np.array([0] * 5 + [1] * 5, dtype=np.int64)
        block_a = BlockResult(np.array([0.0, 0.0]), np.arange(0, 5),
                              np.zeros(5, dtype=np.int64), 1)
        block_b = BlockResult(np.array([2.0, 0.0]), np.arange(5, 10),
                              np.zeros(5, dtype=np.int64), 1)
        seg = block_merge(positions, [block_a, block_b], sems,
                          block_size=1.0, config=MergeConfig(voxel_size=0.1))
        assert seg.n_instances == 2
        np.testing.assert_array_equal(seg.instance_ids, [0] * 5 + [1] * 5)
        np.testing.assert_array_equal(seg.instance_classes, [0, 1])

    def test_overlap_threshold_gates_the_merge(self):
        # Second block shares 2 of its 6 voxels with the first: fraction
        # 1/3 merges at threshold 0.3 but not at 0.4.
        xs = np.arange(10) * 0.1 + 0.025
        positions = _line_positions(xs)
        sems = np.zeros(10, dtype=np.int64)
        block_a = BlockResult(np.array([0.0, 0.0]), np.arange(0, 6),
                              np.zeros(6, dtype=np.int64), 1)
        block_b = BlockResult(np.array([0.4, 0.0]), np.arange(4, 10),
                              np.zeros(6, dtype=np.int64), 1)
        merged = block_merge(positions, [block_a, block_b], sems,
                             block_size=1.0,
                             config=MergeConfig(voxel_size=0.1, overlap_threshold=0.3))
        assert merged.n_instances == 1
        split = block_merge(positions, [block_a, block_b], sems,
                            block_size=1.0,
                            config=MergeConfig(voxel_size=0.1, overlap_threshold=0.4))
        assert split.n_instances == 2

    def test_shared_points_follow_nearest_block_center(self):
        # Blocks at origins 0 and 0.5 both sample every point but draw
        # the instance boundary at different places. Both block B locals
        # inherit block A's global ids through voxel ownership, yet each
        # point takes the id of the nearer block center, so point 0.8
        # follows block B's boundary, not block A's.
        xs = np.array([0.6, 0.7, 0.8, 0.9])
        positions = _line_positions(xs)
        sems = np.zeros(4, dtype=np.int64)
        block_a = BlockResult(np.array([0.0, 0.0]), np.arange(4),
                              np.array([0, 0, 1, 1]), 2)
        block_b = BlockResult(np.array([0.5, 0.0]), np.arange(4),
                              np.array([0, 0, 0, 1]), 2)
        seg = block_merge(positions, [block_a, block_b], sems,
                          block_size=1.0,
                          config=MergeConfig(voxel_size=0.01, overlap_threshold=0.3))
        np.testing.assert_array_equal(seg.instance_ids, [0, 0, 0, 1])

    def test_unsampled_points_inherit_labels(self):
        xs = np.array([0.05, 0.15, 0.25, 0.051, 5.0])
        positions = _line_positions(xs)
        positions[4, 1] = 0.5
        sems = np.zeros(5, dtype=np.int64)
        block = BlockResult(np.array([0.0, 0.0]), np.arange(3),
                            np.zeros(3, dtype=np.int64), 1)
        seg = block_merge(positions, [block], sems,
                          block_size=1.0, config=MergeConfig(voxel_size=0.1))
        # point 3 shares a voxel with point 0; point 4 is far away and
        # falls back to its nearest labeled neighbor
        assert seg.instance_ids[3] == seg.instance_ids[0]
        assert seg.instance_ids[4] == seg.instance_ids[2]
        assert seg.n_instances == 1

    def test_classes_are_majority_of_members(self):
        xs = np.arange(4) * 0.1
        positions = _line_positions(xs)
        sems = np.array([2, 2, 1, 2], dtype=np.int64)
        block = BlockResult(np.array([0.0, 0.0]), np.arange(4),
                            np.zeros(4, dtype=np.int64), 1)
        seg = block_merge(positions, [block], sems,
                          block_size=1.0, config=MergeConfig(voxel_size=0.1))
        np.testing.assert_array_equal(seg.instance_classes, [2])

    def test_validation(self):
        with pytest.raises(ValueError):
            block_merge(np.zeros((3, 3)), [], np.zeros(3, dtype=np.int64))
        with pytest.raises(ValueError):
            block_merge(np.zeros((3, 2)), [BlockResult(np.zeros(2), np.arange(3),
                        np.zeros(3, dtype=np.int64), 1)], np.zeros(3, dtype=np.int64))
        with pytest.raises(ValueError):
            MergeConfig(voxel_size=-1.0)
        with pytest.raises(ValueError):
            MergeConfig(overlap_threshold=0.0)

    def test_deterministic(self):
        rng = np.random.default_rng(42)
        positions = rng.uniform(0.0, 2.0, size=(60, 3))
        sems = rng.integers(0, 3, size=60)
        blocks = []
        for i, ox in enumerate((0.0, 0.5, 1.0)):
            inside = np.flatnonzero(
                (positions[:, 0] >= ox) & (positions[:, 0] <= ox + 1.0)
            )
            blocks.append(BlockResult(
                np.array([ox, 0.0]), inside,
                rng.integers(0, 3, size=inside.size), 3,
            ))
        a = block_merge(positions, blocks, sems, 1.0, MergeConfig())
        b = block_merge(positions, blocks, sems, 1.0, MergeConfig())
        np.testing.assert_array_equal(a.instance_ids, b.instance_ids)
        np.testing.assert_array_equal(a.instance_classes, b.instance_classes)
