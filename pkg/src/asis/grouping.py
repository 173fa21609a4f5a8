"""Instance grouping: mean-shift clustering and cross-block merging.

Clustering runs in embedding space with a flat kernel: every point
seeds a mode, each iteration moves a mode to the mean of the points
within the Euclidean bandwidth, and converged modes closer than the
merge radius collapse into one cluster. Cluster ids are dense integers
ordered by each cluster's first member point.

Scenes are predicted block by block, so per-block instance ids must be
reconciled. A voxel grid over the scene records which global instance
first claimed each voxel; a block instance joins the global instance it
overlaps most, if that overlap fraction reaches the threshold, and
otherwise becomes a new global instance. Points sampled by several
blocks follow the block whose center lies nearest.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class MeanShiftConfig:
    """Flat-kernel mean-shift settings (Euclidean distances)."""

    bandwidth: float = 0.6
    max_iterations: int = 300
    convergence_tol: float = 1e-4
    mode_merge_radius: float | None = None  # defaults to bandwidth / 2

    def __post_init__(self):
        if self.bandwidth <= 0.0 or self.max_iterations < 1 or self.convergence_tol <= 0.0:
            raise ValueError("bandwidth, max_iterations and convergence_tol must be positive")

    @property
    def merge_radius(self) -> float:
        return self.bandwidth / 2.0 if self.mode_merge_radius is None else self.mode_merge_radius


def mean_shift(points: np.ndarray, config: MeanShiftConfig = MeanShiftConfig()) -> np.ndarray:
    """Cluster rows of ``points``; returns dense cluster ids per row.

    Every point is a seed. A seed stops once its mode moves less than
    the convergence tolerance or after ``max_iterations`` rounds.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] < 1:
        raise ValueError("mean_shift expects a non-empty (N, D) matrix")
    if not np.isfinite(points).all():
        raise ValueError("mean_shift expects finite points")
    n = points.shape[0]
    radius_sq = config.bandwidth * config.bandwidth
    modes = points.copy()
    active = np.arange(n)
    chunk = max(1, min(512, int(2**22 // max(n, 1))))
    for _ in range(config.max_iterations):
        if active.size == 0:
            break
        moved = np.empty(active.size, dtype=np.float64)
        for start in range(0, active.size, chunk):
            rows = active[start:start + chunk]
            current = modes[rows]
            dist_sq = ((current[:, None, :] - points[None, :, :]) ** 2).sum(axis=2)
            within = dist_sq <= radius_sq
            counts = within.sum(axis=1)
            # every mode is within its own kernel, so counts >= 1
            means = (within @ points) / counts[:, None]
            moved[start:start + chunk] = np.sqrt(((means - current) ** 2).sum(axis=1))
            modes[rows] = means
        active = active[moved >= config.convergence_tol]

    labels = np.empty(n, dtype=np.int64)
    centers: list[np.ndarray] = []
    merge_sq = config.merge_radius ** 2
    for i in range(n):
        assigned = -1
        for cid, center in enumerate(centers):
            if ((modes[i] - center) ** 2).sum() <= merge_sq:
                assigned = cid
                break
        if assigned < 0:
            centers.append(modes[i])
            assigned = len(centers) - 1
        labels[i] = assigned
    return labels


@dataclass
class InstanceSegmentation:
    """Per-point instance ids plus one semantic class per instance."""

    instance_ids: np.ndarray      # (N,) int64 >= 0
    instance_classes: np.ndarray  # (n_instances,) int64

    def __post_init__(self):
        self.instance_ids = np.asarray(self.instance_ids, dtype=np.int64)
        self.instance_classes = np.asarray(self.instance_classes, dtype=np.int64)
        if self.instance_ids.ndim != 1 or self.instance_classes.ndim != 1:
            raise ValueError("instance ids and classes must be 1-D")
        if self.instance_ids.size and (
            self.instance_ids.min() < 0
            or self.instance_ids.max() >= self.instance_classes.size
        ):
            raise ValueError("every instance id needs a class entry")

    @property
    def n_instances(self) -> int:
        return self.instance_classes.size

    def point_classes(self) -> np.ndarray:
        """Semantic class per point, broadcast from its instance."""
        return self.instance_classes[self.instance_ids]


def assign_instance_classes(cluster_ids: np.ndarray, semantic_labels: np.ndarray,
                            n_classes: int) -> InstanceSegmentation:
    """Give every cluster the most common semantic label of its members.

    Ties break toward the smaller class index. Cluster ids must already
    be dense from 0.
    """
    cluster_ids = np.asarray(cluster_ids, dtype=np.int64)
    semantic_labels = np.asarray(semantic_labels, dtype=np.int64)
    if cluster_ids.shape != semantic_labels.shape or cluster_ids.ndim != 1:
        raise ValueError("cluster ids and labels must be matching 1-D arrays")
    if cluster_ids.size == 0:
        raise ValueError("at least one point is required")
    n_clusters = int(cluster_ids.max()) + 1
    if set(np.unique(cluster_ids)) != set(range(n_clusters)):
        raise ValueError("cluster ids must be dense from 0")
    if semantic_labels.min() < 0 or semantic_labels.max() >= n_classes:
        raise ValueError("semantic labels outside [0, n_classes)")
    classes = np.empty(n_clusters, dtype=np.int64)
    for cid in range(n_clusters):
        votes = np.bincount(semantic_labels[cluster_ids == cid], minlength=n_classes)
        classes[cid] = int(votes.argmax())
    return InstanceSegmentation(cluster_ids, classes)


@dataclass(frozen=True)
class MergeConfig:
    """Voxel size and overlap threshold for cross-block merging."""

    voxel_size: float = 0.05
    overlap_threshold: float = 0.3

    def __post_init__(self):
        if self.voxel_size <= 0.0 or not (0.0 < self.overlap_threshold <= 1.0):
            raise ValueError("voxel_size must be positive, threshold in (0, 1]")


@dataclass
class BlockResult:
    """One block's clustering output in scene coordinates."""

    origin: np.ndarray           # (2,) window origin on the ground plane
    source_indices: np.ndarray   # (S,) scene point index per sample
    instance_ids: np.ndarray     # (S,) local instance id per sample
    n_instances: int


def block_merge(
    positions: np.ndarray,
    blocks: list[BlockResult],
    point_semantics: np.ndarray,
    block_size: float = 1.0,
    config: MergeConfig = MergeConfig(),
) -> InstanceSegmentation:
    """Fuse per-block instance ids into one scene-level segmentation.

    Blocks are processed in ascending origin order. Per-point ids come
    from the covering block with the nearest center; points no block
    sampled fall back to their voxel's owner and then to the nearest
    sampled point. Instance classes are the mode of ``point_semantics``
    over each instance's members, ties toward the smaller class.
    """
    positions = np.asarray(positions, dtype=np.float64)
    point_semantics = np.asarray(point_semantics, dtype=np.int64)
    n = positions.shape[0]
    if positions.ndim != 2 or positions.shape[1] != 3:
        raise ValueError("positions must be (N, 3)")
    if point_semantics.shape != (n,):
        raise ValueError("one semantic label per point required")
    if not blocks:
        raise ValueError("block_merge needs at least one block")

    origins = np.stack([np.asarray(b.origin, dtype=np.float64) for b in blocks])
    order = np.lexsort((origins[:, 1], origins[:, 0]))

    lo = positions.min(axis=0)
    voxel = np.floor((positions - lo) / config.voxel_size).astype(np.int64)
    dims = voxel.max(axis=0) + 1
    linear_voxel = (voxel[:, 0] * dims[1] + voxel[:, 1]) * dims[2] + voxel[:, 2]

    owner: dict[int, int] = {}
    next_global = 0
    global_of_block: list[np.ndarray] = [np.empty(0, dtype=np.int64)] * len(blocks)
    for rank, b_idx in enumerate(order):
        block = blocks[b_idx]
        mapping = np.empty(block.n_instances, dtype=np.int64)
        for local in range(block.n_instances):
            members = block.source_indices[block.instance_ids == local]
            voxels = np.unique(linear_voxel[members])
            counts: dict[int, int] = {}
            for v in voxels.tolist():
                gid = owner.get(v, -1)
                if gid >= 0:
                    counts[gid] = counts.get(gid, 0) + 1
            best_gid = -1
            best_count = 0
            for gid in sorted(counts):
                if counts[gid] > best_count:
                    best_gid = gid
                    best_count = counts[gid]
            if voxels.size and best_count / voxels.size >= config.overlap_threshold:
                target = best_gid
            else:
                target = next_global
                next_global += 1
            mapping[local] = target
            for v in voxels.tolist():
                if v not in owner:
                    owner[v] = target
        global_of_block[b_idx] = mapping

    # vote per point: among covering blocks, nearest block center wins
    labels = np.full(n, -1, dtype=np.int64)
    best_dist = np.full(n, np.inf)
    half = 0.5 * block_size
    for rank, b_idx in enumerate(order):
        block = blocks[b_idx]
        center = origins[b_idx] + half
        src = block.source_indices
        dist = ((positions[src, :2] - center) ** 2).sum(axis=1)
        better = dist < best_dist[src]
        rows = src[better]
        labels[rows] = global_of_block[b_idx][block.instance_ids[better]]
        best_dist[rows] = dist[better]

    unlabeled = np.flatnonzero(labels < 0)
    if unlabeled.size:
        for p in unlabeled:
            gid = owner.get(int(linear_voxel[p]), -1)
            labels[p] = gid
    still = np.flatnonzero(labels < 0)
    if still.size:
        have = np.flatnonzero(labels >= 0)
        if have.size == 0:
            raise ValueError("block_merge produced no labeled points")
        for p in still:
            delta = positions[have] - positions[p]
            nearest = have[int(((delta ** 2).sum(axis=1)).argmin())]
            labels[p] = labels[nearest]

    # densify ids by first-member order and derive classes by majority
    first_seen: dict[int, int] = {}
    for p in range(n):
        gid = int(labels[p])
        if gid not in first_seen:
            first_seen[gid] = len(first_seen)
    dense = np.array([first_seen[int(g)] for g in labels], dtype=np.int64)
    n_instances = len(first_seen)
    n_classes = int(point_semantics.max()) + 1
    classes = np.empty(n_instances, dtype=np.int64)
    for cid in range(n_instances):
        votes = np.bincount(point_semantics[dense == cid], minlength=n_classes)
        classes[cid] = int(votes.argmax())
    return InstanceSegmentation(dense, classes)
