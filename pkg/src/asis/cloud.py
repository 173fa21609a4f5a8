"""Labeled point clouds: file format, room normalization, block windows.

A scene file is plain text. The first line is ``asis-scene v1 <n_points>
<n_classes>``; each following line holds one point as ``x y z r g b sem
inst``. Colors live in [0, 1], semantic labels in [0, n_classes), and an
instance id of -1 marks an unlabeled point.

Scenes are cut into overlapping square windows on the ground plane (the
xy plane; z is height). Each kept window is subsampled to a fixed point
count and carries 9 features per point: raw xyz, rgb, and xyz normalized
to the room bounding box.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataFormatError

SCENE_HEADER = "asis-scene v1"


@dataclass
class LabeledCloud:
    """Points with colors plus per-point semantic and instance labels."""

    positions: np.ndarray       # (N, 3) float64
    colors: np.ndarray          # (N, 3) float64 in [0, 1]
    semantic_labels: np.ndarray  # (N,) int64 in [0, n_classes) or -1
    instance_ids: np.ndarray    # (N,) int64, -1 marks unlabeled
    n_classes: int

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.colors = np.asarray(self.colors, dtype=np.float64)
        self.semantic_labels = np.asarray(self.semantic_labels, dtype=np.int64)
        self.instance_ids = np.asarray(self.instance_ids, dtype=np.int64)
        n = len(self)
        if self.positions.shape != (n, 3) or self.colors.shape != (n, 3):
            raise ValueError("positions and colors must both be (N, 3)")
        if self.semantic_labels.shape != (n,) or self.instance_ids.shape != (n,):
            raise ValueError("labels must be 1-D with one entry per point")
        if n == 0:
            raise ValueError("a cloud needs at least one point")
        if self.n_classes < 1:
            raise ValueError("n_classes must be positive")
        if not np.isfinite(self.positions).all() or not np.isfinite(self.colors).all():
            raise ValueError("positions and colors must be finite")
        if self.colors.min() < 0.0 or self.colors.max() > 1.0:
            raise ValueError("colors must lie in [0, 1]")
        bad_sem = (self.semantic_labels < -1) | (self.semantic_labels >= self.n_classes)
        if bad_sem.any():
            raise ValueError("semantic labels must lie in [0, n_classes) or be -1")
        if (self.instance_ids < -1).any():
            raise ValueError("instance ids must be >= -1")

    def __len__(self) -> int:
        return self.positions.shape[0]

    def check_instance_consistency(self) -> None:
        """Require every instance id to carry exactly one semantic class."""
        labeled = self.instance_ids >= 0
        for inst in np.unique(self.instance_ids[labeled]):
            classes = np.unique(self.semantic_labels[labeled & (self.instance_ids == inst)])
            if classes.size != 1:
                raise ValueError(f"instance {inst} spans classes {classes.tolist()}")


def write_scene(path, cloud: LabeledCloud) -> None:
    """Write a cloud in scene text format with six decimals per real."""
    lines = [f"{SCENE_HEADER} {len(cloud)} {cloud.n_classes}"]
    for p, c, s, i in zip(cloud.positions, cloud.colors, cloud.semantic_labels, cloud.instance_ids):
        lines.append(
            f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {c[0]:.6f} {c[1]:.6f} {c[2]:.6f} {int(s)} {int(i)}"
        )
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def read_scene(path) -> LabeledCloud:
    """Parse a scene file; malformed content raises DataFormatError with a line number."""
    with open(path, "r", encoding="ascii") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DataFormatError(f"{path}: empty file")
    head = lines[0].split()
    if len(head) != 4 or " ".join(head[:2]) != SCENE_HEADER:
        raise DataFormatError(f"{path}: line 1: expected header {SCENE_HEADER!r} <n_points> <n_classes>")
    try:
        n_points = int(head[2])
        n_classes = int(head[3])
    except ValueError as exc:
        raise DataFormatError(f"{path}: line 1: point/class counts must be integers") from exc
    if n_points < 1 or n_classes < 1:
        raise DataFormatError(f"{path}: line 1: counts must be positive")
    body = [ln for ln in lines[1:] if ln.strip() != ""]
    if len(body) != n_points:
        raise DataFormatError(f"{path}: header declares {n_points} points, file has {len(body)}")
    positions = np.empty((n_points, 3), dtype=np.float64)
    colors = np.empty((n_points, 3), dtype=np.float64)
    semantic = np.empty(n_points, dtype=np.int64)
    instance = np.empty(n_points, dtype=np.int64)
    for row, line in enumerate(body):
        lineno = row + 2
        fields = line.split()
        if len(fields) != 8:
            raise DataFormatError(f"{path}: line {lineno}: expected 8 fields, got {len(fields)}")
        try:
            reals = [float(x) for x in fields[:6]]
            sem = int(fields[6])
            inst = int(fields[7])
        except ValueError as exc:
            raise DataFormatError(f"{path}: line {lineno}: unreadable field") from exc
        if not all(np.isfinite(reals)):
            raise DataFormatError(f"{path}: line {lineno}: non-finite coordinate")
        if not (0.0 <= reals[3] <= 1.0 and 0.0 <= reals[4] <= 1.0 and 0.0 <= reals[5] <= 1.0):
            raise DataFormatError(f"{path}: line {lineno}: color outside [0, 1]")
        if sem < -1 or sem >= n_classes:
            raise DataFormatError(
                f"{path}: line {lineno}: semantic label {sem} outside [0, {n_classes})"
            )
        if inst < -1:
            raise DataFormatError(f"{path}: line {lineno}: instance id {inst} below -1")
        positions[row] = reals[:3]
        colors[row] = reals[3:6]
        semantic[row] = sem
        instance[row] = inst
    return LabeledCloud(positions, colors, semantic, instance, n_classes)


def normalize_positions(positions: np.ndarray) -> np.ndarray:
    """Map positions into [0, 1] per axis over their bounding box.

    Axes with zero extent map to 0.
    """
    positions = np.asarray(positions, dtype=np.float64)
    lo = positions.min(axis=0)
    span = positions.max(axis=0) - lo
    safe = np.where(span > 0.0, span, 1.0)
    out = (positions - lo) / safe
    out[:, span == 0.0] = 0.0
    return out


@dataclass
class BlockWindow:
    """One ground-plane window: its xy origin and the point indices inside."""

    origin: np.ndarray   # (2,) window min corner on the ground plane
    indices: np.ndarray  # (M,) point indices, ascending


def split_blocks(
    cloud: LabeledCloud,
    block_size: float = 1.0,
    stride: float | None = None,
    min_points: int = 100,
) -> list[BlockWindow]:
    """Cut the scene into overlapping xy windows of side ``block_size``.

    Window origins advance by ``stride`` (default half the block size)
    from the xy minimum until the windows cover the xy maximum. Windows
    with fewer than ``min_points`` points are dropped. Window membership
    is inclusive on both edges, so overlapping windows share points.
    """
    if block_size <= 0.0:
        raise ValueError("block_size must be positive")
    if stride is None:
        stride = 0.5 * block_size
    if stride <= 0.0:
        raise ValueError("stride must be positive")
    xy = cloud.positions[:, :2]
    lo = xy.min(axis=0)
    hi = xy.max(axis=0)

    def axis_origins(a_lo: float, a_hi: float) -> np.ndarray:
        origins = [a_lo]
        while origins[-1] + block_size < a_hi:
            origins.append(origins[-1] + stride)
        return np.asarray(origins)

    blocks: list[BlockWindow] = []
    for ox in axis_origins(lo[0], hi[0]):
        for oy in axis_origins(lo[1], hi[1]):
            inside = (
                (xy[:, 0] >= ox)
                & (xy[:, 0] <= ox + block_size)
                & (xy[:, 1] >= oy)
                & (xy[:, 1] <= oy + block_size)
            )
            indices = np.flatnonzero(inside)
            if indices.size >= min_points:
                blocks.append(BlockWindow(np.array([ox, oy]), indices))
    return blocks


@dataclass
class Block:
    """A fixed-size sample of one window, ready for the network."""

    features: np.ndarray         # (S, 9): xyz, rgb, room-normalized xyz
    source_indices: np.ndarray   # (S,) indices into the parent cloud
    origin: np.ndarray           # (2,) window origin

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[1] != 9:
            raise ValueError("block features must be (S, 9)")
        if self.source_indices.shape != (self.features.shape[0],):
            raise ValueError("one source index per sampled point required")


def sample_block(
    cloud: LabeledCloud,
    indices: np.ndarray,
    sample_size: int = 512,
    seed: int | np.random.SeedSequence = 0,
    origin: np.ndarray | None = None,
    normalized: np.ndarray | None = None,
) -> Block:
    """Draw a fixed-size point sample from one window.

    Windows with at least ``sample_size`` points are sampled without
    replacement, smaller ones with replacement. ``normalized`` may carry
    precomputed room-normalized coordinates for the whole cloud;
    otherwise they are derived here.
    """
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size == 0:
        raise ValueError("cannot sample an empty window")
    if sample_size < 1:
        raise ValueError("sample_size must be positive")
    rng = np.random.default_rng(seed)
    replace = indices.size < sample_size
    chosen = rng.choice(indices, size=sample_size, replace=replace)
    if normalized is None:
        normalized = normalize_positions(cloud.positions)
    features = np.concatenate(
        [cloud.positions[chosen], cloud.colors[chosen], normalized[chosen]], axis=1
    )
    if origin is None:
        origin = cloud.positions[chosen, :2].min(axis=0)
    return Block(features, chosen, np.asarray(origin, dtype=np.float64))
