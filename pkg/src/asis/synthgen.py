"""Synthetic desk-scale room scenes with full instance ground truth.

A scene is a small room with four fixed object roles: one floor slab,
walls along the room sides, box-shaped furniture standing on the floor,
and thin panels mounted on walls. Panels overlap their wall's bounding
box slightly, so every scene contains adjacent instances of different
classes. Class ids follow catalogue order: 0 floor, 1 wall, 2 box,
3 panel.

All randomness flows from one seed; scene i of a dataset derives its
generator from (seed, i), so datasets are reproducible file for file.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cloud import LabeledCloud, write_scene
from .errors import DataFormatError

MANIFEST_NAME = "manifest.json"
CLASS_NAMES = ("floor", "wall", "box", "panel")


@dataclass(frozen=True)
class ClassSpec:
    """Instance counts, point budget and base color for one role."""

    count_range: tuple[int, int]
    points_range: tuple[int, int]
    base_color: tuple[float, float, float]

    def __post_init__(self):
        if not (0 <= self.count_range[0] <= self.count_range[1]):
            raise ValueError("count_range must be ordered and non-negative")
        if not (1 <= self.points_range[0] <= self.points_range[1]):
            raise ValueError("points_range must be ordered and positive")


DEFAULT_CLASSES = (
    ClassSpec((1, 1), (220, 280), (0.45, 0.45, 0.45)),   # floor
    ClassSpec((2, 3), (170, 230), (0.85, 0.82, 0.75)),   # wall
    ClassSpec((1, 2), (90, 140), (0.55, 0.30, 0.15)),    # box
    ClassSpec((1, 2), (60, 90), (0.10, 0.15, 0.40)),     # panel
)


@dataclass(frozen=True)
class SceneSpec:
    """Room extent, per-role settings and noise levels.

    The default room is 1.4 m square and 0.5 m tall, which the 1 m block
    protocol cuts into a 2 x 2 grid of overlapping windows.
    """

    extent: tuple[float, float, float] = (1.4, 1.4, 0.5)
    classes: tuple[ClassSpec, ...] = DEFAULT_CLASSES
    position_noise: float = 0.005
    color_noise: float = 0.02
    color_jitter: float = 0.10
    max_instances: int = 8
    wall_thickness: float = 0.04
    corner_gap: float = 0.12

    def __post_init__(self):
        if len(self.classes) != len(CLASS_NAMES):
            raise ValueError(f"exactly {len(CLASS_NAMES)} roles required: {CLASS_NAMES}")
        if min(self.extent) <= 0:
            raise ValueError("extent must be positive")
        if self.max_instances < 1:
            raise ValueError("max_instances must be positive")
        if self.position_noise < 0 or self.color_noise < 0 or self.color_jitter < 0:
            raise ValueError("noise levels must be non-negative")
        if self.wall_thickness <= 0 or self.corner_gap < 0:
            raise ValueError("wall_thickness must be positive, corner_gap non-negative")
        if 2 * self.corner_gap + 0.5 >= min(self.extent[0], self.extent[1]):
            raise ValueError("corner_gap leaves no room for wall runs")

    def to_dict(self) -> dict:
        return {
            "extent": list(self.extent),
            "classes": {
                name: {
                    "count_range": list(cs.count_range),
                    "points_range": list(cs.points_range),
                    "base_color": list(cs.base_color),
                }
                for name, cs in zip(CLASS_NAMES, self.classes)
            },
            "position_noise": self.position_noise,
            "color_noise": self.color_noise,
            "color_jitter": self.color_jitter,
            "max_instances": self.max_instances,
            "wall_thickness": self.wall_thickness,
            "corner_gap": self.corner_gap,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SceneSpec":
        known = {
            "extent", "classes", "position_noise", "color_noise",
            "color_jitter", "max_instances", "wall_thickness", "corner_gap",
        }
        unknown = set(data) - known
        if unknown:
            raise DataFormatError(f"unknown scene spec keys: {sorted(unknown)}")
        kwargs = dict(data)
        if "extent" in kwargs:
            kwargs["extent"] = tuple(float(v) for v in kwargs["extent"])
        if "classes" in kwargs:
            table = kwargs["classes"]
            missing = set(CLASS_NAMES) - set(table)
            if missing or set(table) != set(CLASS_NAMES):
                raise DataFormatError(f"scene spec classes must be exactly {CLASS_NAMES}")
            kwargs["classes"] = tuple(
                ClassSpec(
                    tuple(int(v) for v in table[name]["count_range"]),
                    tuple(int(v) for v in table[name]["points_range"]),
                    tuple(float(v) for v in table[name]["base_color"]),
                )
                for name in CLASS_NAMES
            )
        return cls(**kwargs)


def load_scene_spec(path) -> SceneSpec:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise DataFormatError(f"{path}: scene spec must be a JSON object")
    return SceneSpec.from_dict(data)


def _sample_slab(rng: np.random.Generator, lo: np.ndarray, hi: np.ndarray, n: int) -> np.ndarray:
    return rng.uniform(lo, hi, size=(n, 3))


def _sample_slab_with_holes(
    rng: np.random.Generator,
    lo: np.ndarray,
    hi: np.ndarray,
    n: int,
    run_axis: int,
    holes: tuple,
) -> np.ndarray:
    """Uniform slab points, skipping spans a mounted panel occludes.

    Each hole is (run_lo, run_hi, z_lo, z_hi) in the wall's run axis and
    height; a scanner never sees the wall behind a mounted board.
    """
    if not holes:
        return _sample_slab(rng, lo, hi, n)
    chunks: list[np.ndarray] = []
    have = 0
    while have < n:
        batch = rng.uniform(lo, hi, size=(max(n, 32), 3))
        keep = np.ones(batch.shape[0], dtype=bool)
        for run_lo, run_hi, z_lo, z_hi in holes:
            inside = (
                (batch[:, run_axis] >= run_lo) & (batch[:, run_axis] <= run_hi)
                & (batch[:, 2] >= z_lo) & (batch[:, 2] <= z_hi)
            )
            keep &= ~inside
        chunks.append(batch[keep])
        have += chunks[-1].shape[0]
    return np.concatenate(chunks)[:n]


def _sample_box_surface(rng: np.random.Generator, lo: np.ndarray, hi: np.ndarray, n: int) -> np.ndarray:
    """Uniform points on the visible surface of an axis-aligned box.

    Faces are weighted by area; the underside is never sampled since a
    desk scanner cannot see it.
    """
    size = hi - lo
    areas = np.array([
        size[1] * size[2], size[1] * size[2],   # x faces
        size[0] * size[2], size[0] * size[2],   # y faces
        0.0, size[0] * size[1],                 # z faces, underside hidden
    ])
    faces = rng.choice(6, size=n, p=areas / areas.sum())
    points = rng.uniform(lo, hi, size=(n, 3))
    axis = faces // 2
    side = faces % 2
    points[np.arange(n), axis] = np.where(side == 0, lo[axis], hi[axis])
    return points


def _wall_slabs(
    spec: SceneSpec, count: int, rng: np.random.Generator
) -> list[tuple[np.ndarray, np.ndarray, int]]:
    """Thin wall boxes as (lo, hi, normal_axis); axis 0 walls face along x.

    Wall runs stop ``corner_gap`` short of the room corners so walls on
    adjacent sides never touch: without the gap their points interleave
    at the corner and no embedding could tell the two instances apart.
    """
    ex, ey, ez = spec.extent
    t = spec.wall_thickness
    g = spec.corner_gap
    sides = [
        (np.array([0.0, g, 0.0]), np.array([t, ey - g, ez]), 0),
        (np.array([ex - t, g, 0.0]), np.array([ex, ey - g, ez]), 0),
        (np.array([g, 0.0, 0.0]), np.array([ex - g, t, ez]), 1),
        (np.array([g, ey - t, 0.0]), np.array([ex - g, ey, ez]), 1),
    ]
    chosen = rng.choice(4, size=min(count, 4), replace=False)
    return [sides[i] for i in chosen]


def _panel_slab(
    spec: SceneSpec,
    wall: tuple[np.ndarray, np.ndarray, int],
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """A thin board on the wall's inner face, embedded 0.01 into the wall."""
    ex, ey, ez = spec.extent
    lo, hi, axis = wall
    run_axis = 1 - axis
    run_min = lo[run_axis] + 0.08
    run_max = hi[run_axis] - 0.08
    thickness = 0.03
    width = rng.uniform(0.3, min(0.6, run_max - run_min - 0.05))
    height = rng.uniform(0.25, min(0.5, ez * 0.6))
    z_lo = rng.uniform(0.25 * ez, max(0.25 * ez, ez - height - 0.05))
    run_lo = rng.uniform(run_min, run_max - width)
    if lo[axis] == 0.0:
        normal_lo = hi[axis] - 0.01          # inner face of the near wall
    else:
        normal_lo = lo[axis] - thickness + 0.01
    panel_lo = np.empty(3)
    panel_hi = np.empty(3)
    panel_lo[axis] = normal_lo
    panel_hi[axis] = normal_lo + thickness
    panel_lo[run_axis] = run_lo
    panel_hi[run_axis] = run_lo + width
    panel_lo[2] = z_lo
    panel_hi[2] = z_lo + height
    return panel_lo, panel_hi


def generate_scene(spec: SceneSpec = SceneSpec(), seed: int | np.random.SeedSequence = 0) -> LabeledCloud:
    """Build one labeled scene; same spec and seed give identical output."""
    rng = np.random.default_rng(seed)
    floor_spec, wall_spec, box_spec, panel_spec = spec.classes
    counts = [int(rng.integers(cs.count_range[0], cs.count_range[1] + 1)) for cs in spec.classes]
    counts[1] = min(counts[1], 4)
    if counts[1] == 0:
        counts[3] = 0
    while sum(counts) > spec.max_instances:
        # shed panels first, then boxes, then walls; keep the floor
        for role in (3, 2, 1):
            if counts[role] > (1 if role == 1 else 0):
                counts[role] -= 1
                break
        else:
            raise ValueError("max_instances too small for the requested counts")

    ex, ey, ez = spec.extent
    walls = _wall_slabs(spec, counts[1], rng)

    # Panels are placed before walls are emitted so each wall can skip
    # the surface patch its boards occlude. Boards on one wall keep
    # disjoint footprints when space allows.
    hole_margin = 0.03
    panel_slabs: list[tuple[np.ndarray, np.ndarray]] = []
    wall_holes: dict[int, list[tuple[float, float, float, float]]] = {}
    wall_order = rng.permutation(len(walls)) if walls else np.empty(0, dtype=np.int64)
    for panel_index in range(counts[3]):
        # spread boards over distinct walls while walls remain
        wall_index = int(wall_order[panel_index % len(walls)])
        run_axis = 1 - walls[wall_index][2]
        taken = wall_holes.setdefault(wall_index, [])
        for _attempt in range(20):
            plo, phi = _panel_slab(spec, walls[wall_index], rng)
            hole = (plo[run_axis] - hole_margin, phi[run_axis] + hole_margin,
                    plo[2] - hole_margin, phi[2] + hole_margin)
            crowded = any(
                hole[0] <= other[1] and other[0] <= hole[1]
                and hole[2] <= other[3] and other[2] <= hole[3]
                for other in taken
            )
            if not crowded:
                break
        panel_slabs.append((plo, phi))
        taken.append(hole)

    positions: list[np.ndarray] = []
    colors: list[np.ndarray] = []
    semantic: list[np.ndarray] = []
    instance: list[np.ndarray] = []
    next_instance = 0

    def emit(points: np.ndarray, class_id: int, base_color: tuple) -> None:
        nonlocal next_instance
        n = points.shape[0]
        jitter = rng.uniform(-spec.color_jitter, spec.color_jitter, size=3)
        point_noise = rng.normal(scale=spec.color_noise, size=(n, 3))
        color = np.clip(np.asarray(base_color) + jitter + point_noise, 0.0, 1.0)
        positions.append(points)
        colors.append(color)
        semantic.append(np.full(n, class_id, dtype=np.int64))
        instance.append(np.full(n, next_instance, dtype=np.int64))
        next_instance += 1

    n_floor = int(rng.integers(floor_spec.points_range[0], floor_spec.points_range[1] + 1))
    floor_points = np.column_stack([
        rng.uniform(0.0, ex, size=n_floor),
        rng.uniform(0.0, ey, size=n_floor),
        np.zeros(n_floor),
    ])
    emit(floor_points, 0, floor_spec.base_color)

    for wall_index, (lo, hi, axis) in enumerate(walls):
        n = int(rng.integers(wall_spec.points_range[0], wall_spec.points_range[1] + 1))
        holes = tuple(wall_holes.get(wall_index, ()))
        emit(_sample_slab_with_holes(rng, lo, hi, n, 1 - axis, holes), 1, wall_spec.base_color)

    box_bounds: list[tuple[np.ndarray, np.ndarray]] = []
    for _ in range(counts[2]):
        size = rng.uniform([0.2, 0.2, 0.15], [0.38, 0.38, min(0.35, 0.7 * ez)])
        margin = 0.12
        apart = False
        for _attempt in range(30):
            center = rng.uniform(
                [margin + size[0] / 2, margin + size[1] / 2],
                [ex - margin - size[0] / 2, ey - margin - size[1] / 2],
            )
            lo = np.array([center[0] - size[0] / 2, center[1] - size[1] / 2, 0.0])
            hi = lo + size
            apart = all(
                (hi[:2] + 0.05 < blo[:2]).any() or (bhi[:2] < lo[:2] - 0.05).any()
                for blo, bhi in box_bounds
            )
            if apart:
                break
        if not apart and box_bounds:
            continue  # no clear spot left; overlapping boxes would be unresolvable
        box_bounds.append((lo, hi))
        n = int(rng.integers(box_spec.points_range[0], box_spec.points_range[1] + 1))
        emit(_sample_box_surface(rng, lo, hi, n), 2, box_spec.base_color)

    for plo, phi in panel_slabs:
        n = int(rng.integers(panel_spec.points_range[0], panel_spec.points_range[1] + 1))
        emit(_sample_slab(rng, plo, phi, n), 3, panel_spec.base_color)

    all_positions = np.concatenate(positions)
    all_positions += rng.normal(scale=spec.position_noise, size=all_positions.shape)
    cloud = LabeledCloud(
        all_positions,
        np.concatenate(colors),
        np.concatenate(semantic),
        np.concatenate(instance),
        n_classes=len(CLASS_NAMES),
    )
    cloud.check_instance_consistency()
    return cloud


def generate_dataset(
    out_dir,
    n_scenes: int,
    spec: SceneSpec = SceneSpec(),
    seed: int = 0,
) -> dict:
    """Write ``n_scenes`` scene files plus a manifest; returns the manifest."""
    if n_scenes < 1:
        raise ValueError("n_scenes must be positive")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(n_scenes):
        cloud = generate_scene(spec, np.random.SeedSequence((seed, i)))
        name = f"scene_{i:04d}.txt"
        write_scene(out_dir / name, cloud)
        labeled = cloud.instance_ids >= 0
        per_class = {
            CLASS_NAMES[c]: int(
                np.unique(cloud.instance_ids[labeled & (cloud.semantic_labels == c)]).size
            )
            for c in range(len(CLASS_NAMES))
        }
        entries.append({
            "file": name,
            "n_points": len(cloud),
            "n_instances": int(np.unique(cloud.instance_ids[labeled]).size),
            "instances_per_class": per_class,
        })
    manifest = {
        "format": "asis-dataset v1",
        "seed": seed,
        "n_scenes": n_scenes,
        "spec": spec.to_dict(),
        "scenes": entries,
    }
    with open(out_dir / MANIFEST_NAME, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


def dataset_scene_paths(data_dir) -> list[Path]:
    """Scene files of a dataset directory, manifest order if one exists."""
    data_dir = Path(data_dir)
    manifest_path = data_dir / MANIFEST_NAME
    if manifest_path.exists():
        with open(manifest_path, "r", encoding="utf-8") as fh:
            try:
                manifest = json.load(fh)
            except json.JSONDecodeError as exc:
                raise DataFormatError(f"{manifest_path}: invalid JSON: {exc}") from exc
        paths = [data_dir / entry["file"] for entry in manifest.get("scenes", [])]
        missing = [p.name for p in paths if not p.exists()]
        if missing:
            raise DataFormatError(f"{manifest_path}: listed scenes missing: {missing}")
        if not paths:
            raise DataFormatError(f"{manifest_path}: manifest lists no scenes")
        return paths
    paths = sorted(data_dir.glob("*.txt"))
    if not paths:
        raise DataFormatError(f"{data_dir}: no scene files found")
    return paths
