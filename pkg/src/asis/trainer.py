"""Training loop and scene-level inference.

Training samples fixed-size blocks from every scene once up front, then
optimizes the network with Adam over shuffled per-block batches. Each
step logs the loss components to a CSV row. Checkpoints carry a JSON
metadata sidecar with every config that shaped the run; inference reads
the sidecar back and refuses checkpoints whose branch toggles disagree
with what the caller asks for.

Inference cuts a scene into the same overlapping blocks, runs the
network per block, clusters embeddings per block, and reconciles blocks
into scene-level instances. Points sampled by several blocks follow the
block with the nearest center; points never sampled inherit the label
of their nearest sampled neighbor. Blocks may be processed by a small
thread pool, capped by the ASIS_THREADS environment variable.
"""
from __future__ import annotations

import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import AdamState, adam_step
from .cloud import Block, LabeledCloud, normalize_positions, read_scene, sample_block, split_blocks, write_scene
from .errors import DataFormatError, NumericError
from .grouping import (
    BlockResult,
    InstanceSegmentation,
    MeanShiftConfig,
    MergeConfig,
    assign_instance_classes,
    block_merge,
    mean_shift,
)
from .losses import DiscriminativeParams, instance_groups, total_loss
from .network import NetworkConfig, NetworkParams, forward
from .synthgen import dataset_scene_paths

LOG_COLUMNS = ("step", "lr", "total", "l_var", "l_dist", "l_reg", "ce")
META_SUFFIX = ".meta.json"


@dataclass(frozen=True)
class TrainConfig:
    """Optimization schedule and block sampling protocol."""

    epochs: int = 20
    batch_size: int = 4
    base_lr: float = 0.001
    lr_halve_interval: int = 2000
    seed: int = 0
    eval_every: int = 0          # extra checkpoint every N steps; 0 disables
    block_size: float = 1.0
    stride: float = 0.5
    min_points: int = 100
    sample_size: int = 512

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.sample_size < 1:
            raise ValueError("epochs, batch_size and sample_size must be positive")
        if self.base_lr <= 0 or self.lr_halve_interval < 1:
            raise ValueError("base_lr and lr_halve_interval must be positive")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise DataFormatError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class RunConfig:
    """Everything one run needs: network, schedule, grouping, merging."""

    network: NetworkConfig
    train: TrainConfig
    grouping: MeanShiftConfig
    merge: MergeConfig

    def to_dict(self) -> dict:
        return {
            "network": self.network.to_dict(),
            "train": self.train.to_dict(),
            "grouping": {
                "bandwidth": self.grouping.bandwidth,
                "max_iterations": self.grouping.max_iterations,
                "convergence_tol": self.grouping.convergence_tol,
                "mode_merge_radius": self.grouping.mode_merge_radius,
            },
            "merge": {
                "voxel_size": self.merge.voxel_size,
                "overlap_threshold": self.merge.overlap_threshold,
            },
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {"network", "train", "grouping", "merge"}
        unknown = set(data) - known
        if unknown:
            raise DataFormatError(f"unknown config sections: {sorted(unknown)}")
        grouping = data.get("grouping", {})
        merge = data.get("merge", {})
        for section, allowed in (
            (grouping, {"bandwidth", "max_iterations", "convergence_tol", "mode_merge_radius"}),
            (merge, {"voxel_size", "overlap_threshold"}),
        ):
            bad = set(section) - allowed
            if bad:
                raise DataFormatError(f"unknown config keys: {sorted(bad)}")
        return cls(
            network=NetworkConfig.from_dict(data.get("network", {})),
            train=TrainConfig.from_dict(data.get("train", {})),
            grouping=MeanShiftConfig(**grouping),
            merge=MergeConfig(**merge),
        )


def load_run_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise DataFormatError(f"{path}: run config must be a JSON object")
    return RunConfig.from_dict(data)


@dataclass
class TrainingBlock:
    """One sampled block with its training labels."""

    features: np.ndarray          # (S, 9)
    semantic_labels: np.ndarray   # (S,)
    groups: list[np.ndarray]      # instance index groups within the sample


def prepare_training_blocks(data_dir, config: TrainConfig) -> list[TrainingBlock]:
    """Load every scene, validate ground truth, cut and sample blocks."""
    blocks: list[TrainingBlock] = []
    for scene_index, path in enumerate(dataset_scene_paths(data_dir)):
        cloud = read_scene(path)
        cloud.check_instance_consistency()
        normalized = normalize_positions(cloud.positions)
        windows = split_blocks(cloud, config.block_size, config.stride, config.min_points)
        for window_index, window in enumerate(windows):
            seed = np.random.SeedSequence((config.seed, scene_index, window_index))
            block = sample_block(
                cloud, window.indices, config.sample_size, seed,
                origin=window.origin, normalized=normalized,
            )
            src = block.source_indices
            groups = instance_groups(cloud.instance_ids[src])
            if not groups:
                continue  # nothing labeled in this block
            blocks.append(TrainingBlock(
                block.features, cloud.semantic_labels[src], groups,
            ))
    if not blocks:
        raise DataFormatError(f"{data_dir}: no usable training blocks")
    return blocks


def train(
    data_dir,
    run: RunConfig,
    checkpoint_path,
    log_path=None,
) -> list[dict]:
    """Train a fresh network on a dataset directory; returns the log rows.

    Writes the checkpoint, its metadata sidecar and a CSV training log
    (next to the checkpoint unless ``log_path`` is given). Raises
    NumericError if a loss turns non-finite.
    """
    checkpoint_path = Path(checkpoint_path)
    log_path = Path(log_path) if log_path is not None else checkpoint_path.with_suffix(".log.csv")
    config = run.train
    net_config = run.network
    blocks = prepare_training_blocks(data_dir, config)
    params = NetworkParams(net_config, seed=np.random.SeedSequence((config.seed, 0)))
    disc = DiscriminativeParams(net_config.delta_v, net_config.delta_d, net_config.alpha)
    state = AdamState(learning_rate=config.base_lr, lr_halve_interval=config.lr_halve_interval)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence((config.seed, 1)))
    named = params.named_parameters()
    rows: list[dict] = []
    step = 0
    for _epoch in range(config.epochs):
        order = shuffle_rng.permutation(len(blocks))
        for start in range(0, len(order), config.batch_size):
            batch = [blocks[i] for i in order[start:start + config.batch_size]]
            params.zero_grad()
            sums = {"total": 0.0, "ce": 0.0, "l_var": 0.0, "l_dist": 0.0, "l_reg": 0.0}
            for tb in batch:
                out = forward(tb.features, params, training=True)
                loss, parts = total_loss(
                    out.semantic_logits, out.embeddings, tb.semantic_labels, tb.groups,
                    disc, net_config.ce_weight, net_config.disc_weight,
                )
                if not np.isfinite(parts["total"]):
                    raise NumericError(f"non-finite loss at step {step + 1}: {parts}")
                loss.backward()
                sums["total"] += parts["total"]
                sums["ce"] += parts["cross_entropy"]
                sums["l_var"] += parts["variance"]
                sums["l_dist"] += parts["distance"]
                sums["l_reg"] += parts["regularizer"]
            scale = 1.0 / len(batch)
            grads = {
                name: (p.grad if p.grad is not None else np.zeros_like(p.values)) * scale
                for name, p in named.items()
            }
            lr = adam_step(named, grads, state)
            step += 1
            rows.append({
                "step": step,
                "lr": lr,
                "total": sums["total"] * scale,
                "l_var": sums["l_var"] * scale,
                "l_dist": sums["l_dist"] * scale,
                "l_reg": sums["l_reg"] * scale,
                "ce": sums["ce"] * scale,
            })
            if config.eval_every and step % config.eval_every == 0:
                interim = checkpoint_path.with_name(checkpoint_path.name + f".step{step}")
                _save_run(interim, params, run)
    _save_run(checkpoint_path, params, run)
    _write_log(log_path, rows)
    return rows


def _save_run(checkpoint_path: Path, params: NetworkParams, run: RunConfig) -> None:
    params.save(checkpoint_path)
    meta = run.to_dict()
    with open(str(checkpoint_path) + META_SUFFIX, "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)


def _write_log(log_path: Path, rows: list[dict]) -> None:
    lines = [",".join(LOG_COLUMNS)]
    for row in rows:
        lines.append(",".join(repr(row[c]) if c != "step" else str(row[c]) for c in LOG_COLUMNS))
    with open(log_path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def load_trained(checkpoint_path) -> tuple[NetworkParams, RunConfig]:
    """Load a checkpoint plus its metadata sidecar."""
    meta_path = str(checkpoint_path) + META_SUFFIX
    if not os.path.exists(meta_path):
        raise DataFormatError(f"{meta_path}: metadata sidecar missing")
    with open(meta_path, "r", encoding="utf-8") as fh:
        try:
            meta = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"{meta_path}: invalid JSON: {exc}") from exc
    run = RunConfig.from_dict(meta)
    params = NetworkParams.load(checkpoint_path, run.network)
    return params, run


def _thread_count(requested: int | None) -> int:
    limit = os.environ.get("ASIS_THREADS")
    cap = os.cpu_count() or 1
    if limit is not None:
        try:
            cap = max(1, min(cap, int(limit)))
        except ValueError as exc:
            raise DataFormatError(f"ASIS_THREADS must be an integer, got {limit!r}") from exc
    if requested is not None:
        cap = max(1, min(cap, requested))
    return cap


@dataclass
class ScenePrediction:
    """Scene-level inference result."""

    semantic_labels: np.ndarray          # (N,) per-point predicted class
    instances: InstanceSegmentation


def infer_scene(
    params: NetworkParams,
    cloud: LabeledCloud,
    run: RunConfig,
    threads: int | None = None,
    oracle: str | None = None,
) -> ScenePrediction:
    """Predict per-point classes and scene-level instances for one scene.

    ``oracle`` is a test hook: "embeddings" feeds ground-truth one-hot
    embeddings (scaled well past the clustering bandwidth) into the
    grouping stage, "semantics" feeds ground-truth classes, "both" does
    both. Ground truth comes from the cloud's own labels.
    """
    if oracle not in (None, "embeddings", "semantics", "both"):
        raise ValueError("oracle must be None, 'embeddings', 'semantics' or 'both'")
    config = run.train
    normalized = normalize_positions(cloud.positions)
    windows = split_blocks(cloud, config.block_size, config.stride, config.min_points)
    if not windows:
        raise DataFormatError("scene produced no blocks; lower min_points")
    samples: list[Block] = [
        sample_block(
            cloud, w.indices, config.sample_size,
            np.random.SeedSequence((config.seed, 101, i)),
            origin=w.origin, normalized=normalized,
        )
        for i, w in enumerate(windows)
    ]
    oracle_emb = oracle in ("embeddings", "both")
    oracle_sem = oracle in ("semantics", "both")
    if oracle_emb or oracle_sem:
        cloud.check_instance_consistency()
    scene_instances = np.unique(cloud.instance_ids[cloud.instance_ids >= 0])
    dense_of_instance = {int(g): i for i, g in enumerate(scene_instances)}
    emb_scale = 10.0 * run.grouping.bandwidth

    def run_block(block: Block) -> tuple[np.ndarray, np.ndarray]:
        """Per-sample semantic argmax and embedding matrix for one block."""
        need_net = not (oracle_emb and oracle_sem)
        if need_net:
            out = forward(block.features, params, training=False)
        if oracle_sem:
            sem = cloud.semantic_labels[block.source_indices].copy()
        else:
            sem = out.semantic_logits.values.argmax(axis=1)
        if oracle_emb:
            ids = cloud.instance_ids[block.source_indices]
            emb = np.zeros((ids.size, max(len(scene_instances), 1)))
            for row, inst in enumerate(ids.tolist()):
                if inst >= 0:
                    emb[row, dense_of_instance[inst]] = emb_scale
        else:
            emb = out.embeddings.values
        return sem, emb

    n_threads = _thread_count(threads)
    if n_threads > 1 and len(samples) > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            net_outputs = list(pool.map(run_block, samples))
    else:
        net_outputs = [run_block(b) for b in samples]

    block_results: list[BlockResult] = []
    block_sem: list[np.ndarray] = []
    for block, (sem, emb) in zip(samples, net_outputs):
        cluster_ids = mean_shift(emb, run.grouping)
        block_results.append(BlockResult(
            origin=block.origin,
            source_indices=block.source_indices,
            instance_ids=cluster_ids,
            n_instances=int(cluster_ids.max()) + 1,
        ))
        block_sem.append(sem)

    n = len(cloud)
    sem_labels = np.full(n, -1, dtype=np.int64)
    best = np.full(n, np.inf)
    half = 0.5 * config.block_size
    for block, sem in zip(samples, block_sem):
        center = block.origin + half
        src = block.source_indices
        dist = ((cloud.positions[src, :2] - center) ** 2).sum(axis=1)
        better = dist < best[src]
        sem_labels[src[better]] = sem[better]
        best[src[better]] = dist[better]
    uncovered = np.flatnonzero(sem_labels < 0)
    if uncovered.size:
        covered = np.flatnonzero(sem_labels >= 0)
        for p in uncovered:
            delta = cloud.positions[covered] - cloud.positions[p]
            sem_labels[p] = sem_labels[covered[int((delta ** 2).sum(axis=1).argmin())]]

    instances = block_merge(
        cloud.positions, block_results, sem_labels,
        block_size=config.block_size, config=run.merge,
    )
    return ScenePrediction(sem_labels, instances)


def write_prediction(path, cloud: LabeledCloud, prediction: ScenePrediction) -> None:
    """Write a prediction as a scene file.

    The instance column holds scene-level ids; the semantic column
    broadcasts each instance's class to its members.
    """
    out = LabeledCloud(
        cloud.positions,
        cloud.colors,
        prediction.instances.point_classes(),
        prediction.instances.instance_ids,
        cloud.n_classes,
    )
    write_scene(path, out)


def infer_file(
    checkpoint_path,
    scene_path,
    out_path=None,
    threads: int | None = None,
    expected_toggles: tuple[bool, bool] | None = None,
) -> ScenePrediction:
    """Load a checkpoint, predict one scene file, optionally write it out.

    ``expected_toggles`` (use_sa, use_if) guards ablation wiring: a
    checkpoint trained with other toggles is refused.
    """
    params, run = load_trained(checkpoint_path)
    if expected_toggles is not None:
        actual = (run.network.use_sa, run.network.use_if)
        if actual != tuple(expected_toggles):
            raise DataFormatError(
                f"checkpoint toggles {actual} do not match requested {tuple(expected_toggles)}"
            )
    cloud = read_scene(scene_path)
    prediction = infer_scene(params, cloud, run, threads=threads)
    if out_path is not None:
        write_prediction(out_path, cloud, prediction)
    return prediction
