"""Evaluation metrics for instance and semantic segmentation.

Instance metrics work on region sets: a region is a set of point
indices plus a class label, and regions within one set are disjoint.
Coverage averages, over ground-truth regions, the best IoU any
predicted region achieves (class-agnostic); weighted coverage weights
each ground-truth region by its share of the labeled points. Precision
and recall at an IoU threshold match predictions to ground truth
greedily in descending IoU, one-to-one, within each class, and report
the mean over classes present in the ground truth (classes without any
prediction contribute no precision term).

Semantic metrics come from a pooled confusion matrix: overall accuracy,
mean per-class accuracy, and mean IoU over classes present in the
ground truth.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


@dataclass
class Region:
    """A set of point indices sharing one instance, with its class."""

    indices: np.ndarray
    label: int

    def __post_init__(self):
        self.indices = np.unique(np.asarray(self.indices, dtype=np.int64))
        if self.indices.size == 0:
            raise ValueError("a region needs at least one point")
        self.label = int(self.label)


def regions_from_labels(
    instance_ids: np.ndarray,
    point_classes: np.ndarray,
    index_offset: int = 0,
) -> list[Region]:
    """Build regions from per-point instance ids and classes; -1 is skipped.

    Each region's class is the majority class of its members (ties to
    the smaller class index). ``index_offset`` shifts point indices so
    regions from different scenes can be pooled without collisions.
    """
    instance_ids = np.asarray(instance_ids, dtype=np.int64)
    point_classes = np.asarray(point_classes, dtype=np.int64)
    if instance_ids.shape != point_classes.shape or instance_ids.ndim != 1:
        raise ValueError("instance ids and classes must be matching 1-D arrays")
    regions = []
    for inst in np.unique(instance_ids):
        if inst < 0:
            continue
        members = np.flatnonzero(instance_ids == inst)
        votes = np.bincount(point_classes[members])
        regions.append(Region(members + index_offset, int(votes.argmax())))
    return regions


def _check_disjoint(regions: list[Region], name: str) -> None:
    sizes = sum(r.indices.size for r in regions)
    if regions and np.unique(np.concatenate([r.indices for r in regions])).size != sizes:
        raise ValueError(f"{name} regions must be pairwise disjoint")


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two index sets."""
    a = np.unique(np.asarray(a, dtype=np.int64))
    b = np.unique(np.asarray(b, dtype=np.int64))
    inter = np.intersect1d(a, b, assume_unique=True).size
    union = a.size + b.size - inter
    if union == 0:
        raise ValueError("iou of two empty sets is undefined")
    return inter / union


def _iou_matrix(gt: list[Region], pred: list[Region]) -> np.ndarray:
    out = np.zeros((len(gt), len(pred)))
    for i, g in enumerate(gt):
        for j, p in enumerate(pred):
            out[i, j] = iou(g.indices, p.indices)
    return out


def coverage(gt: list[Region], pred: list[Region], weighted: bool = False) -> float:
    """Mean (or size-weighted mean) over gt regions of their best IoU.

    Class labels are ignored; an empty prediction set scores 0.
    """
    if not gt:
        raise ValueError("coverage needs at least one ground-truth region")
    _check_disjoint(gt, "gt")
    _check_disjoint(pred, "pred")
    best = np.zeros(len(gt))
    if pred:
        best = _iou_matrix(gt, pred).max(axis=1)
    if not weighted:
        return float(best.mean())
    sizes = np.array([g.indices.size for g in gt], dtype=np.float64)
    return float((sizes / sizes.sum() * best).sum())


def coverage_per_class(gt: list[Region], pred: list[Region], weighted: bool = False) -> dict[int, float]:
    """Coverage restricted to gt regions of each class (matching stays class-agnostic)."""
    out = {}
    for label in sorted({g.label for g in gt}):
        out[label] = coverage([g for g in gt if g.label == label], pred, weighted)
    return out


def prec_recall(
    gt: list[Region],
    pred: list[Region],
    iou_threshold: float = 0.5,
) -> tuple[float, float, dict[int, tuple[float, float]]]:
    """Class-mean precision and recall with one-to-one greedy matching.

    Within each class, candidate pairs with IoU >= threshold match in
    descending IoU order, each region at most once. Returns the class
    means and a per-class table (-1 marks an undefined precision).
    """
    _check_disjoint(gt, "gt")
    _check_disjoint(pred, "pred")
    if not gt:
        raise ValueError("prec_recall needs at least one ground-truth region")
    per_class: dict[int, tuple[float, float]] = {}
    precisions = []
    recalls = []
    for label in sorted({g.label for g in gt}):
        gt_c = [g for g in gt if g.label == label]
        pred_c = [p for p in pred if p.label == label]
        matrix = _iou_matrix(gt_c, pred_c) if pred_c else np.zeros((len(gt_c), 0))
        pairs = [
            (matrix[i, j], i, j)
            for i in range(len(gt_c))
            for j in range(len(pred_c))
            if matrix[i, j] >= iou_threshold
        ]
        pairs.sort(key=lambda t: (-t[0], t[1], t[2]))
        used_gt: set[int] = set()
        used_pred: set[int] = set()
        true_pos = 0
        for _, i, j in pairs:
            if i in used_gt or j in used_pred:
                continue
            used_gt.add(i)
            used_pred.add(j)
            true_pos += 1
        recall = true_pos / len(gt_c)
        recalls.append(recall)
        if pred_c:
            precision = true_pos / len(pred_c)
            precisions.append(precision)
        else:
            precision = -1.0
        per_class[label] = (precision, recall)
    mean_prec = float(np.mean(precisions)) if precisions else 0.0
    mean_rec = float(np.mean(recalls))
    return mean_prec, mean_rec, per_class


def confusion_matrix(gt_labels: np.ndarray, pred_labels: np.ndarray, n_classes: int) -> np.ndarray:
    """Counts indexed [true, predicted]; gt labels of -1 are skipped."""
    gt_labels = np.asarray(gt_labels, dtype=np.int64)
    pred_labels = np.asarray(pred_labels, dtype=np.int64)
    if gt_labels.shape != pred_labels.shape or gt_labels.ndim != 1:
        raise ValueError("label arrays must be matching 1-D arrays")
    keep = gt_labels >= 0
    if gt_labels[keep].max(initial=0) >= n_classes or pred_labels[keep].min(initial=0) < 0 \
            or pred_labels[keep].max(initial=0) >= n_classes:
        raise ValueError("labels outside [0, n_classes)")
    matrix = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(matrix, (gt_labels[keep], pred_labels[keep]), 1)
    return matrix


def semantic_scores(matrix: np.ndarray) -> dict:
    """Overall accuracy, class-mean accuracy and IoU from a confusion matrix.

    Means run over classes that appear in the ground truth (non-empty
    rows). Per-class tables carry NaN for absent classes.
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ValueError("confusion matrix must be square")
    total = matrix.sum()
    if total == 0:
        raise ValueError("empty confusion matrix")
    diag = np.diag(matrix)
    row = matrix.sum(axis=1)
    col = matrix.sum(axis=0)
    present = row > 0
    if not present.any():
        raise ValueError("no ground-truth labels present")
    accuracy = np.full(matrix.shape[0], np.nan)
    accuracy[present] = diag[present] / row[present]
    union = row + col - diag
    iou_values = np.full(matrix.shape[0], np.nan)
    iou_values[present] = diag[present] / union[present]
    return {
        "overall_accuracy": float(diag.sum() / total),
        "mean_accuracy": float(accuracy[present].mean()),
        "mean_iou": float(iou_values[present].mean()),
        "class_accuracy": accuracy,
        "class_iou": iou_values,
    }


@dataclass
class SegMetrics:
    """One evaluation report, instance and semantic metrics together."""

    mean_coverage: float
    mean_weighted_coverage: float
    mean_precision: float
    mean_recall: float
    overall_accuracy: float
    mean_accuracy: float
    mean_iou: float
    per_class: dict = field(default_factory=dict)
    settings: dict = field(default_factory=dict)

    SUMMARY_FIELDS = (
        "mean_coverage",
        "mean_weighted_coverage",
        "mean_precision",
        "mean_recall",
        "overall_accuracy",
        "mean_accuracy",
        "mean_iou",
    )

    def to_dict(self) -> dict:
        out = {name: getattr(self, name) for name in self.SUMMARY_FIELDS}
        out["per_class"] = self.per_class
        out["settings"] = self.settings
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def format_table(self) -> str:
        lines = ["metric                    value", "-" * 31]
        for name in self.SUMMARY_FIELDS:
            lines.append(f"{name:<25} {getattr(self, name):.4f}")
        if self.per_class:
            lines.append("")
            lines.append("class  coverage  w_coverage  precision  recall  sem_iou")
            for label in sorted(self.per_class):
                row = self.per_class[label]

                def cell(key: str) -> str:
                    value = row.get(key)
                    if value is None or (isinstance(value, float) and np.isnan(value)):
                        return "     -"
                    return f"{value:6.4f}"

                lines.append(
                    f"{label:>5}  {cell('coverage'):>8}  {cell('weighted_coverage'):>10}  "
                    f"{cell('precision'):>9}  {cell('recall'):>6}  {cell('semantic_iou'):>7}"
                )
        return "\n".join(lines)


class MetricsAccumulator:
    """Pools several scenes before computing one report.

    Instance regions from all scenes are pooled with index offsets (so
    metrics micro-average over regions) and semantic confusion matrices
    are summed, then every score is computed once from the pool.
    """

    def __init__(self, n_classes: int, iou_threshold: float = 0.5):
        if n_classes < 1:
            raise ValueError("n_classes must be positive")
        self.n_classes = n_classes
        self.iou_threshold = iou_threshold
        self._gt: list[Region] = []
        self._pred: list[Region] = []
        self._confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
        self._offset = 0

    def add_scene(
        self,
        gt_semantics: np.ndarray,
        gt_instances: np.ndarray,
        pred_semantics: np.ndarray,
        pred_instances: np.ndarray,
    ) -> None:
        gt_semantics = np.asarray(gt_semantics, dtype=np.int64)
        n = gt_semantics.size
        for arr in (gt_instances, pred_semantics, pred_instances):
            if np.asarray(arr).shape != (n,):
                raise ValueError("all label arrays must share one length")
        self._gt.extend(regions_from_labels(gt_instances, gt_semantics, self._offset))
        self._pred.extend(regions_from_labels(pred_instances, pred_semantics, self._offset))
        self._confusion += confusion_matrix(gt_semantics, pred_semantics, self.n_classes)
        self._offset += n

    def compute(self) -> SegMetrics:
        if not self._gt:
            raise ValueError("no scenes added")
        mean_prec, mean_rec, pr_table = prec_recall(self._gt, self._pred, self.iou_threshold)
        cov_table = coverage_per_class(self._gt, self._pred, weighted=False)
        wcov_table = coverage_per_class(self._gt, self._pred, weighted=True)
        sem = semantic_scores(self._confusion)
        per_class: dict[int, dict] = {}
        for label in range(self.n_classes):
            row: dict[str, float | None] = {}
            if label in cov_table:
                row["coverage"] = cov_table[label]
                row["weighted_coverage"] = wcov_table[label]
            if label in pr_table:
                precision, recall = pr_table[label]
                row["precision"] = None if precision < 0 else precision
                row["recall"] = recall
            if not np.isnan(sem["class_accuracy"][label]):
                row["semantic_accuracy"] = float(sem["class_accuracy"][label])
                row["semantic_iou"] = float(sem["class_iou"][label])
            if row:
                per_class[label] = row
        return SegMetrics(
            mean_coverage=coverage(self._gt, self._pred, weighted=False),
            mean_weighted_coverage=coverage(self._gt, self._pred, weighted=True),
            mean_precision=mean_prec,
            mean_recall=mean_rec,
            overall_accuracy=sem["overall_accuracy"],
            mean_accuracy=sem["mean_accuracy"],
            mean_iou=sem["mean_iou"],
            per_class=per_class,
            settings={
                "iou_threshold": self.iou_threshold,
                "matching": "greedy descending IoU, one-to-one, within class",
                "coverage": "class-agnostic best IoU per ground-truth region",
                "means": "over classes present in ground truth",
                "n_classes": self.n_classes,
            },
        )
