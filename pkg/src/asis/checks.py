"""Independent correctness checks for the numeric core.

Everything here deliberately avoids the code paths it verifies: metric
oracles run on python sets with exhaustive matching, loss values are
recomputed with scalar arithmetic, and gradients are compared against
central finite differences. The CLI's gradcheck and selftest commands
run these; the test suite leans on them too.
"""
from __future__ import annotations

import math

import numpy as np

from .autodiff import Tensor, gradient_check
from .grouping import MeanShiftConfig, mean_shift
from .losses import DiscriminativeParams, cross_entropy, discriminative_loss, instance_groups, total_loss
from .metrics import Region
from .network import NetworkConfig, NetworkParams, forward

GRADIENT_TOLERANCE = 1e-4


def _set_iou(a: set, b: set) -> float:
    return len(a & b) / len(a | b)


def oracle_coverage(gt: list[Region], pred: list[Region], weighted: bool = False) -> float:
    """Coverage by direct enumeration over python sets."""
    gt_sets = [set(r.indices.tolist()) for r in gt]
    pred_sets = [set(r.indices.tolist()) for r in pred]
    best = []
    for g in gt_sets:
        candidates = [_set_iou(g, p) for p in pred_sets]
        best.append(max(candidates) if candidates else 0.0)
    if not weighted:
        return sum(best) / len(best)
    total = sum(len(g) for g in gt_sets)
    return sum(len(g) / total * b for g, b in zip(gt_sets, best))


def _max_matching(edges: list[set[int]], n_right: int) -> int:
    """Maximum bipartite matching size via augmenting paths."""
    owner = [-1] * n_right

    def assign(u: int, seen: set[int]) -> bool:
        for v in edges[u]:
            if v in seen:
                continue
            seen.add(v)
            if owner[v] < 0 or assign(owner[v], seen):
                owner[v] = u
                return True
        return False

    return sum(1 for u in range(len(edges)) if assign(u, set()))


def oracle_prec_recall(
    gt: list[Region], pred: list[Region], iou_threshold: float = 0.5
) -> tuple[float, float]:
    """Class-mean precision/recall using exhaustive maximum matching."""
    labels = sorted({r.label for r in gt})
    precisions = []
    recalls = []
    for label in labels:
        gt_sets = [set(r.indices.tolist()) for r in gt if r.label == label]
        pred_sets = [set(r.indices.tolist()) for r in pred if r.label == label]
        edges = [
            {j for j, p in enumerate(pred_sets) if _set_iou(g, p) >= iou_threshold}
            for g in gt_sets
        ]
        true_pos = _max_matching(edges, len(pred_sets))
        recalls.append(true_pos / len(gt_sets))
        if pred_sets:
            precisions.append(true_pos / len(pred_sets))
    mean_prec = sum(precisions) / len(precisions) if precisions else 0.0
    return mean_prec, sum(recalls) / len(recalls)


def random_region_sets(
    rng: np.random.Generator,
    max_points: int = 200,
    max_regions: int = 20,
    n_classes: int = 4,
) -> tuple[list[Region], list[Region]]:
    """A random ground-truth / prediction pair of disjoint region sets."""
    n = int(rng.integers(max_regions, max_points + 1))

    def one_side() -> list[Region]:
        k = int(rng.integers(1, max_regions + 1))
        assignment = rng.integers(0, k, size=n)
        regions = []
        for label in np.unique(assignment):
            regions.append(Region(np.flatnonzero(assignment == label), int(rng.integers(n_classes))))
        return regions

    return one_side(), one_side()


def check_loss_values() -> list[str]:
    """Frozen scalar cases recomputed by hand; returns failure messages."""
    failures = []
    params = DiscriminativeParams(delta_v=0.5, delta_d=1.5, alpha=0.001)

    node, parts = discriminative_loss(
        Tensor(np.array([[0.0], [2.0]])), instance_groups([0, 0]), params
    )
    # center 1.0, both points at L1 distance 1: 2 * (1 - 0.5)^2 / 2 = 0.25
    expected = 0.25 + 0.001 * 1.0
    if abs(float(node.values) - expected) > 1e-12:
        failures.append(f"single-instance loss {float(node.values)} != {expected}")

    _, parts = discriminative_loss(
        Tensor(np.array([[0.0], [1.0]])), [np.array([0]), np.array([1])], params
    )
    # centers 0, 1: two ordered pairs of (3 - 1)^2, normalized by 2
    if abs(parts["distance"] - 4.0) > 1e-12:
        failures.append(f"center-pair distance term {parts['distance']} != 4.0")

    far = discriminative_loss(
        Tensor(np.array([[0.0], [4.0]])), [np.array([0]), np.array([1])], params
    )[1]["distance"]
    if far != 0.0:
        failures.append(f"distance term beyond margin should be 0, got {far}")

    ce = float(cross_entropy(Tensor(np.zeros((2, 4))), np.array([1, 3])).values)
    if abs(ce - math.log(4.0)) > 1e-12:
        failures.append(f"uniform cross entropy {ce} != ln 4")
    return failures


def gradient_suite(seed: int = 0) -> dict[str, float]:
    """Finite-difference error of each loss and of a composed tiny network."""
    rng = np.random.default_rng(seed)
    results: dict[str, float] = {}

    emb = Tensor(rng.normal(scale=1.3, size=(16, 5)), requires_grad=True)
    groups = instance_groups(rng.integers(0, 4, size=16))
    params = DiscriminativeParams()
    results["embedding_loss"] = gradient_check(
        lambda ps: discriminative_loss(ps["emb"], groups, params)[0], {"emb": emb}
    )

    logits = Tensor(rng.normal(size=(12, 4)), requires_grad=True)
    labels = rng.integers(-1, 4, size=12)
    labels[0] = 0  # at least one labeled row
    results["cross_entropy"] = gradient_check(
        lambda ps: cross_entropy(ps["logits"], labels), {"logits": logits}
    )

    config = NetworkConfig(
        n_classes=3, embedding_dim=3, encoder_widths=(4, 6), decoder_widths=(6, 5), knn_k=4
    )
    net = NetworkParams(config, seed=np.random.SeedSequence((seed, 2)))
    features = rng.normal(size=(10, 9))
    features[:, 6:] = rng.uniform(0.0, 1.0, size=(10, 3))
    sem_labels = rng.integers(0, 3, size=10)
    net_groups = instance_groups(rng.integers(0, 3, size=10))
    disc = DiscriminativeParams(config.delta_v, config.delta_d, config.alpha)

    def composed(_ps) -> Tensor:
        out = forward(features, net, training=True)
        return total_loss(
            out.semantic_logits, out.embeddings, sem_labels, net_groups, disc
        )[0]

    results["network_with_losses"] = gradient_check(composed, net.named_parameters())
    return results


def check_gradients(seed: int = 0) -> tuple[bool, dict[str, float]]:
    results = gradient_suite(seed)
    return all(err < GRADIENT_TOLERANCE for err in results.values()), results


def check_metric_oracles(seed: int = 0, n_pairs: int = 25) -> list[str]:
    """Vectorized metrics must equal the set-based oracles exactly."""
    from .metrics import coverage, prec_recall

    rng = np.random.default_rng(seed)
    failures = []
    for case in range(n_pairs):
        gt, pred = random_region_sets(rng)
        for weighted in (False, True):
            got = coverage(gt, pred, weighted)
            want = oracle_coverage(gt, pred, weighted)
            if abs(got - want) > 1e-12:
                failures.append(f"case {case}: coverage(weighted={weighted}) {got} != {want}")
        got_p, got_r, _ = prec_recall(gt, pred, 0.5)
        want_p, want_r = oracle_prec_recall(gt, pred, 0.5)
        if abs(got_p - want_p) > 1e-12 or abs(got_r - want_r) > 1e-12:
            failures.append(f"case {case}: prec/recall ({got_p},{got_r}) != ({want_p},{want_r})")
    return failures


def check_clustering(seed: int = 0, n_cases: int = 5) -> list[str]:
    """Mean shift must recover well-separated blobs exactly."""
    rng = np.random.default_rng(seed)
    config = MeanShiftConfig(bandwidth=0.6)
    failures = []
    for case in range(n_cases):
        k = int(rng.integers(2, 7))
        dim = int(rng.integers(2, 6))
        centers = _separated_centers(rng, k, dim, 4.0 * config.bandwidth)
        sizes = rng.integers(20, 50, size=k)
        points = np.concatenate([
            centers[i] + rng.normal(scale=config.bandwidth / 4.0, size=(sizes[i], dim))
            for i in range(k)
        ])
        truth = np.repeat(np.arange(k), sizes)
        labels = mean_shift(points, config)
        found = np.unique(labels).size
        if found != k:
            failures.append(f"case {case}: found {found} clusters, wanted {k}")
            continue
        agree = 0
        for cid in range(found):
            votes = np.bincount(truth[labels == cid], minlength=k)
            agree += int(votes.max())
        accuracy = agree / truth.size
        if accuracy < 0.99:
            failures.append(f"case {case}: assignment accuracy {accuracy:.4f} < 0.99")
    return failures


def _separated_centers(rng: np.random.Generator, k: int, dim: int, min_gap: float) -> np.ndarray:
    centers = [rng.uniform(-5.0, 5.0, size=dim)]
    while len(centers) < k:
        candidate = rng.uniform(-5.0, 5.0, size=dim)
        if all(np.linalg.norm(candidate - c) >= min_gap for c in centers):
            centers.append(candidate)
    return np.stack(centers)


def run_selftest(seed: int = 0) -> tuple[bool, list[str]]:
    """All quick checks; returns overall success and a report line per check."""
    lines = []
    ok = True

    grad_ok, grads = check_gradients(seed)
    for name, err in grads.items():
        lines.append(f"gradient {name}: max rel error {err:.3e} "
                     f"({'ok' if err < GRADIENT_TOLERANCE else 'FAIL'})")
    ok &= grad_ok

    for name, failures in (
        ("loss values", check_loss_values()),
        ("metric oracles", check_metric_oracles(seed)),
        ("clustering recovery", check_clustering(seed)),
    ):
        if failures:
            ok = False
            lines.append(f"{name}: FAIL")
            lines.extend(f"  {f}" for f in failures)
        else:
            lines.append(f"{name}: ok")
    return ok, lines
