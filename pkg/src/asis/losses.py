"""Training losses: pull/push embedding loss and per-point cross entropy.

The embedding loss is class-agnostic. For embeddings e_j grouped into I
instances with centers mu_i (the group means), using L1 distances and
hinge(t) = max(t, 0):

  variance term:   mean over instances of mean_j hinge(|mu_i - e_j| - delta_v)^2
  distance term:   mean over ordered center pairs of hinge(2*delta_d - |mu_a - mu_b|)^2
  regularizer:     mean over instances of |mu_i|

  total = variance + distance + alpha * regularizer

Both losses enter the autodiff tape as single nodes with closed-form
gradients (hinge and absolute-value subgradients are 0 at their kinks).
Points with instance id -1 take part in neither term.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, _accum, add, scale
from .errors import NumericError


@dataclass(frozen=True)
class DiscriminativeParams:
    """Margins and regularizer weight of the embedding loss."""

    delta_v: float = 0.5
    delta_d: float = 1.5
    alpha: float = 0.001

    def __post_init__(self):
        if self.delta_v < 0.0 or self.delta_d < 0.0:
            raise ValueError("margins must be non-negative")
        if 2.0 * self.delta_v >= 2.0 * self.delta_d:
            warnings.warn(
                "pull radius 2*delta_v should be strictly inside push radius 2*delta_d",
                stacklevel=2,
            )


def instance_groups(instance_ids: np.ndarray) -> list[np.ndarray]:
    """Index arrays per instance, ordered by first appearance; -1 is skipped."""
    instance_ids = np.asarray(instance_ids)
    groups: dict[int, list[int]] = {}
    for idx, inst in enumerate(instance_ids.tolist()):
        if inst >= 0:
            groups.setdefault(inst, []).append(idx)
    return [np.asarray(v, dtype=np.int64) for v in groups.values()]


def discriminative_loss(
    embeddings: Tensor,
    groups: list[np.ndarray],
    params: DiscriminativeParams = DiscriminativeParams(),
) -> tuple[Tensor, dict[str, float]]:
    """Scalar pull/push loss over instance groups, plus its components.

    ``groups`` holds index arrays into the embedding rows; empty groups
    are rejected, and at least one group is required. Returns the loss
    tensor and a dict with the raw ``variance``, ``distance`` and
    ``regularizer`` values (the regularizer unweighted).
    """
    if embeddings.values.ndim != 2:
        raise ValueError("embeddings must be (N, D)")
    if not groups:
        raise ValueError("at least one instance group is required")
    values = embeddings.values
    n_inst = len(groups)
    dim = values.shape[1]
    centers = np.empty((n_inst, dim), dtype=np.float64)
    for i, group in enumerate(groups):
        if len(group) == 0:
            raise ValueError("instance groups must be non-empty")
        centers[i] = values[group].mean(axis=0)

    grad = np.zeros_like(values)
    grad_centers = np.zeros_like(centers)

    l_var = 0.0
    for i, group in enumerate(groups):
        diff = centers[i] - values[group]                # (Ni, D)
        dist = np.abs(diff).sum(axis=1)                  # (Ni,)
        hinge = np.maximum(dist - params.delta_v, 0.0)
        l_var += float((hinge * hinge).mean())
        signs = np.sign(diff)
        coef = (2.0 / (n_inst * len(group))) * hinge     # d(hinge^2) with averaging
        grad[group] -= coef[:, None] * signs
        grad_centers[i] += (coef[:, None] * signs).sum(axis=0)
    l_var /= n_inst

    if n_inst > 1:
        center_diff = centers[:, None, :] - centers[None, :, :]
        center_dist = np.abs(center_diff).sum(axis=2)
        hinge = np.maximum(2.0 * params.delta_d - center_dist, 0.0)
        np.fill_diagonal(hinge, 0.0)
        pairs = n_inst * (n_inst - 1)
        l_dist = float((hinge * hinge).sum() / pairs)
        signs = np.sign(center_diff)
        grad_centers -= (4.0 / pairs) * (hinge[:, :, None] * signs).sum(axis=1)
    else:
        l_dist = 0.0

    l_reg = float(np.abs(centers).sum(axis=1).mean())
    grad_centers += (params.alpha / n_inst) * np.sign(centers)

    for i, group in enumerate(groups):
        grad[group] += grad_centers[i] / len(group)

    total = l_var + l_dist + params.alpha * l_reg
    if not np.isfinite(total):
        raise NumericError("discriminative loss is not finite")

    def backward(upstream: np.ndarray) -> None:
        _accum(embeddings, float(upstream) * grad)

    node = Tensor(np.float64(total), embeddings.requires_grad, (embeddings,), backward)
    components = {"variance": l_var, "distance": l_dist, "regularizer": l_reg}
    return node, components


def cross_entropy(
    logits: Tensor,
    labels: np.ndarray,
    ignore_unlabeled: bool = True,
) -> Tensor:
    """Mean softmax cross entropy over labeled rows.

    Labels of -1 are skipped when ``ignore_unlabeled`` is set; at least
    one labeled row is required. Logits are shifted by their row maxima
    before exponentiation, so any finite logits are safe.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if logits.values.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError("logits must be (N, C) with one label per row")
    n_classes = logits.shape[1]
    if ignore_unlabeled:
        mask = labels >= 0
    else:
        mask = np.ones_like(labels, dtype=bool)
    if not mask.any():
        raise ValueError("cross_entropy: no labeled rows")
    if labels[mask].min() < 0 or labels[mask].max() >= n_classes:
        raise ValueError("cross_entropy: label outside [0, n_classes)")

    rows = np.flatnonzero(mask)
    z = logits.values[rows]
    z = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_probs = z - log_norm
    picked = log_probs[np.arange(rows.size), labels[rows]]
    value = float(-picked.mean())
    if not np.isfinite(value):
        raise NumericError("cross entropy is not finite")

    softmax = np.exp(log_probs)
    grad = np.zeros_like(logits.values)
    grad[rows] = softmax
    grad[rows, labels[rows]] -= 1.0
    grad /= rows.size

    def backward(upstream: np.ndarray) -> None:
        _accum(logits, float(upstream) * grad)

    return Tensor(np.float64(value), logits.requires_grad, (logits,), backward)


def total_loss(
    semantic_logits: Tensor,
    embeddings: Tensor,
    semantic_labels: np.ndarray,
    groups: list[np.ndarray],
    params: DiscriminativeParams = DiscriminativeParams(),
    ce_weight: float = 1.0,
    disc_weight: float = 1.0,
) -> tuple[Tensor, dict[str, float]]:
    """Weighted sum of cross entropy and the embedding loss.

    Returns the combined scalar tensor and a component dict holding the
    unweighted pieces plus the combined value.
    """
    ce = cross_entropy(semantic_logits, semantic_labels)
    disc, parts = discriminative_loss(embeddings, groups, params)
    combined = add(scale(ce, ce_weight), scale(disc, disc_weight))
    components = {
        "total": float(combined.values),
        "cross_entropy": float(ce.values),
        "embedding": float(disc.values),
        **parts,
    }
    return combined, components
