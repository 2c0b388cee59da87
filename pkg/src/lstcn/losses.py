"""Joint metric-learning objective: batch-all triplet loss over per-part
embeddings plus a focal classification term, combined by a weight.

Triplet mining is batch-all with active-only averaging: every valid
(anchor, positive, negative) triple contributes a hinge
max(margin + d(a, p) - d(a, n), 0) per part, and the loss is the sum of
nonzero hinges divided by their count (0 when none are active), averaged
over parts. A 1/(2M) prefactor on the triplet term is available behind a
flag for fidelity experiments; the default drops it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class LossReport:
    """Scalar summary of one joint-loss evaluation."""

    triplet_value: float
    focal_value: float
    total: float
    n_active_triplets: int
    n_total_triplets: int
    mean_positive_dist: float
    mean_negative_dist: float
    warning: str | None = None


def _pairwise_distances(features: Tensor) -> Tensor:
    """Euclidean distances per part: features [P, B, E] -> [P, B, B].

    A tiny epsilon keeps sqrt differentiable at exactly-zero distances
    (the diagonal and identical embeddings); it perturbs distances by at
    most 1e-8, far below every tolerance used against the brute-force
    oracle.
    """
    sq = T.reduce(features * features, (2,), "sum", keepdims=True)  # [P, B, 1]
    cross = T.matmul(features, features.transpose((0, 2, 1)))  # [P, B, B]
    d2 = T.relu(sq + sq.transpose((0, 2, 1)) - 2.0 * cross)
    return T.sqrt(d2 + 1e-16)


def triplet_loss(
    features: Tensor,
    labels: np.ndarray,
    margin: float = 0.2,
    eq11_prefactor: bool = False,
):
    """Batch-all triplet loss over features [B, n_parts, E].

    Returns (loss Tensor, stats dict). Stats carry active/total triple
    counts and mean positive/negative distances for the report.
    """
    if margin <= 0:
        raise ValueError(f"triplet margin must be > 0, got {margin}")
    if features.ndim != 3:
        raise ValueError(f"triplet features must be [B, n_parts, E], got shape {features.shape}")
    labels = np.asarray(labels)
    b = features.shape[0]
    if labels.shape != (b,):
        raise ValueError(f"labels shape {labels.shape} != ({b},)")
    if b < 2:
        raise ValueError(f"triplet loss needs a batch of >= 2, got {b}")

    same = labels[:, None] == labels[None, :]
    eye = np.eye(b, dtype=bool)
    pos_mask = same & ~eye  # anchor-positive pairs, distinct indices
    neg_mask = ~same
    # valid (a, p, n): p positive for a, n negative for a
    valid = (pos_mask[:, :, None] & neg_mask[:, None, :]).astype(np.float64)
    n_parts = features.shape[1]
    n_valid = int(valid.sum()) * n_parts

    warning = None
    if not neg_mask.any():
        warning = "single-class batch: triplet term is 0"
    if n_valid == 0:
        zero = Tensor(0.0)
        stats = dict(
            n_active=0, n_total=0, mean_positive_dist=0.0, mean_negative_dist=0.0,
            warning=warning or "no valid triplets in batch",
        )
        return zero, stats

    stacked = features.transpose((1, 0, 2))  # [P, B, E]
    dist = _pairwise_distances(stacked)  # [P, B, B]
    # hinge[p, a, i, j] = margin + d(a, i) - d(a, j), masked to valid triples
    hinge = T.relu(
        dist.reshape((n_parts, b, b, 1)) - dist.reshape((n_parts, b, 1, b)) + margin
    )
    hinge = hinge * Tensor(valid[None, :, :, :])
    # active-only average within each part, then mean over parts
    active_per_part = np.count_nonzero(hinge.data > 0, axis=(1, 2, 3))
    n_active = int(active_per_part.sum())
    part_sums = T.reduce(hinge, (1, 2, 3), "sum")  # [P]
    loss = (part_sums * Tensor(1.0 / np.maximum(active_per_part, 1))).mean()
    if eq11_prefactor:
        loss = loss * (1.0 / (2.0 * margin))

    dvals = dist.data
    stats = dict(
        n_active=n_active,
        n_total=n_valid,
        mean_positive_dist=float(dvals[:, pos_mask].mean()) if pos_mask.any() else 0.0,
        mean_negative_dist=float(dvals[:, neg_mask].mean()) if neg_mask.any() else 0.0,
        warning=warning,
    )
    return loss, stats


def focal_loss(logits: Tensor, labels: np.ndarray, gamma: float = 2.0) -> Tensor:
    """Focal classification loss over logits [B, n_parts, n_classes].

    loss = mean over samples and parts of -(1 - p)^gamma * log(p) with p
    the softmax probability of the true class; log(p) comes from a
    log-sum-exp stabilized log-softmax. gamma = 0 reduces exactly to
    cross-entropy.
    """
    if gamma < 0:
        raise ValueError(f"focal gamma must be >= 0, got {gamma}")
    if logits.ndim != 3:
        raise ValueError(f"focal logits must be [B, n_parts, n_classes], got shape {logits.shape}")
    labels = np.asarray(labels)
    b, n_parts, n_classes = logits.shape
    if labels.shape != (b,):
        raise ValueError(f"labels shape {labels.shape} != ({b},)")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError(
            f"labels must lie in [0, {n_classes}), got range [{labels.min()}, {labels.max()}]"
        )

    onehot = np.zeros((b, 1, n_classes))
    onehot[np.arange(b), 0, labels] = 1.0
    logp = T.log_softmax(logits, axis=-1)
    logp_true = T.reduce(logp * Tensor(onehot), (2,), "sum")  # [B, n_parts]
    if gamma == 0.0:
        return -logp_true.mean()
    p = T.exp(logp_true)
    one_minus_p = T.relu(1.0 - p)  # clamp: exp rounding can graze 1.0
    return -(one_minus_p ** gamma * logp_true).mean()


def joint_loss(
    features: Tensor,
    logits: Tensor,
    labels: np.ndarray,
    margin: float = 0.2,
    gamma: float = 2.0,
    lambda_focal: float = 1.0,
    eq11_prefactor: bool = False,
):
    """total = triplet + lambda * focal; returns (total Tensor, LossReport)."""
    if lambda_focal < 0:
        raise ValueError(f"lambda_focal must be >= 0, got {lambda_focal}")
    trip, stats = triplet_loss(features, labels, margin, eq11_prefactor)
    foc = focal_loss(logits, labels, gamma)
    total = trip + lambda_focal * foc
    report = LossReport(
        triplet_value=trip.item(),
        focal_value=foc.item(),
        total=total.item(),
        n_active_triplets=stats["n_active"],
        n_total_triplets=stats["n_total"],
        mean_positive_dist=stats["mean_positive_dist"],
        mean_negative_dist=stats["mean_negative_dist"],
        warning=stats["warning"],
    )
    return total, report
