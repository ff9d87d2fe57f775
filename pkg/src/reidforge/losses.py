"""ID and metric losses with analytic gradients.

Every loss returns a :class:`LossOutput` whose ``grad`` has the shape of the
loss input. Reductions are batch means.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class IdLossConfig:
    num_classes: int
    epsilon: float = 0.1

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if not 0.0 <= self.epsilon < 1.0:
            raise ValueError(f"epsilon must lie in [0, 1), got {self.epsilon}")


@dataclass(frozen=True)
class SupConConfig:
    tau: float = 0.1

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")


@dataclass(frozen=True)
class LossOutput:
    value: float
    grad: np.ndarray


class NoValidPairsError(ValueError):
    """The batch has no anchor with the positives/negatives the loss needs."""


def label_smooth_targets(y: int, config: IdLossConfig) -> np.ndarray:
    n, eps = config.num_classes, config.epsilon
    if not 0 <= y < n:
        raise IndexError(f"label {y} out of range for {n} classes")
    q = np.full(n, eps / n)
    # written as the complement so the entries sum to 1 to rounding
    q[y] = 1.0 - eps * (n - 1) / n
    return q


def _smooth_targets(labels: np.ndarray, config: IdLossConfig) -> np.ndarray:
    n, eps = config.num_classes, config.epsilon
    if labels.min() < 0 or labels.max() >= n:
        raise IndexError(f"labels must lie in [0, {n})")
    q = np.full((labels.size, n), eps / n)
    q[np.arange(labels.size), labels] = 1.0 - eps * (n - 1) / n
    return q


def id_loss(logits, labels, config: IdLossConfig) -> LossOutput:
    """Label-smoothed cross-entropy, averaged over the batch."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[1] != config.num_classes or logits.shape[0] != labels.size:
        raise ValueError(f"logits shape {logits.shape} inconsistent with {labels.size} labels / "
                         f"{config.num_classes} classes")
    B = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_norm
    q = _smooth_targets(labels, config)
    value = float(-(q * log_p).sum() / B)
    grad = (np.exp(log_p) - q) / B
    return LossOutput(value, grad)


def supcon_loss(embeddings, labels, config: SupConConfig = SupConConfig()) -> LossOutput:
    """Supervised contrastive loss on L2-normalized embeddings.

    For anchor ``i`` the denominator runs over every other batch member and
    the numerator over same-label members. Anchors without a positive are
    left out of both the sum and the anchor count.
    """
    z = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    B = z.shape[0]
    if labels.shape != (B,):
        raise ValueError(f"{labels.shape} labels for {B} embeddings")
    offdiag = ~np.eye(B, dtype=bool)
    pos = (labels[:, None] == labels[None, :]) & offdiag
    n_pos = pos.sum(axis=1)
    anchors = n_pos > 0
    n_anchors = int(anchors.sum())
    if n_anchors == 0:
        raise NoValidPairsError("no anchor has a positive in the batch")

    sim = (z @ z.T) / config.tau
    masked = np.where(offdiag, sim, -np.inf)
    row_max = masked.max(axis=1, keepdims=True)
    log_denom = row_max[:, 0] + np.log(np.exp(masked - row_max).sum(axis=1))
    prob = np.exp(masked - log_denom[:, None])   # softmax over A(i); diagonal is exactly 0

    safe_n = np.where(anchors, n_pos, 1)
    pos_term = (np.where(pos, sim, 0.0).sum(axis=1)) / safe_n
    per_anchor = np.where(anchors, log_denom - pos_term, 0.0)
    value = float(per_anchor.sum() / n_anchors)

    coef = prob - pos / safe_n[:, None]
    coef[~anchors] = 0.0
    coef /= n_anchors
    grad = (coef + coef.T) @ z / config.tau
    return LossOutput(value, grad)


def triplet_loss(embeddings, labels, margin: float = 0.3) -> LossOutput:
    """Batch-hard triplet loss on Euclidean distances.

    Each anchor pairs its farthest positive with its nearest negative; the
    hinge ``d_ap - d_an + margin`` is averaged over anchors that have both.
    """
    z = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    B = z.shape[0]
    diff = z[:, None, :] - z[None, :, :]
    dist = np.sqrt((diff ** 2).sum(axis=2))
    same = labels[:, None] == labels[None, :]
    offdiag = ~np.eye(B, dtype=bool)
    pos = same & offdiag
    neg = ~same
    valid = pos.any(axis=1) & neg.any(axis=1)
    if not valid.any():
        raise NoValidPairsError("no anchor has both a positive and a negative")

    hard_p = np.argmax(np.where(pos, dist, -np.inf), axis=1)
    hard_n = np.argmin(np.where(neg, dist, np.inf), axis=1)
    rows = np.arange(B)
    d_ap = dist[rows, hard_p]
    d_an = dist[rows, hard_n]
    hinge = np.where(valid, d_ap - d_an + margin, 0.0)
    active = valid & (hinge > 0)
    n_valid = int(valid.sum())
    value = float(np.maximum(hinge, 0.0).sum() / n_valid)

    grad = np.zeros_like(z)
    for i in np.flatnonzero(active):
        p, n = hard_p[i], hard_n[i]
        if d_ap[i] > 0:
            u = (z[i] - z[p]) / d_ap[i]
            grad[i] += u
            grad[p] -= u
        if d_an[i] > 0:
            v = (z[i] - z[n]) / d_an[i]
            grad[i] -= v
            grad[n] += v
    return LossOutput(value, grad / n_valid)
