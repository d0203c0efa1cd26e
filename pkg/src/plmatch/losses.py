"""InfoNCE with a negative queue, the overlap-weighted dense loss and the
global/local mix.  These are plain-numpy evaluations; the trainer builds the
same quantities on an autodiff tape (see :mod:`plmatch.objective`)."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .geometry import OverlapMatrix, match_weights
from .matching import FeatureGrid, normalize_rows, precise_match


class LossError(ValueError):
    pass


class DegenerateOverlapWarning(RuntimeWarning):
    """All match weights are zero; the local loss is defined as 0."""


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.2
    lam: float = 0.5

    def __post_init__(self):
        if not self.tau > 0:
            raise LossError("tau must be positive")
        if not 0.0 <= self.lam <= 1.0:
            raise LossError("lambda must lie in [0, 1]")


class NegativeQueue:
    """Fixed-capacity ring buffer of unit-norm keys."""

    def __init__(self, capacity: int, dim: int):
        if capacity < 1:
            raise LossError("queue capacity must be >= 1")
        self.capacity = int(capacity)
        self.dim = int(dim)
        self.buffer = np.zeros((self.capacity, self.dim))
        self.size = 0
        self.cursor = 0
        self.pushed = 0

    @property
    def entries(self) -> np.ndarray:
        """Stored keys, oldest first."""
        if self.size < self.capacity:
            return self.buffer[: self.size]
        return np.roll(self.buffer, -self.cursor, axis=0)

    def snapshot(self) -> np.ndarray:
        # order is irrelevant to the loss; avoid the roll
        return self.buffer[: self.size].copy()

    def __len__(self):
        return self.size


def queue_push(queue: NegativeQueue, batch) -> NegativeQueue:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.size == 0:
        return queue
    batch = np.atleast_2d(batch)
    if batch.shape[1] != queue.dim:
        raise LossError(f"dimension mismatch: queue {queue.dim}, batch {batch.shape[1]}")
    batch, ok = normalize_rows(batch)
    if not np.all(ok):
        raise LossError("cannot enqueue a zero vector")
    for row in batch:
        queue.buffer[queue.cursor] = row
        queue.cursor = (queue.cursor + 1) % queue.capacity
        queue.size = min(queue.size + 1, queue.capacity)
        queue.pushed += 1
    return queue


def _negatives(negatives) -> np.ndarray:
    if isinstance(negatives, NegativeQueue):
        negatives = negatives.snapshot()
    negatives = np.asarray(negatives, dtype=np.float64)
    if negatives.size == 0:
        raise LossError("no negatives")
    return np.atleast_2d(negatives)


def info_nce(q, k_pos, negatives, tau: float) -> float:
    """-log softmax of the positive logit among positive + negatives."""
    neg = _negatives(negatives)
    q = np.asarray(q, dtype=np.float64)
    k_pos = np.asarray(k_pos, dtype=np.float64)
    q = q / np.linalg.norm(q)
    k_pos = k_pos / np.linalg.norm(k_pos)
    logits = np.concatenate([[q @ k_pos], neg @ q]) / tau
    top = logits.max()
    return float(top + np.log(np.exp(logits - top).sum()) - logits[0])


def info_nce_rows(anchors: np.ndarray, positives: np.ndarray, negatives: np.ndarray, tau: float) -> np.ndarray:
    """Vectorized :func:`info_nce` over matching rows.

    Anchors are normalized; positives are used as given, so an all-zero
    (invalid) positive yields a finite value the caller can weight away.
    """
    neg = _negatives(negatives)
    a, _ = normalize_rows(np.asarray(anchors, dtype=np.float64))
    pos = np.sum(a * positives, axis=1, keepdims=True)
    logits = np.concatenate([pos, a @ neg.T], axis=1) / tau
    top = logits.max(axis=1, keepdims=True)
    lse = top[:, 0] + np.log(np.exp(logits - top).sum(axis=1))
    return lse - logits[:, 0]


def global_loss(q, k, queue, tau: float) -> float:
    return info_nce(q, k, queue, tau)


def local_loss(
    Q: FeatureGrid,
    K: FeatureGrid,
    om: OverlapMatrix,
    dense_queue,
    tau: float,
) -> tuple[float, bool]:
    """Overlap-weighted dense loss over both matching directions.

    Returns ``(loss, degenerate)``; ``degenerate`` is set (and a warning
    issued) when no patch overlaps, in which case the loss is 0.
    """
    if Q.local.shape != K.local.shape or om.n != Q.n:
        raise LossError("size mismatch between features and overlap matrix")
    neg = _negatives(dense_queue)
    w = match_weights(om)
    denom = w.wq.sum() + w.wk.sum()
    if denom == 0:
        warnings.warn("no overlapping patches; local loss set to 0", DegenerateOverlapWarning, stacklevel=2)
        return 0.0, True
    kp = precise_match(om.m, K.local)
    qp = precise_match(om.m.T, Q.local)
    lq = info_nce_rows(Q.local, kp.targets, neg, tau)
    lk = info_nce_rows(K.local, qp.targets, neg, tau)
    # invalid rows have zero weight; mask anyway so nothing non-finite leaks in
    total = np.sum(np.where(kp.valid, w.wq * lq, 0.0)) + np.sum(np.where(qp.valid, w.wk * lk, 0.0))
    return float(total / denom), False


def combined_loss(global_value: float, local_value: float, lam: float) -> float:
    if not 0.0 <= lam <= 1.0:
        raise LossError("lambda must lie in [0, 1]")
    return (1.0 - lam) * global_value + lam * local_value
