"""The combined global + dense objective as an autodiff graph.

Key-branch quantities arrive as numpy arrays and enter the tape as constants
(stop-gradient).  Matching is expressed uniformly through per-image
"assignment" matrices: the overlap matrix for precise matching, one-hot rows
for the one-to-one baselines.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .geometry import PatchGrid, match_weights, overlap_matrix
from .matching import assignment_matrix, feature_assignment, location_assignment, normalize_rows

MATCHERS = ("pl", "loc", "ft")


@dataclass
class MatchPlan:
    """Per-image matching for one batch: (B, n, n) mixing matrices and (B, n) weights."""

    a_q: np.ndarray  # query patch i <- key patches
    a_k: np.ndarray  # key patch i <- query patches
    wq: np.ndarray
    wk: np.ndarray


def plan_for_pair(
    matcher: str,
    pq: PatchGrid,
    pk: PatchGrid,
    q_local: np.ndarray | None = None,
    k_local: np.ndarray | None = None,
):
    """Mixing matrices and weights for one view pair."""
    n = pq.n
    if matcher == "pl":
        om = overlap_matrix(pq, pk)
        w = match_weights(om)
        return om.m, om.m.T.copy(), w.wq, w.wk
    ones = np.ones(n)
    if matcher == "loc":
        return (
            assignment_matrix(location_assignment(pq, pk), n),
            assignment_matrix(location_assignment(pk, pq), n),
            ones,
            ones,
        )
    if matcher == "ft":
        return (
            assignment_matrix(feature_assignment(q_local, k_local), n),
            assignment_matrix(feature_assignment(k_local, q_local), n),
            ones,
            ones,
        )
    raise ValueError(f"unknown matcher {matcher!r}; expected one of {MATCHERS}")


def stack_plans(plans) -> MatchPlan:
    a_q, a_k, wq, wk = zip(*plans)
    return MatchPlan(np.stack(a_q), np.stack(a_k), np.stack(wq), np.stack(wk))


def info_nce_graph(anchors, positives, negatives: np.ndarray, tau: float) -> ad.Node:
    """Row-wise InfoNCE; anchors and positives are (R, d), negatives (N, d)."""
    tape = ad._tape_of(anchors, positives)
    anchors = ad._as_node(anchors, tape)
    positives = ad._as_node(positives, tape)
    if len(negatives) == 0:
        raise ValueError("no negatives")
    pos = ad.dot(anchors, positives)
    neg = ad.matmul(anchors, tape.const(np.asarray(negatives).T))
    logits = ad.scale(ad.concat([ad.expand_dims(pos, 1), neg], axis=1), 1.0 / tau)
    return ad.sub(ad.log_sum_exp(logits, axis=1), ad.scale(pos, 1.0 / tau))


def global_loss_graph(q: ad.Node, k: np.ndarray, negatives: np.ndarray, tau: float) -> ad.Node:
    return ad.mean(info_nce_graph(q, k, negatives, tau))


def local_loss_graph(
    Q: ad.Node,
    K: np.ndarray,
    plan: MatchPlan,
    negatives: np.ndarray,
    tau: float,
) -> tuple[ad.Node, np.ndarray]:
    """Batch mean of the per-image weighted dense loss.

    ``Q`` is the (B*n, d) query-branch node, ``K`` the (B*n, d) key features.
    Returns the loss node and a (B,) mask of images with no overlap at all
    (these contribute 0).
    """
    B, n, _ = plan.a_q.shape
    d = K.shape[1]
    k_targets, _ = normalize_rows(plan.a_q @ K.reshape(B, n, d))
    Qb = ad.reshape(Q, (B, n, d))
    q_targets = ad.row_l2_normalize(ad.matmul(plan.a_k, Qb), allow_zero=True)

    denom = plan.wq.sum(axis=1) + plan.wk.sum(axis=1)
    degenerate = denom == 0
    inv = np.where(degenerate, 0.0, 1.0 / np.where(degenerate, 1.0, denom)) / B
    cq = (plan.wq * inv[:, None]).reshape(-1)
    ck = (plan.wk * inv[:, None]).reshape(-1)

    lq = info_nce_graph(Q, k_targets.reshape(B * n, d), negatives, tau)
    lk = info_nce_graph(K, ad.reshape(q_targets, (B * n, d)), negatives, tau)
    loss = ad.add(ad.reduce_sum(ad.mul(lq, cq)), ad.reduce_sum(ad.mul(lk, ck)))
    return loss, degenerate


def combined_loss_graph(global_node: ad.Node, local_node: ad.Node, lam: float) -> ad.Node:
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    return ad.add(ad.scale(global_node, 1.0 - lam), ad.scale(local_node, lam))
