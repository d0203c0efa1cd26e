import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import naive_info_nce, naive_local_loss
from plmatch.geometry import AugmentationSpec, Rect, overlap_matrix, patch_boxes
from plmatch.losses import (
    DegenerateOverlapWarning,
    LossConfig,
    LossError,
    NegativeQueue,
    combined_loss,
    global_loss,
    info_nce,
    info_nce_rows,
    local_loss,
    queue_push,
)
from plmatch.matching import FeatureGrid


def unit(rng, *shape):
    x = rng.standard_normal(shape)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def make_queue(vectors):
    vectors = np.atleast_2d(vectors)
    q = NegativeQueue(len(vectors), vectors.shape[1])
    return queue_push(q, vectors)


class TestInfoNCE:
    def test_one_orthogonal_negative(self):
        q = np.array([1.0, 0.0])
        assert info_nce(q, q, make_queue([[0.0, 1.0]]), 1.0) == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-12)
        assert math.log(1 + math.exp(-1)) == pytest.approx(0.31326, abs=1e-5)

    @pytest.mark.parametrize("n", [1, 4, 63])
    def test_all_orthogonal(self, n):
        d = n + 2
        e = np.eye(d)
        assert info_nce(e[0], e[1], make_queue(e[2:]), 0.3) == pytest.approx(math.log(n + 1), abs=1e-12)

    def test_against_naive(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            q, k = unit(rng, 16), unit(rng, 16)
            negs = unit(rng, 64, 16)
            assert info_nce(q, k, make_queue(negs), 0.2) == pytest.approx(naive_info_nce(q, k, negs.tolist(), 0.2), abs=1e-6)

    def test_defensive_normalization(self):
        rng = np.random.default_rng(1)
        q, k, negs = unit(rng, 8), unit(rng, 8), unit(rng, 5, 8)
        assert info_nce(3 * q, 0.1 * k, negs, 0.2) == pytest.approx(info_nce(q, k, negs, 0.2), abs=1e-12)

    def test_empty_queue(self):
        with pytest.raises(LossError, match="no negatives"):
            info_nce(np.ones(3), np.ones(3), NegativeQueue(4, 3), 0.2)

    def test_extreme_logits_stay_finite(self):
        q = np.array([1.0, 0.0])
        val = info_nce(q, -q, make_queue([q] * 3), 1e-3)
        assert np.isfinite(val) and val == pytest.approx(2000 + math.log(3), rel=1e-9)

    @settings(max_examples=50, deadline=None)
    @given(c=st.floats(-50, 50), seed=st.integers(0, 10**6))
    def test_shift_invariance(self, c, seed):
        # softmax cross-entropy only sees logit differences
        rng = np.random.default_rng(seed)
        logits = rng.uniform(-5, 5, 9)

        def loss(z):
            top = z.max()
            return top + math.log(np.exp(z - top).sum()) - z[0]

        assert loss(logits + c) == pytest.approx(loss(logits), abs=1e-9)

    def test_decreasing_in_positive_similarity(self):
        rng = np.random.default_rng(2)
        negs = unit(rng, 10, 2)
        q = np.array([1.0, 0.0])
        angles = np.linspace(np.pi, 0, 20)
        vals = [info_nce(q, np.array([np.cos(a), np.sin(a)]), negs, 0.5) for a in angles]
        assert np.all(np.diff(vals) < 0) and min(vals) >= 0

    def test_rows_match_scalar(self):
        rng = np.random.default_rng(3)
        A, P, N = unit(rng, 7, 5), unit(rng, 7, 5), unit(rng, 11, 5)
        rows = info_nce_rows(A, P, N, 0.2)
        np.testing.assert_allclose(rows, [info_nce(a, p, N, 0.2) for a, p in zip(A, P)], atol=1e-12)


class TestGlobalLoss:
    def test_four_orthogonal_negatives(self):
        e = np.eye(5)
        assert global_loss(e[0], e[0], make_queue(e[1:]), 1.0) == pytest.approx(math.log(1 + 4 * math.exp(-1)), abs=1e-12)

    def test_batch_mean(self):
        rng = np.random.default_rng(4)
        Q, K, N = unit(rng, 6, 8), unit(rng, 6, 8), unit(rng, 20, 8)
        per = [global_loss(q, k, N, 0.2) for q, k in zip(Q, K)]
        assert np.mean(info_nce_rows(Q, K, N, 0.2)) == pytest.approx(np.mean(per), abs=1e-12)


def views(q, k, g):
    return (
        patch_boxes(AugmentationSpec(Rect(*q), out_size=g * 8), g),
        patch_boxes(AugmentationSpec(Rect(*k), out_size=g * 8), g),
    )


class TestLocalLoss:
    def test_identity_views(self):
        rng = np.random.default_rng(5)
        g = 3
        pq, pk = views((0, 0, 30, 30), (0, 0, 30, 30), g)
        om = overlap_matrix(pq, pk)
        Q, K, N = unit(rng, 9, 4), unit(rng, 9, 4), unit(rng, 12, 4)
        val, degenerate = local_loss(FeatureGrid(Q, Q[0]), FeatureGrid(K, K[0]), om, N, 0.2)
        expected = sum(info_nce(Q[i], K[i], N, 0.2) + info_nce(K[i], Q[i], N, 0.2) for i in range(9)) / 18
        assert val == pytest.approx(expected, abs=1e-12) and not degenerate

    def test_disjoint_crops(self):
        rng = np.random.default_rng(6)
        pq, pk = views((0, 0, 20, 20), (30, 30, 20, 20), 3)
        om = overlap_matrix(pq, pk)
        with pytest.warns(DegenerateOverlapWarning):
            val, degenerate = local_loss(FeatureGrid(unit(rng, 9, 4), np.ones(4)), FeatureGrid(unit(rng, 9, 4), np.ones(4)), om, unit(rng, 3, 4), 0.2)
        assert val == 0.0 and degenerate

    def test_against_scalar_loop(self):
        rng = np.random.default_rng(7)
        for _ in range(10):
            q = (rng.uniform(0, 20), rng.uniform(0, 20), rng.uniform(10, 40), rng.uniform(10, 40))
            k = (rng.uniform(0, 20), rng.uniform(0, 20), rng.uniform(10, 40), rng.uniform(10, 40))
            pq, pk = views(q, k, 3)
            om = overlap_matrix(pq, pk)
            Q, K, N = unit(rng, 9, 5), unit(rng, 9, 5), unit(rng, 16, 5)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", DegenerateOverlapWarning)
                val, _ = local_loss(FeatureGrid(Q, Q[0]), FeatureGrid(K, K[0]), om, N, 0.2)
            ref = naive_local_loss(Q.tolist(), K.tolist(), om.m.tolist(), om.areas_q.tolist(), om.areas_k.tolist(), N.tolist(), 0.2)
            assert val == pytest.approx(ref, abs=1e-9)

    @pytest.mark.parametrize("c", [0.5, 3.0])
    def test_scale_invariance(self, c):
        rng = np.random.default_rng(8)
        q, k = (4, 6, 30, 25), (10, 2, 20, 35)
        Q, K, N = unit(rng, 9, 5), unit(rng, 9, 5), unit(rng, 16, 5)
        pq, pk = views(q, k, 3)
        base, _ = local_loss(FeatureGrid(Q, Q[0]), FeatureGrid(K, K[0]), overlap_matrix(pq, pk), N, 0.2)
        pq, pk = views(tuple(c * v for v in q), tuple(c * v for v in k), 3)
        scaled, _ = local_loss(FeatureGrid(Q, Q[0]), FeatureGrid(K, K[0]), overlap_matrix(pq, pk), N, 0.2)
        assert scaled == pytest.approx(base, abs=1e-9)

    def test_size_mismatch(self):
        rng = np.random.default_rng(9)
        pq, pk = views((0, 0, 20, 20), (0, 0, 20, 20), 2)
        with pytest.raises(LossError):
            local_loss(FeatureGrid(unit(rng, 9, 4), np.ones(4)), FeatureGrid(unit(rng, 9, 4), np.ones(4)), overlap_matrix(pq, pk), unit(rng, 3, 4), 0.2)


class TestCombined:
    def test_endpoints_and_midpoint(self):
        assert combined_loss(2.0, 4.0, 0.0) == 2.0
        assert combined_loss(2.0, 4.0, 1.0) == 4.0
        assert combined_loss(2.0, 4.0, 0.5) == 3.0

    def test_affine_slope(self):
        g, l, h = 1.7, 3.2, 1e-3
        slope = (combined_loss(g, l, 0.5 + h) - combined_loss(g, l, 0.5 - h)) / (2 * h)
        assert slope == pytest.approx(l - g, abs=1e-9)

    @pytest.mark.parametrize("lam", [-0.1, 1.5])
    def test_out_of_range(self, lam):
        with pytest.raises(LossError):
            combined_loss(1.0, 1.0, lam)

    def test_loss_config(self):
        with pytest.raises(LossError):
            LossConfig(tau=0.0)
        with pytest.raises(LossError):
            LossConfig(lam=2.0)


class TestQueue:
    def test_fifo_eviction(self):
        q = NegativeQueue(3, 2)
        vecs = [[1, 0], [0, 1], [1, 1], [-1, 0]]
        for v in vecs:
            queue_push(q, [v])
        stored = q.entries
        assert len(q) == 3
        assert not np.any(np.all(np.isclose(stored, [1, 0]), axis=1))
        np.testing.assert_allclose(stored[-1], [-1, 0])
        np.testing.assert_allclose(stored[0], [0, 1])

    def test_empty_push(self):
        q = NegativeQueue(3, 2)
        queue_push(q, np.zeros((0, 2)))
        assert len(q) == 0 and q.cursor == 0

    def test_dimension_mismatch(self):
        with pytest.raises(LossError):
            queue_push(NegativeQueue(3, 2), np.ones((1, 3)))

    @settings(max_examples=30, deadline=None)
    @given(sizes=st.lists(st.integers(0, 7), max_size=8), cap=st.integers(1, 10))
    def test_unit_norm_and_occupancy(self, sizes, cap):
        rng = np.random.default_rng(sum(sizes) + cap)
        q = NegativeQueue(cap, 4)
        pushed = 0
        for s in sizes:
            queue_push(q, rng.standard_normal((s, 4)) * rng.uniform(0.1, 10))
            pushed += s
            assert len(q) == min(pushed, cap)
            assert q.cursor == pushed % cap
        if len(q):
            np.testing.assert_allclose(np.linalg.norm(q.entries, axis=1), 1.0, atol=1e-12)
