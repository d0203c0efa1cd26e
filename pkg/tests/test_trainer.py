import math

import numpy as np
import pytest

from plmatch import autodiff as ad
from plmatch.config import RunConfig
from plmatch.geometry import overlap_matrix, patch_boxes
from plmatch.losses import global_loss, local_loss
from plmatch.matching import FeatureGrid
from plmatch.model import encode_batch, load_checkpoint
from plmatch.objective import local_loss_graph, plan_for_pair, stack_plans
from plmatch.trainer import (
    LOG_FIELDS,
    NumericalAbort,
    batch_views,
    cosine_lr,
    full_loss_gradcheck,
    init_state,
    make_dataset,
    read_log,
    sgd_update,
    train,
    train_step,
)

TINY = dict(
    steps=6, batch_size=2, g=2, out_size=8, d_backbone=8, d=4, d_g=4, n_images=4, image_size=16,
    kmin=1, kmax=4, queue_size=16, dense_queue_size=16, checkpoint_every=3,
)


class TestOptimizerArithmetic:
    def test_sgd_two_steps(self):
        p, buf = {"w": np.array([1.0])}, {}
        sgd_update(p, {"w": np.array([0.5])}, lr=0.1, momentum=0.9, weight_decay=0.0, buffers=buf)
        assert p["w"][0] == pytest.approx(0.95, abs=1e-15)
        sgd_update(p, {"w": np.array([0.5])}, lr=0.1, momentum=0.9, weight_decay=0.0, buffers=buf)
        assert buf["w"][0] == pytest.approx(0.95, abs=1e-15)
        assert p["w"][0] == pytest.approx(0.855, abs=1e-15)

    def test_two_steps_constant_gradient(self):
        lr, mu, g = 0.1, 0.9, 0.5
        p, buf = {"w": np.array([1.0])}, {}
        for _ in range(2):
            sgd_update(p, {"w": np.array([g])}, lr, mu, 0.0, buf)
        assert 1.0 - p["w"][0] == pytest.approx(lr * g * (2 + mu), abs=1e-15)

    def test_single_plain_step(self):
        p = {"w": np.array([3.0, -1.0])}
        sgd_update(p, {"w": np.array([1.0, 2.0])}, 0.5, 0.0, 0.0, {})
        np.testing.assert_array_equal(p["w"], [2.5, -2.0])

    def test_weight_decay_enters_velocity(self):
        p, buf = {"w": np.array([2.0])}, {}
        sgd_update(p, {"w": np.array([0.0])}, lr=1.0, momentum=0.0, weight_decay=0.1, buffers=buf)
        assert p["w"][0] == pytest.approx(1.8, abs=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            sgd_update({"w": np.ones(2)}, {"w": np.ones(3)}, 0.1, 0.9, 0.0, {})

    def test_cosine_schedule(self):
        assert cosine_lr(0, 100, 0.03) == pytest.approx(0.03)
        assert cosine_lr(50, 100, 0.03) == pytest.approx(0.015)
        assert cosine_lr(100, 100, 0.03) == pytest.approx(0.0, abs=1e-15)
        vals = [cosine_lr(t, 100, 1.0) for t in range(101)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))


class TestObjectiveGraph:
    def test_local_graph_matches_reference(self):
        # graph version of the dense loss equals the numpy reference at B=1
        cfg = RunConfig(**TINY)
        state = init_state(cfg)
        specs, vq, vk = batch_views(cfg, state.images, [0, 1], 0)
        mcfg = cfg.model()
        fq = encode_batch(vq, state.branches.query, mcfg)
        fk = encode_batch(vk, state.branches.key, mcfg)
        dneg = state.dense_queue.snapshot()
        plans, refs = [], []
        for b, (aq, ak) in enumerate(specs):
            pq, pk = patch_boxes(aq, cfg.g), patch_boxes(ak, cfg.g)
            Q = fq["local"][b * 4 : (b + 1) * 4]
            K = fk["local"][b * 4 : (b + 1) * 4]
            plans.append(plan_for_pair("pl", pq, pk, Q, K))
            val, _ = local_loss(FeatureGrid(Q, fq["global"][b]), FeatureGrid(K, fk["global"][b]), overlap_matrix(pq, pk), dneg, cfg.tau)
            refs.append(val)
        tape = ad.Tape()
        node, _ = local_loss_graph(tape.const(fq["local"]), fk["local"], stack_plans(plans), dneg, cfg.tau)
        assert float(node.value) == pytest.approx(np.mean(refs), abs=1e-10)

    def test_global_reference_agrees(self):
        e = np.eye(5)
        assert global_loss(e[0], e[0], e[1:], 1.0) == pytest.approx(math.log(1 + 4 * math.exp(-1)))


@pytest.mark.parametrize("matcher", ["pl", "loc", "ft"])
@pytest.mark.parametrize("seed", [0, 1])
def test_full_loss_gradcheck(seed, matcher):
    assert full_loss_gradcheck(seed, h=1e-5, matcher=matcher) < 1e-4


@pytest.mark.parametrize("lam", [0.0, 1.0])
def test_gradcheck_endpoints(lam):
    assert full_loss_gradcheck(2, h=1e-5, lam=lam) < 1e-4


class TestTrainLoop:
    def test_artifacts_and_reproducibility(self, tmp_path):
        cfg = RunConfig(**TINY)
        _, rec_a = train(cfg, out_dir=tmp_path / "a")
        _, rec_b = train(cfg, out_dir=tmp_path / "b")
        for name in ("config.json", "log.csv", "ckpt_000003.plm", "ckpt_000006.plm", "final.plm"):
            assert (tmp_path / "a" / name).is_file()
        rows_a, rows_b = read_log(tmp_path / "a" / "log.csv"), read_log(tmp_path / "b" / "log.csv")
        assert list(rows_a[0]) == list(LOG_FIELDS)
        strip = lambda rows: [{k: v for k, v in r.items() if k != "wall_ms"} for r in rows]  # noqa: E731
        assert strip(rows_a) == strip(rows_b)
        ga, _ = load_checkpoint(tmp_path / "a" / "final.plm")
        gb, _ = load_checkpoint(tmp_path / "b" / "final.plm")
        assert all(ga["query"][k].tobytes() == gb["query"][k].tobytes() for k in ga["query"])

    def test_seed_changes_run(self):
        _, a = train(RunConfig(**{**TINY, "steps": 2}))
        _, b = train(RunConfig(**{**TINY, "steps": 2, "seed": 1}))
        assert a[0].combined != b[0].combined

    def test_step_updates_both_branches_and_queues(self):
        cfg = RunConfig(**{**TINY, "ema_m": 0.5})
        state = init_state(cfg)
        q0 = {k: v.copy() for k, v in state.branches.query.items()}
        k0 = {k: v.copy() for k, v in state.branches.key.items()}
        cursor = state.global_queue.cursor
        train_step(state)
        name = "embed.w"
        assert not np.array_equal(state.branches.query[name], q0[name])
        np.testing.assert_allclose(state.branches.key[name], 0.5 * k0[name] + 0.5 * state.branches.query[name], atol=1e-15)
        assert state.global_queue.cursor == (cursor + 2) % 16

    def test_combined_is_convex_mix(self):
        state = init_state(RunConfig(**{**TINY, "lam": 0.25}))
        rec = train_step(state)
        assert rec.combined == pytest.approx(0.75 * rec.global_loss + 0.25 * rec.local_loss, abs=1e-12)

    def test_symmetric_flag_runs(self):
        state = init_state(RunConfig(**{**TINY, "symmetric": True}))
        rec = train_step(state)
        assert np.isfinite(rec.combined)
        assert state.global_queue.cursor == 4 % 16 or len(state.global_queue) == 16

    def test_nan_aborts_with_seeds(self):
        state = init_state(RunConfig(**TINY))
        state.branches.query["embed.w"][:] = np.nan
        with pytest.raises(NumericalAbort) as info:
            train_step(state)
        diag = info.value.diagnostics
        assert diag["step"] == 0 and len(diag["aug_seeds"]) == 2

    def test_dataset_is_seeded(self):
        cfg = RunConfig(**TINY)
        a = make_dataset(2, 0, cfg.data())
        b = make_dataset(2, 0, cfg.data())
        assert a[1].pixels.tobytes() == b[1].pixels.tobytes()
