"""Momentum-encoder training loop for the global + dense objective."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import RunConfig
from .data import DataConfig, generate_image, sample_aug_pair
from .geometry import patch_boxes
from .losses import NegativeQueue, queue_push
from .model import BranchPair, ModelConfig, ema_update, encode_batch, forward, init_params, as_vars, model_meta, resample, save_checkpoint
from .objective import combined_loss_graph, global_loss_graph, local_loss_graph, plan_for_pair, stack_plans

log = logging.getLogger(__name__)

# fixed stream offsets: one seeded generator family per purpose
STREAM_DATA = 0
STREAM_INIT = 1
STREAM_BATCH = 2
STREAM_AUG = 3
STREAM_EVAL = 4

LOG_FIELDS = ("step", "global_loss", "local_loss", "combined", "lr", "wall_ms")


class NumericalAbort(RuntimeError):
    def __init__(self, message, diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


def stream(seed: int, purpose: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), purpose, *map(int, keys)])


def cosine_lr(step: int, total: int, base_lr: float) -> float:
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total))


def sgd_update(params: dict, grads: dict, lr: float, momentum: float, weight_decay: float, buffers: dict) -> dict:
    """Heavy-ball SGD with coupled weight decay, in place."""
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: grad shape {g.shape} != param shape {p.shape}")
        v = buffers.get(name)
        step = g + weight_decay * p
        v = step if v is None else momentum * v + step
        buffers[name] = v
        params[name] = p - lr * v
    return params


@dataclass
class StepRecord:
    step: int
    global_loss: float
    local_loss: float
    combined: float
    lr: float
    wall_ms: float

    def row(self):
        return [self.step, repr(self.global_loss), repr(self.local_loss), repr(self.combined), repr(self.lr), f"{self.wall_ms:.3f}"]


@dataclass
class TrainState:
    config: RunConfig
    branches: BranchPair
    global_queue: NegativeQueue
    dense_queue: NegativeQueue
    images: list
    buffers: dict = field(default_factory=dict)
    step: int = 0


def make_dataset(n: int, seed: int, data_cfg: DataConfig, offset: int = 0) -> list:
    return [generate_image([seed, STREAM_DATA, offset + i], data_cfg) for i in range(n)]


def init_state(cfg: RunConfig, images: list | None = None) -> TrainState:
    mcfg = cfg.model()
    rng = stream(cfg.seed, STREAM_INIT)
    params = init_params(mcfg, rng)
    if images is None:
        images = make_dataset(cfg.n_images, cfg.seed, cfg.data())
    gq = NegativeQueue(cfg.queue_size, cfg.d_g)
    dq = NegativeQueue(cfg.dense_queue_size, cfg.d)
    warm_start_queues(cfg, params, images, gq, dq)
    return TrainState(cfg, BranchPair.from_query(params, cfg.ema_m), gq, dq, images)


def warm_start_queues(cfg: RunConfig, params: dict, images: list, gq: NegativeQueue, dq: NegativeQueue, chunk: int = 64):
    """Fill both queues with keys of random views under the initial encoder.

    Random unit vectors would be near-orthogonal to every real key and make
    the first few hundred steps look artificially easy.
    """
    mcfg = cfg.model()
    aug_cfg = cfg.aug()
    target = max(gq.capacity, dq.capacity)
    rng = stream(cfg.seed, STREAM_INIT, 1)
    done = 0
    while done < target:
        m = min(chunk, target - done)
        idx = rng.integers(0, len(images), m)
        views = []
        for j, i in enumerate(idx):
            _, ak = sample_aug_pair([cfg.seed, STREAM_INIT, 2, done + j], aug_cfg, images[i].pixels.shape[:2])
            views.append(resample(images[i].pixels, ak))
        out = encode_batch(np.stack(views), params, mcfg)
        if gq.size < gq.capacity:
            queue_push(gq, out["global"][: gq.capacity - gq.size])
        if dq.size < dq.capacity:
            dense = out["local"].reshape(m, mcfg.n, -1).mean(axis=1)
            queue_push(dq, dense[: dq.capacity - dq.size])
        done += m


def batch_views(cfg: RunConfig, images: list, indices, step: int):
    aug_cfg = cfg.aug()
    specs, vq, vk = [], [], []
    for b, idx in enumerate(indices):
        img = images[idx]
        aq, ak = sample_aug_pair([cfg.seed, STREAM_AUG, step, b], aug_cfg, img.pixels.shape[:2])
        specs.append((aq, ak))
        vq.append(resample(img.pixels, aq))
        vk.append(resample(img.pixels, ak))
    return specs, np.stack(vq), np.stack(vk)


def batch_objective(tape, qparams, kparams, mcfg: ModelConfig, specs, vq, vk, cfg: RunConfig, gneg, dneg):
    """Build the loss graph for one batch of view pairs.

    Returns (combined, global, local, key outputs, degenerate mask).
    """
    qout = forward(tape, qparams, vq, mcfg)
    kout = encode_batch(vk, kparams, mcfg)
    B, n = len(specs), mcfg.n
    q_local = qout["local"].value.reshape(B, n, -1)
    k_local = kout["local"].reshape(B, n, -1)
    plans = []
    for b, (aq, ak) in enumerate(specs):
        pq, pk = patch_boxes(aq, mcfg.g), patch_boxes(ak, mcfg.g)
        plans.append(plan_for_pair(cfg.matcher, pq, pk, q_local[b], k_local[b]))
    plan = stack_plans(plans)
    g_loss = global_loss_graph(qout["global"], kout["global"], gneg, cfg.tau)
    l_loss, degenerate = local_loss_graph(qout["local"], kout["local"], plan, dneg, cfg.tau)
    total = combined_loss_graph(g_loss, l_loss, cfg.lam)
    return total, g_loss, l_loss, kout, degenerate


def train_step(state: TrainState, indices=None) -> StepRecord:
    cfg = state.config
    mcfg = cfg.model()
    t0 = time.perf_counter()
    step = state.step
    if indices is None:
        indices = stream(cfg.seed, STREAM_BATCH, step).integers(0, len(state.images), cfg.batch_size)

    gneg = state.global_queue.snapshot()
    dneg = state.dense_queue.snapshot()
    tape = ad.Tape()
    qparams = as_vars(tape, state.branches.query)

    specs, vq, vk = batch_views(cfg, state.images, indices, step)
    total, g_loss, l_loss, kout, _ = batch_objective(tape, qparams, state.branches.key, mcfg, specs, vq, vk, cfg, gneg, dneg)
    key_global = [kout["global"]]
    key_dense = [kout["local"].reshape(len(indices), mcfg.n, -1).mean(axis=1)]
    if cfg.symmetric:
        # swap view roles and average the two directions
        swapped = [(ak, aq) for aq, ak in specs]
        total2, g2, l2, kout2, _ = batch_objective(tape, qparams, state.branches.key, mcfg, swapped, vk, vq, cfg, gneg, dneg)
        total = ad.scale(ad.add(total, total2), 0.5)
        g_loss = ad.scale(ad.add(g_loss, g2), 0.5)
        l_loss = ad.scale(ad.add(l_loss, l2), 0.5)
        key_global.append(kout2["global"])
        key_dense.append(kout2["local"].reshape(len(indices), mcfg.n, -1).mean(axis=1))

    values = (float(g_loss.value), float(l_loss.value), float(total.value))
    if not all(np.isfinite(values)):
        raise NumericalAbort(
            f"non-finite loss at step {step}: global={values[0]} local={values[1]}",
            {
                "step": step,
                "seed": cfg.seed,
                "image_indices": [int(i) for i in indices],
                "image_seeds": [[cfg.seed, STREAM_DATA, int(i)] for i in indices],
                "aug_seeds": [[cfg.seed, STREAM_AUG, step, b] for b in range(len(indices))],
            },
        )
    ad.backward(tape, total)
    grads = {name: node.grad for name, node in qparams.items()}

    lr = cosine_lr(step, cfg.steps, cfg.lr)
    sgd_update(state.branches.query, grads, lr, cfg.sgd_momentum, cfg.weight_decay, state.buffers)
    ema_update(state.branches)
    for kg in key_global:
        queue_push(state.global_queue, kg)
    for kd in key_dense:
        queue_push(state.dense_queue, kd)

    state.step += 1
    wall = (time.perf_counter() - t0) * 1e3
    return StepRecord(step, values[0], values[1], values[2], lr, wall)


def checkpoint_groups(state: TrainState) -> dict:
    return {"query": state.branches.query, "key": state.branches.key}


def write_checkpoint(state: TrainState, path) -> Path:
    cfg = state.config
    return save_checkpoint(path, checkpoint_groups(state), model_meta(cfg.model(), step=state.step, config=cfg.to_dict()))


def train(cfg: RunConfig, out_dir=None, images=None, progress: bool = False) -> tuple[TrainState, list[StepRecord]]:
    """Run ``cfg.steps`` steps; with ``out_dir`` also write log.csv, config.json and checkpoints."""
    state = init_state(cfg, images)
    records: list[StepRecord] = []
    writer = None
    fh = None
    out = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(cfg.to_json())
        fh = open(out / "log.csv", "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(LOG_FIELDS)
    try:
        for _ in range(cfg.steps):
            rec = train_step(state)
            records.append(rec)
            if writer is not None:
                writer.writerow(rec.row())
            if progress and rec.step % 100 == 0:
                log.info("step %d combined %.4f global %.4f local %.4f lr %.4g", rec.step, rec.combined, rec.global_loss, rec.local_loss, rec.lr)
            if out is not None and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                write_checkpoint(state, out / f"ckpt_{state.step:06d}.plm")
    finally:
        if fh is not None:
            fh.close()
    if out is not None:
        write_checkpoint(state, out / "final.plm")
    return state, records


def read_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# toy configuration for gradient verification


def toy_problem(seed: int, matcher: str = "pl", lam: float = 0.5, batch: int = 2):
    """A g=2, d=4, 3-negative instance of the full objective.

    Returns ``(build, params)`` suitable for :func:`autodiff.gradcheck`:
    ``build(tape, leaves)`` maps the query-branch parameter leaves to the
    combined loss; key branch, views, matching and queues are frozen.
    """
    from .data import AugSamplerConfig

    cfg = RunConfig(
        seed=seed, g=2, out_size=4, d_backbone=6, d=4, d_g=4, tau=0.2, lam=lam,
        matcher=matcher, batch_size=batch, image_size=8, kmin=1, kmax=3, rmin=1.0, rmax=2.0,
    )
    mcfg = cfg.model()
    rng = stream(seed, STREAM_INIT)
    qparams = init_params(mcfg, rng)
    # key branch: a nearby but distinct point, as after some EMA steps
    kparams = {k: v + 0.05 * rng.standard_normal(v.shape) for k, v in qparams.items()}
    gneg = rng.standard_normal((3, cfg.d_g))
    dneg = rng.standard_normal((3, cfg.d))
    gneg /= np.linalg.norm(gneg, axis=1, keepdims=True)
    dneg /= np.linalg.norm(dneg, axis=1, keepdims=True)

    aug_cfg = AugSamplerConfig(scale_range=(0.3, 1.0), out_size=cfg.out_size, g=cfg.g)
    specs, vq, vk = [], [], []
    for b in range(batch):
        img = generate_image([seed, STREAM_DATA, b], cfg.data())
        aq, ak = sample_aug_pair([seed, STREAM_AUG, 0, b], aug_cfg, img.pixels.shape[:2])
        specs.append((aq, ak))
        vq.append(resample(img.pixels, aq))
        vk.append(resample(img.pixels, ak))
    vq, vk = np.stack(vq), np.stack(vk)
    names = list(qparams)

    def build(tape, leaves):
        p = dict(zip(names, leaves))
        total, *_ = batch_objective(tape, p, kparams, mcfg, specs, vq, vk, cfg, gneg, dneg)
        return total

    return build, [qparams[k] for k in names]


def full_loss_gradcheck(seed: int, h: float = 1e-4, **kw) -> float:
    build, params = toy_problem(seed, **kw)
    return ad.gradcheck(build, params, h)
