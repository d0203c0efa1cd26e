"""Matcher fidelity against geometric ground truth, and a frozen-feature linear
probe on per-patch blob counts."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg

from .config import RunConfig
from .data import patch_density_labels, sample_aug_pair
from .geometry import AugmentationSpec, PhotometricParams, Rect, overlap_matrix, patch_boxes
from .matching import feature_assignment, location_assignment
from .model import ModelConfig, encode_batch, init_params, load_checkpoint, model_config_from_meta, resample
from .trainer import STREAM_EVAL, STREAM_INIT, make_dataset, stream, train

log = logging.getLogger(__name__)

# sub-streams of STREAM_EVAL
_FIDELITY = 0
_PROBE_DATA = 1
_PROBE_VIEWS = 2

PROBE_LAYERS = ("backbone", "local")


# ---------------------------------------------------------------------------
# matching fidelity


@dataclass
class MatcherFidelity:
    fidelity: float  # mean assigned-overlap fraction per query patch
    misassignment: float  # assigned query patches whose targets share zero area
    assigned: int  # number of query patches that received a target


@dataclass
class MatchFidelityReport:
    n_pairs: int
    matchers: dict[str, MatcherFidelity]
    # pairs where precise coverage >= nearest-location coverage
    pl_dominates_loc: float
    per_pair: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        return {
            "n_pairs": self.n_pairs,
            "pl_dominates_loc": self.pl_dominates_loc,
            "matchers": {k: asdict(v) for k, v in self.matchers.items()},
        }


def _one_to_one(om_m: np.ndarray, areas_q: np.ndarray, j: np.ndarray):
    hit = om_m[np.arange(len(j)), j]
    return hit / areas_q, hit == 0


def matching_fidelity(
    cfg: RunConfig,
    n_pairs: int,
    seed: int,
    params: dict | None = None,
    include_ft: bool = True,
    image_pool: int = 128,
) -> MatchFidelityReport:
    """Score each matcher's targets by how much of the query patch they truly cover.

    Precise matching covers exactly ``wq`` of every patch.  The one-to-one
    baselines cover the overlap of their single chosen key patch.  Feature
    matching needs an encoder: ``params`` (random init from ``seed`` when
    omitted) applied to views of synthetic images.
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    aug_cfg = cfg.aug()
    g = cfg.g
    size = (cfg.image_size, cfg.image_size)
    mcfg = cfg.model()
    images = None
    if include_ft:
        if params is None:
            params = init_params(mcfg, stream(seed, STREAM_INIT))
        images = make_dataset(min(image_pool, n_pairs), seed, cfg.data(), offset=10**6)

    names = ["pl", "loc"] + (["ft"] if include_ft else [])
    per_pair = {k: np.empty(n_pairs) for k in names}
    mis = {k: 0 for k in names}
    assigned = {k: 0 for k in names}

    chunk = 64
    for start in range(0, n_pairs, chunk):
        stop = min(start + chunk, n_pairs)
        pairs = [sample_aug_pair([seed, STREAM_EVAL, _FIDELITY, p], aug_cfg, size) for p in range(start, stop)]
        feats = None
        if include_ft:
            vq = np.stack([resample(images[p % len(images)].pixels, aq) for p, (aq, _) in zip(range(start, stop), pairs)])
            vk = np.stack([resample(images[p % len(images)].pixels, ak) for p, (_, ak) in zip(range(start, stop), pairs)])
            fq = encode_batch(vq, params, mcfg)["local"].reshape(len(pairs), g * g, -1)
            fk = encode_batch(vk, params, mcfg)["local"].reshape(len(pairs), g * g, -1)
            feats = (fq, fk)
        for b, (aq, ak) in enumerate(pairs):
            p = start + b
            pq, pk = patch_boxes(aq, g), patch_boxes(ak, g)
            om = overlap_matrix(pq, pk)
            cover = om.m.sum(axis=1) / om.areas_q
            per_pair["pl"][p] = cover.mean()
            # targets mix only key patches with positive overlap
            valid = cover > 0
            assigned["pl"] += int(valid.sum())
            mis["pl"] += int(np.sum(valid & (om.m.sum(axis=1) == 0)))

            frac, miss = _one_to_one(om.m, om.areas_q, location_assignment(pq, pk))
            per_pair["loc"][p] = frac.mean()
            assigned["loc"] += len(frac)
            mis["loc"] += int(miss.sum())

            if feats is not None:
                frac, miss = _one_to_one(om.m, om.areas_q, feature_assignment(feats[0][b], feats[1][b]))
                per_pair["ft"][p] = frac.mean()
                assigned["ft"] += len(frac)
                mis["ft"] += int(miss.sum())

    matchers = {
        k: MatcherFidelity(
            fidelity=float(per_pair[k].mean()),
            misassignment=mis[k] / assigned[k] if assigned[k] else 0.0,
            assigned=assigned[k],
        )
        for k in names
    }
    dominance = float(np.mean(per_pair["pl"] >= per_pair["loc"]))
    return MatchFidelityReport(n_pairs=n_pairs, matchers=matchers, pl_dominates_loc=dominance, per_pair=per_pair)


# ---------------------------------------------------------------------------
# linear probe


@dataclass
class ProbeResult:
    mae: float
    train_mae: float
    baseline_mae: float  # predicting the train-split mean
    ridge: float
    n_train: int
    n_test: int


@dataclass
class ProbeReport:
    random_init: ProbeResult
    matchers: dict[str, ProbeResult] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"random_init": asdict(self.random_init), "matchers": {k: asdict(v) for k, v in self.matchers.items()}}


@dataclass
class ProbeDataset:
    images: list
    views: np.ndarray  # (N, S, S, 3)
    labels: np.ndarray  # (N * n,)


def make_probe_dataset(cfg: RunConfig, seed: int, n_images: int | None = None) -> ProbeDataset:
    """Full-image views with photometric jitter; labels are per-patch blob counts."""
    n_images = n_images or cfg.probe_images
    images = make_dataset(n_images, seed, cfg.data(), offset=2 * 10**6)
    rng = stream(seed, STREAM_EVAL, _PROBE_VIEWS)
    views, labels = [], []
    size = float(cfg.image_size)
    for img in images:
        jitter = PhotometricParams(
            scale=tuple(rng.uniform(cfg.jitter_scale_min, cfg.jitter_scale_max, 3)),
            shift=tuple(rng.uniform(cfg.jitter_shift_min, cfg.jitter_shift_max, 3)),
        )
        aug = AugmentationSpec(Rect(0.0, 0.0, size, size), out_size=cfg.out_size, jitter=jitter)
        views.append(resample(img.pixels, aug))
        labels.append(patch_density_labels(img, patch_boxes(aug, cfg.g)))
    return ProbeDataset(images=images, views=np.stack(views), labels=np.concatenate(labels).astype(np.float64))


def ridge_fit(x: np.ndarray, y: np.ndarray, ridge: float, max_retries: int = 3):
    """Closed-form ridge with an unpenalized intercept.

    Returns ``(weights, intercept, ridge_used)``; a singular system bumps the
    regularizer by 10x (from a 1e-6 floor when it is zero), at most
    ``max_retries`` times.
    """
    if ridge < 0:
        raise ValueError(f"ridge must be >= 0, got {ridge}")
    xm, ym = x.mean(axis=0), y.mean()
    xc, yc = x - xm, y - ym
    gram = xc.T @ xc
    rhs = xc.T @ yc
    lam = ridge
    for attempt in range(max_retries + 1):
        try:
            factor = linalg.cho_factor(gram + lam * np.eye(gram.shape[0]))
            w = linalg.cho_solve(factor, rhs)
            if np.all(np.isfinite(w)):
                return w, ym - xm @ w, lam
        except linalg.LinAlgError:
            pass
        if attempt == max_retries:
            break
        lam = lam * 10.0 if lam > 0 else 1e-6
    raise linalg.LinAlgError(f"normal equations singular even with ridge {lam}")


def probe_features(params: dict, mcfg: ModelConfig, views: np.ndarray, layer: str = "local") -> np.ndarray:
    if layer not in PROBE_LAYERS:
        raise ValueError(f"layer must be one of {PROBE_LAYERS}")
    out = []
    for start in range(0, len(views), 64):
        out.append(encode_batch(views[start : start + 64], params, mcfg)[layer])
    return np.concatenate(out)


def _resolve(checkpoint, mcfg: ModelConfig | None):
    if isinstance(checkpoint, (str, Path)):
        groups, meta = load_checkpoint(checkpoint)
        return groups["query"], model_config_from_meta(meta)
    if mcfg is None:
        raise ValueError("a parameter dict needs an explicit ModelConfig")
    return checkpoint, mcfg


def linear_probe(
    checkpoint,
    dataset: ProbeDataset,
    seed: int,
    ridge: float = 1e-3,
    mcfg: ModelConfig | None = None,
    layer: str = "local",
    train_fraction: float = 0.75,
) -> ProbeResult:
    """Ridge regression from frozen per-patch features to blob counts.

    ``checkpoint`` is a checkpoint path or a query-parameter dict (then pass
    ``mcfg``).  The image-level train/test split is drawn from ``seed``.
    """
    params, mcfg = _resolve(checkpoint, mcfg)
    feats = probe_features(params, mcfg, dataset.views, layer)
    n_img = len(dataset.views)
    n = mcfg.n
    order = stream(seed, STREAM_EVAL, _PROBE_DATA).permutation(n_img)
    n_train = max(1, int(round(train_fraction * n_img)))
    rows = lambda idx: (idx[:, None] * n + np.arange(n)[None]).ravel()  # noqa: E731
    tr, te = rows(np.sort(order[:n_train])), rows(np.sort(order[n_train:]))
    if len(te) == 0:
        te = tr
    y = dataset.labels
    w, b, lam = ridge_fit(feats[tr], y[tr], ridge)
    pred = feats @ w + b
    return ProbeResult(
        mae=float(np.mean(np.abs(pred[te] - y[te]))),
        train_mae=float(np.mean(np.abs(pred[tr] - y[tr]))),
        baseline_mae=float(np.mean(np.abs(y[tr].mean() - y[te]))),
        ridge=lam,
        n_train=len(tr),
        n_test=len(te),
    )


def random_init_params(cfg: RunConfig) -> dict:
    """The untrained query encoder a run with ``cfg`` starts from."""
    return init_params(cfg.model(), stream(cfg.seed, STREAM_INIT))


# ---------------------------------------------------------------------------
# sweeps


def train_and_probe(cfg: RunConfig, dataset: ProbeDataset, layer: str = "local", images=None) -> ProbeResult:
    state, _ = train(cfg, images=images)
    return linear_probe(state.branches.query, dataset, cfg.eval_seed, cfg.probe_ridge, cfg.model(), layer)


def lambda_sweep(cfg: RunConfig, lambdas=(0.0, 0.25, 0.5, 0.75, 1.0), layer: str = "local", dataset: ProbeDataset | None = None) -> list[dict]:
    """Train one short run (``cfg.sweep_steps``) per lambda and probe each."""
    dataset = dataset or make_probe_dataset(cfg, cfg.eval_seed)
    images = make_dataset(cfg.n_images, cfg.seed, cfg.data())
    rows = []
    for lam in lambdas:
        if not 0.0 <= lam <= 1.0:
            raise ValueError(f"lambda {lam} outside [0, 1]")
        run = cfg.with_overrides(lam=float(lam), steps=cfg.sweep_steps)
        res = train_and_probe(run, dataset, layer, images)
        log.info("lambda %.2f probe MAE %.4f", lam, res.mae)
        rows.append({"lambda": float(lam), "matcher": cfg.matcher, "steps": run.steps, "probe_mae": res.mae})
    return rows


def matcher_comparison(cfg: RunConfig, matchers=("pl", "loc", "ft"), layer: str = "local", dataset: ProbeDataset | None = None) -> list[dict]:
    dataset = dataset or make_probe_dataset(cfg, cfg.eval_seed)
    images = make_dataset(cfg.n_images, cfg.seed, cfg.data())
    base = linear_probe(random_init_params(cfg), dataset, cfg.eval_seed, cfg.probe_ridge, cfg.model(), layer)
    rows = [{"matcher": "random_init", "steps": 0, "lambda": cfg.lam, "probe_mae": base.mae}]
    for m in matchers:
        run = cfg.with_overrides(matcher=m)
        res = train_and_probe(run, dataset, layer, images)
        rows.append({"matcher": m, "steps": run.steps, "lambda": run.lam, "probe_mae": res.mae})
    return rows


def write_csv(rows: list[dict], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    return path


def write_json(doc: dict, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(doc, indent=2))
    return path
