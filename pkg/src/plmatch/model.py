"""Grid encoder, projection heads, view resampling, EMA key branch, checkpoints.

The backbone is a position-shared MLP over non-overlapping pixel patches, so
feature ``i`` sees exactly patch ``i`` of the view (no receptive field
leakage between grid cells).
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .geometry import AugmentationSpec
from .matching import FeatureGrid

MAGIC = b"PLM1"
CHECKPOINT_VERSION = 1


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    out_size: int = 56
    g: int = 7
    channels: int = 3
    d_backbone: int = 64
    d: int = 32
    d_g: int = 32
    bias_init: float = 0.01
    # per-channel input standardization applied before the first layer;
    # the identity by default, the training pipeline passes corpus statistics
    input_mean: tuple[float, ...] = (0.0, 0.0, 0.0)
    input_std: tuple[float, ...] = (1.0, 1.0, 1.0)

    @property
    def patch(self) -> int:
        return self.out_size // self.g

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels

    @property
    def n(self) -> int:
        return self.g * self.g


def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Parameter names and shapes in declaration (and checkpoint) order."""
    db, d, dg = cfg.d_backbone, cfg.d, cfg.d_g
    return [
        ("embed.w", (cfg.patch_dim, db)),
        ("embed.b", (db,)),
        ("mix1.w", (db, db)),
        ("mix1.b", (db,)),
        ("mix2.w", (db, db)),
        ("mix2.b", (db,)),
        ("global1.w", (db, 2 * dg)),
        ("global1.b", (2 * dg,)),
        ("global2.w", (2 * dg, dg)),
        ("global2.b", (dg,)),
        ("dense1.w", (db, 2 * d)),
        ("dense1.b", (2 * d,)),
        ("dense2.w", (2 * d, d)),
        ("dense2.b", (d,)),
    ]


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    params = {}
    for name, shape in param_shapes(cfg):
        if name.endswith(".w"):
            bound = 1.0 / np.sqrt(shape[0])
            params[name] = rng.uniform(-bound, bound, size=shape)
        else:
            params[name] = np.full(shape, cfg.bias_init)
    return params


def check_view_size(cfg: ModelConfig, size: int):
    if size % cfg.g != 0:
        raise ModelError(f"view size {size} not divisible by grid {cfg.g}")


def patchify(views: np.ndarray, g: int) -> np.ndarray:
    """(B, S, S, C) -> (B * g * g, p * p * C), patches in row-major grid order."""
    views = np.asarray(views, dtype=np.float64)
    if views.ndim == 3:
        views = views[None]
    b, s, s2, c = views.shape
    if s != s2 or s % g:
        raise ModelError(f"view size {s} not divisible by grid {g}")
    p = s // g
    x = views.reshape(b, g, p, g, p, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b * g * g, p * p * c)


def _linear(x: ad.Node, p: dict, name: str) -> ad.Node:
    return ad.add(ad.matmul(x, p[f"{name}.w"]), p[f"{name}.b"])


def forward(tape: ad.Tape, p: dict[str, ad.Node], views: np.ndarray, cfg: ModelConfig) -> dict[str, ad.Node]:
    """Build the encoder + heads graph for a batch of views.

    Returns nodes ``backbone`` (B*n, d_backbone), ``local`` (B*n, d) and
    ``global`` (B, d_g); both heads' outputs are unit-norm rows.
    """
    x = patchify(views, cfg.g)
    x = (x - np.tile(cfg.input_mean, cfg.patch * cfg.patch)) / np.tile(cfg.input_std, cfg.patch * cfg.patch)
    batch = x.shape[0] // cfg.n
    h = ad.relu(_linear(tape.const(x), p, "embed"))
    h = ad.relu(_linear(h, p, "mix1"))
    feat = _linear(h, p, "mix2")

    dense = _linear(ad.relu(_linear(feat, p, "dense1")), p, "dense2")
    pooled = ad.mean(ad.reshape(feat, (batch, cfg.n, cfg.d_backbone)), axis=1)
    glob = _linear(ad.relu(_linear(pooled, p, "global1")), p, "global2")
    try:
        local = ad.row_l2_normalize(dense)
        glob = ad.row_l2_normalize(glob)
    except FloatingPointError:
        raise ModelError("zero feature") from None
    return {"backbone": feat, "local": local, "global": glob}


def as_consts(tape: ad.Tape, params: dict[str, np.ndarray]) -> dict[str, ad.Node]:
    return {k: tape.const(v) for k, v in params.items()}


def as_vars(tape: ad.Tape, params: dict[str, np.ndarray]) -> dict[str, ad.Node]:
    return {k: tape.var(v) for k, v in params.items()}


def encode_batch(views: np.ndarray, params: dict[str, np.ndarray], cfg: ModelConfig) -> dict[str, np.ndarray]:
    tape = ad.Tape()
    out = forward(tape, as_consts(tape, params), views, cfg)
    return {k: v.value for k, v in out.items()}


def encode(view: np.ndarray, params: dict[str, np.ndarray], cfg: ModelConfig) -> FeatureGrid:
    """Features of one (S, S, C) view: n unit-norm local vectors and one
    unit-norm global vector."""
    view = np.asarray(view, dtype=np.float64)
    check_view_size(cfg, view.shape[0])
    out = encode_batch(view[None], params, cfg)
    return FeatureGrid(local=out["local"], global_vec=out["global"][0])


# ---------------------------------------------------------------------------


def resample(image: np.ndarray, aug: AugmentationSpec) -> np.ndarray:
    """Bilinear crop-and-resize of ``image`` (H, W, C), then flips and jitter."""
    image = np.asarray(image, dtype=np.float64)
    H, W = image.shape[:2]
    c = aug.crop
    tol = 1e-9 * max(H, W)
    if c.w <= 0 or c.h <= 0 or c.x0 < -tol or c.y0 < -tol or c.x1 > W + tol or c.y1 > H + tol:
        raise ModelError(f"crop {c.as_tuple()} outside image {W}x{H}")
    S = int(aug.out_size)
    # pixel k of the source is centred at k + 0.5
    xs = c.x0 + (np.arange(S) + 0.5) * (c.w / S) - 0.5
    ys = c.y0 + (np.arange(S) + 0.5) * (c.h / S) - 0.5
    xs = np.clip(xs, 0.0, W - 1)
    ys = np.clip(ys, 0.0, H - 1)
    x0 = np.minimum(np.floor(xs).astype(int), W - 2) if W > 1 else np.zeros(S, int)
    y0 = np.minimum(np.floor(ys).astype(int), H - 2) if H > 1 else np.zeros(S, int)
    fx = (xs - x0)[None, :, None]
    fy = (ys - y0)[:, None, None]
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    top = image[y0][:, x0] * (1 - fx) + image[y0][:, x1] * fx
    bot = image[y1][:, x0] * (1 - fx) + image[y1][:, x1] * fx
    view = top * (1 - fy) + bot * fy
    if aug.hflip:
        view = view[:, ::-1]
    if aug.vflip:
        view = view[::-1]
    scale = np.asarray(aug.jitter.scale)
    shift = np.asarray(aug.jitter.shift)
    return np.clip(view * scale + shift, 0.0, 1.0)


# ---------------------------------------------------------------------------


@dataclass
class BranchPair:
    query: dict[str, np.ndarray]
    key: dict[str, np.ndarray]
    m: float

    @classmethod
    def from_query(cls, query: dict[str, np.ndarray], m: float) -> "BranchPair":
        return cls(query=query, key={k: v.copy() for k, v in query.items()}, m=m)


def ema_update(bp: BranchPair) -> dict[str, np.ndarray]:
    """key <- m * key + (1 - m) * query, in place.

    Evaluated as ``key + (1 - m) * (query - key)`` so that a key equal to
    the query is left bit-for-bit unchanged.
    """
    if not 0.0 <= bp.m < 1.0:
        raise ModelError(f"EMA momentum {bp.m} outside [0, 1)")
    for name, q in bp.query.items():
        if bp.m == 0.0:
            bp.key[name] = q.copy()
        else:
            k = bp.key[name]
            bp.key[name] = k + (1.0 - bp.m) * (q - k)
    return bp.key


# ---------------------------------------------------------------------------


def save_checkpoint(path, groups: dict[str, dict[str, np.ndarray]], meta: dict | None = None) -> Path:
    """Write ``PLM1`` header, JSON shape table, then float64 blocks in order."""
    table = []
    blocks = []
    for group, params in groups.items():
        for name, arr in params.items():
            arr = np.ascontiguousarray(arr, dtype="<f8")
            table.append({"name": f"{group}/{name}", "shape": list(arr.shape)})
            blocks.append(arr.tobytes())
    header = json.dumps({"params": table, "meta": meta or {}}).encode()
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for b in blocks:
            fh.write(b)
    return path


def load_checkpoint(path) -> tuple[dict[str, dict[str, np.ndarray]], dict]:
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ModelError(f"{path}: not a PLM1 checkpoint")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise ModelError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(fh.read(hlen))
        groups: dict[str, dict[str, np.ndarray]] = {}
        for entry in header["params"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(shape).copy()
            group, name = entry["name"].split("/", 1)
            groups.setdefault(group, {})[name] = arr
    return groups, header["meta"]


def model_config_from_meta(meta: dict) -> ModelConfig:
    fields = dict(meta["model"])
    for key in ("input_mean", "input_std"):
        if key in fields:
            fields[key] = tuple(fields[key])
    return ModelConfig(**fields)


def model_meta(cfg: ModelConfig, **extra) -> dict:
    return {"model": asdict(cfg), **extra}
