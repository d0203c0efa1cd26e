"""Procedural "tissue-like" images with countable blobs, and the view sampler."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .geometry import AugmentationSpec, PatchGrid, PhotometricParams, Rect

BACKGROUND = np.array([0.92, 0.74, 0.84])
# per-channel mean/std of jittered full-image views of the default corpus;
# raw pixels sit near 0.8 with little spread, and feeding them uncentred
# makes every patch embed to almost the same direction
PIXEL_MEAN = (0.85, 0.71, 0.79)
PIXEL_STD = (0.16, 0.18, 0.13)
BLOB_COLORS = np.array([[0.30, 0.12, 0.45], [0.55, 0.28, 0.62]])


@dataclass(frozen=True)
class DataConfig:
    height: int = 64
    width: int = 64
    kmin: int = 5
    kmax: int = 30
    rmin: float = 1.5
    rmax: float = 3.5
    n_classes: int = 2
    ref_grid: int = 8
    noise_amp: float = 0.08


@dataclass(frozen=True)
class AugSamplerConfig:
    scale_range: tuple[float, float] = (0.2, 1.0)
    aspect_range: tuple[float, float] = (3 / 4, 4 / 3)
    hflip_prob: float = 0.5
    vflip_prob: float = 0.0
    jitter_scale: tuple[float, float] = (0.8, 1.2)
    jitter_shift: tuple[float, float] = (-0.1, 0.1)
    out_size: int = 56
    g: int = 7

    def __post_init__(self):
        s0, s1 = self.scale_range
        if not 0 < s0 <= s1 <= 1:
            raise ValueError(f"invalid scale_range {self.scale_range}")
        a0, a1 = self.aspect_range
        if not 0 < a0 <= a1:
            raise ValueError(f"invalid aspect_range {self.aspect_range}")


@dataclass
class SyntheticImage:
    pixels: np.ndarray  # (H, W, 3) in [0, 1]
    centers: np.ndarray  # (K, 2) as (x, y)
    radii: np.ndarray  # (K,)
    classes: np.ndarray  # (K,) int
    density: np.ndarray  # (ref_grid, ref_grid) blob-center counts

    @property
    def n_blobs(self) -> int:
        return len(self.radii)


def generate_image(seed, config: DataConfig = DataConfig()) -> SyntheticImage:
    rng = np.random.default_rng(seed)
    H, W = config.height, config.width

    coarse = rng.standard_normal((H // 8 + 1, W // 8 + 1, 3))
    field = ndimage.zoom(coarse, (H / coarse.shape[0], W / coarse.shape[1], 1), order=3, mode="reflect")[:H, :W]
    pixels = BACKGROUND + config.noise_amp * field

    k = int(rng.integers(config.kmin, config.kmax + 1))
    centers = np.column_stack([rng.uniform(0, W, k), rng.uniform(0, H, k)])
    radii = rng.uniform(config.rmin, config.rmax, k)
    classes = rng.integers(0, config.n_classes, k)

    yy, xx = np.mgrid[0:H, 0:W] + 0.5
    for (cx, cy), r, c in zip(centers, radii, classes):
        dist = np.hypot(xx - cx, yy - cy)
        # one-pixel soft edge
        alpha = np.clip(r + 0.5 - dist, 0.0, 1.0)[..., None]
        pixels = (1 - alpha) * pixels + alpha * BLOB_COLORS[c % len(BLOB_COLORS)]
    pixels = np.clip(pixels, 0.0, 1.0)

    cell_h, cell_w = H / config.ref_grid, W / config.ref_grid
    density = np.zeros((config.ref_grid, config.ref_grid), dtype=np.int64)
    for cx, cy in centers:
        density[min(int(cy // cell_h), config.ref_grid - 1), min(int(cx // cell_w), config.ref_grid - 1)] += 1

    return SyntheticImage(pixels=pixels, centers=centers, radii=radii, classes=classes, density=density)


def _sample_view(rng: np.random.Generator, cfg: AugSamplerConfig, height: float, width: float) -> AugmentationSpec:
    area = height * width
    log_a0, log_a1 = math.log(cfg.aspect_range[0]), math.log(cfg.aspect_range[1])
    crop = None
    for _ in range(10):
        target = area * rng.uniform(*cfg.scale_range)
        aspect = math.exp(rng.uniform(log_a0, log_a1))
        w = math.sqrt(target * aspect)
        h = math.sqrt(target / aspect)
        if w <= width and h <= height:
            crop = Rect(rng.uniform(0, width - w), rng.uniform(0, height - h), w, h)
            break
    if crop is None:
        crop = Rect(0.0, 0.0, float(width), float(height))
    hflip = bool(rng.random() < cfg.hflip_prob)
    vflip = bool(rng.random() < cfg.vflip_prob)
    jitter = PhotometricParams(
        scale=tuple(float(v) for v in rng.uniform(*cfg.jitter_scale, 3)),
        shift=tuple(float(v) for v in rng.uniform(*cfg.jitter_shift, 3)),
    )
    return AugmentationSpec(crop=crop, out_size=cfg.out_size, hflip=hflip, vflip=vflip, jitter=jitter)


def sample_aug_pair(seed, cfg: AugSamplerConfig, image_dims: tuple[int, int]) -> tuple[AugmentationSpec, AugmentationSpec]:
    """Two independent random-resized-crop views; ``image_dims`` is (H, W)."""
    rng = np.random.default_rng(seed)
    height, width = image_dims
    return _sample_view(rng, cfg, height, width), _sample_view(rng, cfg, height, width)


def points_in_boxes(points: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    """Half-open containment counts of (x, y) points per (x0, y0, w, h) box."""
    if len(points) == 0:
        return np.zeros(len(boxes), dtype=np.int64)
    x, y = points[:, 0][None], points[:, 1][None]
    x0, y0 = boxes[:, 0:1], boxes[:, 1:2]
    inside = (x >= x0) & (x < x0 + boxes[:, 2:3]) & (y >= y0) & (y < y0 + boxes[:, 3:4])
    return inside.sum(axis=1)


def patch_density_labels(img: SyntheticImage, grid: PatchGrid) -> np.ndarray:
    return points_in_boxes(img.centers, grid.boxes)


# ---------------------------------------------------------------------------
# on-disk dataset


def _write_bin(path: Path, array: np.ndarray):
    header = json.dumps({"shape": list(array.shape), "dtype": "float32", "order": "C"}).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(np.ascontiguousarray(array, dtype="<f4").tobytes())


def read_image_bin(path) -> np.ndarray:
    with open(path, "rb") as fh:
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen))
        data = np.frombuffer(fh.read(), dtype="<f4")
    return data.reshape(header["shape"])


def dump_dataset(images: list[SyntheticImage], out_dir, config: DataConfig = DataConfig()) -> Path:
    """Write ``img_<index>.bin`` files plus ``labels.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    labels = []
    for i, img in enumerate(images):
        _write_bin(out / f"img_{i}.bin", img.pixels)
        labels.append(
            {
                "index": i,
                "blobs": [
                    {"center": [float(c[0]), float(c[1])], "radius": float(r), "class": int(k)}
                    for c, r, k in zip(img.centers, img.radii, img.classes)
                ],
                "density": img.density.tolist(),
            }
        )
    (out / "labels.json").write_text(json.dumps({"config": asdict(config), "images": labels}, indent=1))
    return out
