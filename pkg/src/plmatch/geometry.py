"""Patch boxes of augmented views in original-image coordinates and their overlaps.

All rectangles are half-open, ``[x0, x0 + w) x [y0, y0 + h)``, with continuous
coordinates.  Patch ``i`` of a view is the region of the original image seen by
the ``i``-th output feature (row-major over the output grid), so flips are
absorbed here as an index permutation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class Rect:
    x0: float
    y0: float
    w: float
    h: float

    def __post_init__(self):
        vals = (self.x0, self.y0, self.w, self.h)
        if not all(np.isfinite(v) for v in vals):
            raise GeometryError(f"non-finite rect {vals}")
        if self.w < 0 or self.h < 0:
            raise GeometryError(f"negative extent in rect {vals}")

    @property
    def x1(self) -> float:
        return self.x0 + self.w

    @property
    def y1(self) -> float:
        return self.y0 + self.h

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def center(self) -> tuple[float, float]:
        return (self.x0 + 0.5 * self.w, self.y0 + 0.5 * self.h)

    def scaled(self, c: float) -> "Rect":
        return Rect(self.x0 * c, self.y0 * c, self.w * c, self.h * c)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x0, self.y0, self.w, self.h)


@dataclass(frozen=True)
class PhotometricParams:
    """Per-channel affine jitter ``x -> clip(scale * x + shift, 0, 1)``."""

    scale: tuple[float, float, float] = (1.0, 1.0, 1.0)
    shift: tuple[float, float, float] = (0.0, 0.0, 0.0)


@dataclass(frozen=True)
class AugmentationSpec:
    crop: Rect
    out_size: int
    hflip: bool = False
    vflip: bool = False
    jitter: PhotometricParams = field(default_factory=PhotometricParams)

    def __post_init__(self):
        if int(self.out_size) <= 0:
            raise GeometryError("out_size must be positive")

    def within(self, height: float, width: float) -> bool:
        c = self.crop
        return c.x0 >= 0 and c.y0 >= 0 and c.x1 <= width and c.y1 <= height

    def scaled(self, c: float) -> "AugmentationSpec":
        return AugmentationSpec(self.crop.scaled(c), self.out_size, self.hflip, self.vflip, self.jitter)


@dataclass(frozen=True)
class PatchGrid:
    """``boxes`` is an (n, 4) array of ``x0, y0, w, h`` rows."""

    boxes: np.ndarray
    g: int

    @property
    def n(self) -> int:
        return self.boxes.shape[0]

    @property
    def rects(self) -> list[Rect]:
        return [Rect(*map(float, b)) for b in self.boxes]

    @property
    def areas(self) -> np.ndarray:
        return self.boxes[:, 2] * self.boxes[:, 3]

    @property
    def centers(self) -> np.ndarray:
        return self.boxes[:, :2] + 0.5 * self.boxes[:, 2:]


@dataclass(frozen=True)
class OverlapMatrix:
    m: np.ndarray
    areas_q: np.ndarray
    areas_k: np.ndarray

    @property
    def n(self) -> int:
        return self.m.shape[0]


@dataclass(frozen=True)
class MatchWeights:
    wq: np.ndarray
    wk: np.ndarray


def patch_boxes(aug: AugmentationSpec, g: int) -> PatchGrid:
    """Tile ``aug.crop`` into a g x g grid, indexed by output position.

    >>> patch_boxes(AugmentationSpec(Rect(0, 0, 64, 64), 64), 2).boxes[1]
    array([32.,  0., 32., 32.])
    """
    if g < 1:
        raise GeometryError("grid side must be >= 1")
    crop = aug.crop
    if crop.w <= 0 or crop.h <= 0:
        raise GeometryError("degenerate crop")
    pw, ph = crop.w / g, crop.h / g
    cols = np.arange(g)
    rows = np.arange(g)
    if aug.hflip:
        cols = cols[::-1]
    if aug.vflip:
        rows = rows[::-1]
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    # tile edges from the crop origin so adjacent tiles share exact edges
    x0 = crop.x0 + cc.ravel() * pw
    y0 = crop.y0 + rr.ravel() * ph
    n = g * g
    boxes = np.column_stack([x0, y0, np.full(n, pw), np.full(n, ph)])
    return PatchGrid(boxes=boxes, g=g)


def rect_intersection_area(a: Rect, b: Rect) -> float:
    w = min(a.x1, b.x1) - max(a.x0, b.x0)
    h = min(a.y1, b.y1) - max(a.y0, b.y0)
    if w <= 0 or h <= 0:
        return 0.0
    return w * h


def _pairwise_intersection(bq: np.ndarray, bk: np.ndarray) -> np.ndarray:
    qx0, qy0 = bq[:, 0:1], bq[:, 1:2]
    qx1, qy1 = qx0 + bq[:, 2:3], qy0 + bq[:, 3:4]
    kx0, ky0 = bk[None, :, 0], bk[None, :, 1]
    kx1, ky1 = kx0 + bk[None, :, 2], ky0 + bk[None, :, 3]
    iw = np.clip(np.minimum(qx1, kx1) - np.maximum(qx0, kx0), 0.0, None)
    ih = np.clip(np.minimum(qy1, ky1) - np.maximum(qy0, ky0), 0.0, None)
    return iw * ih


def overlap_matrix(q: PatchGrid, k: PatchGrid) -> OverlapMatrix:
    """Pairwise intersection areas; ``m[i, j]`` is query patch i vs key patch j."""
    if q.n != k.n:
        raise GeometryError(f"grid size mismatch: {q.n} vs {k.n}")
    return OverlapMatrix(
        m=_pairwise_intersection(q.boxes, k.boxes),
        areas_q=q.areas.copy(),
        areas_k=k.areas.copy(),
    )


def match_weights(om: OverlapMatrix) -> MatchWeights:
    if np.any(om.areas_q <= 0) or np.any(om.areas_k <= 0):
        raise GeometryError("degenerate patch")
    wq = om.m.sum(axis=1) / om.areas_q
    wk = om.m.sum(axis=0) / om.areas_k
    # float summation can overshoot full coverage by an ulp
    return MatchWeights(wq=np.clip(wq, 0.0, 1.0), wk=np.clip(wk, 0.0, 1.0))


def overlap_for(aug_q: AugmentationSpec, aug_k: AugmentationSpec, g: int) -> tuple[PatchGrid, PatchGrid, OverlapMatrix]:
    pq, pk = patch_boxes(aug_q, g), patch_boxes(aug_k, g)
    return pq, pk, overlap_matrix(pq, pk)


def inspect_dump(g: int, om: OverlapMatrix, mw: MatchWeights, **extra) -> str:
    """JSON document with ``grid``, ``M``, ``wq``, ``wk`` (and any extras)."""
    doc = {
        "grid": int(g),
        "M": [[float(f"{v:.12g}") for v in row] for row in om.m],
        "wq": [float(f"{v:.12g}") for v in mw.wq],
        "wk": [float(f"{v:.12g}") for v in mw.wk],
    }
    doc.update(extra)
    return json.dumps(doc)


# Two views of a 192 x 192 image used as a worked example of a zoomed query
# crop: query patch 1 covers key patch 5 fully and parts of
# key patches 6, 8 and 9 (1-based, row-major, 3 x 3 grid).
DEMO_IMAGE_SIZE = 192
DEMO_QUERY = AugmentationSpec(Rect(32, 32, 144, 144), out_size=96)
DEMO_KEY = AugmentationSpec(Rect(0, 0, 96, 96), out_size=96)
