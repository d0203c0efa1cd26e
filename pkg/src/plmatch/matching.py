"""Target construction for the dense branch: overlap-weighted matching plus the
nearest-location and feature-similarity baselines."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import OverlapMatrix, PatchGrid


class MatchingError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureGrid:
    local: np.ndarray  # (n, d)
    global_vec: np.ndarray  # (d_g,)

    @property
    def n(self) -> int:
        return self.local.shape[0]


@dataclass(frozen=True)
class MatchedTargets:
    targets: np.ndarray  # (n, d); zero rows where invalid
    valid: np.ndarray  # (n,) bool
    assignment: np.ndarray | None = None  # one-to-one baselines only


UNIT_TOL = 4 * np.finfo(np.float64).eps


def normalize_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise L2 normalization; returns (rows, nonzero mask), zero rows kept zero.

    Rows already unit-norm to within a few ulps are returned untouched, so
    normalizing a unit feature is the identity rather than a 1-ulp wobble.
    """
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    ok = norm[..., 0] > 0
    unit = np.abs(norm - 1.0) <= UNIT_TOL
    out = np.where(unit, x, np.where(norm > 0, x / np.where(norm > 0, norm, 1.0), 0.0))
    return out, ok


def precise_match(om: OverlapMatrix | np.ndarray, feats: FeatureGrid | np.ndarray) -> MatchedTargets:
    """Target i is the overlap-weighted sum of the other view's features,
    renormalized; rows with no overlap are flagged invalid.

    Pass ``om.m`` for query-side targets and ``om.m.T`` for key-side ones.
    """
    m = om.m if isinstance(om, OverlapMatrix) else np.asarray(om, dtype=np.float64)
    local = feats.local if isinstance(feats, FeatureGrid) else np.asarray(feats, dtype=np.float64)
    if m.ndim != 2 or m.shape[1] != local.shape[0]:
        raise MatchingError(f"dimension mismatch: M {m.shape} vs features {local.shape}")
    # row-stochastic weights first: a row with a single overlapping patch
    # then reproduces that patch's feature exactly
    mass = m.sum(axis=1, keepdims=True)
    weights = np.where(mass > 0, m / np.where(mass > 0, mass, 1.0), 0.0)
    targets, valid = normalize_rows(weights @ local)
    return MatchedTargets(targets=targets, valid=valid)


def location_assignment(qgrid: PatchGrid, kgrid: PatchGrid) -> np.ndarray:
    cq, ck = qgrid.centers, kgrid.centers
    d2 = ((cq[:, None, :] - ck[None, :, :]) ** 2).sum(axis=-1)
    # argmin returns the first minimum: lowest-index tie-break
    return np.argmin(d2, axis=1)


def location_match(qgrid: PatchGrid, kgrid: PatchGrid, feats: FeatureGrid) -> MatchedTargets:
    """One-to-one nearest-box-center assignment (the VICRegL-style baseline)."""
    if qgrid.n != kgrid.n or kgrid.n != feats.n:
        raise MatchingError("grid/feature size mismatch")
    j = location_assignment(qgrid, kgrid)
    targets, valid = normalize_rows(feats.local[j])
    return MatchedTargets(targets=targets, valid=np.ones(qgrid.n, dtype=bool), assignment=j)


def feature_assignment(qlocal: np.ndarray, klocal: np.ndarray) -> np.ndarray:
    qn = np.linalg.norm(qlocal, axis=1)
    kn = np.linalg.norm(klocal, axis=1)
    if np.any(qn == 0) or np.any(kn == 0):
        raise MatchingError("degenerate feature")
    cos = (qlocal / qn[:, None]) @ (klocal / kn[:, None]).T
    return np.argmax(cos, axis=1)


def feature_match(qfeats: FeatureGrid, kfeats: FeatureGrid) -> MatchedTargets:
    """One-to-one cosine-argmax assignment (the DenseCL-style baseline)."""
    if qfeats.local.shape != kfeats.local.shape:
        raise MatchingError("feature grids differ in shape")
    j = feature_assignment(qfeats.local, kfeats.local)
    targets, _ = normalize_rows(kfeats.local[j])
    return MatchedTargets(targets=targets, valid=np.ones(qfeats.n, dtype=bool), assignment=j)


def assignment_matrix(j: np.ndarray, n: int) -> np.ndarray:
    """0/1 matrix with a single one per row, so a one-to-one matcher can reuse
    the weighted-matching path."""
    out = np.zeros((len(j), n))
    out[np.arange(len(j)), j] = 1.0
    return out
