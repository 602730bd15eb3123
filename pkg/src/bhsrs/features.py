"""EMAP-PCA feature extraction.

PCA on the raw bands, an area attribute profile per retained base image
(closings at descending area thresholds, the base image, openings at
ascending thresholds), a second PCA over the stacked profiles, and
per-feature min-max scaling.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .linalg import jacobi_eigh

logger = logging.getLogger(__name__)

DEFAULT_LAMBDAS = (100, 500, 1000, 5000)


class PipelineError(RuntimeError):
    pass


@dataclass
class PcaModel:
    mean: np.ndarray
    components: np.ndarray  # C x k, orthonormal columns
    explained_ratio: np.ndarray

    @property
    def n_components(self) -> int:
        return self.components.shape[1]

    def project(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) @ self.components

    def reconstruct(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z) @ self.components.T + self.mean


def _fix_signs(vectors: np.ndarray) -> np.ndarray:
    """Flip each column so its largest-magnitude entry is positive."""
    if vectors.size == 0:
        return vectors
    idx = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[idx, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


def pca_fit(samples: np.ndarray, variance_target: float = 0.99, n_components: int | None = None,
            solver: str = "eigh") -> PcaModel:
    """Fit PCA keeping the fewest components reaching ``variance_target``.

    ``n_components`` overrides the variance rule. ``solver`` is ``"eigh"``
    (LAPACK) or ``"jacobi"`` (the in-package cyclic Jacobi solver). Degenerate input (zero
    total variance) yields a model with no components and a warning.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError(f"pca_fit needs an N x C matrix with N >= 2, got {x.shape}")
    if not 0 < variance_target <= 1:
        raise ValueError(f"variance_target must lie in (0, 1], got {variance_target}")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (x.shape[0] - 1)
    if solver == "eigh":
        evals, evecs = np.linalg.eigh(cov)
    elif solver == "jacobi":
        evals, evecs = jacobi_eigh(cov)
    else:
        raise ValueError(f"unknown solver {solver!r}")
    order = np.argsort(-evals, kind="stable")
    evals = np.clip(evals[order], 0.0, None)
    evecs = _fix_signs(evecs[:, order])
    total = evals.sum()
    if total <= 1e-300:
        warnings.warn("pca_fit: input has zero variance; returning an empty model", RuntimeWarning, stacklevel=2)
        return PcaModel(mean, np.zeros((x.shape[1], 0)), np.zeros(0))
    ratios = evals / total
    if n_components is None:
        cumulative = np.cumsum(ratios)
        k = int(np.searchsorted(cumulative, variance_target - 1e-12) + 1)
        k = min(k, len(ratios))
    else:
        k = int(n_components)
    return PcaModel(mean, evecs[:, :k].copy(), ratios[:k].copy())


# ---------------------------------------------------------------- area filters


def area_opening(band: np.ndarray, lam: int) -> np.ndarray:
    """Grey-level area opening with 4-connectivity.

    Every bright connected component of every upper level set whose pixel
    count is below ``lam`` is lowered to the level at which it joins a
    large-enough component. Union-find over pixels in descending order.
    """
    if lam < 1:
        raise ValueError(f"lambda must be >= 1, got {lam}")
    f = np.asarray(band, dtype=np.float64)
    if f.ndim != 2:
        raise ValueError(f"expected a 2-d band, got shape {f.shape}")
    if lam == 1 or f.size == 0:
        return f.copy()
    h, w = f.shape
    n = h * w
    flat = f.ravel().tolist()
    order = np.lexsort((np.arange(n), -f.ravel())).tolist()
    parent = [-1] * n
    area = [0] * n

    def find(x: int) -> int:
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    for p in order:
        parent[p] = p
        area[p] = 1
        r_, c_ = divmod(p, w)
        fp = flat[p]
        for q in (p - w if r_ > 0 else -1, p - 1 if c_ > 0 else -1,
                  p + 1 if c_ < w - 1 else -1, p + w if r_ < h - 1 else -1):
            if q < 0 or parent[q] < 0:
                continue
            r = find(q)
            if r == p:
                continue
            if flat[r] == fp or area[r] < lam:
                parent[r] = p
                area[p] += area[r]
            else:
                area[p] = max(area[p], lam)

    out = [0.0] * n
    for p in reversed(order):
        q = parent[p]
        out[p] = flat[p] if q == p else out[q]
    return np.array(out, dtype=np.float64).reshape(h, w)


def area_closing(band: np.ndarray, lam: int) -> np.ndarray:
    """Dual of :func:`area_opening`: fills dark components smaller than ``lam``."""
    return -area_opening(-np.asarray(band, dtype=np.float64), lam)


def attribute_profile(band: np.ndarray, lambdas=DEFAULT_LAMBDAS) -> np.ndarray:
    """Stack ``[closings at reversed lambdas, band, openings at lambdas]`` along axis 0."""
    lambdas = list(lambdas)
    if any(b <= a for a, b in zip(lambdas, lambdas[1:])):
        raise ValueError(f"lambdas must be strictly ascending, got {lambdas}")
    band = np.asarray(band, dtype=np.float64)
    closings = [area_closing(band, lam) for lam in reversed(lambdas)]
    openings = [area_opening(band, lam) for lam in lambdas]
    return np.stack(closings + [band.copy()] + openings)


# ---------------------------------------------------------------- normalisation


@dataclass
class MinMaxStats:
    low: np.ndarray
    high: np.ndarray

    def apply(self, x: np.ndarray) -> np.ndarray:
        span = self.high - self.low
        safe = np.where(span > 0, span, 1.0)
        return np.where(span > 0, (x - self.low) / safe, 0.0)


def minmax_stats(features: np.ndarray, mask: np.ndarray | None = None) -> MinMaxStats:
    x = np.asarray(features, dtype=np.float64)
    rows = x.reshape(-1, x.shape[-1])
    if mask is not None:
        rows = rows[np.asarray(mask, dtype=bool).reshape(-1)]
    if rows.shape[0] == 0:
        raise ValueError("min-max statistics need at least one sample")
    low, high = rows.min(axis=0), rows.max(axis=0)
    constant = np.flatnonzero(high <= low)
    if constant.size:
        warnings.warn(f"constant features {constant.tolist()} set to 0", RuntimeWarning, stacklevel=3)
    return MinMaxStats(low, high)


def minmax_normalize(features: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Scale each feature (last axis) to [0, 1] using statistics over ``mask`` pixels."""
    x = np.asarray(features, dtype=np.float64)
    return minmax_stats(x, mask).apply(x)


# ---------------------------------------------------------------- full pipeline


@dataclass
class EmapResult:
    features: np.ndarray  # H x W x F, scaled to [0, 1]
    first_pca: PcaModel
    second_pca: PcaModel
    profiles: np.ndarray  # H x W x 9k stacked profiles before the second PCA
    lambdas: tuple[int, ...]


def emap_build(cube: np.ndarray, lambdas=DEFAULT_LAMBDAS, pca_target: float = 0.99,
               labels: np.ndarray | None = None) -> EmapResult:
    """Run the EMAP-PCA pipeline on an ``H x W x C`` cube.

    Min-max statistics come from the labelled pixels when ``labels`` is
    given, otherwise from every pixel.
    """
    data = np.asarray(cube, dtype=np.float64)
    if data.ndim != 3:
        raise ValueError(f"expected an H x W x C cube, got shape {data.shape}")
    h, w, c = data.shape
    lambdas = tuple(int(v) for v in lambdas)
    pixels = data.reshape(-1, c)
    first = pca_fit(pixels, pca_target)
    if first.n_components == 0:
        raise PipelineError("first PCA retained no components (constant cube)")
    base = first.project(pixels).reshape(h, w, -1)
    logger.info("first PCA kept %d of %d bands", first.n_components, c)
    stacks = [attribute_profile(base[:, :, i], lambdas) for i in range(first.n_components)]
    profiles = np.concatenate(stacks, axis=0).transpose(1, 2, 0)
    second = pca_fit(profiles.reshape(h * w, -1), pca_target)
    if second.n_components == 0:
        raise PipelineError("second PCA retained no components")
    reduced = second.project(profiles.reshape(h * w, -1)).reshape(h, w, -1)
    logger.info("second PCA kept %d of %d profile bands", second.n_components, profiles.shape[-1])
    mask = None if labels is None else np.asarray(labels) > 0
    if mask is not None and not mask.any():
        mask = None
    features = minmax_normalize(reduced, mask)
    return EmapResult(features, first, second, profiles, lambdas)
