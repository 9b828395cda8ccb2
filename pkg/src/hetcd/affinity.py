"""Affinity-matrix change prior.

For every k x k window the two images get their own Gaussian affinity matrix;
the per-pixel vertex degree of their absolute difference, divided by k^2, is the
pixel's change score for that window. Scores are averaged over all windows
covering a pixel.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .raster import Raster, downsample2, upsample_bilinear

logger = logging.getLogger(__name__)

WIDTH_FLOOR = 1e-6


@dataclass(frozen=True)
class AffinityConfig:
    patch_size: int = 20
    stride: int = 5
    knn_fraction: float = 0.75
    multiscale: bool = True

    def __post_init__(self):
        if self.patch_size < 2:
            raise ValueError("patch_size must be >= 2")
        if not 1 <= self.stride <= self.patch_size:
            raise ValueError("stride must satisfy 1 <= stride <= patch_size")
        if not 1 <= self.knn(self.patch_size) <= self.patch_size ** 2 - 1:
            raise ValueError("knn_fraction gives K outside [1, k^2 - 1]")

    def knn(self, k: int | None = None) -> int:
        k = self.patch_size if k is None else k
        return int(min(max(round(self.knn_fraction * k * k), 1), k * k - 1))


@dataclass(frozen=True)
class PriorMap:
    alpha: np.ndarray
    counts: np.ndarray
    n_patches: int = 0
    n_degenerate: int = 0

    def as_raster(self) -> Raster:
        return Raster(self.alpha)


def pairwise_distances(feats: np.ndarray) -> np.ndarray:
    """Euclidean distances between pixel feature vectors, ``(n, C) -> (n, n)``."""
    return cdist(feats, feats)


def _as_features(patch: np.ndarray) -> np.ndarray:
    patch = np.asarray(patch, dtype=np.float64)
    if patch.ndim == 1:
        return patch[:, None]
    if patch.ndim == 2:
        # already (n, C)
        return patch
    return patch.reshape(-1, patch.shape[-1])


def patch_affinity(patch: np.ndarray, kernel_width: float) -> np.ndarray:
    """Gaussian affinity ``exp(-d_ij^2 / h^2)`` between all pixels of a patch.

    ``patch`` is ``(k, k, C)`` or already flattened to ``(n, C)``.
    """
    if kernel_width <= 0:
        raise ValueError("kernel width must be positive")
    d = pairwise_distances(_as_features(patch))
    return np.exp(-(d * d) / (kernel_width * kernel_width))


def _kth_neighbour_width(dist: np.ndarray, K: int) -> np.ndarray:
    # Column 0 after sorting is the self-distance (0), so index K is the K-th other pixel.
    kth = np.partition(dist, K, axis=-1)[..., K]
    return kth.mean(axis=-1)


def kernel_width(patch: np.ndarray, K: int) -> tuple[float, bool]:
    """Mean distance to the K-th nearest neighbour, self excluded.

    Returns ``(width, degenerate)``; an all-identical patch gives the floor
    width and ``degenerate=True``.
    """
    feats = _as_features(patch)
    n = feats.shape[0]
    if n < 2 or not 1 <= K <= n - 1:
        raise ValueError(f"K={K} outside [1, {n - 1}]")
    h = float(_kth_neighbour_width(pairwise_distances(feats), K))
    if h <= 0.0:
        return WIDTH_FLOOR, True
    return h, False


def patch_alpha(ax: np.ndarray, ay: np.ndarray) -> np.ndarray:
    """Normalised vertex degrees of ``|ax - ay|`` (row sums over n)."""
    ax = np.asarray(ax)
    ay = np.asarray(ay)
    if ax.shape != ay.shape or ax.shape[-1] != ax.shape[-2]:
        raise ValueError(f"affinity shape mismatch: {ax.shape} vs {ay.shape}")
    return np.abs(ax - ay).sum(axis=-1) / ax.shape[-1]


def anchors(n: int, k: int, stride: int) -> list[int]:
    """Top-left offsets along one axis; the last window is clamped to ``n - k``."""
    if k > n:
        raise ValueError(f"patch size {k} exceeds image extent {n}")
    out = list(range(0, n - k + 1, stride))
    if out[-1] != n - k:
        out.append(n - k)
    return out


def patch_count(height: int, width: int, k: int, stride: int = 1) -> int:
    return len(anchors(height, k, stride)) * len(anchors(width, k, stride))


def _patch_affinity_auto(feats: np.ndarray, K: int) -> tuple[np.ndarray, bool]:
    dist = pairwise_distances(feats)
    h = _kth_neighbour_width(dist, K)
    if h <= 0.0:
        return np.exp(-np.square(dist / WIDTH_FLOOR)), True
    return np.exp(-np.square(dist / h)), False


def compute_prior(x: Raster, y: Raster, cfg: AffinityConfig = AffinityConfig(),
                  patch_size: int | None = None) -> PriorMap:
    """Single-scale prior over the whole scene.

    ``patch_size`` overrides ``cfg.patch_size`` (the stride is capped at it).
    """
    xd = np.asarray(x.data if isinstance(x, Raster) else x, dtype=np.float64)
    yd = np.asarray(y.data if isinstance(y, Raster) else y, dtype=np.float64)
    if xd.ndim == 2:
        xd = xd[:, :, None]
    if yd.ndim == 2:
        yd = yd[:, :, None]
    if xd.shape[:2] != yd.shape[:2]:
        raise ValueError(f"dimension mismatch: {xd.shape[:2]} vs {yd.shape[:2]}")
    H, W = xd.shape[:2]
    k = cfg.patch_size if patch_size is None else patch_size
    if k > min(H, W):
        raise ValueError(f"patch size {k} exceeds min(H, W) = {min(H, W)}")
    stride = min(cfg.stride, k)
    K = cfg.knn(k)
    n = k * k

    rows = anchors(H, k, stride)
    cols = anchors(W, k, stride)
    sums = np.zeros((H, W))
    counts = np.zeros((H, W), dtype=np.int64)
    n_degen = 0
    for r in rows:
        for c in cols:
            ax, dx = _patch_affinity_auto(xd[r:r + k, c:c + k].reshape(n, -1), K)
            ay, dy = _patch_affinity_auto(yd[r:r + k, c:c + k].reshape(n, -1), K)
            n_degen += dx + dy
            sums[r:r + k, c:c + k] += patch_alpha(ax, ay).reshape(k, k)
            counts[r:r + k, c:c + k] += 1
    if n_degen:
        logger.info("%d patch kernel widths fell back to %.0e", n_degen, WIDTH_FLOOR)
    return PriorMap(np.clip(sums / counts, 0.0, 1.0), counts, len(rows) * len(cols), n_degen)


def compute_prior_multiscale(x: Raster, y: Raster, cfg: AffinityConfig = AffinityConfig()) -> PriorMap:
    """Unweighted mean of the k/2 and k full-resolution maps and the k map at half resolution."""
    k = cfg.patch_size
    if k % 2:
        raise ValueError("multiscale prior needs an even patch size")
    H, W = x.height, x.width
    small = compute_prior(x, y, cfg, patch_size=k // 2)
    full = compute_prior(x, y, cfg)
    half = compute_prior(downsample2(x), downsample2(y), cfg)
    up = upsample_bilinear(Raster(half.alpha), H, W).data[:, :, 0].astype(np.float64)
    alpha = np.clip((small.alpha + full.alpha + up) / 3.0, 0.0, 1.0)
    return PriorMap(alpha, full.counts, small.n_patches + full.n_patches + half.n_patches,
                    small.n_degenerate + full.n_degenerate + half.n_degenerate)


def prior(x: Raster, y: Raster, cfg: AffinityConfig = AffinityConfig()) -> PriorMap:
    if cfg.multiscale:
        return compute_prior_multiscale(x, y, cfg)
    return compute_prior(x, y, cfg)
