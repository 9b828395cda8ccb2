"""From translated images to a difference image and a binary change map."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

OTSU_BINS = 256
# Between-class variances within this relative distance of the maximum count as ties.
OTSU_TIE_RTOL = 1e-9


@dataclass(frozen=True)
class DifferenceImage:
    raw_x: np.ndarray
    raw_y: np.ndarray
    combined: np.ndarray
    filtered: np.ndarray | None = None

    @property
    def d(self) -> np.ndarray:
        return self.combined if self.filtered is None else self.filtered


@dataclass(frozen=True)
class ChangeMap:
    mask: np.ndarray
    threshold: float
    degenerate: bool = False


def distance_images(x, x_hat, y, y_hat) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel Euclidean norms of the translation residuals in each domain."""
    x, x_hat, y, y_hat = (np.asarray(a, dtype=np.float64) for a in (x, x_hat, y, y_hat))
    if x.shape != x_hat.shape or y.shape != y_hat.shape:
        raise ValueError("translated images must match their originals")
    return np.linalg.norm(x_hat - x, axis=-1), np.linalg.norm(y_hat - y, axis=-1)


def clip_normalize(dist: np.ndarray) -> np.ndarray:
    """Clip values above mean + 3 std, then min-max scale to [0, 1].

    A constant image maps to zeros.
    """
    dist = np.asarray(dist, dtype=np.float64)
    cap = dist.mean() + 3.0 * dist.std()
    clipped = np.minimum(dist, cap)
    lo, hi = clipped.min(), clipped.max()
    if hi <= lo:
        logger.debug("constant distance image normalised to zeros")
        return np.zeros_like(clipped)
    return (clipped - lo) / (hi - lo)


def combine(d_x: np.ndarray, d_y: np.ndarray) -> np.ndarray:
    return 0.5 * (clip_normalize(d_x) + clip_normalize(d_y))


def difference_image(x, x_hat, y, y_hat) -> DifferenceImage:
    dx, dy = distance_images(x, x_hat, y, y_hat)
    return DifferenceImage(dx, dy, combine(dx, dy))


def minmax(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    lo, hi = a.min(), a.max()
    return np.zeros_like(a) if hi <= lo else (a - lo) / (hi - lo)


def spatial_filter(d: np.ndarray, iterations: int = 5, kernel_width: float = 0.1,
                   radius: int = 2, sigma_spatial: float = 1.0) -> np.ndarray:
    """Iterated windowed bilateral averaging of a difference image.

    Each pass replaces a pixel by the normalised average over its
    ``(2r+1)^2`` window, weighting neighbours by a spatial Gaussian
    (``sigma_spatial``) times a range Gaussian on value differences
    (``kernel_width``). Windows are truncated at the image border.
    """
    cur = np.asarray(d, dtype=np.float64)
    h, w = cur.shape
    offsets = [(di, dj) for di in range(-radius, radius + 1) for dj in range(-radius, radius + 1)]
    spatial = {o: np.exp(-(o[0] ** 2 + o[1] ** 2) / (2.0 * sigma_spatial ** 2)) for o in offsets}
    valid = np.pad(np.ones((h, w)), radius)
    for _ in range(iterations):
        padded = np.pad(cur, radius)
        num = np.zeros((h, w))
        den = np.zeros((h, w))
        for di, dj in offsets:
            sl = (slice(radius + di, radius + di + h), slice(radius + dj, radius + dj + w))
            nb = padded[sl]
            wt = spatial[(di, dj)] * valid[sl] * np.exp(-np.square(cur - nb) / (2.0 * kernel_width ** 2))
            num += wt * nb
            den += wt
        cur = num / den
    return cur


def identity_filter(d: np.ndarray, **_) -> np.ndarray:
    return np.asarray(d, dtype=np.float64)


def _otsu_histogram(values: np.ndarray, nbins: int):
    lo, hi = float(values.min()), float(values.max())
    edges = lo + (hi - lo) * np.arange(nbins) / nbins  # edges[j] = lower edge of bin j
    # bin index = number of interior edges <= value, so value >= edges[j] <=> bin >= j
    idx = np.searchsorted(edges[1:], values, side="right")
    counts = np.bincount(idx, minlength=nbins).astype(np.float64)
    centers = edges + 0.5 * (hi - lo) / nbins
    return edges, counts, centers


def between_class_variance(counts: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Otsu criterion for every split ``j``: bins ``< j`` vs bins ``>= j`` (``j = 0..nbins-1``)."""
    total = counts.sum()
    p = counts / total
    w0 = np.concatenate([[0.0], np.cumsum(p)[:-1]])
    m0 = np.concatenate([[0.0], np.cumsum(p * centers)[:-1]])
    mt = m0[-1] + p[-1] * centers[-1]
    w1 = 1.0 - w0
    out = np.zeros_like(p)
    ok = (w0 > 0) & (w1 > 0)
    out[ok] = np.square(mt * w0[ok] - m0[ok]) / (w0[ok] * w1[ok])
    return out


def otsu_threshold(d: np.ndarray, nbins: int = OTSU_BINS) -> tuple[float, bool]:
    """Otsu threshold on an ``nbins`` histogram spanning [min, max] of ``d``.

    Candidate thresholds are the bin lower edges; the change class is
    ``d >= threshold``. Ties (within a relative 1e-9) go to the smallest
    threshold. Returns ``(threshold, degenerate)``; a constant image returns
    its value and ``degenerate=True``.
    """
    values = np.asarray(d, dtype=np.float64).ravel()
    if values.max() <= values.min():
        return float(values[0]), True
    edges, counts, centers = _otsu_histogram(values, nbins)
    var = between_class_variance(counts, centers)
    best = int(np.flatnonzero(var >= var.max() * (1.0 - OTSU_TIE_RTOL))[0])
    return float(edges[best]), False


def threshold_map(d: np.ndarray, nbins: int = OTSU_BINS) -> ChangeMap:
    t, degenerate = otsu_threshold(d, nbins)
    return ChangeMap(np.asarray(d) >= t, t, degenerate)


CONFUSION_COLOURS = {
    "tp": (255, 255, 255),
    "tn": (0, 0, 0),
    "fn": (255, 0, 0),
    "fp": (0, 255, 0),
}


def confusion_map(mask: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """RGB uint8 image: TP white, TN black, FN red, FP green."""
    mask = np.asarray(mask, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if mask.shape != truth.shape:
        raise ValueError(f"mask {mask.shape} and truth {truth.shape} differ in shape")
    out = np.zeros(mask.shape + (3,), dtype=np.uint8)
    out[mask & truth] = CONFUSION_COLOURS["tp"]
    out[~mask & truth] = CONFUSION_COLOURS["fn"]
    out[mask & ~truth] = CONFUSION_COLOURS["fp"]
    return out
