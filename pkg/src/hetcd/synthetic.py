"""Synthetic heterogeneous image pairs with known change masks.

X imitates a SAR intensity image (multiplicative Gamma speckle with unit mean),
Y an optical image (additive Gaussian noise). Class signatures differ between
the two modalities so no pixel-wise identity maps one onto the other.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Toy class signatures sit on the vertices of a regular tetrahedron in both
# modalities (log-intensity for X, reflectance for Y), with a different vertex
# assignment per modality. Equidistant classes keep the between-class
# affinities alike in X and Y, so only changed pixels disturb the structure.
_TETRA = np.array([[1.0, 1.0, 1.0], [1.0, -1.0, -1.0], [-1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]])
TOY_SAR_LOG_MEANS = 2.0 + 6.0 / np.sqrt(8.0) * _TETRA  # edge length 6 in log-intensity
TOY_SAR_MEANS = np.exp(TOY_SAR_LOG_MEANS)
TOY_OPT_MEANS = 0.5 + 0.3 / np.sqrt(3.0) * _TETRA[[2, 0, 3, 1]]


def speckle(shape, looks: float, rng: np.random.Generator) -> np.ndarray:
    """Unit-mean Gamma(L, 1/L) multiplicative noise."""
    return rng.gamma(shape=looks, scale=1.0 / looks, size=shape)


def toy_change_classes(block_class: int, n_classes: int = 4) -> list[int]:
    """Classes written into the 2x2 change corner of a block, row-major.

    Three of them are the other classes in cyclic order, the fourth repeats the
    class opposite to ``block_class``; every ordered class pair therefore occurs.
    """
    c = block_class
    return [(c + 1) % n_classes, (c + 2) % n_classes, (c + 3) % n_classes, (c + 2) % n_classes]


def toy_layout() -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Class maps at t1 and t2 and the change mask for the 8x8 toy scene."""
    before = np.zeros((8, 8), dtype=np.int64)
    for b in range(4):
        r, c = divmod(b, 2)
        before[4 * r:4 * r + 4, 4 * c:4 * c + 4] = b
    after = before.copy()
    for b in range(4):
        r, c = divmod(b, 2)
        corner = np.array(toy_change_classes(b)).reshape(2, 2)
        after[4 * r + 2:4 * r + 4, 4 * c + 2:4 * c + 4] = corner
    return before, after, before != after


def make_toy(seed: int | None = 0, looks: float = 5.0, sigma_o: float = 0.05,
             noise: bool = True) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """8x8x3 SAR-like X at t1, 8x8x3 optical-like Y at t2, and the 16-pixel truth mask.

    ``sigma_o`` is the optical noise standard deviation as a fraction of the
    signatures' dynamic range. X is returned as speckled intensity; take
    :func:`sar_log` before computing affinities.
    """
    rng = np.random.default_rng(seed)
    before, after, truth = toy_layout()
    x = TOY_SAR_MEANS[before]
    y = TOY_OPT_MEANS[after]
    if noise:
        x = x * speckle(x.shape, looks, rng)
        span = float(np.ptp(TOY_OPT_MEANS, axis=0).max())
        y = y + rng.normal(0.0, sigma_o * span, size=y.shape)
    return x, y, truth


@dataclass(frozen=True)
class SceneSpec:
    height: int = 128
    width: int = 128
    n_classes: int = 4
    change_fraction: float = 0.10
    x_channels: int = 3
    y_channels: int = 3
    looks: float = 5.0
    sigma_o: float = 0.05
    x_log_spread: float = 4.0
    n_sites_per_class: int = 3
    seed: int = 0
    noise: bool = True


def _simplex(n: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` points with unit pairwise distance when ``n <= dim + 1``.

    Larger class counts fall back to spread-out random points, rescaled so the
    closest pair is at unit distance.
    """
    if n <= dim + 1:
        pts = np.eye(n) / np.sqrt(2.0)
        pts -= pts.mean(axis=0)
        u, sv, _ = np.linalg.svd(pts)
        coords = (u * sv)[:, : n - 1]
        q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
        return coords @ q[: n - 1]
    best = None
    for _ in range(200):
        pts = rng.uniform(0.0, 1.0, size=(n, dim))
        d = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
        dmin = d[np.triu_indices(n, 1)].min()
        if best is None or dmin > best[0]:
            best = (dmin, pts)
    return best[1] / best[0]


def _is_monotone(a: np.ndarray, b: np.ndarray) -> bool:
    o = np.argsort(a)
    d = np.diff(b[o])
    return bool(np.all(d > 0) or np.all(d < 0))


def _voronoi_classes(h: int, w: int, n_classes: int, n_sites: int,
                     rng: np.random.Generator) -> np.ndarray:
    sites = rng.uniform([0, 0], [h, w], size=(n_sites, 2))
    labels = np.concatenate([np.arange(n_classes), rng.integers(0, n_classes, n_sites - n_classes)])
    rr, cc = np.mgrid[0:h, 0:w]
    d = (rr[..., None] - sites[:, 0]) ** 2 + (cc[..., None] - sites[:, 1]) ** 2
    return labels[np.argmin(d, axis=-1)]


def make_scene(spec: SceneSpec = SceneSpec()) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Piecewise-constant scene with blob-shaped changes of roughly ``change_fraction`` area.

    Returns ``(x, y, truth)`` with x ``(H, W, x_channels)`` SAR-like intensities,
    y ``(H, W, y_channels)`` optical-like reflectances and a boolean mask.
    """
    if spec.n_classes < 2:
        raise ValueError("a scene needs at least two classes")
    structure = np.random.default_rng([spec.seed, 0])
    noise = np.random.default_rng([spec.seed, 1])
    h, w, n = spec.height, spec.width, spec.n_classes

    before = _voronoi_classes(h, w, n, n * spec.n_sites_per_class, structure)

    # Grow discs at random centres until the target area is covered; inside a
    # disc every pixel switches to a single different class.
    after = before.copy()
    truth = np.zeros((h, w), dtype=bool)
    target = spec.change_fraction * h * w
    rr, cc = np.mgrid[0:h, 0:w]
    radius_hi = max(3.0, 0.12 * min(h, w))
    while truth.sum() < target and spec.change_fraction > 0:
        r0, c0 = structure.uniform(0, h), structure.uniform(0, w)
        rad = structure.uniform(0.5 * radius_hi, radius_hi)
        disc = (rr - r0) ** 2 + (cc - c0) ** 2 <= rad * rad
        base = np.bincount(before[disc], minlength=n).argmax()
        new = (base + 1 + structure.integers(0, n - 1)) % n
        after[disc] = new
        truth = before != after

    # X: log-intensity signatures, Y: reflectances; the class order along
    # channel 0 must differ between modalities (non-monotone mapping)
    while True:
        mx = _simplex(n, spec.x_channels, structure)
        my = _simplex(n, spec.y_channels, structure)
        if n < 3 or not _is_monotone(mx[:, 0], my[:, 0]):
            break
    mx = np.exp(2.0 + spec.x_log_spread * mx)
    my = 0.5 + my * (0.4 / max(np.abs(my).max(), 1e-12))
    span = float(np.ptp(my, axis=0).max())

    x, y = mx[before], my[after]
    if spec.noise:
        x = x * speckle((h, w, spec.x_channels), spec.looks, noise)
        y = y + noise.normal(0.0, spec.sigma_o * span, size=(h, w, spec.y_channels))
    return x, y, truth


def sar_log(x: np.ndarray) -> np.ndarray:
    """Log-intensity transform for speckled data (brings it close to Gaussian)."""
    return np.log(np.maximum(x, 1e-6))
