"""Loss terms for the translation networks, each returning its value and the
gradients with respect to the network outputs it depends on.

Patches are ``(N, h, w, C)`` (a single ``(h, w, C)`` patch is accepted too);
per-pixel weights are ``(N, h, w)``. Expectations over patches are batch means.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Callable

import numpy as np


@dataclass(frozen=True)
class LossWeights:
    w_adv: float = 1.0
    w_AE: float = 0.2
    w_cyc: float = 2.0
    w_alpha: float = 3.0
    w_theta: float = 0.001

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be nonnegative")


def one_minus(alpha: np.ndarray) -> np.ndarray:
    return 1.0 - alpha


def pixel_weights(alpha: np.ndarray, fn: Callable[[np.ndarray], np.ndarray] = one_minus) -> np.ndarray:
    """Map change scores in [0, 1] to training weights through a decreasing ``fn``."""
    return np.clip(fn(np.asarray(alpha)), 0.0, 1.0)


def _batched(a: np.ndarray) -> np.ndarray:
    return a[None] if a.ndim == 3 else a


def weighted_l2(a: np.ndarray, b: np.ndarray, weights: np.ndarray | None = None) -> float:
    """Mean over pixels (and patches) of ``W_i * ||a_i - b_i||^2``."""
    return weighted_l2_with_grad(a, b, weights)[0]


def weighted_l2_with_grad(a, b, weights=None):
    """Value and gradient with respect to ``a``."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    a4, b4 = _batched(a), _batched(b)
    n, h, w, _ = a4.shape
    diff = a4 - b4
    sq = np.einsum("nhwc,nhwc->nhw", diff, diff, dtype=np.float64)
    if weights is None:
        wts = None
        value = sq.sum() / (n * h * w)
    else:
        wts = np.asarray(weights)
        wts = wts[None] if wts.ndim == 2 else wts
        if wts.shape != (n, h, w):
            raise ValueError(f"weights shape {np.shape(weights)} does not match patches {a.shape}")
        value = (wts * sq).sum() / (n * h * w)
    scale = 2.0 / (n * h * w)
    grad = diff * scale if wts is None else diff * (scale * wts)[..., None]
    return float(value), grad.reshape(a.shape).astype(a.dtype, copy=False)


def translation_loss(x, x_hat, y, y_hat, pi):
    """Prior-weighted translation loss; grads keyed by ``x_hat`` and ``y_hat``."""
    vx, gx = weighted_l2_with_grad(x_hat, x, pi)
    vy, gy = weighted_l2_with_grad(y_hat, y, pi)
    return vx + vy, {"x_hat": gx, "y_hat": gy}


def cycle_loss(x, x_dot, y, y_dot):
    vx, gx = weighted_l2_with_grad(x_dot, x)
    vy, gy = weighted_l2_with_grad(y_dot, y)
    return vx + vy, {"x_dot": gx, "y_dot": gy}


def reconstruction_loss(x, x_tilde, y, y_tilde):
    vx, gx = weighted_l2_with_grad(x_tilde, x)
    vy, gy = weighted_l2_with_grad(y_tilde, y)
    return vx + vy, {"x_tilde": gx, "y_tilde": gy}


def adversarial_losses(dx: np.ndarray, dy: np.ndarray):
    """Least-squares code-alignment losses.

    ``dx`` are discriminator outputs on codes from X (target 1 for the
    discriminator), ``dy`` on codes from Y (target 0). Returns
    ``(L_D, L_Z, grads)`` where ``grads["D"]`` and ``grads["Z"]`` hold the
    gradients of each loss with respect to ``(dx, dy)``.
    """
    dx = np.asarray(dx)
    dy = np.asarray(dy)
    l_d = float(np.mean(np.square(dx - 1.0)) + np.mean(np.square(dy)))
    l_z = float(np.mean(np.square(dx)) + np.mean(np.square(dy - 1.0)))
    grads = {
        "D": (2.0 * (dx - 1.0) / dx.size, 2.0 * dy / dy.size),
        "Z": (2.0 * dx / dx.size, 2.0 * (dy - 1.0) / dy.size),
    }
    return l_d, l_z, grads


def lsgan_losses(d_real: np.ndarray, d_fake: np.ndarray):
    """Least-squares real/fake losses for output-space discriminators.

    Returns ``(L_disc, L_gen, grads)``; ``grads["disc"]`` is w.r.t.
    ``(d_real, d_fake)`` and ``grads["gen"]`` w.r.t. ``d_fake``.
    """
    l_disc = float(np.mean(np.square(d_real - 1.0)) + np.mean(np.square(d_fake)))
    l_gen = float(np.mean(np.square(d_fake - 1.0)))
    grads = {
        "disc": (2.0 * (d_real - 1.0) / d_real.size, 2.0 * d_fake / d_fake.size),
        "gen": 2.0 * (d_fake - 1.0) / d_fake.size,
    }
    return l_disc, l_gen, grads


def weight_decay(networks) -> float:
    """Sum of squared kernel and dense weights (biases excluded)."""
    total = 0.0
    for net in networks:
        for layer, key in net.weight_arrays():
            w = layer.params[key]
            total += float(np.dot(w.ravel().astype(np.float64), w.ravel().astype(np.float64)))
    return total


def add_weight_decay_grad(networks, w_theta: float) -> None:
    if w_theta == 0:
        return
    for net in networks:
        for layer, key in net.weight_arrays():
            layer.grads[key] += (2.0 * w_theta) * layer.params[key]


def total_loss_xnet(terms: dict, weights: LossWeights, theta_sq: float = 0.0) -> float:
    return (weights.w_cyc * terms.get("cyc", 0.0)
            + weights.w_alpha * terms.get("alpha", 0.0)
            + weights.w_theta * theta_sq)


def total_loss_acenet(terms: dict, weights: LossWeights, theta_sq: float = 0.0) -> float:
    return (weights.w_adv * (terms.get("Z", 0.0) + terms.get("D", 0.0))
            + weights.w_AE * terms.get("AE", 0.0)
            + weights.w_cyc * terms.get("cyc", 0.0)
            + weights.w_alpha * terms.get("alpha", 0.0)
            + weights.w_theta * theta_sq)
