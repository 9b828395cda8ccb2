"""X-Net and ACE-Net translation networks and their training loops.

Both are trained on randomly sampled, identically augmented patch triples
(x, y, per-pixel weight). The weights start as ``1 - alpha`` from the affinity
prior and are replaced by ``1 - d`` (d = min-max scaled difference image of
the current model) at the milestone epochs.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace, asdict
from typing import Iterable

import numpy as np

from . import losses as L
from .change_extraction import difference_image, minmax
from .nn import (Adam, Conv3x3, Dense, Dropout, GlobalAvgPool, Sequential, conv_stack,
                 load_checkpoint, save_checkpoint, assign_flat)

logger = logging.getLogger(__name__)

# independent random streams per concern
INIT, SAMPLING, DROPOUT, AUGMENT, RANDOM_PRIOR, OUTPUT_DISC = range(6)

VARIANTS = ("proposed", "no_alpha", "no_cycle", "no_milestones", "discr_output", "no_discr", "no_recon")
ACE_ONLY = ("no_discr", "no_recon")


def stream(seed: int, which: int) -> np.random.Generator:
    return np.random.default_rng([seed, which])


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 240
    batches_per_epoch: int = 10
    batch_size: int = 10
    patch_hw: int = 100
    lr: float = 1e-5
    milestones: tuple[int, ...] = (80, 160)
    seed: int = 0
    augment: bool = True
    dropout: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))
        if any(not 1 <= m <= self.epochs for m in self.milestones):
            raise ValueError(f"milestones {self.milestones} must lie in [1, {self.epochs}]")
        if self.epochs < 1 or self.batches_per_epoch < 1 or self.batch_size < 1 or self.patch_hw < 1:
            raise ValueError("epochs, batches_per_epoch, batch_size and patch_hw must be positive")


def discriminator(c_in: int, rng, dropout: float = 0.2, filters=(64, 32, 16), dtype=np.float32) -> Sequential:
    """Conv layers, global average pooling and one sigmoid output per patch."""
    layers = []
    prev = c_in
    for f in filters:
        layers.append(Conv3x3(prev, f, "leaky_relu", rng, dtype))
        if dropout > 0:
            layers.append(Dropout(dropout))
        prev = f
    layers += [GlobalAvgPool(), Dense(prev, 1, "sigmoid", rng, dtype)]
    return Sequential(layers, "discriminator")


def _as_image(a) -> np.ndarray:
    arr = np.asarray(getattr(a, "data", a))
    return arr[:, :, None] if arr.ndim == 2 else arr


def run_network(net: Sequential, img: np.ndarray, tile: int | None = None) -> np.ndarray:
    """Inference on a whole ``(H, W, C)`` image, optionally in overlapping tiles.

    The tile halo equals the number of 3x3 layers, so tiled and untiled
    outputs coincide.
    """
    dtype = net.parameters()[0].dtype
    img = np.asarray(img, dtype=dtype)
    if tile is None or (img.shape[0] <= tile and img.shape[1] <= tile):
        return net.forward(img[None], training=False)[0][0]
    halo = sum(isinstance(l, Conv3x3) for l in net.layers)
    h, w = img.shape[:2]
    out = None
    for r in range(0, h, tile):
        for c in range(0, w, tile):
            r0, c0 = max(r - halo, 0), max(c - halo, 0)
            r1, c1 = min(r + tile + halo, h), min(c + tile + halo, w)
            res = net.forward(img[None, r0:r1, c0:c1], training=False)[0][0]
            if out is None:
                out = np.empty((h, w, res.shape[-1]), dtype=res.dtype)
            rr, cc = min(r + tile, h), min(c + tile, w)
            out[r:rr, c:cc] = res[r - r0:rr - r0, c - c0:cc - c0]
    return out


def _augment(patches: list[np.ndarray], rng: np.random.Generator) -> list[np.ndarray]:
    """Same random flips and quarter turn applied to every array (first two axes)."""
    hflip, vflip = rng.random() < 0.5, rng.random() < 0.5
    turns = int(rng.integers(0, 4))
    out = []
    for p in patches:
        if hflip:
            p = p[:, ::-1]
        if vflip:
            p = p[::-1]
        out.append(np.rot90(p, turns, axes=(0, 1)))
    return out


def sample_batch(x, y, pi, n: int, size: int, rng_sample, rng_aug=None):
    """``n`` aligned random patches from x, y and the weight map."""
    h, w = pi.shape
    xs, ys, ps = [], [], []
    for _ in range(n):
        r = int(rng_sample.integers(0, h - size + 1))
        c = int(rng_sample.integers(0, w - size + 1))
        trip = [x[r:r + size, c:c + size], y[r:r + size, c:c + size], pi[r:r + size, c:c + size]]
        if rng_aug is not None:
            trip = _augment(trip, rng_aug)
        xs.append(trip[0])
        ys.append(trip[1])
        ps.append(trip[2])
    return np.stack(xs), np.stack(ys), np.stack(ps)


class _OutputDiscriminators:
    """Real/fake discriminators on translated images (``discr_output`` ablation)."""

    def __init__(self, cx, cy, rng, dropout, lr, dtype):
        self.dx = discriminator(cx, rng, dropout, dtype=dtype)
        self.dy = discriminator(cy, rng, dropout, dtype=dtype)
        self.opt = Adam(self.dx.parameters() + self.dy.parameters(), lr=lr)

    def update(self, x, x_hat, y, y_hat, w_adv, w_theta, rng):
        loss = 0.0
        for net, real, fake in ((self.dx, x, x_hat), (self.dy, y, y_hat)):
            net.zero_grad()
            o_r, c_r = net.forward(real, True, rng)
            o_f, c_f = net.forward(fake, True, rng)
            l_disc, _, g = L.lsgan_losses(o_r, o_f)
            net.backward(w_adv * g["disc"][0], c_r)
            net.backward(w_adv * g["disc"][1], c_f)
            L.add_weight_decay_grad([net], w_theta)
            loss += l_disc
        self.opt.step([g for n in (self.dx, self.dy) for g in n.gradients()])
        return loss

    def generator_grads(self, x_hat, y_hat, w_adv, rng):
        """Gradients of ``w_adv * L_gen`` w.r.t. the fakes; discriminators are held fixed."""
        loss, grads = 0.0, []
        for net, fake in ((self.dx, x_hat), (self.dy, y_hat)):
            o_f, c_f = net.forward(fake, True, rng)
            _, l_gen, g = L.lsgan_losses(np.ones_like(o_f), o_f)
            grads.append(net.backward(w_adv * g["gen"], c_f))
            net.zero_grad()
            loss += l_gen
        return loss, grads[0], grads[1]


class _Translator:
    arch = ""

    def __init__(self, x_channels: int, y_channels: int, seed: int = 0, dropout: float = 0.2,
                 dtype=np.float32):
        self.x_channels, self.y_channels = x_channels, y_channels
        self.seed, self.dropout, self.dtype = seed, dropout, np.dtype(dtype)
        self.output_discriminators: _OutputDiscriminators | None = None
        self._build(stream(seed, INIT))

    def _build(self, rng):
        raise NotImplementedError

    def networks(self) -> list[Sequential]:
        raise NotImplementedError

    def generator_networks(self) -> list[Sequential]:
        return self.networks()

    def parameters(self) -> list[np.ndarray]:
        return [p for net in self.networks() for p in net.parameters()]

    def n_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def astype(self, dtype):
        self.dtype = np.dtype(dtype)
        for net in self.networks():
            net.astype(dtype)
        return self

    def descriptor(self) -> dict:
        return {"arch": self.arch, "x_channels": self.x_channels, "y_channels": self.y_channels,
                "seed": self.seed, "dropout": self.dropout}

    def save(self, path) -> None:
        save_checkpoint(path, self.descriptor(), self.parameters())

    def _check_channels(self, x, y):
        if x.shape[-1] != self.x_channels or y.shape[-1] != self.y_channels:
            raise ValueError(f"model expects {self.x_channels}/{self.y_channels} channels, "
                             f"got {x.shape[-1]}/{y.shape[-1]}")

    def setup_optimizers(self, lr: float, with_output_discriminators: bool = False):
        raise NotImplementedError


class XNet(_Translator):
    """Two 4-layer fully convolutional translators F: X -> Y and G: Y -> X."""

    arch = "xnet"
    filters = (100, 50, 20)

    def _build(self, rng):
        self.F = conv_stack(self.x_channels, [*self.filters, self.y_channels], "tanh", rng,
                            self.dropout, self.dtype, "F")
        self.G = conv_stack(self.y_channels, [*self.filters, self.x_channels], "tanh", rng,
                            self.dropout, self.dtype, "G")

    def networks(self):
        return [self.F, self.G]

    def translate(self, x, y, tile: int | None = None) -> dict:
        x, y = _as_image(x), _as_image(y)
        self._check_channels(x, y)
        y_hat = run_network(self.F, x, tile)
        x_hat = run_network(self.G, y, tile)
        return {"x_hat": x_hat, "y_hat": y_hat,
                "x_dot": run_network(self.G, y_hat, tile), "y_dot": run_network(self.F, x_hat, tile)}

    def setup_optimizers(self, lr, with_output_discriminators=False):
        self.opt = Adam(self.F.parameters() + self.G.parameters(), lr=lr)
        if with_output_discriminators:
            self.output_discriminators = _OutputDiscriminators(
                self.x_channels, self.y_channels, stream(self.seed, OUTPUT_DISC), self.dropout, lr, self.dtype)

    def compute_gradients(self, xb, yb, pib, weights: L.LossWeights, rng) -> dict:
        """Forward/backward for one batch; leaves gradients in F and G."""
        F, G = self.F, self.G
        for net in (F, G):
            net.zero_grad()
        y_hat, cf1 = F.forward(xb, True, rng)
        x_hat, cg1 = G.forward(yb, True, rng)
        x_dot, cg2 = G.forward(y_hat, True, rng)
        y_dot, cf2 = F.forward(x_hat, True, rng)

        l_alpha, g_alpha = L.translation_loss(xb, x_hat, yb, y_hat, pib)
        l_cyc, g_cyc = L.cycle_loss(xb, x_dot, yb, y_dot)
        terms = {"alpha": l_alpha, "cyc": l_cyc}

        g_yhat = weights.w_alpha * g_alpha["y_hat"] + G.backward(weights.w_cyc * g_cyc["x_dot"], cg2)
        g_xhat = weights.w_alpha * g_alpha["x_hat"] + F.backward(weights.w_cyc * g_cyc["y_dot"], cf2)
        if self.output_discriminators is not None:
            terms["disc_out"] = self.output_discriminators.update(
                xb, x_hat, yb, y_hat, weights.w_adv, weights.w_theta, rng)
            terms["gen_out"], gx, gy = self.output_discriminators.generator_grads(
                x_hat, y_hat, weights.w_adv, rng)
            g_xhat = g_xhat + gx
            g_yhat = g_yhat + gy
        F.backward(g_yhat, cf1)
        G.backward(g_xhat, cg1)

        theta_sq = L.weight_decay(self.networks())
        L.add_weight_decay_grad(self.networks(), weights.w_theta)
        terms["theta"] = theta_sq
        terms["total"] = L.total_loss_xnet(terms, weights, theta_sq) + weights.w_adv * terms.get("gen_out", 0.0)
        return terms

    def train_step(self, xb, yb, pib, weights, rng) -> dict:
        terms = self.compute_gradients(xb, yb, pib, weights, rng)
        self.opt.step([g for net in self.networks() for g in net.gradients()])
        return terms


class ACENet(_Translator):
    """Encoders into a shared 20-channel code, decoders back, and a code discriminator."""

    arch = "acenet"
    enc_filters = (100, 50, 20)
    dec_filters = (20, 50, 100)
    disc_filters = (64, 32, 16)

    def _build(self, rng):
        code = self.enc_filters[-1]
        self.E_X = conv_stack(self.x_channels, list(self.enc_filters), "tanh", rng, self.dropout, self.dtype, "E_X")
        self.E_Y = conv_stack(self.y_channels, list(self.enc_filters), "tanh", rng, self.dropout, self.dtype, "E_Y")
        self.D_X = conv_stack(code, [*self.dec_filters, self.x_channels], "tanh", rng, self.dropout, self.dtype, "D_X")
        self.D_Y = conv_stack(code, [*self.dec_filters, self.y_channels], "tanh", rng, self.dropout, self.dtype, "D_Y")
        self.disc = discriminator(code, rng, self.dropout, self.disc_filters, self.dtype)

    def networks(self):
        return [self.E_X, self.E_Y, self.D_X, self.D_Y, self.disc]

    def generator_networks(self):
        return [self.E_X, self.E_Y, self.D_X, self.D_Y]

    def translate(self, x, y, tile: int | None = None) -> dict:
        x, y = _as_image(x), _as_image(y)
        self._check_channels(x, y)
        zx = run_network(self.E_X, x, tile)
        zy = run_network(self.E_Y, y, tile)
        y_hat = run_network(self.D_Y, zx, tile)
        x_hat = run_network(self.D_X, zy, tile)
        return {
            "x_hat": x_hat, "y_hat": y_hat,
            "x_dot": run_network(self.D_X, run_network(self.E_Y, y_hat, tile), tile),
            "y_dot": run_network(self.D_Y, run_network(self.E_X, x_hat, tile), tile),
            "x_tilde": run_network(self.D_X, zx, tile), "y_tilde": run_network(self.D_Y, zy, tile),
            "z_x": zx, "z_y": zy,
        }

    def setup_optimizers(self, lr, with_output_discriminators=False):
        self.opt = Adam([p for n in self.generator_networks() for p in n.parameters()], lr=lr)
        self.opt_disc = Adam(self.disc.parameters(), lr=lr)
        if with_output_discriminators:
            self.output_discriminators = _OutputDiscriminators(
                self.x_channels, self.y_channels, stream(self.seed, OUTPUT_DISC), self.dropout, lr, self.dtype)

    def discriminator_gradients(self, zx, zy, weights: L.LossWeights, rng) -> float:
        """Gradients of ``w_adv * L_D`` for the discriminator only; codes are constants."""
        self.disc.zero_grad()
        ox, cx = self.disc.forward(zx, True, rng)
        oy, cy = self.disc.forward(zy, True, rng)
        l_d, _, g = L.adversarial_losses(ox, oy)
        self.disc.backward(weights.w_adv * g["D"][0], cx)
        self.disc.backward(weights.w_adv * g["D"][1], cy)
        L.add_weight_decay_grad([self.disc], weights.w_theta)
        return l_d

    def generator_gradients(self, xb, yb, pib, weights: L.LossWeights, rng,
                            train_discriminator: bool = True) -> dict:
        """Forward/backward of the generator objective; the discriminator is held fixed.

        With ``train_discriminator`` the discriminator takes one Adam step on
        ``L_D`` (using this batch's codes) before ``L_Z`` is evaluated.
        """
        E_X, E_Y, D_X, D_Y = self.generator_networks()
        for net in self.networks():
            net.zero_grad()
        zx, cex1 = E_X.forward(xb, True, rng)
        zy, cey1 = E_Y.forward(yb, True, rng)
        x_tilde, cdx1 = D_X.forward(zx, True, rng)
        y_tilde, cdy1 = D_Y.forward(zy, True, rng)
        y_hat, cdy2 = D_Y.forward(zx, True, rng)
        x_hat, cdx2 = D_X.forward(zy, True, rng)
        z_yhat, cey2 = E_Y.forward(y_hat, True, rng)
        x_dot, cdx3 = D_X.forward(z_yhat, True, rng)
        z_xhat, cex2 = E_X.forward(x_hat, True, rng)
        y_dot, cdy3 = D_Y.forward(z_xhat, True, rng)

        terms = {}
        use_disc = weights.w_adv > 0
        if use_disc and train_discriminator:
            terms["D"] = self.discriminator_gradients(zx, zy, weights, rng)
            self.opt_disc.step(self.disc.gradients())
            self.disc.zero_grad()

        l_alpha, g_alpha = L.translation_loss(xb, x_hat, yb, y_hat, pib)
        l_cyc, g_cyc = L.cycle_loss(xb, x_dot, yb, y_dot)
        l_ae, g_ae = L.reconstruction_loss(xb, x_tilde, yb, y_tilde)
        terms.update(alpha=l_alpha, cyc=l_cyc, AE=l_ae)
        w = weights

        g_zyhat = D_X.backward(w.w_cyc * g_cyc["x_dot"], cdx3)
        g_yhat = w.w_alpha * g_alpha["y_hat"] + E_Y.backward(g_zyhat, cey2)
        g_zxhat = D_Y.backward(w.w_cyc * g_cyc["y_dot"], cdy3)
        g_xhat = w.w_alpha * g_alpha["x_hat"] + E_X.backward(g_zxhat, cex2)
        if self.output_discriminators is not None:
            terms["disc_out"] = self.output_discriminators.update(
                xb, x_hat, yb, y_hat, w.w_adv, w.w_theta, rng)
            terms["gen_out"], gx, gy = self.output_discriminators.generator_grads(x_hat, y_hat, w.w_adv, rng)
            g_xhat = g_xhat + gx
            g_yhat = g_yhat + gy

        g_zx = D_Y.backward(g_yhat, cdy2) + D_X.backward(w.w_AE * g_ae["x_tilde"], cdx1)
        g_zy = D_X.backward(g_xhat, cdx2) + D_Y.backward(w.w_AE * g_ae["y_tilde"], cdy1)

        if use_disc:
            ox, cx = self.disc.forward(zx, True, rng)
            oy, cy = self.disc.forward(zy, True, rng)
            l_d, l_z, g = L.adversarial_losses(ox, oy)
            g_zx = g_zx + self.disc.backward(w.w_adv * g["Z"][0], cx)
            g_zy = g_zy + self.disc.backward(w.w_adv * g["Z"][1], cy)
            self.disc.zero_grad()
            terms["Z"] = l_z
            terms.setdefault("D", l_d)
        E_X.backward(g_zx, cex1)
        E_Y.backward(g_zy, cey1)

        gens = self.generator_networks()
        theta_sq = L.weight_decay(self.networks())
        L.add_weight_decay_grad(gens, w.w_theta)
        terms["theta"] = theta_sq
        terms["total"] = L.total_loss_acenet(terms, w, theta_sq) + w.w_adv * terms.get("gen_out", 0.0)
        return terms

    def train_step(self, xb, yb, pib, weights, rng) -> dict:
        terms = self.generator_gradients(xb, yb, pib, weights, rng)
        self.opt.step([g for n in self.generator_networks() for g in n.gradients()])
        return terms


ARCHS = {"xnet": XNet, "acenet": ACENet}


def load_model(path) -> _Translator:
    desc, flat = load_checkpoint(path)
    cls = ARCHS[desc["arch"]]
    model = cls(desc["x_channels"], desc["y_channels"], desc.get("seed", 0), desc.get("dropout", 0.2))
    assign_flat(model.parameters(), flat)
    return model


@dataclass
class TrainResult:
    model: _Translator
    history: list[dict] = field(default_factory=list)
    pi: np.ndarray | None = None

    def write_history(self, path) -> None:
        write_history(self.history, path)


HISTORY_TERMS = ("alpha", "cyc", "AE", "Z", "D", "disc_out", "gen_out", "theta", "total")


def write_history(history: list[dict], path) -> None:
    cols = ["epoch"] + [t for t in HISTORY_TERMS if any(t in h for h in history)]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(cols)
        for h in history:
            wr.writerow([h["epoch"]] + [repr(float(h.get(c, 0.0))) for c in cols[1:]])


def milestone_weights(model: _Translator, x, y) -> np.ndarray:
    """``1 - d`` from the model's current difference image, d scaled to [0, 1]."""
    out = model.translate(x, y)
    d = difference_image(x, out["x_hat"], y, out["y_hat"]).combined
    return 1.0 - minmax(d)


def _alpha_array(prior) -> np.ndarray:
    return np.asarray(getattr(prior, "alpha", prior), dtype=np.float64)


def train(arch: str, x, y, prior, cfg: TrainConfig = TrainConfig(),
          weights: L.LossWeights = L.LossWeights(), variant: str = "proposed",
          callback=None) -> TrainResult:
    """Train an X-Net or ACE-Net on aligned normalised images and a change prior."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    if arch not in ARCHS:
        raise ValueError(f"unknown architecture {arch!r}")
    if arch == "xnet" and variant in ACE_ONLY:
        raise ValueError(f"variant {variant!r} applies to ACE-Net only")
    x, y = _as_image(x), _as_image(y)
    alpha = _alpha_array(prior)
    if x.shape[:2] != y.shape[:2] or alpha.shape != x.shape[:2]:
        raise ValueError(f"misaligned inputs: x {x.shape[:2]}, y {y.shape[:2]}, prior {alpha.shape}")

    if variant == "no_alpha":
        alpha = stream(cfg.seed, RANDOM_PRIOR).uniform(0.0, 1.0, size=alpha.shape)
    elif variant == "no_cycle":
        weights = replace(weights, w_cyc=0.0)
    elif variant == "no_milestones":
        cfg = replace(cfg, milestones=())
    elif variant == "no_discr":
        weights = replace(weights, w_adv=0.0)
    elif variant == "no_recon":
        weights = replace(weights, w_AE=0.0)

    model = ARCHS[arch](x.shape[-1], y.shape[-1], cfg.seed, cfg.dropout)
    model.setup_optimizers(cfg.lr, with_output_discriminators=variant == "discr_output")
    dtype = model.dtype
    xs, ys = x.astype(dtype), y.astype(dtype)
    pi = L.pixel_weights(alpha).astype(dtype)
    size = min(x.shape[0], x.shape[1], cfg.patch_hw)
    rng_sample = stream(cfg.seed, SAMPLING)
    rng_drop = stream(cfg.seed, DROPOUT)
    rng_aug = stream(cfg.seed, AUGMENT) if cfg.augment else None

    history = []
    for epoch in range(1, cfg.epochs + 1):
        sums: dict[str, float] = {}
        for _ in range(cfg.batches_per_epoch):
            xb, yb, pb = sample_batch(xs, ys, pi, cfg.batch_size, size, rng_sample, rng_aug)
            terms = model.train_step(xb, yb, pb, weights, rng_drop)
            for k, v in terms.items():
                sums[k] = sums.get(k, 0.0) + v
        rec = {"epoch": epoch, **{k: v / cfg.batches_per_epoch for k, v in sums.items()}}
        history.append(rec)
        if epoch in cfg.milestones:
            pi = milestone_weights(model, xs, ys).astype(dtype)
            logger.info("epoch %d: prior updated from the difference image", epoch)
        if callback is not None:
            callback(epoch, rec, model)
        logger.debug("epoch %d %s", epoch, rec)
    return TrainResult(model, history, pi)


def train_xnet(x, y, prior, cfg: TrainConfig = TrainConfig(), weights=L.LossWeights(), **kw) -> TrainResult:
    return train("xnet", x, y, prior, cfg, weights, **kw)


def train_acenet(x, y, prior, cfg: TrainConfig = TrainConfig(), weights=L.LossWeights(), **kw) -> TrainResult:
    return train("acenet", x, y, prior, cfg, weights, **kw)


def translate(model: _Translator, x, y, tile: int | None = None) -> dict:
    return model.translate(x, y, tile)


def ablation_run(arch: str, variant: str, x, y, prior, cfg: TrainConfig = TrainConfig(),
                 weights=L.LossWeights(), truth=None) -> dict:
    """Train one ablation arm and score its (unfiltered) difference image."""
    from .metrics import roc_auc

    result = train(arch, x, y, prior, cfg, weights, variant=variant)
    out = result.model.translate(x, y)
    d = difference_image(_as_image(x), out["x_hat"], _as_image(y), out["y_hat"]).combined
    report = {"variant": variant, "arch": arch, "history": result.history, "d": d, "model": result.model}
    if truth is not None:
        report["auc"] = roc_auc(d, truth)
    return report
